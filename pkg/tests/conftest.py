import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(a, b, floor=1e-12):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def make_small_scenario(**loop):
    """Two eVTOLs, a 3-layer surface and a handful of DQN episodes: seconds per run."""
    from simdt.channel import SimGeometry
    from simdt.dqn import DQNConfig
    from simdt.orchestrator import LoopConfig
    from simdt.scenario import Scenario

    cfg = dict(outer_rounds=1, bcd_max_rounds=4, phase_max_iters=60, deduce_episodes=3)
    cfg.update(loop)
    scn = Scenario(num_evtols=2, num_slots=24, seed=3,
                   geometry=SimGeometry(num_layers=3, atoms_per_layer=4, num_antennas=2),
                   dqn=DQNConfig(episodes=4, batch_size=8, buffer_capacity=200, hidden=(16, 16)),
                   loop=LoopConfig(**cfg))
    return scn


@pytest.fixture
def small_scenario():
    return make_small_scenario()
