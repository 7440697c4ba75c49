"""Hot numeric kernels, each with a numba loop version and a numpy version.

The public names (``cascade_response``, ``phase_gradient``, ``cpf_accelerations``)
are bound to the numba variants unless ``SIMDT_NO_NUMBA=1`` is set. Both
variants are importable directly so tests and the benchmark can compare them.

Array conventions:
    theta  (N, L, K) float    phases per slot, layer, meta-atom
    W      (L-1, K, K) complex inter-layer matrices, W[i] feeds layer i+1 from layer i
    feeds  (M, K) complex     antenna-to-first-layer vectors
    h      (N, M, K) complex  air-ground channels (the product uses conj(h))
"""
import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# SIM cascade response z[n, m] = h_m^H G[n] w_m


def cascade_response_numpy(theta, W, feeds, h):
    N, L, K = theta.shape
    psi = np.exp(1j * theta)
    x = psi[:, 0, :, None] * feeds.T[None, :, :]  # (N, K, M)
    for l in range(1, L):
        x = psi[:, l, :, None] * np.matmul(W[l - 1], x)
    return np.einsum("nmk,nkm->nm", h.conj(), x)


@njit
def cascade_response_numba(theta, W, feeds, h):
    N, L, K = theta.shape
    M = feeds.shape[0]
    z = np.zeros((N, M), dtype=np.complex128)
    psi = np.empty((L, K), dtype=np.complex128)
    x = np.empty(K, dtype=np.complex128)
    t = np.empty(K, dtype=np.complex128)
    for n in range(N):
        for l in range(L):
            for k in range(K):
                psi[l, k] = np.exp(1j * theta[n, l, k])
        for m in range(M):
            for k in range(K):
                x[k] = psi[0, k] * feeds[m, k]
            for l in range(1, L):
                for k in range(K):
                    s = 0j
                    for kk in range(K):
                        s += W[l - 1, k, kk] * x[kk]
                    t[k] = psi[l, k] * s
                for k in range(K):
                    x[k] = t[k]
            acc = 0j
            for k in range(K):
                acc += np.conj(h[n, m, k]) * x[k]
            z[n, m] = acc
    return z


# ---------------------------------------------------------------------------
# Gradient of sum_n sum_m log(1 + SINR_m[n]) w.r.t. every phase.
#
# dz_m/dtheta_k^l = j e^{j theta_k^l} (h_m^H V^l)_k (U^l w_m)_k, with U the
# prefix product below layer l and V the suffix product above it. The rate
# weight gamma_m = M/T - sum_{m' != m} 1/I_{m'} is the exact chain-rule
# coefficient for the interference model SINR_m = a_m p_m / I_m.


def _rate_weights_numpy(a, p, sigma2):
    ap = a * p
    M = ap.shape[-1]
    total = ap.sum(axis=-1, keepdims=True)
    interf = total - ap + sigma2
    T = total + sigma2
    inv_i = 1.0 / interf
    return M / T - (inv_i.sum(axis=-1, keepdims=True) - inv_i)


def phase_gradient_numpy(theta, W, feeds, h, p, sigma2):
    N, L, K = theta.shape
    psi = np.exp(1j * theta)
    hc = h.conj()
    right = np.empty((L, N, K, feeds.shape[0]), dtype=np.complex128)
    right[0] = feeds.T[None, :, :]
    for l in range(1, L):
        right[l] = np.matmul(W[l - 1], psi[:, l - 1, :, None] * right[l - 1])
    z = np.einsum("nmk,nkm->nm", hc, psi[:, L - 1, :, None] * right[L - 1])
    left = np.empty((L, N, feeds.shape[0], K), dtype=np.complex128)
    left[L - 1] = hc
    for l in range(L - 2, -1, -1):
        left[l] = np.matmul(left[l + 1] * psi[:, l + 1, None, :], W[l])
    gamma = _rate_weights_numpy(np.abs(z) ** 2, p, sigma2)  # (N, M)
    # varsigma[l, n, m, k]
    vs = 1j * psi.transpose(1, 0, 2)[:, :, None, :] * left * right.transpose(0, 1, 3, 2)
    eta = 2.0 * (z.conj()[None, :, :, None] * vs).real
    grad = np.einsum("nm,lnmk->nlk", gamma * p, eta)
    return grad


@njit
def phase_gradient_numba(theta, W, feeds, h, p, sigma2):
    N, L, K = theta.shape
    M = feeds.shape[0]
    grad = np.zeros((N, L, K))
    psi = np.empty((L, K), dtype=np.complex128)
    right = np.empty((L, K, M), dtype=np.complex128)
    left = np.empty((L, M, K), dtype=np.complex128)
    z = np.empty(M, dtype=np.complex128)
    ap = np.empty(M)
    gamma = np.empty(M)
    for n in range(N):
        for l in range(L):
            for k in range(K):
                psi[l, k] = np.exp(1j * theta[n, l, k])
        for k in range(K):
            for m in range(M):
                right[0, k, m] = feeds[m, k]
        for l in range(1, L):
            for k in range(K):
                for m in range(M):
                    s = 0j
                    for kk in range(K):
                        s += W[l - 1, k, kk] * psi[l - 1, kk] * right[l - 1, kk, m]
                    right[l, k, m] = s
        for m in range(M):
            for k in range(K):
                left[L - 1, m, k] = np.conj(h[n, m, k])
        for l in range(L - 2, -1, -1):
            for m in range(M):
                for k in range(K):
                    s = 0j
                    for kk in range(K):
                        s += left[l + 1, m, kk] * psi[l + 1, kk] * W[l, kk, k]
                    left[l, m, k] = s
        total = 0.0
        for m in range(M):
            acc = 0j
            for k in range(K):
                acc += left[L - 1, m, k] * psi[L - 1, k] * right[L - 1, k, m]
            z[m] = acc
            ap[m] = (acc.real * acc.real + acc.imag * acc.imag) * p[n, m]
            total += ap[m]
        T = total + sigma2
        inv_sum = 0.0
        for m in range(M):
            inv_sum += 1.0 / (total - ap[m] + sigma2)
        for m in range(M):
            gamma[m] = M / T - (inv_sum - 1.0 / (total - ap[m] + sigma2))
        for l in range(L):
            for k in range(K):
                g = 0.0
                for m in range(M):
                    vs = 1j * psi[l, k] * left[l, m, k] * right[l, k, m]
                    g += gamma[m] * p[n, m] * 2.0 * (np.conj(z[m]) * vs).real
                grad[n, l, k] = g
    return grad


# ---------------------------------------------------------------------------
# Composite potential field accelerations.
#
# gains (M, 3) columns: k_tar, k_sep, k_com. obstacles (O, 4): cx, cy, cz, r.
# Obstacles act as static separation sources with threshold d_sep + r.


def cpf_accelerations_numpy(q, targets, gains, d_sep, d_com, d_max, obstacles):
    M = q.shape[0]
    acc = -gains[:, 0:1] * (q - targets)
    diff = q[:, None, :] - q[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    off = ~np.eye(M, dtype=bool)
    if np.any(dist[off] == 0.0):
        raise ValueError("coincident eVTOL positions")
    safe = np.where(off, dist, 1.0)
    sep = off & (dist <= d_sep)
    coef = np.where(sep, d_sep**2 / safe**4, 0.0)
    acc += gains[:, 1:2] * (coef[:, :, None] * diff).sum(1)
    com = off & (dist >= d_com) & (dist <= d_max)
    acc -= gains[:, 2:3] * (com[:, :, None] * diff).sum(1)
    if obstacles.shape[0]:
        od = q[:, None, :] - obstacles[None, :, :3]
        odist = np.sqrt((od**2).sum(-1))
        if np.any(odist == 0.0):
            raise ValueError("eVTOL at an obstacle centre")
        reach = d_sep + obstacles[None, :, 3]
        coef = np.where(odist <= reach, reach**2 / odist**4, 0.0)
        acc += gains[:, 1:2] * (coef[:, :, None] * od).sum(1)
    return acc


@njit
def cpf_accelerations_numba(q, targets, gains, d_sep, d_com, d_max, obstacles):
    M = q.shape[0]
    acc = np.zeros((M, 3))
    for i in range(M):
        for c in range(3):
            acc[i, c] = -gains[i, 0] * (q[i, c] - targets[i, c])
        for j in range(M):
            if j == i:
                continue
            dx = q[i, 0] - q[j, 0]
            dy = q[i, 1] - q[j, 1]
            dz = q[i, 2] - q[j, 2]
            d = np.sqrt(dx * dx + dy * dy + dz * dz)
            if d == 0.0:
                raise ValueError("coincident eVTOL positions")
            if d <= d_sep:
                s = gains[i, 1] * d_sep * d_sep / d**4
                acc[i, 0] += s * dx
                acc[i, 1] += s * dy
                acc[i, 2] += s * dz
            if d >= d_com and d <= d_max:
                acc[i, 0] -= gains[i, 2] * dx
                acc[i, 1] -= gains[i, 2] * dy
                acc[i, 2] -= gains[i, 2] * dz
        for o in range(obstacles.shape[0]):
            dx = q[i, 0] - obstacles[o, 0]
            dy = q[i, 1] - obstacles[o, 1]
            dz = q[i, 2] - obstacles[o, 2]
            d = np.sqrt(dx * dx + dy * dy + dz * dz)
            if d == 0.0:
                raise ValueError("eVTOL at an obstacle centre")
            reach = d_sep + obstacles[o, 3]
            if d <= reach:
                s = gains[i, 1] * reach * reach / d**4
                acc[i, 0] += s * dx
                acc[i, 1] += s * dy
                acc[i, 2] += s * dz
    return acc


if USE_NUMBA:
    cascade_response = cascade_response_numba
    phase_gradient = phase_gradient_numba
    cpf_accelerations = cpf_accelerations_numba
else:
    cascade_response = cascade_response_numpy
    phase_gradient = phase_gradient_numpy
    cpf_accelerations = cpf_accelerations_numpy
