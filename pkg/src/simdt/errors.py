class ConfigError(ValueError):
    """Invalid configuration value; ``field`` names the offending entry."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class InfeasibleSlotError(RuntimeError):
    """No dual value makes the power solve feasible for a slot."""

    def __init__(self, slot, message="no feasible dual value"):
        super().__init__(f"slot {slot}: {message}")
        self.slot = slot
