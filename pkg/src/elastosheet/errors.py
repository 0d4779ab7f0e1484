"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid parameters, inputs that violate a documented precondition."""


class CompatibilityError(ValueError):
    """Div-curl data rejected; the message names the violated condition."""


class ConvergenceError(RuntimeError):
    """An iterative solve failed; the message carries the final residual."""


class MonitorBreach(RuntimeError):
    """A runtime monitor crossed its hard threshold; names the condition."""

    def __init__(self, condition, detail=""):
        self.condition = condition
        self.detail = detail
        msg = f"monitor breach: {condition}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
