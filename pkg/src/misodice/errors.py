"""Exceptions shared across the training stages."""


class DivergenceError(RuntimeError):
    """A training loss became non-finite."""

    def __init__(self, stage: str, step: int, detail: str = ""):
        self.stage = stage
        self.step = step
        self.detail = detail
        msg = f"{stage}: loss became non-finite at step {step}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ConfigError(ValueError):
    """Invalid run configuration or command-line override."""
