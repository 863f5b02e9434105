class ConfigError(ValueError):
    """Invalid configuration, target file, or layer layout."""


class StepTooLargeError(ValueError):
    """Retraction of a point whose ambient step cancels it to the origin."""


class IntegrationError(FloatingPointError):
    """Non-finite state encountered while integrating a flow."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
