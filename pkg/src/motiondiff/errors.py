class NumericError(FloatingPointError):
    """A non-finite value showed up in a forward pass, loss or gradient."""


class ConfigError(KeyError):
    """Missing or unknown configuration key."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""
