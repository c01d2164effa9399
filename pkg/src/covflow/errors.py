"""Exception hierarchy shared by every covflow module."""


class CovflowError(Exception):
    """Base class for all errors raised by covflow."""


class DomainError(CovflowError, ValueError):
    """An argument lies outside the domain where an operation is defined."""


class LayerRangeError(CovflowError, IndexError):
    """A layer index is outside ``1 <= l <= L`` (or ``0 <= l <= L``)."""


class ConvergenceError(CovflowError, RuntimeError):
    """An iterative limit did not reach the requested tolerance."""


class InstabilityError(CovflowError, ArithmeticError):
    """Pre-activations blew up during a forward pass.

    ``layer`` is the first layer whose pre-activation norm crossed the guard.
    ``context`` is filled in by the experiment harness with grid coordinates.
    """

    def __init__(self, layer, norm, context=None):
        self.layer = layer
        self.norm = norm
        self.context = dict(context or {})
        msg = f"pre-activation norm {norm:.3e} exceeded guard at layer {layer}"
        if self.context:
            where = ", ".join(f"{k}={v}" for k, v in self.context.items())
            msg += f" ({where})"
        super().__init__(msg)

    def with_context(self, **context):
        merged = {**self.context, **context}
        return InstabilityError(self.layer, self.norm, merged)


class ConfigError(CovflowError, ValueError):
    """A run configuration is malformed; ``key`` names the offending entry."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")
