"""Exception hierarchy shared by every layer of the package."""


class GradMaskError(Exception):
    """Base class for all package errors."""


class ShapeError(GradMaskError, ValueError):
    pass


class DTypeError(GradMaskError, TypeError):
    pass


class DomainError(GradMaskError, ValueError):
    pass


class ValidationError(GradMaskError, ValueError):
    pass


class FormatError(GradMaskError, ValueError):
    """Corrupt or inconsistent file contents."""


class ContractError(GradMaskError, ValueError):
    pass


class UnsupportedOpError(GradMaskError, NotImplementedError):
    def __init__(self, op):
        super().__init__(f"operation {op!r} has no second-order rule; create_graph is unsupported")
        self.op = op


class DivergenceError(GradMaskError, ArithmeticError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, epoch, terms):
        self.epoch = epoch
        self.terms = dict(terms)
        detail = ", ".join(f"{k}={v:.4g}" for k, v in self.terms.items())
        super().__init__(f"non-finite loss at epoch {epoch} ({detail})")
