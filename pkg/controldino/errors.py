# controldino/errors.py
"""Exceptions raised across the package.

Management commands map these onto exit codes: ``NumericError`` exits with 3,
everything else derived from ``ControlDinoError`` exits with 2.
"""


class ControlDinoError(Exception):
    """Base class for every error raised by controldino."""


class ContractError(ControlDinoError, ValueError):
    """A precondition on shapes, ranges or configuration was violated."""


class DomainError(ContractError):
    """An argument lies outside the domain of the operation (e.g. t not in [0, 1])."""


class NumericError(ControlDinoError, ArithmeticError):
    """A computation produced non-finite values.

    ``index`` names where it happened (batch index, sampler step, ...).
    """

    def __init__(self, message: str, index=None):
        super().__init__(message)
        self.index = index


class FormatError(ControlDinoError, ValueError):
    """A tensor file or checkpoint archive could not be parsed.

    ``offset`` is the byte offset of the failure when known; ``tensor`` names the
    offending archive member.
    """

    def __init__(self, message: str, offset=None, tensor=None):
        super().__init__(message)
        self.offset = offset
        self.tensor = tensor


class StyleLookupError(ControlDinoError, LookupError):
    """A style hook name is not registered."""

    def __str__(self):
        # LookupError/KeyError style quoting is unhelpful for long messages
        return str(self.args[0]) if self.args else ""
