"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class PisaError(Exception):
    """Base class for all errors raised by this package."""


class InvalidDimension(PisaError, ValueError):
    """A count or shape is zero, negative or inconsistent."""


class DegenerateScale(InvalidDimension):
    """A generator scale parameter is not strictly positive."""


class BlockDivisibility(InvalidDimension):
    """Sequence length is not a multiple of the block size."""

    def __init__(self, seq_len: int, block_size: int):
        self.seq_len = seq_len
        self.block_size = block_size
        super().__init__(
            f"seq_len {seq_len} is not divisible by block size {block_size} "
            f"(L mod B = {seq_len % block_size}); L must be a multiple of B"
        )


class ZeroRow(PisaError, ValueError):
    def __init__(self, tensor: str, head: int, row: int):
        self.tensor, self.head, self.row = tensor, head, row
        super().__init__(f"{tensor}[head={head}, row={row}] has zero norm")


class EmptySelection(PisaError, ValueError):
    def __init__(self, query_block: int):
        self.query_block = query_block
        super().__init__(f"query block {query_block} selects no key blocks")


class InvalidSparsity(PisaError, ValueError):
    pass


class InvalidEpsilon(PisaError, ValueError):
    pass


class NumericalOverflow(PisaError, ArithmeticError):
    def __init__(self, row: int, what: str = "output"):
        self.row = row
        super().__init__(f"non-finite {what} at row {row}")


# -- PQKV file format -------------------------------------------------------


class FormatError(PisaError, ValueError):
    """Base class for PQKV decoding failures."""


class BadMagic(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class UnsupportedDtype(FormatError):
    pass


class MalformedFile(FormatError):
    def __init__(self, message: str, expected: int | None = None, actual: int | None = None):
        self.expected, self.actual = expected, actual
        super().__init__(message)


class NonFiniteValue(FormatError):
    def __init__(self, tensor: str, head: int, row: int, col: int):
        self.tensor, self.head, self.row, self.col = tensor, head, row, col
        super().__init__(f"non-finite value in {tensor}[head={head}, row={row}, col={col}]")


class TensorWriteError(PisaError, OSError):
    def __init__(self, offset: int, cause: BaseException):
        self.offset = offset
        super().__init__(f"write failed at byte offset {offset}: {cause}")
