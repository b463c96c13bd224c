"""Matrix and label containers, seeded randomness and matrix file formats.

Matrices are plain 2-D float64 numpy arrays that have passed through
``as_matrix`` (finite, read-only). Two on-disk formats are supported:

* CSV: UTF-8, one row per line, comma separated, no header, LF endings.
  Floats are written with 17 significant digits.
* Binary: ``b"CSLS"`` magic, version byte ``0x01``, little-endian u32 rows,
  u32 cols, then rows*cols little-endian float32 values, row-major.
  The header is 13 bytes.
"""
import logging
import re
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from errors import MatrixFormatError, ValidationError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

BINARY_MAGIC = b"CSLS"
BINARY_VERSION = 1
BINARY_HEADER = struct.Struct("<4sBII")
SOFT_LABEL_ATOL = 1e-9
MAX_CLASSES = 1_000_000


class MatrixFormat(str, Enum):
    CSV = "csv"
    BINARY = "binary"


def infer_format(path: PathLike) -> MatrixFormat:
    """Pick a format from the file suffix; anything but .bin/.csls is CSV."""
    suffix = Path(path).suffix.lower()
    if suffix in (".bin", ".csls"):
        return MatrixFormat.BINARY
    return MatrixFormat.CSV


def parse_choice(enum_cls, value, name: str):
    """Coerce `value` to a member of `enum_cls`, listing the accepted values on failure."""
    try:
        return enum_cls(value)
    except ValueError:
        choices = ", ".join(member.value for member in enum_cls)
        raise ValidationError(f"{name} must be one of: {choices}; got {value!r}")


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Validate and freeze a 2-D float64 matrix."""
    matrix = np.array(values, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValidationError(f"{name} must be 2-dimensional, got shape {matrix.shape}")
    if not np.isfinite(matrix).all():
        row, col = np.argwhere(~np.isfinite(matrix))[0]
        raise ValidationError(f"{name} has a non-finite value at row {row}, column {col}")
    matrix.setflags(write=False)
    return matrix


def as_soft_labels(values, name: str = "soft labels", atol: float = SOFT_LABEL_ATOL) -> np.ndarray:
    """Validate that every row is a probability distribution."""
    matrix = as_matrix(values, name)
    if matrix.size and (matrix.min() < -atol or matrix.max() > 1 + atol):
        raise ValidationError(f"{name} entries must lie in [0, 1]")
    sums = matrix.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > atol)
    if bad.size:
        raise ValidationError(
            f"{name} row {bad[0]} sums to {sums[bad[0]]!r}, expected 1"
        )
    return matrix


def row_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """PCG64 generator keyed on (seed, stream); never touches OS entropy."""
    if not 0 <= int(seed) < 2 ** 64:
        raise ValidationError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64([int(stream), int(seed)]))


@dataclass(frozen=True, eq=False)
class LabelSet:
    labels: np.ndarray
    num_classes: int
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        raw = np.asarray(self.labels)
        if raw.ndim != 1:
            raise ValidationError("labels must be a 1-dimensional vector")
        if raw.size and not np.issubdtype(raw.dtype, np.integer):
            if not np.all(np.isfinite(raw)) or not np.all(raw == np.round(raw)):
                raise ValidationError("labels must be integer class indices")
        labels = raw.astype(np.int64)
        if not 1 <= int(self.num_classes) <= MAX_CLASSES:
            raise ValidationError(f"num_classes must lie in [1, {MAX_CLASSES}], got {self.num_classes}")
        out_of_range = np.flatnonzero((labels < 0) | (labels >= self.num_classes))
        if out_of_range.size:
            n = out_of_range[0]
            raise ValidationError(
                f"label {labels[n]} at position {n} is outside [0, {self.num_classes})"
            )
        labels.setflags(write=False)
        counts = np.bincount(labels, minlength=self.num_classes)
        counts.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", int(self.num_classes))
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_labels(cls, labels: Sequence[int], num_classes: Optional[int] = None) -> "LabelSet":
        """Build a label set, inferring num_classes as max+1 when not given."""
        labels = np.asarray(labels)
        if num_classes is None:
            if labels.size == 0:
                raise ValidationError("cannot infer the class count from an empty label vector")
            num_classes = int(labels.max()) + 1
        return cls(labels, num_classes)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices) -> "LabelSet":
        return LabelSet(self.labels[np.asarray(indices, dtype=np.int64)], self.num_classes)


def one_hot(label_set: LabelSet) -> np.ndarray:
    """One row per instance with a single 1.0 in the label column."""
    targets = np.zeros((len(label_set), label_set.num_classes))
    targets[np.arange(len(label_set)), label_set.labels] = 1.0
    targets.setflags(write=False)
    return targets


def _read_csv_matrix(path: Path) -> np.ndarray:
    try:
        frame = pd.read_csv(
            path,
            header=None,
            dtype=str,
            keep_default_na=False,
            skip_blank_lines=False,
            encoding="utf-8",
        )
    except pd.errors.EmptyDataError:
        raise MatrixFormatError(path, "empty file")
    except pd.errors.ParserError as exc:
        match = re.search(r"line (\d+)", str(exc))
        position = f"line {match.group(1)}" if match else ""
        raise MatrixFormatError(path, f"ragged row ({str(exc).strip()})", position)
    except UnicodeDecodeError as exc:
        raise MatrixFormatError(path, "not valid UTF-8", f"byte {exc.start}")

    cells = frame.to_numpy(dtype=object)
    values = np.empty(cells.shape, dtype=np.float64)
    for (row, col), cell in np.ndenumerate(cells):
        position = f"line {row + 1}, field {col + 1}"
        if not isinstance(cell, str) or not cell.strip():
            raise MatrixFormatError(path, "missing field (ragged row)", position)
        try:
            value = float(cell)
        except ValueError:
            raise MatrixFormatError(path, f"cannot parse {cell!r} as a number", position)
        if not np.isfinite(value):
            raise MatrixFormatError(path, f"non-finite value {cell!r}", position)
        values[row, col] = value
    return values


def _read_binary_matrix(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if len(data) < BINARY_HEADER.size:
        raise MatrixFormatError(
            path, f"truncated header ({len(data)} of {BINARY_HEADER.size} bytes)", f"byte {len(data)}"
        )
    magic, version, rows, cols = BINARY_HEADER.unpack_from(data)
    if magic != BINARY_MAGIC:
        raise MatrixFormatError(path, f"bad magic {magic!r}, expected {BINARY_MAGIC!r}", "byte 0")
    if version != BINARY_VERSION:
        raise MatrixFormatError(path, f"unsupported version {version}", "byte 4")
    expected = BINARY_HEADER.size + 4 * rows * cols
    if len(data) < expected:
        raise MatrixFormatError(
            path,
            f"truncated payload for {rows}x{cols} matrix ({len(data)} of {expected} bytes)",
            f"byte {len(data)}",
        )
    if len(data) > expected:
        raise MatrixFormatError(
            path, f"{len(data) - expected} trailing bytes after {rows}x{cols} payload", f"byte {expected}"
        )
    payload = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=BINARY_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(payload))
    if bad.size:
        raise MatrixFormatError(path, "non-finite value", f"byte {BINARY_HEADER.size + 4 * bad[0]}")
    return payload.astype(np.float64).reshape(rows, cols)


def read_matrix(path: PathLike, fmt: Optional[MatrixFormat] = None) -> np.ndarray:
    """Load a CSV or binary matrix, inferring the format from the suffix unless `fmt` is given."""
    path = Path(path)
    fmt = parse_choice(MatrixFormat, fmt, "format") if fmt is not None else infer_format(path)
    if fmt is MatrixFormat.BINARY:
        values = _read_binary_matrix(path)
    else:
        values = _read_csv_matrix(path)
    logger.debug("matrix_read | path=%s | format=%s | shape=%s", path, fmt.value, values.shape)
    return as_matrix(values, str(path))


def matrix_to_csv(matrix: np.ndarray) -> str:
    """CSV text with 17 significant digits per value."""
    if matrix.shape[0] == 0:
        return ""
    return pd.DataFrame(matrix).to_csv(
        None, header=False, index=False, float_format="%.17g", lineterminator="\n"
    )


def write_matrix(matrix: np.ndarray, path: PathLike, fmt: Optional[MatrixFormat] = None) -> None:
    """Write `matrix` as CSV or binary; binary values are rounded to float32."""
    path = Path(path)
    fmt = parse_choice(MatrixFormat, fmt, "format") if fmt is not None else infer_format(path)
    matrix = as_matrix(matrix, "matrix to write")
    if fmt is MatrixFormat.BINARY:
        with np.errstate(over="ignore"):
            payload = matrix.astype("<f4")
        if not np.isfinite(payload).all():
            raise ValidationError("matrix has values outside the float32 range")
        rows, cols = matrix.shape
        with open(path, "wb") as handle:
            handle.write(BINARY_HEADER.pack(BINARY_MAGIC, BINARY_VERSION, rows, cols))
            handle.write(payload.tobytes(order="C"))
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(matrix_to_csv(matrix))
    logger.debug("matrix_written | path=%s | format=%s | shape=%s", path, fmt.value, matrix.shape)


def _read_integer_column(path: Path, what: str) -> np.ndarray:
    try:
        frame = pd.read_csv(
            path, header=None, dtype=str, keep_default_na=False, skip_blank_lines=False, encoding="utf-8"
        )
    except pd.errors.EmptyDataError:
        raise MatrixFormatError(path, f"empty {what} file")
    except pd.errors.ParserError as exc:
        raise MatrixFormatError(path, f"expected one integer per line ({str(exc).strip()})")
    if frame.shape[1] != 1:
        raise MatrixFormatError(path, "expected one integer per line", "line 1")
    values = np.empty(frame.shape[0], dtype=np.int64)
    for row, cell in enumerate(frame.iloc[:, 0]):
        text = cell.strip() if isinstance(cell, str) else ""
        if not text.isdigit():
            raise MatrixFormatError(path, f"{cell!r} is not a nonnegative integer", f"line {row + 1}")
        value = int(text)
        if value > np.iinfo(np.int64).max:
            raise MatrixFormatError(path, f"{text} does not fit in a 64-bit integer", f"line {row + 1}")
        values[row] = value
    return values


def read_labels(path: PathLike, num_classes: Optional[int] = None) -> LabelSet:
    """Read one nonnegative integer per line."""
    return LabelSet.from_labels(_read_integer_column(Path(path), "label"), num_classes)


def write_labels(label_set: LabelSet, path: PathLike) -> None:
    pd.Series(label_set.labels).to_csv(path, header=False, index=False, lineterminator="\n")


def read_counts(path: PathLike) -> np.ndarray:
    """Per-class instance counts, one per line."""
    return _read_integer_column(Path(path), "count")


def write_counts(counts, path: PathLike) -> None:
    pd.Series(np.asarray(counts, dtype=np.int64)).to_csv(path, header=False, index=False, lineterminator="\n")
