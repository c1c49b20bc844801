"""
Kernels: functional reference implementations of the DP kernels.

Every kernel is a pure function of its input and parameters. The compute
engine decides where a kernel runs and what it costs; the bytes produced here
are the same whichever unit "executed" them.
"""

import hashlib
import logging
import operator
import re
import zlib
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Any, Callable, Dict, FrozenSet, List, Mapping, Optional, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

KEY_SIZE = 32
DEFAULT_CHUNK_SIZE = 4096
COMPRESS_LEVEL = 6

_DEFLATE_WBITS = -15
_KEYSTREAM_BLOCK = 64


class KernelKind(str, Enum):
    """The closed set of DP kernels."""

    COMPRESS = "compress"
    DECOMPRESS = "decompress"
    ENCRYPT = "encrypt"
    DECRYPT = "decrypt"
    REGEX_MATCH = "regex_match"
    FILTER = "filter"
    AGGREGATE = "aggregate"
    DEDUP = "dedup"

    def __str__(self) -> str:
        return self.value


class KernelError(ValueError):
    """Raised when a kernel cannot produce output for its input."""


class CorruptStreamError(KernelError):
    pass


class KeyLengthError(KernelError):
    pass


class PatternError(KernelError):
    pass


class ColumnError(KernelError):
    """Unknown column or a value whose type does not match the column."""


class EmptyAggregateError(KernelError):
    pass


# --- compression -----------------------------------------------------------


def kernel_compress(data: bytes) -> bytes:
    """
    Compress data into a raw DEFLATE stream.

    Args:
        data: Input bytes (may be empty)

    Returns:
        DEFLATE stream without zlib/gzip framing
    """
    compressor = zlib.compressobj(COMPRESS_LEVEL, zlib.DEFLATED, _DEFLATE_WBITS)
    return compressor.compress(bytes(data)) + compressor.flush()


def kernel_decompress(stream: bytes) -> bytes:
    """
    Inflate a raw DEFLATE stream.

    Raises:
        CorruptStreamError: If the stream is malformed, truncated, or followed
            by trailing bytes
    """
    decompressor = zlib.decompressobj(_DEFLATE_WBITS)
    try:
        out = decompressor.decompress(bytes(stream)) + decompressor.flush()
    except zlib.error as e:
        raise CorruptStreamError(f"corrupt DEFLATE stream: {e}") from e
    if not decompressor.eof or decompressor.unused_data:
        raise CorruptStreamError("corrupt DEFLATE stream: truncated or trailing data")
    return out


# --- cipher ----------------------------------------------------------------


def _keystream(key: bytes, length: int) -> np.ndarray:
    blocks = -(-length // _KEYSTREAM_BLOCK)
    stream = b"".join(
        hashlib.blake2b(i.to_bytes(8, "little"), key=key, digest_size=_KEYSTREAM_BLOCK).digest()
        for i in range(blocks)
    )
    return np.frombuffer(stream, dtype=np.uint8, count=length)


def _xor_keystream(data: bytes, key: bytes) -> bytes:
    if len(key) != KEY_SIZE:
        raise KeyLengthError(f"key must be {KEY_SIZE} bytes, got {len(key)}")
    if not data:
        return b""
    plain = np.frombuffer(bytes(data), dtype=np.uint8)
    return np.bitwise_xor(plain, _keystream(bytes(key), len(plain))).tobytes()


def kernel_encrypt(data: bytes, key: bytes) -> bytes:
    """
    Length-preserving keyed stream transform (BLAKE2b counter keystream).

    Not a vetted cipher: there is no nonce, so equal plaintexts under one key
    encrypt identically.
    """
    return _xor_keystream(data, key)


def kernel_decrypt(data: bytes, key: bytes) -> bytes:
    return _xor_keystream(data, key)


# --- regular expressions ---------------------------------------------------

# Atoms: ("lit", byte) | ("any",) | ("class", negated, members)
Atom = Tuple[Any, ...]
Branch = Tuple[Tuple[Atom, bool], ...]

_UNSUPPORTED = frozenset(b"()+?{}^$")


@dataclass(frozen=True)
class CompiledPattern:
    """A pattern from the supported subset, parsed and compiled."""

    source: bytes
    branches: Tuple[Branch, ...]
    token_count: int
    regex: "re.Pattern[bytes]"
    branch_regexes: Tuple["re.Pattern[bytes]", ...]


def _parse_class(pattern: bytes, i: int) -> Tuple[Atom, int, int]:
    """Parse a character class starting after '['. Returns (atom, next index, tokens)."""
    negated = False
    if i < len(pattern) and pattern[i] == ord("^"):
        negated = True
        i += 1
    members = set()
    while True:
        if i >= len(pattern):
            raise PatternError("unterminated character class")
        b = pattern[i]
        if b == ord("]"):
            i += 1
            break
        if b == ord("\\"):
            if i + 1 >= len(pattern):
                raise PatternError("dangling escape in character class")
            b = pattern[i + 1]
            i += 1
        i += 1
        if i + 1 < len(pattern) and pattern[i] == ord("-") and pattern[i + 1] != ord("]"):
            hi = pattern[i + 1]
            if hi == ord("\\"):
                if i + 2 >= len(pattern):
                    raise PatternError("dangling escape in character class")
                hi = pattern[i + 2]
                i += 1
            if hi < b:
                raise PatternError(f"bad range {chr(b)}-{chr(hi)}")
            members.update(range(b, hi + 1))
            i += 2
        else:
            members.add(b)
    if not members:
        raise PatternError("empty character class")
    return ("class", negated, frozenset(members)), i, 1


def parse_pattern(pattern: bytes) -> Tuple[Tuple[Branch, ...], int]:
    """
    Parse a pattern of the supported subset.

    The subset is: literal bytes (metacharacters escaped with backslash), '.',
    postfix '*', top-level alternation '|', and character classes '[...]'
    with ranges and '^' negation. Grouping, anchors and other quantifiers are
    rejected.

    Returns:
        The branches (each a sequence of (atom, starred) pairs) and the token count
    """
    if not pattern:
        raise PatternError("empty pattern")
    branches: List[Branch] = []
    current: List[Tuple[Atom, bool]] = []
    tokens = 0
    i = 0
    while i < len(pattern):
        b = pattern[i]
        if b == ord("|"):
            if not current:
                raise PatternError("empty alternative")
            branches.append(tuple(current))
            current = []
            tokens += 1
            i += 1
            continue
        if b == ord("*"):
            if not current or current[-1][1]:
                raise PatternError("'*' must follow an atom")
            current[-1] = (current[-1][0], True)
            tokens += 1
            i += 1
            continue
        if b == ord("\\"):
            if i + 1 >= len(pattern):
                raise PatternError("dangling escape")
            current.append((("lit", pattern[i + 1]), False))
            i += 2
        elif b == ord("."):
            current.append((("any",), False))
            i += 1
        elif b == ord("["):
            atom, i, _ = _parse_class(pattern, i + 1)
            current.append((atom, False))
        elif b == ord("]") or b in _UNSUPPORTED:
            raise PatternError(f"unsupported syntax {chr(b)!r} at offset {i}")
        else:
            current.append((("lit", b), False))
            i += 1
        tokens += 1
    if not current:
        raise PatternError("empty alternative")
    branches.append(tuple(current))
    return tuple(branches), tokens


def _atom_regex(atom: Atom) -> bytes:
    if atom[0] == "lit":
        return re.escape(bytes([atom[1]]))
    if atom[0] == "any":
        return b"."
    _, negated, members = atom
    body = b"".join(re.escape(bytes([m])) for m in sorted(members))
    return b"[" + (b"^" if negated else b"") + body + b"]"


@lru_cache(maxsize=256)
def compile_pattern(pattern: bytes) -> CompiledPattern:
    branches, tokens = parse_pattern(pattern)
    sources = tuple(
        b"".join(_atom_regex(atom) + (b"*" if starred else b"") for atom, starred in branch)
        for branch in branches
    )
    return CompiledPattern(
        pattern, branches, tokens,
        re.compile(b"|".join(sources), re.DOTALL),
        tuple(re.compile(source, re.DOTALL) for source in sources),
    )


def kernel_regex_match(data: bytes, pattern: Union[bytes, str]) -> List[Tuple[int, int]]:
    """
    Find all non-overlapping leftmost matches.

    Scanning resumes at the end of each match. Empty matches are not reported:
    at a start where the first matching alternative is empty, the first later
    alternative with a nonempty match wins; failing that the scan advances by
    one byte.

    Returns:
        (offset, length) pairs in increasing offset order
    """
    if isinstance(pattern, str):
        pattern = pattern.encode()
    compiled = compile_pattern(bytes(pattern))
    data = bytes(data)
    spans: List[Tuple[int, int]] = []
    pos = 0
    while pos <= len(data):
        m = compiled.regex.search(data, pos)
        if m is None:
            break
        start, end = m.span()
        if end == start:
            for branch in compiled.branch_regexes:
                bm = branch.match(data, start)
                if bm is not None and bm.end() > start:
                    end = bm.end()
                    break
        if end > start:
            spans.append((start, end - start))
            pos = end
        else:
            pos = start + 1
    return spans


# --- row batches -----------------------------------------------------------

_COMPARISONS: Dict[str, Callable[[Any, Any], Any]] = {
    "==": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}

AGGREGATES = ("sum", "count", "min", "max")


@dataclass(frozen=True)
class Predicate:
    """A single-column comparison, or the always-true predicate."""

    column: Optional[str]
    op: str
    value: Any = None

    @classmethod
    def always(cls) -> "Predicate":
        return cls(None, "true")

    def __post_init__(self):
        if self.op != "true" and self.op not in _COMPARISONS:
            raise KernelError(f"unknown comparison {self.op!r}")
        if self.op != "true" and not self.column:
            raise KernelError("comparison needs a column")


class RowBatch:
    """
    A columnar batch of rows. Columns are int64 or bytes (object arrays).
    """

    def __init__(self, columns: Mapping[str, Any]):
        cols: Dict[str, np.ndarray] = {}
        length = None
        for name, values in columns.items():
            arr = _as_column(name, values)
            if length is not None and len(arr) != length:
                raise ColumnError(f"column {name!r} has {len(arr)} rows, expected {length}")
            length = len(arr)
            cols[name] = arr
        self.columns = cols
        self.num_rows = length or 0

    @property
    def schema(self) -> Dict[str, str]:
        return {name: ("int64" if arr.dtype == np.int64 else "bytes") for name, arr in self.columns.items()}

    @property
    def nbytes(self) -> int:
        total = 0
        for arr in self.columns.values():
            if arr.dtype == np.int64:
                total += 8 * len(arr)
            else:
                total += sum(len(v) for v in arr)
        return total

    def column(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise ColumnError(f"unknown column {name!r}") from None

    def take(self, mask: np.ndarray) -> "RowBatch":
        return RowBatch({name: arr[mask] for name, arr in self.columns.items()})

    def equals(self, other: "RowBatch") -> bool:
        if self.schema != other.schema or self.num_rows != other.num_rows:
            return False
        return all(
            np.array_equal(arr, other.columns[name]) for name, arr in self.columns.items()
        )

    def __repr__(self) -> str:
        return f"RowBatch(rows={self.num_rows}, schema={self.schema})"


def _as_column(name: str, values: Any) -> np.ndarray:
    if isinstance(values, np.ndarray):
        if values.dtype == np.int64 or values.dtype == object:
            return values
        if np.issubdtype(values.dtype, np.integer):
            return values.astype(np.int64)
        raise ColumnError(f"column {name!r}: unsupported dtype {values.dtype}")
    values = list(values)
    if all(isinstance(v, (bytes, bytearray)) for v in values) and values:
        arr = np.empty(len(values), dtype=object)
        arr[:] = [bytes(v) for v in values]
        return arr
    if all(isinstance(v, (int, np.integer)) and not isinstance(v, bool) for v in values):
        return np.asarray(values, dtype=np.int64)
    raise ColumnError(f"column {name!r} mixes types or holds unsupported values")


def _check_value_type(arr: np.ndarray, column: str, value: Any) -> None:
    if arr.dtype == np.int64:
        ok = isinstance(value, (int, np.integer)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, (bytes, bytearray))
    if not ok:
        raise ColumnError(f"type mismatch: column {column!r} compared with {type(value).__name__}")


def predicate_mask(rows: RowBatch, predicate: Predicate) -> np.ndarray:
    if predicate.op == "true":
        return np.ones(rows.num_rows, dtype=bool)
    arr = rows.column(predicate.column)
    _check_value_type(arr, predicate.column, predicate.value)
    return np.asarray(_COMPARISONS[predicate.op](arr, predicate.value), dtype=bool)


def kernel_filter(rows: RowBatch, predicate: Predicate) -> RowBatch:
    """Keep the rows satisfying predicate, preserving order."""
    return rows.take(predicate_mask(rows, predicate))


def kernel_aggregate(
    rows: RowBatch, fn: str, column: str, predicate: Optional[Predicate] = None
) -> Any:
    """
    Aggregate one column, optionally over the rows passing predicate.

    count and sum of an empty batch are 0; min and max of an empty batch raise.
    """
    if fn not in AGGREGATES:
        raise KernelError(f"unknown aggregate {fn!r}")
    if predicate is not None:
        rows = kernel_filter(rows, predicate)
    arr = rows.column(column)
    if fn == "count":
        return int(len(arr))
    if fn == "sum":
        if arr.dtype != np.int64:
            raise ColumnError(f"type mismatch: sum over bytes column {column!r}")
        return int(arr.sum()) if len(arr) else 0
    if not len(arr):
        raise EmptyAggregateError(f"{fn} over an empty batch")
    value = arr.min() if fn == "min" else arr.max()
    return int(value) if arr.dtype == np.int64 else bytes(value)


# --- dedup -----------------------------------------------------------------


@dataclass(frozen=True)
class DedupResult:
    """Unique chunks plus, per input chunk, the index of its unique chunk."""

    chunk_size: int
    chunks: Tuple[bytes, ...]
    refs: Tuple[int, ...]

    def rebuild(self) -> bytes:
        return b"".join(self.chunks[r] for r in self.refs)


def kernel_dedup(data: bytes, chunk_size: int = DEFAULT_CHUNK_SIZE) -> DedupResult:
    if chunk_size <= 0:
        raise KernelError("chunk_size must be positive")
    data = bytes(data)
    seen: Dict[bytes, int] = {}
    chunks: List[bytes] = []
    refs: List[int] = []
    for off in range(0, len(data), chunk_size):
        chunk = data[off:off + chunk_size]
        digest = hashlib.sha256(chunk).digest()
        idx = seen.get(digest)
        if idx is None:
            idx = seen[digest] = len(chunks)
            chunks.append(chunk)
        refs.append(idx)
    return DedupResult(chunk_size, tuple(chunks), tuple(refs))


# --- dispatch --------------------------------------------------------------

BYTE_KINDS: FrozenSet[KernelKind] = frozenset(
    {
        KernelKind.COMPRESS,
        KernelKind.DECOMPRESS,
        KernelKind.ENCRYPT,
        KernelKind.DECRYPT,
        KernelKind.REGEX_MATCH,
        KernelKind.DEDUP,
    }
)


def input_nbytes(data: Any) -> int:
    if isinstance(data, RowBatch):
        return data.nbytes
    return len(data)


def run_kernel(kind: KernelKind, data: Any, params: Optional[Mapping[str, Any]] = None) -> Any:
    """
    Execute one kernel functionally.

    Args:
        kind: Kernel to run
        data: bytes for byte kernels, a RowBatch for filter/aggregate
        params: Kernel parameters (key, pattern, predicate, fn/column, chunk_size)

    Returns:
        The kernel output

    Raises:
        KernelError: On bad parameters or input the kernel rejects
    """
    params = dict(params or {})
    kind = KernelKind(kind)
    if kind in BYTE_KINDS:
        if not isinstance(data, (bytes, bytearray, memoryview)):
            raise KernelError(f"{kind} expects bytes, got {type(data).__name__}")
    elif not isinstance(data, RowBatch):
        raise KernelError(f"{kind} expects a RowBatch, got {type(data).__name__}")

    try:
        if kind is KernelKind.COMPRESS:
            return kernel_compress(data)
        if kind is KernelKind.DECOMPRESS:
            return kernel_decompress(data)
        if kind is KernelKind.ENCRYPT:
            return kernel_encrypt(data, params["key"])
        if kind is KernelKind.DECRYPT:
            return kernel_decrypt(data, params["key"])
        if kind is KernelKind.REGEX_MATCH:
            return kernel_regex_match(data, params["pattern"])
        if kind is KernelKind.FILTER:
            return kernel_filter(data, params.get("predicate") or Predicate.always())
        if kind is KernelKind.AGGREGATE:
            return kernel_aggregate(data, params["fn"], params["column"], params.get("predicate"))
        return kernel_dedup(data, params.get("chunk_size", DEFAULT_CHUNK_SIZE))
    except KeyError as e:
        raise KernelError(f"{kind}: missing parameter {e.args[0]!r}") from e
