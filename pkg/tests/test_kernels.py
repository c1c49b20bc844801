import random

import numpy as np
import pytest

from dpdpu.kernels import (
    KEY_SIZE,
    ColumnError,
    CorruptStreamError,
    EmptyAggregateError,
    KernelError,
    KernelKind,
    KeyLengthError,
    PatternError,
    Predicate,
    RowBatch,
    kernel_aggregate,
    kernel_compress,
    kernel_decompress,
    kernel_decrypt,
    kernel_dedup,
    kernel_encrypt,
    kernel_filter,
    kernel_regex_match,
    parse_pattern,
    run_kernel,
)
from dpdpu.scenarios import text_corpus


def random_bytes(rng: random.Random, max_len: int) -> bytes:
    n = rng.randrange(max_len + 1)
    if rng.random() < 0.5:
        return bytes(rng.randrange(256) for _ in range(n))
    alphabet = bytes(rng.sample(range(256), rng.randrange(1, 5)))
    return bytes(rng.choice(alphabet) for _ in range(n))


# --- compression -----------------------------------------------------------


def test_compress_round_trip_property():
    rng = random.Random(1)
    for _ in range(1000):
        data = random_bytes(rng, 2048)
        assert kernel_decompress(kernel_compress(data)) == data


def test_compress_empty():
    stream = kernel_compress(b"")
    assert stream
    assert kernel_decompress(stream) == b""


def test_compress_repeated_byte():
    data = b"\x07" * (1 << 20)
    assert len(kernel_compress(data)) < len(data) // 100


def test_compress_text_corpus():
    data = text_corpus(64 * 1024, seed=5)
    stream = kernel_compress(data)
    assert len(stream) < len(data)
    assert kernel_decompress(stream) == data


@pytest.mark.parametrize(
    "mangle",
    [
        lambda s: s[:-1],
        lambda s: s + b"extra",
        lambda s: b"",
        lambda s: b"\xff" * 16,
    ],
)
def test_decompress_rejects_corrupt_streams(mangle):
    stream = kernel_compress(b"hello world " * 100)
    with pytest.raises(CorruptStreamError):
        kernel_decompress(mangle(stream))


# --- cipher ----------------------------------------------------------------


def test_cipher_round_trip_property():
    rng = random.Random(2)
    for _ in range(1000):
        key = bytes(rng.randrange(256) for _ in range(KEY_SIZE))
        data = random_bytes(rng, 512)
        sealed = kernel_encrypt(data, key)
        assert len(sealed) == len(data)
        assert kernel_decrypt(sealed, key) == data


def test_cipher_empty():
    assert kernel_encrypt(b"", b"k" * KEY_SIZE) == b""


def test_cipher_keys_differ():
    data = text_corpus(4096, seed=3)
    assert kernel_encrypt(data, b"a" * KEY_SIZE) != kernel_encrypt(data, b"b" * KEY_SIZE)
    assert kernel_encrypt(data, b"a" * KEY_SIZE) != data


@pytest.mark.parametrize("length", [0, 16, 31, 33])
def test_cipher_key_length(length):
    with pytest.raises(KeyLengthError):
        kernel_encrypt(b"data", b"k" * length)


# --- regex -----------------------------------------------------------------


def _atom_matches(atom, byte: int) -> bool:
    if atom[0] == "lit":
        return atom[1] == byte
    if atom[0] == "any":
        return True
    _, negated, members = atom
    return (byte in members) != negated


def _match_branch(items, data: bytes, i: int):
    """End of the first match of items at i, trying longer star runs first."""
    if not items:
        return i
    (atom, starred), rest = items[0], items[1:]
    if not starred:
        if i < len(data) and _atom_matches(atom, data[i]):
            return _match_branch(rest, data, i + 1)
        return None
    run = 0
    while i + run < len(data) and _atom_matches(atom, data[i + run]):
        run += 1
    for k in range(run, -1, -1):
        end = _match_branch(rest, data, i + k)
        if end is not None:
            return end
    return None


def oracle_find_all(data: bytes, pattern: bytes):
    """Leftmost start with a nonempty match; the first such alternative wins there."""
    branches, _ = parse_pattern(pattern)
    spans = []
    pos = 0
    while pos <= len(data):
        found = None
        for start in range(pos, len(data) + 1):
            for branch in branches:
                end = _match_branch(branch, data, start)
                if end is not None and end > start:
                    found = (start, end)
                    break
            if found:
                break
        if found is None:
            break
        start, end = found
        spans.append((start, end - start))
        pos = end
    return spans


def random_pattern(rng: random.Random) -> bytes:
    atoms = [b"a", b"b", b"c", b".", b"[ab]", b"[^a]", b"[a-b]"]
    branches = []
    for _ in range(rng.randrange(1, 4)):
        if rng.random() < 0.25:
            # can match empty
            branches.append(rng.choice(atoms) + b"*")
            continue
        parts = []
        for _ in range(rng.randrange(1, 4)):
            atom = rng.choice(atoms)
            if rng.random() < 0.3:
                atom += b"*"
            parts.append(atom)
        branches.append(b"".join(parts))
    return b"|".join(branches)


def test_regex_matches_backtracking_oracle():
    rng = random.Random(4)
    for _ in range(1000):
        pattern = random_pattern(rng)
        data = bytes(rng.choice(b"abc") for _ in range(rng.randrange(33)))
        assert kernel_regex_match(data, pattern) == oracle_find_all(data, pattern), (pattern, data)


def test_regex_literal():
    assert kernel_regex_match(b"banana", "a") == [(1, 1), (3, 1), (5, 1)]


def test_regex_no_match():
    assert kernel_regex_match(b"banana", "xyz") == []


def test_regex_star_and_alternation():
    assert kernel_regex_match(b"baa", "a*") == [(1, 2)]
    assert kernel_regex_match(b"cat dog", "cat|dog") == [(0, 3), (4, 3)]
    assert kernel_regex_match(b"a1b22", "[0-9][0-9]*") == [(1, 1), (3, 2)]


def test_regex_empty_alternative_does_not_hide_a_match():
    assert kernel_regex_match(b"b", "a*|b") == [(0, 1)]
    assert kernel_regex_match(b"b", "b|a*") == [(0, 1)]
    assert kernel_regex_match(b"xbaab", "a*|b") == kernel_regex_match(b"xbaab", "b|a*") == [(1, 1), (2, 2), (4, 1)]
    assert kernel_regex_match(b"ccc", "a*|b*") == []


def test_regex_escapes():
    assert kernel_regex_match(b"a.b(c", r"\.|\(") == [(1, 1), (3, 1)]


@pytest.mark.parametrize("pattern", ["", "a|", "|a", "(a)", "a+", "a?", "^a", "a$", "a{2}", "*a", "[a", "[]", "[b-a]"])
def test_regex_rejects_unsupported(pattern):
    with pytest.raises(PatternError):
        kernel_regex_match(b"abc", pattern)


# --- row batches -----------------------------------------------------------


def test_filter_always_true_is_identity():
    rows = RowBatch({"col0": [1, 7, 9, 3]})
    assert kernel_filter(rows, Predicate.always()).equals(rows)


def test_filter_then_sum():
    rows = RowBatch({"col0": [1, 7, 9, 3]})
    kept = kernel_filter(rows, Predicate("col0", ">", 5))
    assert list(kept.column("col0")) == [7, 9]
    assert kernel_aggregate(kept, "sum", "col0") == 16
    assert kernel_aggregate(rows, "sum", "col0", Predicate("col0", ">", 5)) == 16


def test_filter_bytes_column():
    rows = RowBatch({"id": [1, 2, 3], "name": [b"ann", b"bob", b"cy"]})
    kept = kernel_filter(rows, Predicate("name", "==", b"bob"))
    assert list(kept.column("id")) == [2]
    assert kernel_aggregate(rows, "max", "name") == b"cy"


def test_aggregate_empty_batch():
    empty = RowBatch({"col0": np.array([], dtype=np.int64)})
    assert kernel_aggregate(empty, "count", "col0") == 0
    assert kernel_aggregate(empty, "sum", "col0") == 0
    for fn in ("min", "max"):
        with pytest.raises(EmptyAggregateError):
            kernel_aggregate(empty, fn, "col0")


def test_row_batch_errors():
    rows = RowBatch({"col0": [1, 2], "name": [b"a", b"b"]})
    with pytest.raises(ColumnError):
        kernel_filter(rows, Predicate("missing", "==", 1))
    with pytest.raises(ColumnError):
        kernel_filter(rows, Predicate("col0", "==", b"1"))
    with pytest.raises(ColumnError):
        kernel_aggregate(rows, "sum", "name")
    with pytest.raises(KernelError):
        kernel_aggregate(rows, "median", "col0")
    with pytest.raises(ColumnError):
        RowBatch({"a": [1, 2], "b": [1]})
    with pytest.raises(KernelError):
        Predicate("col0", "~", 1)


# --- dedup -----------------------------------------------------------------


def test_dedup_rebuilds_input():
    block = bytes(range(256)) * 16
    data = block * 3 + b"tail"
    result = kernel_dedup(data, chunk_size=4096)
    assert result.rebuild() == data
    assert result.refs == (0, 0, 0, 1)
    assert len(result.chunks) == 2


def test_dedup_property():
    rng = random.Random(6)
    for _ in range(200):
        data = random_bytes(rng, 4096)
        result = kernel_dedup(data, chunk_size=rng.randrange(1, 64))
        assert result.rebuild() == data
        assert len(set(result.chunks)) == len(result.chunks)


# --- dispatch --------------------------------------------------------------


def test_run_kernel_dispatch():
    assert run_kernel(KernelKind.REGEX_MATCH, b"banana", {"pattern": "na"}) == [(2, 2), (4, 2)]
    rows = RowBatch({"v": [1, 2, 3]})
    assert run_kernel("aggregate", rows, {"fn": "count", "column": "v"}) == 3


def test_run_kernel_missing_param():
    with pytest.raises(KernelError, match="key"):
        run_kernel(KernelKind.ENCRYPT, b"data")


def test_run_kernel_wrong_input_type():
    with pytest.raises(KernelError):
        run_kernel(KernelKind.COMPRESS, RowBatch({"v": [1]}))
    with pytest.raises(KernelError):
        run_kernel(KernelKind.FILTER, b"rows")
