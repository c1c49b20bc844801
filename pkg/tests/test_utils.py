import pytest

from dpdpu.utils import parse_list, parse_size, validate_file_path


@pytest.mark.parametrize(
    "text, size",
    [("8192", 8192), ("64KiB", 65536), ("16 MiB", 16 << 20), ("1GiB", 1 << 30), ("1kb", 1000), ("2b", 2)],
)
def test_parse_size(text, size):
    assert parse_size(text) == size


@pytest.mark.parametrize("text", ["", "KiB", "12XB", "1.5MiB", "-4"])
def test_parse_size_errors(text):
    with pytest.raises(ValueError):
        parse_size(text)


def test_parse_list():
    assert parse_list("1, 2,3", int) == [1, 2, 3]
    assert parse_list("64KiB,1MiB", parse_size) == [65536, 1 << 20]
    assert parse_list("0,0.5", float) == [0.0, 0.5]
    with pytest.raises(ValueError):
        parse_list(" , ", int)
    with pytest.raises(ValueError):
        parse_list("1,x", int)


def test_validate_file_path(tmp_path):
    existing = tmp_path / "a.txt"
    existing.write_text("x")
    assert validate_file_path(str(existing))
    assert not validate_file_path(str(tmp_path / "missing.txt"))
    nested = tmp_path / "new" / "dir" / "out.csv"
    assert validate_file_path(str(nested), must_exist=False)
    assert nested.parent.is_dir()
