"""
Utility functions for DPDPU.
"""

import logging
import os
import re
from typing import Callable, List, TypeVar

T = TypeVar("T")

_UNITS = {"": 1, "b": 1, "kib": 1024, "mib": 1024**2, "gib": 1024**3, "kb": 1000, "mb": 1000**2, "gb": 1000**3}
_SIZE = re.compile(r"^\s*(\d+)\s*([a-zA-Z]*)\s*$")


def setup_logging(verbose: bool = False) -> None:
    """
    Set up logging configuration.

    Args:
        verbose: Whether to enable debug logging
    """
    log_level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=log_level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )


def validate_file_path(file_path: str, must_exist: bool = True) -> bool:
    """
    Validate a file path.

    Args:
        file_path: Path to validate
        must_exist: Whether the file must already exist

    Returns:
        True if valid, False otherwise
    """
    if must_exist and not os.path.exists(file_path):
        return False

    # Check if directory is writable if we're creating a file
    if not must_exist:
        dir_path = os.path.dirname(file_path)
        if dir_path and not os.path.exists(dir_path):
            try:
                os.makedirs(dir_path)
            except Exception:
                return False

        if not os.access(dir_path or ".", os.W_OK):
            return False

    return True


def parse_size(text: str) -> int:
    """
    Parse a byte size such as 8192, 64KiB or 16MiB.

    Raises:
        ValueError: On an unknown unit or a malformed number
    """
    match = _SIZE.match(text)
    if not match:
        raise ValueError(f"invalid size {text!r}")
    number, unit = match.groups()
    try:
        return int(number) * _UNITS[unit.lower()]
    except KeyError:
        raise ValueError(f"unknown size unit {unit!r} in {text!r}") from None


def parse_list(text: str, convert: Callable[[str], T]) -> List[T]:
    """Parse a comma-separated list, converting every item."""
    items = [part.strip() for part in text.split(",") if part.strip()]
    if not items:
        raise ValueError(f"empty list {text!r}")
    return [convert(item) for item in items]
