"""
Profiles: load hardware profiles and the kernel-cost defaults file.

Both files use the dotenv KEY=VALUE format with dotted keys; accelerators are
indexed blocks (accelerator.0.kinds, accelerator.0.throughput_Bps, ...).
"""

import hashlib
import io
import logging
import os
import shutil
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from dotenv import set_key
from dotenv.parser import parse_stream

from .hwmodel import (
    AcceleratorSpec,
    CostDefaults,
    HardwareProfile,
    ProfileParseError,
    ProfileValidationError,
)
from .kernels import KernelKind

logger = logging.getLogger(__name__)

PROFILE_DIR = Path(__file__).resolve().parent / "profiles"
DEFAULTS_FILE = PROFILE_DIR / "defaults.env"

PROFILE_KEYS = {
    "name": ("name", str),
    "host.cores": ("host_cores", int),
    "host.clock_hz": ("host_clock_hz", float),
    "dpu.cores": ("dpu_cores", int),
    "dpu.clock_hz": ("dpu_clock_hz", float),
    "dpu.mem_bytes": ("dpu_mem_bytes", int),
    "nic.bw_bps": ("nic_bw_bps", float),
    "nic.lat_ns": ("nic_lat_ns", int),
    "pcie.bw_bps": ("pcie_bw_bps", float),
    "pcie.lat_ns": ("pcie_lat_ns", int),
    "dma.poll_ns": ("dma_poll_ns", int),
}

ACCELERATOR_KEYS = {
    "kinds": "kernel_kinds",
    "throughput_Bps": "throughput_Bps",
    "startup_ns": "startup_ns",
    "slots": "slots",
    "name": "name",
}

DEFAULTS_KEYS = {
    "host.enqueue_cycles": ("host_enqueue_cycles", float),
    "host.poll_cycles": ("host_poll_cycles", float),
    "storage.page_cycles": ("storage_page_cycles", float),
    "net.host_fixed_cycles": ("net_host_fixed_cycles", float),
    "net.host_cycles_per_byte": ("net_host_cycles_per_byte", float),
    "net.dpu_fixed_cycles": ("net_dpu_fixed_cycles", float),
    "net.dpu_cycles_per_byte": ("net_dpu_cycles_per_byte", float),
    "storage.dpu_fs_fixed_cycles": ("dpu_fs_fixed_cycles", float),
    "storage.udf_cycles": ("udf_cycles", float),
    "rdma.verb_cycles": ("rdma_verb_cycles", float),
    "sproc.dispatch_cycles": ("sproc_dispatch_cycles", float),
    "ssd.read_bw_Bps": ("ssd_read_bw_Bps", float),
    "ssd.write_bw_Bps": ("ssd_write_bw_Bps", float),
    "ssd.lat_ns": ("ssd_lat_ns", int),
    "ssd.capacity_bytes": ("ssd_capacity_bytes", int),
    "ring.capacity": ("ring_capacity", int),
    "ring.poll_batch": ("poll_batch", int),
    "drr.quantum_ns": ("drr_quantum_ns", int),
    "dpu.mem_reserve_bytes": ("dpu_mem_reserve_bytes", int),
}


def _parse_pairs(source: str) -> Dict[str, str]:
    pairs: Dict[str, str] = {}
    for binding in parse_stream(io.StringIO(source)):
        if binding.error:
            raise ProfileParseError(f"cannot parse line: {binding.original.string.strip()!r}")
        if binding.key is None:
            continue
        if binding.value is None:
            raise ProfileParseError(f"missing '=' for key {binding.key!r}")
        if binding.key in pairs:
            raise ProfileParseError(f"duplicate key {binding.key!r}")
        pairs[binding.key] = binding.value.strip()
    return pairs


def _convert(key: str, raw: str, kind: type):
    try:
        if kind is int:
            value = float(raw)
            if not value.is_integer():
                raise ValueError(raw)
            return int(value)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ProfileValidationError(f"{key}: expected {kind.__name__}, got {raw!r}") from e


def _parse_kinds(key: str, raw: str) -> frozenset:
    kinds = set()
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            kinds.add(KernelKind(part))
        except ValueError as e:
            raise ProfileValidationError(f"{key}: unknown kernel kind {part!r}") from e
    return frozenset(kinds)


def load_profile(source: str) -> HardwareProfile:
    """
    Parse and validate a hardware profile.

    Args:
        source: Profile text in the documented key schema

    Returns:
        The validated profile; a missing accelerator block yields no accelerators

    Raises:
        ProfileParseError: Malformed text
        ProfileValidationError: Unknown or missing keys, bad values, index gaps
    """
    pairs = _parse_pairs(source)
    fields: Dict[str, object] = {}
    blocks: Dict[int, Dict[str, object]] = {}

    for key, raw in pairs.items():
        if key in PROFILE_KEYS:
            attr, kind = PROFILE_KEYS[key]
            fields[attr] = _convert(key, raw, kind)
            continue
        parts = key.split(".")
        if len(parts) == 3 and parts[0] == "accelerator" and parts[2] in ACCELERATOR_KEYS:
            try:
                index = int(parts[1])
            except ValueError:
                raise ProfileValidationError(f"bad accelerator index in {key!r}") from None
            if index < 0:
                raise ProfileValidationError(f"bad accelerator index in {key!r}")
            block = blocks.setdefault(index, {})
            attr = ACCELERATOR_KEYS[parts[2]]
            if attr == "kernel_kinds":
                block[attr] = _parse_kinds(key, raw)
            elif attr == "throughput_Bps":
                block[attr] = _convert(key, raw, float)
            elif attr == "name":
                block[attr] = raw
            else:
                block[attr] = _convert(key, raw, int)
            continue
        raise ProfileValidationError(f"unknown key {key!r}")

    missing = [key for key, (attr, _) in PROFILE_KEYS.items() if attr not in fields]
    if missing:
        raise ProfileValidationError(f"missing keys: {', '.join(missing)}")

    accelerators: List[AcceleratorSpec] = []
    for expected, index in enumerate(sorted(blocks)):
        if index != expected:
            raise ProfileValidationError(
                f"accelerator index {index} overflows the block count (expected {expected})"
            )
        block = blocks[index]
        for required in ("kernel_kinds", "throughput_Bps"):
            if required not in block:
                raise ProfileValidationError(f"accelerator.{index}: missing {required}")
        accelerators.append(AcceleratorSpec(**block))

    profile = HardwareProfile(accelerators=tuple(accelerators), **fields)
    logger.debug("Loaded profile %s with %d accelerators", profile.name, len(accelerators))
    return profile


def _fmt(value) -> str:
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def dump_profile(profile: HardwareProfile) -> str:
    """Render a profile back to the file format."""
    lines = []
    for key, (attr, _) in PROFILE_KEYS.items():
        lines.append(f"{key}={_fmt(getattr(profile, attr))}")
    for i, spec in enumerate(profile.accelerators):
        if spec.name:
            lines.append(f"accelerator.{i}.name={spec.name}")
        kinds = ",".join(sorted(k.value for k in spec.kernel_kinds))
        lines.append(f"accelerator.{i}.kinds={kinds}")
        lines.append(f"accelerator.{i}.throughput_Bps={_fmt(spec.throughput_Bps)}")
        lines.append(f"accelerator.{i}.startup_ns={spec.startup_ns}")
        lines.append(f"accelerator.{i}.slots={spec.slots}")
    return "\n".join(lines) + "\n"


def builtin_profiles() -> List[str]:
    return sorted(p.stem for p in PROFILE_DIR.glob("*.env") if p.stem != "defaults")


def resolve_profile(name_or_path: str) -> HardwareProfile:
    """
    Load a built-in profile by name, or a profile file by path.
    """
    path = Path(name_or_path)
    if not path.exists():
        candidate = PROFILE_DIR / f"{name_or_path}.env"
        if name_or_path in builtin_profiles():
            path = candidate
        else:
            raise ProfileValidationError(
                f"unknown profile {name_or_path!r} (built-in: {', '.join(builtin_profiles())})"
            )
    try:
        text = path.read_text()
    except OSError as e:
        logger.error("Error opening profile: %s", str(e))
        raise ProfileParseError(f"Failed to open profile: {str(e)}") from e
    return load_profile(text)


def load_defaults(source: str) -> CostDefaults:
    """
    Parse the kernel-cost defaults file.

    Per-kind keys are kernel.<kind>.cycles_per_byte and kernel.<kind>.fixed_cycles;
    every other key comes from the fixed table of declared constants.
    """
    pairs = _parse_pairs(source)
    values: Dict[str, object] = {}
    kernel: Dict[KernelKind, Tuple[float, float]] = {}
    for key, raw in pairs.items():
        if key in DEFAULTS_KEYS:
            attr, kind = DEFAULTS_KEYS[key]
            values[attr] = _convert(key, raw, kind)
            continue
        parts = key.split(".")
        if len(parts) == 3 and parts[0] == "kernel" and parts[2] in ("cycles_per_byte", "fixed_cycles"):
            try:
                kind = KernelKind(parts[1])
            except ValueError:
                raise ProfileValidationError(f"unknown kernel kind in {key!r}") from None
            cpb, fixed = kernel.get(kind, (1.0, 0.0))
            number = _convert(key, raw, float)
            if number < 0:
                raise ProfileValidationError(f"{key} must be >= 0")
            kernel[kind] = (number, fixed) if parts[2] == "cycles_per_byte" else (cpb, number)
            continue
        raise ProfileValidationError(f"unknown key {key!r}")
    for attr, value in values.items():
        if value < 0:
            raise ProfileValidationError(f"{attr} must be >= 0")
    digest = hashlib.sha256(source.encode()).hexdigest()
    return CostDefaults(kernel_cycles=kernel, digest=digest, **values)


def resolve_defaults(path: Optional[str] = None) -> CostDefaults:
    target = Path(path) if path else DEFAULTS_FILE
    try:
        text = target.read_text()
    except OSError as e:
        logger.error("Error opening defaults file: %s", str(e))
        raise ProfileParseError(f"Failed to open defaults file: {str(e)}") from e
    return load_defaults(text)


def calibrate(rate: float, cores: float, clock_hz: float) -> float:
    """
    Derive the host storage-stack cost per page from one measured point.

    Args:
        rate: Pages per second
        cores: Host cores consumed at that rate
        clock_hz: Host clock

    Returns:
        cores * clock_hz / rate cycles per page
    """
    if rate <= 0 or clock_hz <= 0 or cores < 0:
        raise ValueError("rate and clock must be > 0, cores >= 0")
    exact = Fraction(str(cores)) * Fraction(str(clock_hz)) / Fraction(str(rate))
    return float(exact)


def write_calibration(defaults_path: str, page_cycles: float) -> str:
    """
    Store storage.page_cycles in a defaults file, seeding it from the built-in
    defaults when it does not exist yet.
    """
    if not os.path.exists(defaults_path):
        shutil.copyfile(DEFAULTS_FILE, defaults_path)
        logger.info("Created defaults file %s from built-in defaults", defaults_path)
    set_key(defaults_path, "storage.page_cycles", _fmt(page_cycles), quote_mode="never")
    return defaults_path
