import pytest

from dpdpu.hwmodel import GiB, ProfileParseError, ProfileValidationError, UnitClass
from dpdpu.kernels import KernelKind
from dpdpu.profiles import (
    builtin_profiles,
    calibrate,
    dump_profile,
    load_defaults,
    load_profile,
    resolve_defaults,
    resolve_profile,
    write_calibration,
)
from dpdpu.scenarios import ScenarioContext, bench_storage_io

BASE = """\
name=tiny
host.cores=4
host.clock_hz=3e9
dpu.cores=2
dpu.clock_hz=2e9
dpu.mem_bytes=4294967296
nic.bw_bps=100e9
nic.lat_ns=1000
pcie.bw_bps=256e9
pcie.lat_ns=500
dma.poll_ns=200
"""


def test_builtin_profiles():
    assert builtin_profiles() == ["bf2", "bf3"]


def test_bf2(bf2):
    assert bf2.dpu_cores == 8
    assert bf2.dpu_clock_hz == 2.5e9
    assert bf2.dpu_mem_bytes == 16 * GiB
    assert bf2.nic_bw_bps == 100e9
    assert len(bf2.accelerators) == 4
    assert bf2.accelerators_for(KernelKind.COMPRESS) == [1]
    assert bf2.accelerators_for(KernelKind.DEDUP) == [3]


def test_bf3_has_no_regex_engine(bf3):
    assert bf3.accelerators_for(KernelKind.REGEX_MATCH) == []
    assert bf3.count(UnitClass.DPU_CPU) == 16


def test_profile_without_accelerators():
    profile = load_profile(BASE)
    assert profile.accelerators == ()
    assert profile.name == "tiny"


def test_bf2_without_compression_accelerator(bf2):
    text = "\n".join(
        line for line in dump_profile(bf2).splitlines() if not line.startswith("accelerator.")
    )
    assert load_profile(text).accelerators_for(KernelKind.COMPRESS) == []


def test_dump_then_load(bf2, bf3):
    assert load_profile(dump_profile(bf2)) == bf2
    assert load_profile(dump_profile(bf3)) == bf3


def test_comments_and_blank_lines_are_ignored():
    assert load_profile("# header\n\n" + BASE + "\n# trailer\n").host_cores == 4


@pytest.mark.parametrize(
    "extra, error",
    [
        ("host.cores=8\n", ProfileParseError),
        ("bogus.key=1\n", ProfileValidationError),
        ("accelerator.1.kinds=compress\naccelerator.1.throughput_Bps=1e9\n", ProfileValidationError),
        ("accelerator.0.kinds=gzip\naccelerator.0.throughput_Bps=1e9\n", ProfileValidationError),
        ("accelerator.0.kinds=compress\n", ProfileValidationError),
        ("accelerator.x.kinds=compress\n", ProfileValidationError),
        ("dangling\n", ProfileParseError),
    ],
)
def test_profile_errors(extra, error):
    with pytest.raises(error):
        load_profile(BASE + extra)


def test_missing_key():
    text = "\n".join(line for line in BASE.splitlines() if not line.startswith("nic.bw_bps"))
    with pytest.raises(ProfileValidationError, match="nic.bw_bps"):
        load_profile(text)


@pytest.mark.parametrize("key, value", [("host.cores", "2.5"), ("dpu.cores", "0"), ("pcie.bw_bps", "fast")])
def test_bad_values(key, value):
    text = "\n".join(
        f"{key}={value}" if line.startswith(key + "=") else line for line in BASE.splitlines()
    )
    with pytest.raises(ProfileValidationError):
        load_profile(text)


def test_unknown_profile_name():
    with pytest.raises(ProfileValidationError, match="bf2"):
        resolve_profile("bf9")


def test_profile_from_path(tmp_path):
    path = tmp_path / "tiny.env"
    path.write_text(BASE)
    assert resolve_profile(str(path)).name == "tiny"


def test_defaults(costs):
    assert costs.kernel_cycles[KernelKind.COMPRESS] == (50.0, 20000.0)
    assert costs.storage_page_cycles == 18000
    assert costs.ring_capacity == 1024
    assert len(costs.digest) == 64


def test_defaults_digest_tracks_content():
    a = load_defaults("storage.page_cycles=18000\n")
    b = load_defaults("storage.page_cycles=18001\n")
    assert a.digest != b.digest
    assert a.storage_page_cycles == 18000


@pytest.mark.parametrize(
    "text", ["kernel.gzip.fixed_cycles=1\n", "kernel.compress.fixed_cycles=-1\n", "nope=1\n", "ssd.lat_ns=-5\n"]
)
def test_defaults_errors(text):
    with pytest.raises(ProfileValidationError):
        load_defaults(text)


def test_missing_defaults_file(tmp_path):
    with pytest.raises(ProfileParseError):
        resolve_defaults(str(tmp_path / "absent.env"))


def test_calibrate():
    assert calibrate(450000, 2.7, 3e9) == 18000
    assert calibrate(450000, 0, 3e9) == 0
    with pytest.raises(ValueError):
        calibrate(0, 1, 3e9)


def test_write_calibration_creates_file(tmp_path, costs):
    path = tmp_path / "defaults.env"
    write_calibration(str(path), 12345)
    updated = resolve_defaults(str(path))
    assert updated.storage_page_cycles == 12345
    assert updated.kernel_cycles == costs.kernel_cycles
    assert "storage.page_cycles=12345" in path.read_text()


def test_calibration_round_trip(tmp_path, bf2):
    path = tmp_path / "defaults.env"
    write_calibration(str(path), calibrate(300000, 1.5, bf2.host_clock_hz))
    ctx = ScenarioContext(bf2, resolve_defaults(str(path)), seed=1)
    report = bench_storage_io(ctx, rate=300000, modes=("host",), duration_ms=10)
    assert report.rows[0]["host_core_equivalents"] == pytest.approx(1.5, abs=1e-9)
