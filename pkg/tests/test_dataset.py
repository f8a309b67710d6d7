import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modrec.arch import build, default_spec, forward, param_count
from modrec.dataset import (
    GUARD,
    Dataset,
    GenerationConfig,
    build_dataset,
    dataset_hash,
    frame_windows,
    read_dataset,
    read_model,
    split,
    write_dataset,
    write_model,
)
from modrec.errors import ConfigError, FormatError, IoError

SMALL = GenerationConfig(classes=("BPSK", "WBFM", "QAM16"), snrs=(-20, 0, 18), frames_per_cell=10)


@pytest.fixture(scope="module")
def small():
    return build_dataset(SMALL, 42)


def test_default_config_size():
    cfg = GenerationConfig()
    assert cfg.size == 160_000
    assert cfg.frames_per_cell == 160_000 // (10 * 20)
    assert len(cfg.snrs) == 20 and cfg.snrs[0] == -20 and cfg.snrs[-1] == 18


def test_single_cell():
    d = build_dataset(GenerationConfig(classes=("QPSK",), snrs=(4,), frames_per_cell=10), 1)
    assert len(d) == 10
    assert set(d.labels) == {0}
    assert set(d.snrs) == {4}


def test_zero_classes_rejected():
    with pytest.raises(ConfigError):
        build_dataset(GenerationConfig(classes=()), 1)


def test_cell_counts(small):
    counts = small.cell_counts()
    assert len(counts) == 9
    assert set(counts.values()) == {10}
    assert small.class_names == ("BPSK", "WBFM", "QAM16")


def test_frames_have_unit_power(small):
    power = (small.frames.astype(np.float64) ** 2).sum(axis=1).mean(axis=1)
    assert np.all((power >= 0.999) & (power <= 1.001))
    assert small.frames.shape[1:] == (2, 128)


def test_hash_is_stable(small):
    assert dataset_hash(build_dataset(SMALL, 42)) == dataset_hash(small)
    assert dataset_hash(build_dataset(SMALL, 43)) != dataset_hash(small)


def test_workers_do_not_change_output(small):
    assert build_dataset(SMALL, 42, workers=3).equals(small)


@given(st.integers(1, 50), st.integers(1, 256), st.integers(0, 100))
def test_windows_are_disjoint(n, flen, offset):
    windows = frame_windows(n, flen, offset)
    covered = np.zeros(offset + n * flen + 1, dtype=int)
    for a, b in windows:
        assert b - a == flen
        covered[a:b] += 1
    assert covered.max() == 1
    assert covered[:offset].sum() == 0


def test_guard_is_skipped():
    assert frame_windows(2)[0] == (GUARD, GUARD + 128)


# ---------------------------------------------------------------------------
# split


def test_split_ratios_and_stratification(small):
    train, val, test = split(small, 0)
    assert (len(train), len(val), len(test)) == (54, 18, 18)
    for part, n in ((train, 6), (val, 2), (test, 2)):
        assert set(part.cell_counts().values()) == {n}


def test_split_partitions_by_identity(small):
    parts = split(small, 0)
    keys = [set(map(bytes, p.frames.reshape(len(p), -1).view(np.uint8))) for p in parts]
    assert not keys[0] & keys[2] and not keys[0] & keys[1] and not keys[1] & keys[2]
    assert sum(len(k) for k in keys) == len(small)


def test_split_is_seeded(small):
    a = split(small, 5)[0]
    assert a.equals(split(small, 5)[0])
    assert not a.equals(split(small, 6)[0])


def test_paper_profile_split_arithmetic():
    # per cell 800 -> 480 / 160 / 160, over 200 cells
    labels = np.repeat(np.arange(10, dtype=np.uint8), 20 * 800)
    snrs = np.tile(np.repeat(np.arange(-20, 20, 2, dtype=np.int8), 800), 10)
    d = Dataset(np.zeros((160_000, 1, 1), np.float32), labels, snrs, tuple("abcdefghij"))
    train, val, test = split(d, 1)
    assert (len(train), len(val), len(test)) == (96_000, 32_000, 32_000)
    assert set(test.cell_counts().values()) == {160}


def test_split_too_small_cell():
    d = build_dataset(GenerationConfig(classes=("BPSK",), snrs=(0,), frames_per_cell=2), 1)
    with pytest.raises(ConfigError):
        split(d, 0)


# ---------------------------------------------------------------------------
# dataset files


def test_dataset_round_trip(tmp_path, small):
    path = tmp_path / "d.bin"
    write_dataset(small, path)
    back = read_dataset(path)
    assert back.equals(small)
    assert dataset_hash(back) == dataset_hash(small)


def test_dataset_layout(tmp_path):
    d = build_dataset(GenerationConfig(classes=("QPSK", "AM-DSB"), snrs=(-2,), frames_per_cell=5), 3)
    path = tmp_path / "d.bin"
    write_dataset(d, path)
    blob = path.read_bytes()
    assert blob[:4] == b"RML1"
    assert struct.unpack_from("<IIIH", blob, 4) == (1, 10, 128, 2)
    table = bytes([4]) + b"QPSK" + bytes([6]) + b"AM-DSB"
    assert blob[18 : 18 + len(table)] == table
    pos = 18 + len(table)
    assert len(blob) == pos + 10 * (2 + 2 * 128 * 4)
    snr, cls = struct.unpack_from("<bB", blob, pos)
    assert (snr, cls) == (-2, 0)
    i0 = struct.unpack_from("<f", blob, pos + 2)[0]
    q0 = struct.unpack_from("<f", blob, pos + 2 + 128 * 4)[0]
    assert i0 == d.frames[0, 0, 0] and q0 == d.frames[0, 1, 0]


def test_bad_magic(tmp_path, small):
    path = tmp_path / "d.bin"
    write_dataset(small, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError) as info:
        read_dataset(path)
    assert info.value.offset == 0


def test_bad_version(tmp_path, small):
    path = tmp_path / "d.bin"
    write_dataset(small, path)
    blob = bytearray(path.read_bytes())
    blob[4] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError) as info:
        read_dataset(path)
    assert info.value.offset == 4


def test_truncated_examples(tmp_path, small):
    path = tmp_path / "d.bin"
    write_dataset(small, path)
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(FormatError) as info:
        read_dataset(path)
    msg = str(info.value)
    assert "expected" in msg and str(len(small) * 1026) in msg and str(len(small) * 1026 - 7) in msg


def test_missing_dataset_file(tmp_path):
    with pytest.raises(IoError):
        read_dataset(tmp_path / "nope.bin")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**32))
def test_random_datasets_round_trip(n, seed):
    import tempfile

    rng = np.random.default_rng(seed)
    d = Dataset(
        rng.standard_normal((n, 2, 128)).astype(np.float32),
        rng.integers(0, 3, n).astype(np.uint8),
        rng.choice(np.arange(-20, 20, 2), n).astype(np.int8),
        ("a", "bb", "ccc"),
    )
    with tempfile.TemporaryDirectory() as tmp:
        write_dataset(d, f"{tmp}/d.bin")
        assert read_dataset(f"{tmp}/d.bin").equals(d)


# ---------------------------------------------------------------------------
# model files


def test_model_round_trip(tmp_path):
    net = build(default_spec("cnn2"), 3)
    path = tmp_path / "m.bin"
    write_model(net, path)
    back = read_model(path)
    assert back.spec == net.spec
    assert param_count(back.spec) == param_count(net.spec)
    for k in net.params:
        assert back.params[k].tobytes() == net.params[k].tobytes()
    frame = np.random.default_rng(0).standard_normal((2, 128)).astype(np.float32)
    assert np.array_equal(forward(back, frame), forward(net, frame))


@pytest.mark.parametrize("arch", ["resnet4", "densenet4", "cldnn"])
def test_model_round_trip_other_archs(tmp_path, arch):
    net = build(default_spec(arch), 1)
    write_model(net, tmp_path / "m.bin")
    back = read_model(tmp_path / "m.bin")
    assert list(back.params) == list(net.params)


def _model_blob(net):
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        write_model(net, f"{tmp}/m.bin")
        with open(f"{tmp}/m.bin", "rb") as fh:
            return bytearray(fh.read())


def test_model_tensor_count_mismatch(tmp_path):
    net = build(default_spec("cnn2"), 0)
    blob = _model_blob(net)
    spec_len = struct.unpack_from("<I", blob, 8)[0]
    pos = 12 + spec_len
    struct.pack_into("<I", blob, pos, len(net.params) - 1)
    (tmp_path / "m.bin").write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        read_model(tmp_path / "m.bin")


def test_model_shape_mismatch(tmp_path):
    net = build(default_spec("cnn2"), 0)
    blob = _model_blob(net)
    spec_len = struct.unpack_from("<I", blob, 8)[0]
    pos = 12 + spec_len + 4
    name_len = blob[pos]
    dims_at = pos + 1 + name_len + 1
    struct.pack_into("<I", blob, dims_at, 255)
    (tmp_path / "m.bin").write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        read_model(tmp_path / "m.bin")


def test_model_bad_magic(tmp_path):
    (tmp_path / "m.bin").write_bytes(b"RML1" + bytes(20))
    with pytest.raises(FormatError) as info:
        read_model(tmp_path / "m.bin")
    assert info.value.offset == 0


GOLDEN_SHA256 = "732798da6735ea91d8590355250c15f9765d423772d8a9ca59eec488bfaa6e03"


def test_golden_file_bytes(tmp_path):
    import hashlib

    cfg = GenerationConfig(classes=("BPSK", "QAM64", "WBFM"), snrs=(-20, 18), frames_per_cell=3)
    write_dataset(build_dataset(cfg, 2024), tmp_path / "g.bin")
    assert hashlib.sha256((tmp_path / "g.bin").read_bytes()).hexdigest() == GOLDEN_SHA256
