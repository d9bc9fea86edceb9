import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poselab import synthdata as sd
from poselab.errors import (BadMagicError, ChecksumError, DataError, TruncatedFileError,
                            VersionMismatchError)


@pytest.fixture(scope="module")
def small():
    specs = sd.make_category_specs(3, "graded", 5)
    return sd.generate_dataset(specs, 4, 16, 0.01, 9, "train")


# --------------------------------------------------------------------------- #
# Category specs
# --------------------------------------------------------------------------- #

def test_uniform_specs_differ_only_in_id():
    a, b = sd.make_category_specs(2, "uniform", 7)
    da, db = a.to_json(), b.to_json()
    assert da.pop("category") == 0 and db.pop("category") == 1
    assert da == db


def test_graded_amplitude_and_width_nondecreasing():
    specs = sd.make_category_specs(6, "graded", 1)
    amps = [s.amplitude for s in specs]
    widths = [s.e1_max - s.e1_min for s in specs]
    assert amps == sorted(amps) and widths == sorted(widths)
    assert all(a < 0.3 for a in amps)
    assert [s.difficulty_rank for s in specs] == list(range(6))


def test_specs_deterministic():
    assert sd.make_category_specs(6, "graded", 1) == sd.make_category_specs(6, "graded", 1)


def test_specs_reject_small_K_and_bad_profile():
    with pytest.raises(ValueError):
        sd.make_category_specs(1, "graded", 0)
    with pytest.raises(ValueError):
        sd.make_category_specs(3, "spiky", 0)


def test_spec_invariants_enforced():
    with pytest.raises(ValueError):
        sd.CategorySpec(0, 0.0, 1.0, 0.5, 1.0, 0.1, 2, 0)
    with pytest.raises(ValueError):
        sd.CategorySpec(0, 0.5, 1.0, 0.5, 1.0, 0.3, 2, 0)


# --------------------------------------------------------------------------- #
# Sampling
# --------------------------------------------------------------------------- #

def test_noise_free_observation_is_exact_transform():
    spec = sd.make_category_specs(4, "graded", 2)[3]
    inst = sd.sample_instance(spec, 64, 0.0, 123)
    resid = inst.observed - sd.transform(inst.canonical, inst.pose)
    assert np.abs(resid).max() <= 1e-12


def test_identity_pose_leaves_canonical():
    p = np.random.default_rng(0).uniform(-0.5, 0.5, size=(10, 3))
    np.testing.assert_array_equal(sd.transform(p, sd.Pose.identity()), p)


@pytest.mark.parametrize("seed", range(5))
def test_canonical_normalisation(seed):
    for spec in sd.make_category_specs(6, "graded", seed):
        inst = sd.sample_instance(spec, 128, 0.0, seed)
        c = inst.canonical
        assert abs(np.abs(c).max() - 0.5) <= 1e-9
        ext = c.max(axis=0) - c.min(axis=0)
        assert abs(ext.max() - 1.0) <= 1e-9


def test_pose_invariants():
    rng = np.random.default_rng(4)
    for mode in ("isotropic", "per_axis"):
        for _ in range(200):
            p = sd.random_pose(rng, mode)
            np.testing.assert_allclose(p.R.T @ p.R, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(p.R) - 1.0) <= 1e-9
            assert ((p.s >= 0.5) & (p.s <= 2.0)).all()
            assert (np.abs(p.t) <= 1.0).all()


def test_rotation_mean_is_near_zero():
    rng = np.random.default_rng(0)
    mean = sum(sd.random_rotation(rng) for _ in range(10_000)) / 10_000
    assert np.abs(mean).max() <= 0.05


def test_sample_instance_preconditions():
    spec = sd.make_category_specs(2, "uniform", 0)[0]
    with pytest.raises(ValueError):
        sd.sample_instance(spec, 7, 0.0, 0)
    with pytest.raises(ValueError):
        sd.sample_instance(spec, 16, -0.1, 0)


# --------------------------------------------------------------------------- #
# NOCS
# --------------------------------------------------------------------------- #

def test_nocs_quarter_turn_about_z():
    R = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    out = sd.nocs_of(np.array([0.0, 1, 0]), sd.Pose(R, np.zeros(3), np.ones(3)))
    np.testing.assert_allclose(out, [1, 0, 0], atol=1e-15)


def test_nocs_identity_pose():
    x = np.array([0.3, -0.2, 0.1])
    np.testing.assert_array_equal(sd.nocs_of(x, sd.Pose.identity()), x)


def test_nocs_rejects_non_positive_scale():
    with pytest.raises(ValueError):
        sd.nocs_of(np.zeros(3), sd.Pose(np.eye(3), np.zeros(3), np.array([1.0, 0.0, 1.0])))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["isotropic", "per_axis"]))
def test_nocs_inverts_forward_map(seed, mode):
    rng = np.random.default_rng(seed)
    pose = sd.random_pose(rng, mode)
    p = rng.uniform(-0.5, 0.5, size=(20, 3))
    np.testing.assert_allclose(sd.nocs_of(sd.transform(p, pose), pose), p, atol=1e-10)


# --------------------------------------------------------------------------- #
# Datasets and the file format
# --------------------------------------------------------------------------- #

def test_balanced_counts(small):
    assert small.counts() == {0: 4, 1: 4, 2: 4}


def test_generation_is_bit_identical():
    specs = sd.make_category_specs(3, "graded", 5)
    a = sd.generate_dataset(specs, 3, 16, 0.01, 9, "train")
    b = sd.generate_dataset(specs, 3, 16, 0.01, 9, "train")
    assert sd.dataset_bytes(a) == sd.dataset_bytes(b)


def test_splits_differ():
    specs = sd.make_category_specs(2, "graded", 5)
    a = sd.generate_dataset(specs, 2, 16, 0.0, 9, "train")
    b = sd.generate_dataset(specs, 2, 16, 0.0, 9, "test")
    assert [i.seed for i in a.instances] != [i.seed for i in b.instances]


def test_round_trip_bit_exact(small, tmp_path):
    path = tmp_path / "d.dcpd"
    sd.write_dataset(small, path)
    back = sd.read_dataset(path)
    assert sd.datasets_equal(small, back)
    assert sd.dataset_bytes(back) == path.read_bytes()


def test_empty_dataset_round_trip(tmp_path):
    d = sd.Dataset(2, 16, 0, "train", sd.make_category_specs(2, "uniform", 0))
    sd.write_dataset(d, tmp_path / "e.dcpd")
    back = sd.read_dataset(tmp_path / "e.dcpd")
    assert back.instances == [] and sd.datasets_equal(d, back)


def test_corrupt_payload_byte_is_checksum_error(small):
    buf = bytearray(sd.dataset_bytes(small))
    buf[len(buf) // 2] ^= 0xFF
    with pytest.raises(ChecksumError) as exc:
        sd.parse_dataset(bytes(buf))
    assert exc.value.code == "E_CHECKSUM"


def test_distinct_error_codes(small):
    buf = sd.dataset_bytes(small)
    errors = {}
    for name, bad in {
        "magic": b"XXXX" + buf[4:],
        "version": buf[:4] + struct.pack("<H", 9) + buf[6:],
        "truncated": buf[:-100],
        "checksum": buf[:-4] + struct.pack("<I", zlib.crc32(buf[:-4]) ^ 1),
    }.items():
        with pytest.raises(DataError) as exc:
            sd.parse_dataset(bad)
        errors[name] = type(exc.value)
    assert errors == {"magic": BadMagicError, "version": VersionMismatchError,
                      "truncated": TruncatedFileError, "checksum": ChecksumError}
    assert len({e.code for e in errors.values()}) == 4


def test_coordinates_are_float32_exact(small):
    for inst in small.instances:
        assert np.array_equal(inst.observed, inst.observed.astype(np.float32).astype(np.float64))


# --------------------------------------------------------------------------- #
# Bounded rotations
# --------------------------------------------------------------------------- #

def test_bounded_rotation_angle_and_validity():
    rng = np.random.default_rng(2)
    for _ in range(300):
        p = sd.random_pose(rng, "isotropic", 45.0)
        np.testing.assert_allclose(p.R.T @ p.R, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(p.R) - 1.0) <= 1e-12
        ang = np.degrees(np.arccos(np.clip((np.trace(p.R) - 1) / 2, -1, 1)))
        assert ang <= 45.0 + 1e-9


def test_default_rotation_range_is_unchanged():
    a = sd.random_pose(np.random.default_rng(5))
    b = sd.random_pose(np.random.default_rng(5), "isotropic", 180.0)
    np.testing.assert_array_equal(a.R, b.R)


def test_bounded_range_validated():
    with pytest.raises(ValueError):
        sd.random_pose(np.random.default_rng(0), "isotropic", 0.0)
    with pytest.raises(ValueError):
        sd.random_pose(np.random.default_rng(0), "isotropic", 190.0)


def test_bounded_range_round_trips(tmp_path):
    specs = sd.make_category_specs(2, "graded", 0)
    d = sd.generate_dataset(specs, 2, 16, 0.0, 3, "train", max_rotation_deg=30.0)
    sd.write_dataset(d, tmp_path / "b.dcpd")
    back = sd.read_dataset(tmp_path / "b.dcpd")
    assert back.max_rotation_deg == 30.0 and sd.datasets_equal(d, back)
