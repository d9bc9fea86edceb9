"""Synthetic object categories, 9DoF poses and the DCPD dataset file format.

Shapes are tapered superellipsoids with a radial sinusoidal bump.  A category
fixes the semi-axes and taper and gives ranges for the two shape exponents;
each instance draws its own exponents, which is the intra-category variation.
The ``graded`` profile widens the exponent ranges and raises the bump
amplitude and frequency with the category index.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ChecksumError, TruncatedFileError, VersionMismatchError

MAGIC = b"DCPD"
VERSION = 1
SCALE_MIN, SCALE_MAX = 0.5, 2.0
MAX_AMPLITUDE = 0.25

SPLIT_CODES = {"train": 0, "test": 1, "val": 2, "pilot": 3}


@dataclass(frozen=True)
class CategorySpec:
    category: int
    e1_min: float
    e1_max: float
    e2_min: float
    e2_max: float
    amplitude: float
    frequency: int
    difficulty_rank: int
    axes: tuple[float, float, float] = (1.0, 0.7, 0.45)
    taper: tuple[float, float] = (0.3, 0.3)

    def __post_init__(self):
        if min(self.e1_min, self.e2_min) <= 0 or self.e1_min > self.e1_max or self.e2_min > self.e2_max:
            raise ValueError(f"bad exponent ranges in category {self.category}")
        if not 0 <= self.amplitude < 0.3:
            raise ValueError("bump amplitude must be in [0, 0.3)")

    def to_json(self) -> dict:
        d = asdict(self)
        d["axes"] = list(self.axes)
        d["taper"] = list(self.taper)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CategorySpec":
        d = dict(d)
        d["axes"] = tuple(d["axes"])
        d["taper"] = tuple(d["taper"])
        return cls(**d)


@dataclass
class Pose:
    R: np.ndarray
    t: np.ndarray
    s: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.R.ravel(), self.t, self.s])

    @classmethod
    def from_vector(cls, v) -> "Pose":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:9].reshape(3, 3).copy(), v[9:12].copy(), v[12:15].copy())

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3), np.ones(3))


@dataclass
class Instance:
    category: int
    seed: int
    pose: Pose
    canonical: np.ndarray
    observed: np.ndarray
    sigma: float = 0.0


@dataclass
class Dataset:
    K: int
    N: int
    seed: int
    split: str
    specs: list[CategorySpec]
    instances: list[Instance] = field(default_factory=list)
    G: int = 3
    sigma: float = 0.0
    scale_mode: str = "isotropic"
    max_rotation_deg: float = 180.0

    def header(self) -> dict:
        return {
            "K": self.K,
            "G": self.G,
            "N": self.N,
            "seed": self.seed,
            "split": self.split,
            "sigma": self.sigma,
            "scale_mode": self.scale_mode,
            "max_rotation_deg": self.max_rotation_deg,
            "count": len(self.instances),
            "specs": [s.to_json() for s in self.specs],
        }

    def by_category(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {c: [] for c in range(self.K)}
        for i, inst in enumerate(self.instances):
            out[inst.category].append(i)
        return out

    def counts(self) -> dict[int, int]:
        return {c: len(ix) for c, ix in self.by_category().items()}


# --------------------------------------------------------------------------- #
# Category specs
# --------------------------------------------------------------------------- #

def make_category_specs(K: int, heterogeneity: str = "graded", seed: int = 0) -> list[CategorySpec]:
    """Category specs for ``K`` categories.

    ``uniform`` gives K copies of one spec; ``graded`` spreads exponent-range
    width and bump amplitude linearly from category 0 (easiest) to K-1.
    """
    if K < 2:
        raise ValueError("need at least 2 categories")
    if heterogeneity not in ("uniform", "graded"):
        raise ValueError(f"unknown heterogeneity profile {heterogeneity!r}")
    rng = np.random.default_rng(seed)

    def draw_geometry():
        axes = (1.0, float(rng.uniform(0.55, 0.8)), float(rng.uniform(0.3, 0.5)))
        taper = tuple(float(x) for x in rng.uniform(0.2, 0.45, size=2) * rng.choice([-1, 1], size=2))
        return axes, taper

    specs = []
    if heterogeneity == "uniform":
        axes, taper = draw_geometry()
        for c in range(K):
            specs.append(CategorySpec(c, 0.8, 1.2, 0.8, 1.2, 0.1, 3, 0, axes, taper))
        return specs

    for c in range(K):
        frac = c / (K - 1)
        width = 0.1 + 1.1 * frac
        axes, taper = draw_geometry()
        specs.append(CategorySpec(
            category=c,
            e1_min=1.0 - width / 2, e1_max=1.0 + width / 2,
            e2_min=1.0 - width / 2, e2_max=1.0 + width / 2,
            amplitude=MAX_AMPLITUDE * frac,
            frequency=2 + c,
            difficulty_rank=c,
            axes=axes,
            taper=taper,
        ))
    return specs


# --------------------------------------------------------------------------- #
# Sampling
# --------------------------------------------------------------------------- #

def _signed_pow(x, e):
    return np.sign(x) * np.abs(x) ** e


def superellipsoid_radius(dirs: np.ndarray, axes, e1: float, e2: float) -> np.ndarray:
    """Distance from the origin to the superellipsoid surface along unit ``dirs``."""
    a1, a2, a3 = axes
    x, y, z = np.abs(dirs[:, 0]) / a1, np.abs(dirs[:, 1]) / a2, np.abs(dirs[:, 2]) / a3
    xy = (x ** (2.0 / e2) + y ** (2.0 / e2)) ** (e2 / e1)
    return (xy + z ** (2.0 / e1)) ** (-e1 / 2.0)


def canonical_points(spec: CategorySpec, e1: float, e2: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` surface points, bbox-centred and scaled to unit max extent."""
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    r = superellipsoid_radius(dirs, spec.axes, e1, e2)
    azim = np.arctan2(dirs[:, 1], dirs[:, 0])
    polar = np.arccos(np.clip(dirs[:, 2], -1.0, 1.0))
    r = r * (1.0 + spec.amplitude * np.sin(spec.frequency * azim) * np.sin(spec.frequency * polar))
    p = dirs * r[:, None]
    a1, _, a3 = spec.axes
    kz, kx = spec.taper
    p[:, 0] *= 1.0 + kz * p[:, 2] / a3
    p[:, 1] *= 1.0 + kx * p[:, 0] / a1
    lo, hi = p.min(axis=0), p.max(axis=0)
    p = (p - (lo + hi) / 2.0) / (hi - lo).max()
    # pin the extreme coordinate to exactly +-0.5
    return np.clip(p, -0.5, 0.5)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation via a uniformly sampled unit quaternion."""
    u1, u2, u3 = rng.uniform(size=3)
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    w, x, y, z = a * np.sin(2 * np.pi * u2), a * np.cos(2 * np.pi * u2), b * np.sin(2 * np.pi * u3), b * np.cos(2 * np.pi * u3)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def bounded_rotation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    """Uniform axis, angle uniform in [0, max_deg]; Rodrigues form."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = np.radians(rng.uniform(0.0, max_deg))
    Kx = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(ang) * Kx + (1.0 - np.cos(ang)) * (Kx @ Kx)


def random_pose(rng: np.random.Generator, scale_mode: str = "isotropic",
                max_rotation_deg: float = 180.0) -> Pose:
    """Haar rotation by default; a smaller ``max_rotation_deg`` bounds the angle."""
    if not 0.0 < max_rotation_deg <= 180.0:
        raise ValueError(f"max_rotation_deg must lie in (0, 180], got {max_rotation_deg}")
    R = random_rotation(rng) if max_rotation_deg == 180.0 else bounded_rotation(rng, max_rotation_deg)
    t = rng.uniform(-1.0, 1.0, size=3)
    lo, hi = np.log(SCALE_MIN), np.log(SCALE_MAX)
    if scale_mode == "isotropic":
        s = np.full(3, np.exp(rng.uniform(lo, hi)))
    elif scale_mode == "per_axis":
        s = np.exp(rng.uniform(lo, hi, size=3))
    else:
        raise ValueError(f"unknown scale_mode {scale_mode!r}")
    return Pose(R, t, s)


def transform(points: np.ndarray, pose: Pose) -> np.ndarray:
    """Canonical -> scene: R (s * p) + t."""
    return (points * pose.s) @ pose.R.T + pose.t


def nocs_of(x, pose: Pose) -> np.ndarray:
    """Scene -> canonical: R^T (x - t) / s.  Works on a point or an (n, 3) array."""
    s = np.asarray(pose.s, dtype=np.float64)
    if (s <= 0).any():
        raise ValueError("pose scale must be positive")
    return ((np.asarray(x, dtype=np.float64) - pose.t) @ pose.R) / s


def sample_instance(spec: CategorySpec, N: int, sigma: float, seed: int,
                    scale_mode: str = "isotropic", max_rotation_deg: float = 180.0) -> Instance:
    if N < 8:
        raise ValueError("N must be at least 8")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    e1 = rng.uniform(spec.e1_min, spec.e1_max)
    e2 = rng.uniform(spec.e2_min, spec.e2_max)
    canon = canonical_points(spec, e1, e2, N, rng)
    pose = random_pose(rng, scale_mode, max_rotation_deg)
    observed = transform(canon, pose)
    if sigma > 0:
        observed = observed + rng.normal(scale=sigma, size=observed.shape)
    return Instance(spec.category, int(seed), pose, canon, observed, float(sigma))


def _quantize(inst: Instance) -> Instance:
    f32 = lambda a: a.astype(np.float32).astype(np.float64)  # noqa: E731
    return Instance(inst.category, inst.seed, inst.pose, f32(inst.canonical), f32(inst.observed), inst.sigma)


def generate_dataset(specs: list[CategorySpec], per_category: int, N: int, sigma: float, seed: int,
                     split: str = "train", G: int = 3, scale_mode: str = "isotropic",
                     max_rotation_deg: float = 180.0) -> Dataset:
    """Build a dataset whose coordinates are exactly float32-representable."""
    K = len(specs)
    code = SPLIT_CODES.get(split)
    if code is None:
        raise ValueError(f"unknown split {split!r}")
    seeds = np.random.SeedSequence([seed, code]).generate_state(K * per_category, dtype=np.uint32)
    instances = []
    for c, spec in enumerate(specs):
        for j in range(per_category):
            s = int(seeds[c * per_category + j])
            instances.append(_quantize(sample_instance(spec, N, sigma, s, scale_mode, max_rotation_deg)))
    return Dataset(K, N, seed, split, list(specs), instances, G, sigma, scale_mode,
                   float(max_rotation_deg))


# --------------------------------------------------------------------------- #
# File format
# --------------------------------------------------------------------------- #

_REC_HEAD = struct.Struct("<HI15d")


def _record_size(N: int) -> int:
    return _REC_HEAD.size + 2 * N * 3 * 4


def dataset_bytes(d: Dataset) -> bytes:
    header = json.dumps(d.header(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(header)), header]
    for inst in d.instances:
        parts.append(_REC_HEAD.pack(inst.category, inst.seed, *inst.pose.to_vector()))
        parts.append(np.asarray(inst.canonical, dtype="<f4").tobytes())
        parts.append(np.asarray(inst.observed, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def write_dataset(d: Dataset, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dataset_bytes(d))
    tmp.replace(path)


def parse_dataset(buf: bytes) -> Dataset:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("not a DCPD dataset file")
    if len(buf) < 10:
        raise TruncatedFileError("file ends inside the preamble")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise VersionMismatchError(f"dataset version {version}, expected {VERSION}")
    if len(buf) < 10 + hlen + 4:
        raise TruncatedFileError("file ends inside the header")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    try:
        header = json.loads(buf[10:10 + hlen].decode("utf-8"))
        expected = 10 + hlen + header["count"] * _record_size(header["N"]) + 4
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError):
        header, expected = None, None
    if expected is not None and len(buf) < expected:
        raise TruncatedFileError(f"expected {expected} bytes, found {len(buf)}")
    if zlib.crc32(buf[:-4]) != crc:
        raise ChecksumError("payload CRC32 mismatch")
    if header is None or len(buf) != expected:
        raise ChecksumError("header inconsistent with payload")

    N = header["N"]
    n3 = N * 3
    off = 10 + hlen
    instances = []
    for _ in range(header["count"]):
        rec = _REC_HEAD.unpack_from(buf, off)
        off += _REC_HEAD.size
        canon = np.frombuffer(buf, dtype="<f4", count=n3, offset=off).reshape(N, 3).astype(np.float64)
        off += n3 * 4
        obs = np.frombuffer(buf, dtype="<f4", count=n3, offset=off).reshape(N, 3).astype(np.float64)
        off += n3 * 4
        instances.append(Instance(rec[0], rec[1], Pose.from_vector(rec[2:]), canon, obs, header["sigma"]))
    return Dataset(
        K=header["K"], N=N, seed=header["seed"], split=header["split"],
        specs=[CategorySpec.from_json(s) for s in header["specs"]],
        instances=instances, G=header["G"], sigma=header["sigma"],
        scale_mode=header.get("scale_mode", "isotropic"),
        max_rotation_deg=float(header.get("max_rotation_deg", 180.0)),
    )


def read_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if a.header() != b.header():
        return False
    for x, y in zip(a.instances, b.instances):
        if (x.category, x.seed) != (y.category, y.seed):
            return False
        if not np.array_equal(x.pose.to_vector(), y.pose.to_vector()):
            return False
        if not (np.array_equal(x.canonical, y.canonical) and np.array_equal(x.observed, y.observed)):
            return False
    return True
