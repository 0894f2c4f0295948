"""Feature sets, coordinate normalization, binary files and synthetic pairs."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

UNIT_TOL = 1e-6
FEATURE_MAGIC = b"RMF1"
GT_MAGIC = b"RMG1"
_FEATURE_HEADER = struct.Struct("<4sIIII")
_GT_HEADER = struct.Struct("<4s9dI")


@dataclass
class FeatureSet:
    """Keypoints and unit-norm descriptors of one image."""

    image_size: tuple[int, int]
    positions: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def channels(self) -> int:
        return self.descriptors.shape[1]

    def validate(self) -> None:
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ConfigError(f"image size must be positive, got {self.image_size}")
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ConfigError(f"positions must be N x 2, got {self.positions.shape}")
        if self.descriptors.ndim != 2 or self.descriptors.shape[0] != self.n:
            raise ConfigError("descriptor rows must match the number of keypoints")
        if self.n < 1:
            raise ConfigError("a feature set needs at least one keypoint")
        x, y = self.positions[:, 0], self.positions[:, 1]
        if np.any(x < 0) or np.any(x >= w) or np.any(y < 0) or np.any(y >= h):
            raise ConfigError("keypoint outside the image")
        norms = np.linalg.norm(self.descriptors, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ConfigError("descriptors must have unit L2 norm")

    def permuted(self, perm: np.ndarray) -> "FeatureSet":
        return FeatureSet(self.image_size, self.positions[perm], self.descriptors[perm])


@dataclass
class GroundTruth:
    homography: np.ndarray
    inlier_pairs: np.ndarray  # (n, 2) int
    unmatched_a: np.ndarray
    unmatched_b: np.ndarray

    def __post_init__(self):
        self.homography = np.asarray(self.homography, dtype=np.float64).reshape(3, 3)
        self.inlier_pairs = np.asarray(self.inlier_pairs, dtype=np.int64).reshape(-1, 2)
        self.unmatched_a = np.asarray(self.unmatched_a, dtype=np.int64)
        self.unmatched_b = np.asarray(self.unmatched_b, dtype=np.int64)

    @classmethod
    def from_pairs(cls, homography, pairs, n_a: int, n_b: int) -> "GroundTruth":
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        ua = np.setdiff1d(np.arange(n_a), pairs[:, 0])
        ub = np.setdiff1d(np.arange(n_b), pairs[:, 1])
        return cls(homography, pairs, ua, ub)


@dataclass
class SynthConfig:
    n_points: int = 64
    c: int = 32
    descriptor_noise_sigma: float = 0.1
    outlier_fraction: float = 0.2
    max_rotation: float = math.radians(15.0)
    max_scale: float = 0.2
    max_translation: float = 0.1
    max_perspective: float = 1e-4
    position_jitter: float = 0.0
    image_size: tuple[int, int] = (640, 480)
    rng_seed: int = 0

    def validate(self) -> None:
        if self.n_points < 1 or self.c < 1:
            raise ConfigError("n_points and c must be positive")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ConfigError("outlier_fraction must lie in [0, 1]")
        for name in (
            "descriptor_noise_sigma",
            "max_rotation",
            "max_scale",
            "max_translation",
            "max_perspective",
            "position_jitter",
        ):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.max_scale >= 1.0:
            raise ConfigError("max_scale must be below 1")


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def normalize_positions(fs: FeatureSet) -> np.ndarray:
    """Center on the image and divide by half the longer side."""
    w, h = fs.image_size
    center = np.array([w / 2.0, h / 2.0])
    return (fs.positions - center) / (max(w, h) / 2.0)


def apply_homography(hmat: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    homog = np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1) @ hmat.T
    return homog[:, :2] / homog[:, 2:3]


def reprojection_error(hmat: np.ndarray, pts_a: np.ndarray, pts_b: np.ndarray) -> np.ndarray:
    return np.linalg.norm(apply_homography(hmat, pts_a) - pts_b, axis=1)


def random_homography(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    """Rotation/scale/translation about the image center plus a small projective term."""
    w, h = cfg.image_size
    angle = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
    scale = 1.0 + rng.uniform(-cfg.max_scale, cfg.max_scale)
    tx, ty = rng.uniform(-cfg.max_translation, cfg.max_translation, size=2) * np.array([w, h])
    px, py = rng.uniform(-cfg.max_perspective, cfg.max_perspective, size=2)
    cx, cy = w / 2.0, h / 2.0
    to_center = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    cos, sin = math.cos(angle), math.sin(angle)
    similarity = np.array([[scale * cos, -scale * sin, 0], [scale * sin, scale * cos, 0], [0, 0, 1.0]])
    projective = np.array([[1, 0, 0], [0, 1, 0], [px, py, 1.0]])
    back = np.array([[1, 0, cx + tx], [0, 1, cy + ty], [0, 0, 1.0]])
    return back @ projective @ similarity @ to_center


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# keeps float32-rounded coordinates strictly inside the image
_EDGE = 1e-3


def _in_bounds(pts: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    w, h = size
    x, y = pts[:, 0], pts[:, 1]
    return (x >= 0) & (x <= w - _EDGE) & (y >= 0) & (y <= h - _EDGE)


def generate_pair(cfg: SynthConfig) -> tuple[FeatureSet, FeatureSet, GroundTruth]:
    """Sample a homography-related pair of feature sets.

    Each image gets ``n_points`` keypoints.  ``round(outlier_fraction * n)``
    of them are distractors with fresh random positions and descriptors.  The
    rest are sampled in A and warped into B (points leaving B are resampled).
    Matched descriptors share a base vector, perturbed per image by
    N(0, sigma^2) per component and renormalized.  Both sets are shuffled.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.rng_seed)
    w, h = cfg.image_size
    n = cfg.n_points
    n_out = int(round(cfg.outlier_fraction * n))
    n_in = n - n_out

    while True:
        hmat = random_homography(rng, cfg)
        if abs(np.linalg.det(hmat)) > 1e-9 and np.linalg.cond(hmat) < 1e12:
            break

    pts_a = np.empty((0, 2))
    pts_b = np.empty((0, 2))
    for _ in range(1000):
        if len(pts_a) >= n_in:
            break
        cand = rng.uniform((0.0, 0.0), (w - _EDGE, h - _EDGE), size=(max(2 * (n_in - len(pts_a)), 8), 2))
        warped = apply_homography(hmat, cand)
        keep = _in_bounds(warped, cfg.image_size)
        pts_a = np.concatenate([pts_a, cand[keep]])
        pts_b = np.concatenate([pts_b, warped[keep]])
    else:
        raise ConfigError("homography maps too little of image A into image B")
    pts_a, pts_b = pts_a[:n_in], pts_b[:n_in]
    if cfg.position_jitter > 0:
        pts_b = np.clip(
            pts_b + rng.normal(0.0, cfg.position_jitter, size=pts_b.shape),
            0.0,
            np.array([w - _EDGE, h - _EDGE]),
        )

    base = _unit_rows(rng.normal(size=(n_in, cfg.c)))
    sigma = cfg.descriptor_noise_sigma
    desc_a = _unit_rows(base + sigma * rng.normal(size=base.shape))
    desc_b = _unit_rows(base + sigma * rng.normal(size=base.shape))

    out_pos_a = rng.uniform((0.0, 0.0), (w - _EDGE, h - _EDGE), size=(n_out, 2))
    out_pos_b = rng.uniform((0.0, 0.0), (w - _EDGE, h - _EDGE), size=(n_out, 2))
    out_desc_a = _unit_rows(rng.normal(size=(n_out, cfg.c)))
    out_desc_b = _unit_rows(rng.normal(size=(n_out, cfg.c)))

    pos_a = np.concatenate([pts_a, out_pos_a])
    dsc_a = np.concatenate([desc_a, out_desc_a])
    pos_b = np.concatenate([pts_b, out_pos_b])
    dsc_b = np.concatenate([desc_b, out_desc_b])

    perm_a = rng.permutation(n)
    perm_b = rng.permutation(n)
    inv_a = np.argsort(perm_a)
    inv_b = np.argsort(perm_b)
    fs_a = FeatureSet(cfg.image_size, pos_a[perm_a], dsc_a[perm_a])
    fs_b = FeatureSet(cfg.image_size, pos_b[perm_b], dsc_b[perm_b])
    pairs = np.stack([inv_a[:n_in], inv_b[:n_in]], axis=1)
    pairs = pairs[np.argsort(pairs[:, 0], kind="stable")]
    return fs_a, fs_b, GroundTruth.from_pairs(hmat, pairs, n, n)


# ---------------------------------------------------------------------------
# binary files
# ---------------------------------------------------------------------------


def feature_bytes(fs: FeatureSet) -> bytes:
    w, h = fs.image_size
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, w, h, fs.n, fs.channels)
    return (
        header
        + np.ascontiguousarray(fs.positions, dtype="<f4").tobytes()
        + np.ascontiguousarray(fs.descriptors, dtype="<f4").tobytes()
    )


def write_features(fs: FeatureSet, path) -> None:
    """Write a feature file.  Values are stored as little-endian float32."""
    fs.validate()
    Path(path).write_bytes(feature_bytes(fs))


def parse_features(data: bytes) -> FeatureSet:
    if len(data) < _FEATURE_HEADER.size:
        raise FormatError("truncated feature header", offset=len(data))
    magic, w, h, n, c = _FEATURE_HEADER.unpack_from(data, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}", offset=0)
    off = _FEATURE_HEADER.size
    expected = off + 4 * n * 2 + 4 * n * c
    if len(data) < expected:
        raise FormatError(f"truncated payload: need {expected} bytes, have {len(data)}", offset=len(data))
    if len(data) > expected:
        raise FormatError(f"trailing bytes after payload ({len(data) - expected})", offset=expected)
    if n < 1:
        raise FormatError("feature file holds no keypoints", offset=12)
    pos = np.frombuffer(data, dtype="<f4", count=n * 2, offset=off).reshape(n, 2)
    off_desc = off + 8 * n
    desc = np.frombuffer(data, dtype="<f4", count=n * c, offset=off_desc).reshape(n, c)
    fs = FeatureSet((w, h), pos.astype(np.float64), desc.astype(np.float64))
    norms = np.linalg.norm(fs.descriptors, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
    if bad.size:
        raise FormatError(f"descriptor {bad[0]} is not unit norm", offset=off_desc + 4 * c * int(bad[0]))
    try:
        fs.validate()
    except ConfigError as exc:
        raise FormatError(str(exc), offset=off) from exc
    return fs


def read_features(path) -> FeatureSet:
    return parse_features(Path(path).read_bytes())


def write_ground_truth(gt: GroundTruth, path) -> None:
    pairs = np.ascontiguousarray(gt.inlier_pairs, dtype="<u4")
    header = _GT_HEADER.pack(GT_MAGIC, *gt.homography.reshape(-1), len(pairs))
    Path(path).write_bytes(header + pairs.tobytes())


def read_ground_truth(path, n_a: int, n_b: int) -> GroundTruth:
    """Read a ground-truth file; unmatched lists are rebuilt from the counts."""
    data = Path(path).read_bytes()
    if len(data) < _GT_HEADER.size:
        raise FormatError("truncated ground-truth header", offset=len(data))
    magic, *vals = _GT_HEADER.unpack_from(data, 0)
    if magic != GT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {GT_MAGIC!r}", offset=0)
    hmat, n_in = np.array(vals[:9]), vals[9]
    expected = _GT_HEADER.size + 8 * n_in
    if len(data) != expected:
        raise FormatError(f"ground-truth payload size {len(data)} != {expected}", offset=min(len(data), expected))
    pairs = np.frombuffer(data, dtype="<u4", offset=_GT_HEADER.size).reshape(-1, 2).astype(np.int64)
    if pairs.size and (pairs[:, 0].max() >= n_a or pairs[:, 1].max() >= n_b):
        raise FormatError("inlier index out of range", offset=_GT_HEADER.size)
    return GroundTruth.from_pairs(hmat, pairs, n_a, n_b)


@dataclass
class PairFiles:
    a: Path
    b: Path
    gt: Path

    @classmethod
    def in_dir(cls, directory, stem: str) -> "PairFiles":
        d = Path(directory)
        return cls(d / f"{stem}_a.rmf", d / f"{stem}_b.rmf", d / f"{stem}_gt.rmg")


def load_pair(files: PairFiles) -> tuple[FeatureSet, FeatureSet, GroundTruth]:
    fa = read_features(files.a)
    fb = read_features(files.b)
    return fa, fb, read_ground_truth(files.gt, fa.n, fb.n)


def list_pairs(directory) -> list[PairFiles]:
    stems = sorted(p.name[: -len("_gt.rmg")] for p in Path(directory).glob("*_gt.rmg"))
    return [PairFiles.in_dir(directory, s) for s in stems]
