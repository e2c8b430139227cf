"""Landmark-driven face alignment.

A similarity transform (rotation + uniform scale + translation, stored as a
2x3 affine matrix) is fit from 68 facial landmarks to a canonical template
by least squares, then used to warp the source frame into a fixed-size
crop. Estimated transforms are cached per frame, optionally persisted to an
append-only journal, so replaying a dataset skips re-estimation.
"""
from __future__ import annotations

import csv
import importlib.resources
import math
import os
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

NUM_LANDMARKS = 68
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_TEMPLATE_SIZE = 224
_TEMPLATE_RESOURCE = "canonical_template_224.csv"


@dataclass(frozen=True)
class LandmarkSet:
    """68 (x, y) points in source-image pixel coordinates."""

    frame_id: str
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (NUM_LANDMARKS, 2):
            raise ValueError(f"expected {NUM_LANDMARKS} (x, y) points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"frame {self.frame_id}: non-finite landmark coordinates")
        centered = pts - pts.mean(axis=0)
        sv = np.linalg.svd(centered, compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1.0):
            raise ValueError(f"frame {self.frame_id}: landmarks are collinear; transform is ill-posed")
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class SimilarityTransform:
    """2x3 matrix [[a, -b, tx], [b, a, ty]]: scale sqrt(a^2+b^2), rotation
    atan2(b, a), then translation."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"expected a 2x3 matrix, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("non-finite transform entries")
        if abs(m[0, 0] - m[1, 1]) > 1e-9 * max(1.0, abs(m[0, 0])) or abs(m[0, 1] + m[1, 0]) > 1e-9 * max(1.0, abs(m[1, 0])):
            raise ValueError("matrix is not a similarity (expected [[a,-b,tx],[b,a,ty]])")
        if m[0, 0] ** 2 + m[1, 0] ** 2 <= 0.0:
            raise ValueError("degenerate transform: zero scale")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_params(cls, a: float, b: float, tx: float, ty: float) -> "SimilarityTransform":
        return cls(np.array([[a, -b, tx], [b, a, ty]], dtype=np.float64))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls.from_params(1.0, 0.0, 0.0, 0.0)

    @property
    def scale(self) -> float:
        return math.hypot(self.matrix[0, 0], self.matrix[1, 0])

    @property
    def rotation(self) -> float:
        return math.atan2(self.matrix[1, 0], self.matrix[0, 0])

    @property
    def translation(self) -> tuple[float, float]:
        return (self.matrix[0, 2], self.matrix[1, 2])

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def inverse(self) -> "SimilarityTransform":
        a, b = self.matrix[0, 0], self.matrix[1, 0]
        s2 = a * a + b * b
        ia, ib = a / s2, -b / s2
        tx, ty = self.translation
        itx = -(ia * tx - ib * ty)
        ity = -(ib * tx + ia * ty)
        return SimilarityTransform.from_params(ia, ib, itx, ity)


def _template_points_224() -> np.ndarray:
    """Procedural symmetric 68-point face layout on a 224x224 crop.

    Frozen as the packaged CSV; regenerated only to verify the shipped
    constant. Index blocks follow the usual 68-point convention: jaw 0-16,
    brows 17-26, nose 27-35, eyes 36-47, outer lips 48-59, inner lips 60-67.
    """
    cx = 112.0
    pts: list[tuple[float, float]] = []
    for i in range(17):  # jaw arc, ear to ear through the chin
        phi = math.pi * (1.0 - i / 16.0)
        pts.append((cx + 75.0 * math.cos(phi), 90.0 + 85.0 * math.sin(phi)))
    for k in range(5):  # right-side brow (viewer left)
        pts.append((47.0 + 11.25 * k, 70.0 - 6.0 * math.sin(math.pi * k / 4.0)))
    for k in range(5):  # left-side brow, mirrored
        pts.append((132.0 + 11.25 * k, 70.0 - 6.0 * math.sin(math.pi * (4 - k) / 4.0)))
    for k in range(4):  # nose bridge
        pts.append((cx, 85.0 + 11.0 * k))
    for k in range(5):  # nose base
        pts.append((cx + 6.0 * (k - 2), 130.0))
    for ex in (79.0, 145.0):  # eye hexagons
        pts.extend(
            [
                (ex - 12.0, 90.0),
                (ex - 5.0, 85.0),
                (ex + 5.0, 85.0),
                (ex + 12.0, 90.0),
                (ex + 5.0, 95.0),
                (ex - 5.0, 95.0),
            ]
        )
    for deg in (180, 150, 120, 90, 60, 30, 0, -30, -60, -90, -120, -150):  # outer lips
        a = math.radians(deg)
        pts.append((cx + 28.0 * math.cos(a), 150.0 - 14.0 * math.sin(a)))
    for deg in (180, 135, 90, 45, 0, -45, -90, -135):  # inner lips
        a = math.radians(deg)
        pts.append((cx + 16.0 * math.cos(a), 150.0 - 7.0 * math.sin(a)))
    return np.array(pts, dtype=np.float64)


@dataclass(frozen=True)
class CanonicalTemplate:
    """Fixed 68-point target layout in output-crop coordinates."""

    points: np.ndarray
    crop_size: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (NUM_LANDMARKS, 2):
            raise ValueError(f"template must hold {NUM_LANDMARKS} points, got {pts.shape}")
        object.__setattr__(self, "points", pts)

    @classmethod
    def default(cls) -> "CanonicalTemplate":
        ref = importlib.resources.files("aupipe.assets").joinpath(_TEMPLATE_RESOURCE)
        with ref.open("r", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != ["index", "x", "y"]:
                raise ValueError("malformed template file")
            pts = np.array([[float(row[1]), float(row[2])] for row in reader], dtype=np.float64)
        return cls(points=pts, crop_size=_TEMPLATE_SIZE)

    def scaled(self, crop_size: int) -> "CanonicalTemplate":
        if crop_size < 1:
            raise ValueError("crop size must be positive")
        factor = crop_size / self.crop_size
        return CanonicalTemplate(points=self.points * factor, crop_size=crop_size)


def estimate_similarity(landmarks: LandmarkSet, template: CanonicalTemplate) -> SimilarityTransform:
    """Least-squares similarity mapping landmark coordinates onto the
    template (reflection impossible by construction of the [[a,-b],[b,a]]
    parametrization)."""
    p = landmarks.points
    q = template.points
    mp, mq = p.mean(axis=0), q.mean(axis=0)
    pc, qc = p - mp, q - mq
    denom = float((pc * pc).sum())
    if denom <= 0.0:
        raise ValueError(f"frame {landmarks.frame_id}: degenerate landmark configuration")
    a = float((pc * qc).sum()) / denom
    b = float((pc[:, 0] * qc[:, 1] - pc[:, 1] * qc[:, 0]).sum()) / denom
    if a * a + b * b <= 0.0:
        raise ValueError(f"frame {landmarks.frame_id}: degenerate landmark configuration")
    tx = mq[0] - (a * mp[0] - b * mp[1])
    ty = mq[1] - (b * mp[0] + a * mp[1])
    return SimilarityTransform.from_params(a, b, tx, ty)


def alignment_rmse(t: SimilarityTransform, landmarks: LandmarkSet, template: CanonicalTemplate) -> float:
    diff = t.apply(landmarks.points) - template.points
    return float(np.sqrt((diff * diff).sum(axis=1).mean()))


def warp_crop(image: np.ndarray, t: SimilarityTransform, out_size: int) -> np.ndarray:
    """Warp a source raster into an out_size x out_size crop by sampling the
    inverse transform bilinearly. Reads outside the source are zero (black)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8 raster, got {image.shape} {image.dtype}")
    if out_size < 1:
        raise ValueError("output size must be positive")
    h, w = image.shape[:2]
    inv = t.inverse()
    xs, ys = np.meshgrid(np.arange(out_size, dtype=np.float64), np.arange(out_size, dtype=np.float64))
    src = inv.apply(np.stack([xs.ravel(), ys.ravel()], axis=1))
    sx, sy = src[:, 0], src[:, 1]

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0

    out = np.zeros((out_size * out_size, 3), dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            weight = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            if not valid.any():
                continue
            contrib = np.zeros_like(out)
            contrib[valid] = image[yi[valid], xi[valid], :].astype(np.float64)
            out += contrib * weight[:, None]
    crop = np.rint(out).clip(0, 255).astype(np.uint8)
    return crop.reshape(out_size, out_size, 3)


def normalize(
    raster: np.ndarray,
    mean: tuple[float, float, float] = IMAGENET_MEAN,
    std: tuple[float, float, float] = IMAGENET_STD,
) -> Tensor:
    """(H, W, 3) uint8 -> (3, H, W) float tensor: (pixel/255 - mean) / std."""
    raster = np.asarray(raster)
    if raster.ndim != 3 or raster.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) raster, got {raster.shape}")
    mean_arr = np.asarray(mean, dtype=np.float64)
    std_arr = np.asarray(std, dtype=np.float64)
    if np.any(std_arr <= 0):
        raise ValueError("per-channel std must be positive")
    scaled = raster.astype(np.float64) / 255.0
    out = (scaled - mean_arr) / std_arr
    return Tensor(np.ascontiguousarray(out.transpose(2, 0, 1)))


def hflip(raster: np.ndarray, labels):
    """Mirror columns; AU labels pass through unchanged (all supported codes
    are bilateral)."""
    return np.ascontiguousarray(np.asarray(raster)[:, ::-1]), labels


class AlignmentCache:
    """frame_id -> SimilarityTransform map with hit/miss counters and an
    optional append-only binary journal ((u32 id length, id bytes, 6 f64))."""

    def __init__(self, journal: str | os.PathLike | None = None):
        self._store: dict[str, SimilarityTransform] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self._journal_path = str(journal) if journal is not None else None
        if self._journal_path and os.path.exists(self._journal_path):
            self._replay(self._journal_path)

    def _replay(self, path: str) -> None:
        with open(path, "rb") as fh:
            while True:
                head = fh.read(4)
                if not head:
                    break
                if len(head) < 4:
                    raise ValueError("truncated cache journal")
                (n,) = struct.unpack("<I", head)
                frame_id = fh.read(n).decode("utf-8")
                payload = fh.read(48)
                if len(payload) < 48:
                    raise ValueError("truncated cache journal")
                values = struct.unpack("<6d", payload)
                self._store[frame_id] = SimilarityTransform(np.array(values).reshape(2, 3))

    def __len__(self) -> int:
        return len(self._store)

    def __contains__(self, frame_id: str) -> bool:
        return frame_id in self._store

    def get(self, frame_id: str) -> SimilarityTransform | None:
        with self._lock:
            t = self._store.get(frame_id)
            if t is None:
                self.misses += 1
            else:
                self.hits += 1
            return t

    def put(self, frame_id: str, t: SimilarityTransform) -> None:
        with self._lock:
            self._store[frame_id] = t
            if self._journal_path:
                encoded = frame_id.encode("utf-8")
                record = struct.pack("<I", len(encoded)) + encoded + struct.pack("<6d", *t.matrix.ravel())
                with open(self._journal_path, "ab") as fh:
                    fh.write(record)
                    fh.flush()


def cached_transform(
    cache: AlignmentCache, landmarks: LandmarkSet, template: CanonicalTemplate
) -> SimilarityTransform:
    t = cache.get(landmarks.frame_id)
    if t is None:
        t = estimate_similarity(landmarks, template)
        cache.put(landmarks.frame_id, t)
    return t


# ---------------------------------------------------------------------------
# landmark CSV: frame_id, x0, y0, ..., x67, y67

_LANDMARK_HEADER = ["frame_id"] + [f"{axis}{i}" for i in range(NUM_LANDMARKS) for axis in ("x", "y")]


def load_landmarks(path: str | os.PathLike) -> dict[str, LandmarkSet]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _LANDMARK_HEADER:
            raise ValueError(f"{path}: landmark CSV header mismatch")
        out: dict[str, LandmarkSet] = {}
        for row in reader:
            if not row:
                continue
            if len(row) != 1 + 2 * NUM_LANDMARKS:
                raise ValueError(f"{path}: row for {row[0]!r} has {len(row) - 1} coordinates")
            pts = np.array(row[1:], dtype=np.float64).reshape(NUM_LANDMARKS, 2)
            out[row[0]] = LandmarkSet(frame_id=row[0], points=pts)
    return out


def save_landmarks(path: str | os.PathLike, sets: dict[str, LandmarkSet]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_LANDMARK_HEADER)
        for frame_id in sorted(sets):
            pts = sets[frame_id].points
            writer.writerow([frame_id] + [repr(float(v)) for v in pts.ravel()])
