"""Deterministic synthetic shapes standing in for ROI-aligned mask-head inputs.

Each sample is a filled ellipse, rectangle or triangle rendered at image
resolution (with supersampling), a binary mask at mask resolution obtained by
area-averaging the render and thresholding at 0.5, and additive Gaussian
pixel noise on the image.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .grid import InvalidInputError, avg_pool

CLASS_NAMES = ("ellipse", "rectangle", "triangle")
MIN_AREA, MAX_AREA = 0.04, 0.90
SUPERSAMPLE = 4
MAX_ATTEMPTS = 1000


@dataclass(frozen=True)
class DatasetSpec:
    n_train: int = 512
    n_eval: int = 128
    mask_size: int = 28
    image_size: Optional[int] = None
    seed: int = 0
    noise_std: float = 0.1
    n_classes: int = len(CLASS_NAMES)

    def __post_init__(self):
        if self.n_train < 0 or self.n_eval < 0 or self.n_train + self.n_eval < 1:
            raise InvalidInputError("need at least one sample")
        if self.mask_size not in (28, 56):
            raise InvalidInputError(f"mask_size must be 28 or 56, got {self.mask_size}")
        if self.image_size is None:
            object.__setattr__(self, "image_size", 2 * self.mask_size)
        if self.image_size % self.mask_size:
            raise InvalidInputError("image_size must be a multiple of mask_size")
        if self.noise_std < 0:
            raise InvalidInputError("noise_std must be nonnegative")
        if self.n_classes != len(CLASS_NAMES):
            raise InvalidInputError(f"exactly {len(CLASS_NAMES)} shape classes are supported")
        if not 0 <= self.seed < 2 ** 64:
            raise InvalidInputError("seed must be an unsigned 64-bit integer")

    @property
    def size(self) -> int:
        return self.n_train + self.n_eval


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    class_id: int
    gt_mask: np.ndarray
    sample_id: int


def _inside(class_id: int, params: dict, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    cx, cy = params["center"]
    dx, dy = x - cx, y - cy
    if class_id == 2:
        (ax, ay), (bx, by), (qx, qy) = params["vertices"]

        def side(px, py, qx_, qy_):
            return (qx_ - px) * (y - py) - (qy_ - py) * (x - px)

        s1, s2, s3 = side(ax, ay, bx, by), side(bx, by, qx, qy), side(qx, qy, ax, ay)
        return ((s1 >= 0) & (s2 >= 0) & (s3 >= 0)) | ((s1 <= 0) & (s2 <= 0) & (s3 <= 0))
    c, s = np.cos(params["angle"]), np.sin(params["angle"])
    u = c * dx + s * dy
    v = -s * dx + c * dy
    a, b = params["axes"]
    if class_id == 0:
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return (np.abs(u) <= a) & (np.abs(v) <= b)


def _draw_params(rng: np.random.Generator, class_id: int) -> dict:
    center = rng.uniform(0.3, 0.7, size=2)
    angle = rng.uniform(0.0, np.pi)
    params = {"center": tuple(center), "angle": angle}
    if class_id == 0:
        params["axes"] = tuple(rng.uniform(0.12, 0.4, size=2))
    elif class_id == 1:
        params["axes"] = tuple(rng.uniform(0.1, 0.32, size=2))
    else:
        theta = angle + 2 * np.pi * np.arange(3) / 3 + rng.uniform(-0.4, 0.4, size=3)
        radius = rng.uniform(0.2, 0.45, size=3)
        params["vertices"] = tuple(
            (center[0] + r * np.cos(t), center[1] + r * np.sin(t)) for r, t in zip(radius, theta))
    return params


def render(class_id: int, params: dict, size: int) -> np.ndarray:
    """Fractional pixel coverage of the shape on a ``size`` x ``size`` grid."""
    n = size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / n
    x, y = np.meshgrid(coords, coords)  # x runs along columns, y along rows
    hit = _inside(class_id, params, x, y).astype(np.float64)
    return avg_pool(hit, SUPERSAMPLE)


def generate_sample(spec: DatasetSpec, index: int) -> Sample:
    if not 0 <= index < spec.size:
        raise InvalidInputError(f"index {index} outside [0, {spec.size})")
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([spec.seed, index, attempt])
        class_id = int(rng.integers(spec.n_classes))
        params = _draw_params(rng, class_id)
        clean = render(class_id, params, spec.image_size)
        factor = spec.image_size // spec.mask_size
        mask = (avg_pool(clean, factor) >= 0.5).astype(np.float64)
        if MIN_AREA <= mask.mean() <= MAX_AREA:
            break
    else:  # pragma: no cover - shape parameter ranges make this unreachable in practice
        raise RuntimeError(f"could not draw a valid shape for index {index}")
    if spec.noise_std > 0:
        image = np.clip(clean + spec.noise_std * rng.standard_normal(clean.shape), 0.0, 1.0)
    else:
        image = clean
    return Sample(image=image, class_id=class_id, gt_mask=mask, sample_id=index)


def generate_dataset(spec: DatasetSpec) -> Tuple[List[Sample], List[Sample]]:
    train = [generate_sample(spec, i) for i in range(spec.n_train)]
    evals = [generate_sample(spec, i) for i in range(spec.n_train, spec.size)]
    return train, evals


def write_samples(path, samples) -> None:
    """One record per sample: ``id class H W`` header, image values line, mask values line.

    ``H W`` are the image dimensions; masks are square.
    """
    with open(path, "w") as fh:
        for s in samples:
            h, w = s.image.shape
            fh.write(f"{s.sample_id} {s.class_id} {h} {w}\n")
            fh.write(" ".join(repr(float(v)) for v in s.image.ravel()) + "\n")
            fh.write(" ".join(repr(float(v)) for v in s.gt_mask.ravel()) + "\n")


def read_samples(path) -> List[Sample]:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if len(lines) % 3:
        raise InvalidInputError(f"{path}: truncated sample file")
    out = []
    for i in range(0, len(lines), 3):
        sid, cid, h, w = (int(t) for t in lines[i].split())
        image = np.array(lines[i + 1].split(), dtype=np.float64).reshape(h, w)
        mvals = np.array(lines[i + 2].split(), dtype=np.float64)
        side = int(round(np.sqrt(mvals.size)))
        if side * side != mvals.size:
            raise InvalidInputError(f"{path}: mask for sample {sid} is not square")
        out.append(Sample(image=image, class_id=cid, gt_mask=mvals.reshape(side, side), sample_id=sid))
    return out
