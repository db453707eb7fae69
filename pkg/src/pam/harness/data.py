"""Synthetic pose-imbalanced identity data.

Each identity owns a smooth random template image. A sample is that
template viewed at some yaw: rows are sheared sideways, the far side is
compressed, the image sags downwards, the far side is occluded, and a
little noise is added. How strongly this happens is :func:`severity` of
``|yaw|``, which is 0 for a frontal view and 1 at full profile, so
frontal samples are the template plus noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GENERATOR_VERSION = 1


@dataclass(frozen=True)
class SynthSample:
    image: np.ndarray
    identity_label: int
    yaw_deg: float


@dataclass
class SynthDataset:
    images: np.ndarray  # (n, c, h, w) float32
    labels: np.ndarray  # (n,) int64
    yaws: np.ndarray  # (n,) float64
    seed: int
    n_identities: int
    yaw_law: str

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> SynthSample:
        return SynthSample(self.images[i], int(self.labels[i]), float(self.yaws[i]))

    def samples(self) -> list[SynthSample]:
        return [self[i] for i in range(len(self))]

    def subset(self, idx) -> "SynthDataset":
        idx = np.asarray(idx)
        return SynthDataset(self.images[idx], self.labels[idx], self.yaws[idx], self.seed,
                            self.n_identities, self.yaw_law)


@dataclass(frozen=True)
class CorruptionParams:
    """Maximum (full-profile) strength of each yaw-driven distortion."""

    shear_px: float = 6.0
    compress: float = 0.35
    occlude: float = 0.45
    noise_std: float = 0.15
    drop_px: float = 8.0
    exponent: float = 2.0


def severity(abs_yaw, exponent: float = CorruptionParams.exponent):
    """Corruption strength in [0, 1], strictly increasing in ``|yaw|``."""
    a = np.clip(np.abs(np.asarray(abs_yaw, dtype=np.float64)), 0.0, 90.0)
    return (a / 90.0) ** exponent


def make_template(rng: np.random.Generator, channels: int, size: int, n_blobs: int = 8) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((channels, size, size))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.15 * size, 0.85 * size, size=2)
        sigma = rng.uniform(0.06, 0.16) * size
        amp = rng.normal(size=channels)
        img += amp[:, None, None] * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    img -= img.mean()
    return img / (img.std() + 1e-12)


def _resample_rows(img: np.ndarray, src_x: np.ndarray) -> np.ndarray:
    """Linear interpolation of each row at fractional columns ``src_x`` (shape (h, w))."""
    c, h, w = img.shape
    x0 = np.floor(src_x).astype(int)
    t = src_x - x0
    valid = (src_x >= 0) & (src_x <= w - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    rows = np.arange(h)[:, None]
    out = img[:, rows, x0c] * (1 - t) + img[:, rows, x1c] * t
    return np.where(valid, out, 0.0)


def pose_transform(template: np.ndarray, yaw: float, params: CorruptionParams = CorruptionParams()) -> np.ndarray:
    """Deterministic yaw-dependent distortion (no noise); identity at yaw 0."""
    v = float(severity(yaw, params.exponent))
    if v == 0.0:
        return template.copy()
    c, h, w = template.shape
    side = 1.0 if yaw > 0 else -1.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u = (xx - (w - 1) / 2) / ((w - 1) / 2)  # [-1, 1] across the width
    r = (yy - (h - 1) / 2) / ((h - 1) / 2)
    # foreshortening: stretch the source so the turned-away side shrinks
    scale = 1.0 + params.compress * v * side * u
    src_u = u * scale
    src_x = src_u * (w - 1) / 2 + (w - 1) / 2 - side * params.shear_px * v * r
    out = _resample_rows(template, src_x)
    if params.drop_px:
        dy = params.drop_px * v
        out = _resample_rows(out.transpose(0, 2, 1), (yy - dy).T).transpose(0, 2, 1)
    # the far side disappears behind the head
    occluded = side * u > 1.0 - 2.0 * params.occlude * v
    return np.where(occluded[None], 0.0, out)


def flip_sample(image: np.ndarray, yaw: float) -> tuple[np.ndarray, float]:
    """Mirror horizontally; the pose mirrors too."""
    return image[..., ::-1].copy(), -yaw


def draw_yaws(rng: np.random.Generator, n: int, law: str) -> np.ndarray:
    if law == "uniform":
        mag = rng.uniform(0.0, 90.0, size=n)
    elif law == "frontal-skewed":
        frontal = rng.random(n) < 0.8
        mag = np.where(frontal, rng.uniform(0.0, 30.0, size=n), rng.uniform(30.0, 90.0, size=n))
    else:
        raise ValueError(f"unknown yaw law {law!r}")
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    return sign * mag


def generate_dataset(seed: int, n_identities: int, n_per_identity: int,
                     yaw_law: str = "frontal-skewed", image_size: int = 32, channels: int = 3,
                     params: CorruptionParams = CorruptionParams()) -> SynthDataset:
    """Build ``n_identities * n_per_identity`` samples, identity-major order."""
    if n_identities < 1 or n_per_identity < 1:
        raise ValueError("generate_dataset: counts must be positive")
    ss = np.random.SeedSequence(seed)
    tmpl_seq, pose_seq, noise_seq = ss.spawn(3)
    tmpl_rng = np.random.default_rng(tmpl_seq)
    templates = [make_template(tmpl_rng, channels, image_size) for _ in range(n_identities)]
    n = n_identities * n_per_identity
    yaws = draw_yaws(np.random.default_rng(pose_seq), n, yaw_law)
    noise = np.random.default_rng(noise_seq).normal(
        scale=params.noise_std, size=(n, channels, image_size, image_size))
    labels = np.repeat(np.arange(n_identities), n_per_identity)
    images = np.empty((n, channels, image_size, image_size), dtype=np.float32)
    for i in range(n):
        images[i] = pose_transform(templates[labels[i]], yaws[i], params) + noise[i]
    return SynthDataset(images, labels.astype(np.int64), yaws, seed, n_identities, yaw_law)


# ---------------------------------------------------------------------------
# on-disk format
#
# <stem>.bin   packed little-endian records, one per sample:
#              int32 label | float64 yaw | float32 image[c][h][w]
# <stem>.json  manifest: count, n_identities, image shape, seed, yaw law,
#              generator version and the record layout


def _record_dtype(shape) -> np.dtype:
    return np.dtype([("label", "<i4"), ("yaw", "<f8"), ("image", "<f4", tuple(shape))])


def export_dataset(ds: SynthDataset, stem) -> tuple[Path, Path]:
    stem = Path(stem)
    shape = ds.images.shape[1:]
    rec = np.empty(len(ds), dtype=_record_dtype(shape))
    rec["label"] = ds.labels
    rec["yaw"] = ds.yaws
    rec["image"] = ds.images
    bin_path, manifest_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    rec.tofile(bin_path)
    manifest = {
        "count": len(ds),
        "n_identities": ds.n_identities,
        "image_shape": list(shape),
        "seed": ds.seed,
        "yaw_law": ds.yaw_law,
        "generator_version": GENERATOR_VERSION,
        "record": ["label:int32", "yaw:float64", "image:float32[c][h][w]"],
        "byte_order": "little",
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return bin_path, manifest_path


def import_dataset(stem) -> SynthDataset:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("generator_version") != GENERATOR_VERSION:
        raise ValueError(f"dataset generator version {manifest.get('generator_version')} "
                         f"is not {GENERATOR_VERSION}")
    rec = np.fromfile(stem.with_suffix(".bin"), dtype=_record_dtype(manifest["image_shape"]))
    if len(rec) != manifest["count"]:
        raise ValueError(f"manifest lists {manifest['count']} samples, file holds {len(rec)}")
    return SynthDataset(np.ascontiguousarray(rec["image"]), rec["label"].astype(np.int64),
                        rec["yaw"].astype(np.float64), manifest["seed"],
                        manifest["n_identities"], manifest["yaw_law"])
