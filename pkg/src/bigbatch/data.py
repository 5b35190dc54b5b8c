"""Seeded synthetic classification data: Gaussian class blobs on an image grid.

Each class mean is a smooth bump at a class-specific location on the
(1, H, W) grid; samples add i.i.d. Gaussian pixel noise. The bump set is
rescaled so the minimum pairwise distance between class means equals
`separation` noise standard deviations exactly, which gives closed-form
Bayes-accuracy oracles (two classes at 4 sigma: Phi(2) ~ 0.977).

Generation is a pure function of (spec, seed) and file output is
byte-stable, so dataset identity can be pinned by content hash.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Invalid dataset spec or corrupted dataset files."""


@dataclass(frozen=True)
class DatasetSpec:
    size: int
    classes: int
    height: int = 8
    width: int = 8
    separation: float = 4.0
    noise_sigma: float = 1.0
    eval_size: int | None = None     # None: size // 4, at least one per class
    blob_sigma: float | None = None  # None: min(height, width) / 6

    def __post_init__(self):
        if self.classes < 2:
            raise DataError(f"need at least 2 classes, got {self.classes}")
        if self.size < self.classes:
            raise DataError("size must cover at least one sample per class")
        if self.height < 2 or self.width < 2:
            raise DataError("grid must be at least 2x2")
        if self.separation <= 0 or self.noise_sigma <= 0:
            raise DataError("separation and noise_sigma must be positive")

    def resolved_eval_size(self) -> int:
        if self.eval_size is not None:
            return self.eval_size
        return max(self.size // 4, self.classes)

    def resolved_blob_sigma(self) -> float:
        if self.blob_sigma is not None:
            return self.blob_sigma
        return min(self.height, self.width) / 6.0


def class_means(spec: DatasetSpec) -> np.ndarray:
    """(classes, 1, H, W) mean images with exact minimum separation.

    Class i is a smooth bump at position i on a circle around the grid
    center, with a signed amplitude ramp (+1, -1, +2, -2, ...) so classes
    stay distinguishable even through channel-pooling layers. The whole
    set is scaled so the closest pair of means is separation * noise_sigma
    apart in L2.
    """
    h, w, c = spec.height, spec.width, spec.classes
    sig = spec.resolved_blob_sigma()
    ys, xs = np.mgrid[0:h, 0:w]
    radius = 0.35 * min(h - 1, w - 1)
    bumps = np.empty((c, h * w))
    for i in range(c):
        ang = 2.0 * np.pi * i / c
        cy = (h - 1) / 2.0 + radius * np.sin(ang)
        cx = (w - 1) / 2.0 + radius * np.cos(ang)
        bump = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * sig * sig))
        amp = (1 + i // 2) * (1 if i % 2 == 0 else -1)
        bumps[i] = amp * bump.ravel() / np.linalg.norm(bump)
    dmin = np.inf
    for i in range(c):
        for j in range(i + 1, c):
            dmin = min(dmin, np.linalg.norm(bumps[i] - bumps[j]))
    if dmin <= 1e-9:
        raise DataError(
            f"class bump centers coincide for {c} classes on a {h}x{w} grid")
    scale = spec.separation * spec.noise_sigma / dmin
    return (scale * bumps).reshape(c, 1, h, w)


@dataclass
class Dataset:
    spec: DatasetSpec
    seed: int
    images: np.ndarray
    labels: np.ndarray
    eval_images: np.ndarray
    eval_labels: np.ndarray

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        for arr in (self.images, self.labels, self.eval_images, self.eval_labels):
            digest.update(np.ascontiguousarray(arr).tobytes())
        digest.update(json.dumps(asdict(self.spec), sort_keys=True).encode())
        digest.update(str(self.seed).encode())
        return digest.hexdigest()


def _draw_split(spec: DatasetSpec, rng: np.random.Generator, n: int):
    means = class_means(spec)
    # Balanced label assignment in a seeded random order; avoids empty
    # classes on small splits, which would break nearest-mean probes.
    labels = rng.permutation(np.arange(n) % spec.classes).astype(np.int64)
    noise = rng.standard_normal((n, 1, spec.height, spec.width))
    images = means[labels] + spec.noise_sigma * noise
    return images, labels


def generate_dataset(spec: DatasetSpec, seed: int) -> Dataset:
    images, labels = _draw_split(spec, np.random.default_rng((seed, 0)), spec.size)
    ev_images, ev_labels = _draw_split(
        spec, np.random.default_rng((seed, 1)), spec.resolved_eval_size())
    return Dataset(spec=spec, seed=seed, images=images, labels=labels,
                   eval_images=ev_images, eval_labels=ev_labels)


def save_dataset(ds: Dataset, out_dir) -> dict:
    """Write the four arrays plus a meta.json; returns the meta mapping."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "images.npy", ds.images)
    np.save(out / "labels.npy", ds.labels)
    np.save(out / "eval_images.npy", ds.eval_images)
    np.save(out / "eval_labels.npy", ds.eval_labels)
    meta = {
        "spec": asdict(ds.spec),
        "seed": ds.seed,
        "content_hash": ds.content_hash(),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def load_dataset(in_dir) -> Dataset:
    src = Path(in_dir)
    try:
        meta = json.loads((src / "meta.json").read_text())
    except FileNotFoundError:
        raise DataError(f"no meta.json under {src}") from None
    spec = DatasetSpec(**meta["spec"])
    ds = Dataset(
        spec=spec,
        seed=meta["seed"],
        images=np.load(src / "images.npy"),
        labels=np.load(src / "labels.npy"),
        eval_images=np.load(src / "eval_images.npy"),
        eval_labels=np.load(src / "eval_labels.npy"),
    )
    if ds.content_hash() != meta["content_hash"]:
        raise DataError(f"dataset under {src} does not match its recorded hash")
    return ds


def nearest_mean_probe(images: np.ndarray, labels: np.ndarray) -> float:
    """Accuracy of the classifier that assigns each image to the nearest
    empirical class mean. A cheap linear probe for separability checks."""
    flat = images.reshape(len(images), -1)
    classes = int(labels.max()) + 1
    means = np.stack([flat[labels == c].mean(axis=0) for c in range(classes)])
    d2 = ((flat[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    pred = np.argmin(d2, axis=1)
    return float(np.mean(pred == labels))
