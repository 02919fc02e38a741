"""Case preparation and patch extraction shared by diffusion training, sampling and segmentation."""
from __future__ import annotations

import numpy as np

from .conditions import (AIR, build_anatomy_mask, crop_roi, one_hot, resample, window_normalize)
from .config import DataConfig
from .volumes import ConditionStack, LabelVolume, ScalarVolume

IMAGE_PAD = -1.0


def prepare_case(image: ScalarVolume, anatomy_raw: LabelVolume, ln_mask: LabelVolume,
                 data: DataConfig, expansion_mm: float | None = None):
    """Crop around the nodes, resample, build the anatomy mask and window the image.

    Returns ``(image, anatomy, ln_mask)`` with the image in [-1, 1] and anatomy labels 0..C.
    """
    expansion = data.roi_expansion_train_mm if expansion_mm is None else expansion_mm
    img, ln, raw = crop_roi(image, ln_mask, expansion, anatomy_raw)
    img = resample(img, data.spacing_mm)
    ln = resample(ln, data.spacing_mm)
    raw = resample(raw, data.spacing_mm)
    anatomy = build_anatomy_mask(raw, img, data.abdomen_labels, data.anatomy_channels, data.air_threshold)
    lo, hi = data.window
    ln = LabelVolume((ln.data > 0).astype(np.uint8), ln.spacing_mm, ln.origin, {1: "lymph_node"})
    return window_normalize(img, lo, hi), anatomy, ln


def _box(center, patch_shape, vol_shape):
    """Start indices of a patch centred at ``center``, kept inside the volume where it fits."""
    start = []
    for c, p, n in zip(center, patch_shape, vol_shape):
        s = int(round(c - p / 2))
        s = min(max(s, 0), n - p) if n >= p else (n - p) // 2
        start.append(s)
    return start


def extract(array: np.ndarray, start, patch_shape, pad_value) -> np.ndarray:
    """Crop ``array`` (last three axes) at ``start``, padding where the patch leaves the volume."""
    lead = array.shape[:-3]
    out = np.full(lead + tuple(patch_shape), pad_value, dtype=array.dtype)
    src, dst = [], []
    for s, p, n in zip(start, patch_shape, array.shape[-3:]):
        a = min(max(s, 0), n)
        b = max(min(s + p, n), a)
        src.append(slice(a, b))
        dst.append(slice(a - s, b - s))
    out[(...,) + tuple(dst)] = array[(...,) + tuple(src)]
    return out


def patch_at(image, anatomy: LabelVolume, ln: LabelVolume, center, patch_shape, channels: int):
    """(x0 patch, ConditionStack, start) for a patch centred at ``center``."""
    start = _box(center, patch_shape, ln.shape)
    air = anatomy.label_of(AIR) if AIR in anatomy.label_table.values() else 0
    x0 = extract(np.asarray(image.data, np.float32), start, patch_shape, IMAGE_PAD)
    labels = extract(anatomy.data, start, patch_shape, air)
    mask = extract(ln.data, start, patch_shape, 0)
    return x0, ConditionStack(one_hot(labels, channels), mask), start


def node_center(ln: LabelVolume):
    idx = np.argwhere(ln.data > 0)
    return (idx.min(0) + idx.max(0)) / 2.0


class PatchStream:
    """Endless stream of random node-containing patches from prepared cases."""

    def __init__(self, cases, patch_shape, channels: int, seed: int = 0, jitter: float = 0.25):
        self.cases = list(cases)
        if not self.cases:
            raise ValueError("at least one training case is required")
        self.patch_shape = tuple(patch_shape)
        self.channels = channels
        self.rng = np.random.default_rng(seed)
        self.jitter = jitter
        self._nodes = [np.argwhere(c[2].data > 0) for c in self.cases]

    def __iter__(self):
        return self

    def __next__(self):
        i = int(self.rng.integers(len(self.cases)))
        image, anatomy, ln = self.cases[i]
        pts = self._nodes[i]
        centre = pts[self.rng.integers(len(pts))] if len(pts) else np.array(ln.shape) / 2
        shift = self.rng.uniform(-self.jitter, self.jitter, 3) * np.array(self.patch_shape)
        x0, cond, _ = patch_at(image, anatomy, ln, centre + shift, self.patch_shape, self.channels)
        return x0, cond
