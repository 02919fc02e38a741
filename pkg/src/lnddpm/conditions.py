"""Condition preparation: ROI cropping, resampling, windowing, anatomy masks and
the randomized lymph-node transforms used at sampling time."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError
from .volumes import ConditionStack, LabelVolume, ScalarVolume

CONN26 = np.ones((3, 3, 3), dtype=bool)
CONN6 = ndimage.generate_binary_structure(3, 1)

AIR, BODY = "air", "body"


def components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """26-connected component labelling."""
    return ndimage.label(np.asarray(mask) > 0, structure=CONN26)


def bounding_box(mask: np.ndarray):
    idx = np.argwhere(mask)
    if idx.size == 0:
        raise DataError("lymph-node mask is empty")
    return idx.min(0), idx.max(0)


def crop_roi(image: ScalarVolume, ln_mask: LabelVolume, expansion_mm: float, *others: LabelVolume):
    """Crop to the lymph-node bounding box grown by ``expansion_mm`` on every side.

    Returns ``(image, ln_mask, *others)`` cropped identically; the box is clipped to
    the volume and its expansion is rounded up to whole voxels per axis.
    """
    if expansion_mm < 0:
        raise ValueError("expansion_mm must be nonnegative")
    for v in (ln_mask, *others):
        if tuple(v.shape) != tuple(image.shape):
            raise DataError(f"geometry mismatch: {tuple(v.shape)} vs image {tuple(image.shape)}")
    lo, hi = bounding_box(ln_mask.data > 0)
    grow = np.array([math.ceil(expansion_mm / s - 1e-9) for s in image.spacing_mm])
    lo = np.maximum(lo - grow, 0)
    hi = np.minimum(hi + grow, np.array(image.shape) - 1)
    sl = tuple(slice(a, b + 1) for a, b in zip(lo, hi))
    origin = tuple(o + a * s for o, a, s in zip(image.origin, lo, image.spacing_mm))
    out = [ScalarVolume(image.data[sl], image.spacing_mm, origin)]
    for v in (ln_mask, *others):
        out.append(LabelVolume(v.data[sl], v.spacing_mm, origin, v.label_table))
    return tuple(out)


def _sample_coords(in_shape, in_spacing, target):
    out_shape = tuple(max(1, int(round(n * s / t))) for n, s, t in zip(in_shape, in_spacing, target))
    # output voxel centres expressed as fractional input indices
    axes = [(np.arange(m) + 0.5) * (t / s) - 0.5 for m, s, t in zip(out_shape, in_spacing, target)]
    return out_shape, axes


def resample(volume, target_spacing_mm):
    """Resample to ``target_spacing_mm``: trilinear for scalars, nearest-neighbour for labels."""
    target = tuple(float(t) for t in target_spacing_mm)
    if len(target) != 3 or any(not t > 0 for t in target):
        raise ValueError(f"target spacing must be three positive values, got {target_spacing_mm}")
    in_sp = volume.spacing_mm
    out_shape, axes = _sample_coords(volume.shape, in_sp, target)
    origin = tuple(o + a[0] * s for o, a, s in zip(volume.origin, axes, in_sp))
    if isinstance(volume, LabelVolume):
        # exact ties go to the higher index; the 1e-9 guards against float round-off at ties
        idx = [np.clip(np.floor(a + 0.5 + 1e-9).astype(int), 0, n - 1) for a, n in zip(axes, volume.shape)]
        data = volume.data[np.ix_(*idx)]
        return LabelVolume(data, target, origin, volume.label_table)
    if out_shape == tuple(volume.shape) and target == tuple(in_sp):
        return ScalarVolume(volume.data.copy(), target, volume.origin)
    grid = np.meshgrid(*axes, indexing="ij")
    data = ndimage.map_coordinates(volume.data.astype(np.float64), grid, order=1, mode="nearest")
    return ScalarVolume(data.astype(volume.data.dtype if volume.data.dtype.kind == "f" else np.float32),
                        target, origin)


def window_normalize(image: ScalarVolume, lo: float = -120.0, hi: float = 240.0) -> ScalarVolume:
    """Clip to [lo, hi] and map affinely onto [-1, 1]."""
    if not lo < hi:
        raise ValueError(f"window requires lo < hi, got [{lo}, {hi}]")
    x = np.clip(image.data.astype(np.float32), lo, hi)
    return ScalarVolume(2.0 * (x - lo) / (hi - lo) - 1.0, image.spacing_mm, image.origin)


def window_denormalize(data: np.ndarray, lo: float = -120.0, hi: float = 240.0) -> np.ndarray:
    return (np.asarray(data) + 1.0) * (hi - lo) / 2.0 + lo


def build_anatomy_mask(raw_labels: LabelVolume, image: ScalarVolume, abdomen_label_set,
                       channels: int | None = None, air_threshold: float = -500.0) -> LabelVolume:
    """Keep abdominal labels (relabelled 1..K in sorted order) and add air (K+1) and body (K+2).

    Air is every voxel below ``air_threshold``; body is the largest 6-connected
    component of voxels at or above it. Organ labels take priority over both.
    """
    if tuple(raw_labels.shape) != tuple(image.shape):
        raise DataError(f"geometry mismatch: labels {tuple(raw_labels.shape)} vs image {tuple(image.shape)}")
    keep = sorted(int(v) for v in abdomen_label_set)
    K = len(keep)
    if channels is not None and K + 2 != channels:
        raise DataError(f"{K} abdominal labels + air + body = {K + 2} labels, configured {channels}")
    raw = raw_labels.data
    out = np.zeros(raw.shape, dtype=np.uint8 if K + 2 < 256 else np.uint16)
    table = {}
    for new, old in enumerate(keep, start=1):
        out[raw == old] = new
        table[new] = raw_labels.label_table.get(old, f"label_{old}")
    organ = out > 0
    air = image.data < air_threshold
    out[air & ~organ] = K + 1
    lab, n = ndimage.label(~air, structure=CONN6)
    if n:
        sizes = np.bincount(lab.ravel())[1:]
        body = lab == (int(np.argmax(sizes)) + 1)
        out[body & ~organ] = K + 2
    table[K + 1] = AIR
    table[K + 2] = BODY
    return LabelVolume(out, raw_labels.spacing_mm, raw_labels.origin, table)


def one_hot(mask, C: int) -> np.ndarray:
    """(C, *grid) indicator channels for labels 1..C; label 0 maps to all-zero channels."""
    data = mask.data if isinstance(mask, LabelVolume) else np.asarray(mask)
    if data.size and (data.min() < 0 or data.max() > C):
        raise ValueError(f"labels outside 0..{C}")
    return (data[None] == np.arange(1, C + 1).reshape(-1, *([1] * data.ndim))).astype(np.uint8)


# --- sampling-time condition transforms -------------------------------------------

@dataclass
class TransformParams:
    rotation_deg: float = 15.0
    scale_range: tuple = (0.8, 1.2)
    translation_vox: float = 3.0
    elastic_sigma: float = 4.0
    elastic_magnitude: float = 2.0
    p_elastic: float = 0.5
    p_remove: float = 0.5
    max_attempts: int = 10
    # anatomy channels ignored by the overlap test (air and body); negative indices count from the end
    non_organ_channels: tuple = (-2, -1)

    @classmethod
    def identity(cls, **kw) -> "TransformParams":
        return cls(rotation_deg=0.0, scale_range=(1.0, 1.0), translation_vox=0.0, elastic_magnitude=0.0, **kw)


def _rotation(angles):
    ax, ay, az = angles
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def _propose(comp: np.ndarray, rng: np.random.Generator, p: TransformParams) -> np.ndarray | None:
    """Transform one component indicator; None if any of it would leave the patch."""
    shape = np.array(comp.shape)
    pts = np.argwhere(comp)
    centre = pts.mean(0)
    radius = np.sqrt(((pts - centre) ** 2).sum(1)).max() + 1.0
    smax = max(p.scale_range)
    half = int(math.ceil(radius * smax + math.sqrt(3) * p.translation_vox + p.elastic_magnitude + 2))
    lo = np.floor(centre).astype(int) - half
    size = 2 * half + 1
    # local box around the component; may extend past the patch, padded with zeros
    local = np.zeros((size,) * 3, dtype=np.float64)
    src_lo = np.maximum(lo, 0)
    src_hi = np.minimum(lo + size, shape)
    dst = tuple(slice(a - l, b - l) for a, b, l in zip(src_lo, src_hi, lo))
    local[dst] = comp[tuple(slice(a, b) for a, b in zip(src_lo, src_hi))]
    c_local = centre - lo

    if rng.random() < p.p_elastic:
        disp = [ndimage.gaussian_filter(rng.standard_normal(local.shape), p.elastic_sigma) for _ in range(3)]
        mag = np.sqrt(sum(d ** 2 for d in disp)).max()
        scale = p.elastic_magnitude / mag if mag > 0 else 0.0
        grid = np.meshgrid(*[np.arange(size, dtype=np.float64)] * 3, indexing="ij")
        coords = [g + scale * d for g, d in zip(grid, disp)]
        moved = ndimage.map_coordinates(local, coords, order=1, mode="constant", cval=0.0)
    else:
        rad = np.deg2rad(p.rotation_deg)
        R = _rotation(rng.uniform(-rad, rad, 3))
        s = rng.uniform(*p.scale_range)
        shift = rng.uniform(-p.translation_vox, p.translation_vox, 3)
        fwd = s * R
        # affine_transform maps output coords o to input coords inv @ o + offset
        inv = np.linalg.inv(fwd)
        offset = c_local - inv @ (c_local + shift)
        moved = ndimage.affine_transform(local, inv, offset=offset, order=1, mode="constant", cval=0.0)
    moved = moved > 0.5

    out_lo = lo
    coords = np.argwhere(moved) + out_lo
    if coords.size == 0:
        return None
    if (coords < 0).any() or (coords >= shape).any():
        return None
    result = np.zeros(comp.shape, dtype=bool)
    result[tuple(coords.T)] = True
    return result


def transform_condition(stack: ConditionStack, rng_seed: int, params: TransformParams | None = None) -> ConditionStack:
    """Randomly reshape and possibly drop lymph nodes while leaving the anatomy untouched.

    Every node component gets an independent affine or elastic deformation. A
    candidate is rejected if it overlaps an organ channel, leaves the patch, splits
    into several components, or touches another node; after ``max_attempts``
    rejections the original component is kept.
    """
    p = params or TransformParams()
    rng = np.random.default_rng(rng_seed)
    lab, n = components(stack.ln_mask)
    if n == 0:
        raise DataError("cannot transform an empty lymph-node mask")
    C = stack.channels
    skip = {c % C for c in p.non_organ_channels}
    organ_ch = [c for c in range(C) if c not in skip]
    organ = stack.anatomy_onehot[organ_ch].any(0) if organ_ch else np.zeros(stack.shape, bool)

    ids = list(range(1, n + 1))
    if n >= 2 and rng.random() < p.p_remove:
        ids.pop(int(rng.integers(len(ids))))

    placed = np.zeros(stack.shape, dtype=bool)
    for k, cid in enumerate(ids):
        original = lab == cid
        pending = np.isin(lab, ids[k + 1:])
        forbidden = organ | ndimage.binary_dilation(placed | pending, structure=CONN26)
        chosen = original
        for _ in range(p.max_attempts):
            cand = _propose(original, rng, p)
            if cand is None or (cand & forbidden).any():
                continue
            if components(cand)[1] != 1:
                continue
            chosen = cand
            break
        placed |= chosen
    return ConditionStack(stack.anatomy_onehot.copy(), placed.astype(np.uint8))
