"""Minimal 3D segmentation trainer and sliding-window inferencer.

Stands in for a full segmentation framework: a plain U-Net built from the same
residual blocks as the denoiser, trained with Dice + cross-entropy on real,
synthetic or mixed cases.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import SegConfig
from .conditions import crop_roi
from .denoiser import DenoiserConfig, UNet3D
from .errors import DataError, NumericalError
from .pipeline import IMAGE_PAD, _box, extract
from .volumes import LabelVolume, ScalarVolume, load_volume

log = logging.getLogger(__name__)

STRATEGIES = ("real", "synt", "real+synt")
SEG_FORMAT = "lnddpm-segmenter/1"


@dataclass
class SegDatasetSpec:
    real_cases: list = field(default_factory=list)
    synthetic_cases: list = field(default_factory=list)
    strategy: str = "real"
    synthetic_multiplier: int = 1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.synthetic_multiplier < 1:
            raise ValueError("synthetic_multiplier must be >= 1")
        if self.strategy in ("real", "real+synt") and not self.real_cases:
            raise DataError(f"strategy {self.strategy} needs real cases")
        if self.strategy in ("synt", "real+synt") and not self.synthetic_cases:
            raise DataError(f"strategy {self.strategy} needs synthetic cases")


def epoch_plan(spec: SegDatasetSpec) -> list[tuple[str, int]]:
    """One epoch as ``(source, index)`` pairs.

    Real cases appear once each. Synthetic samples number ``multiplier`` times the
    real-case count (the synthetic-case count when no real cases are given),
    cycling through the synthetic list.
    """
    plan = []
    if spec.strategy in ("real", "real+synt"):
        plan += [("real", i) for i in range(len(spec.real_cases))]
    if spec.strategy in ("synt", "real+synt"):
        n_ref = len(spec.real_cases) or len(spec.synthetic_cases)
        n_syn = spec.synthetic_multiplier * n_ref
        plan += [("synt", i % len(spec.synthetic_cases)) for i in range(n_syn)]
    return plan


def backbone_config(cfg: SegConfig) -> DenoiserConfig:
    return DenoiserConfig(patch_shape=cfg.patch_shape, base_channels=cfg.base_channels,
                          channel_multipliers=cfg.channel_multipliers, anatomy_channels=1, ld_cond=False)


def build_segmenter(cfg: SegConfig) -> UNet3D:
    return UNet3D(backbone_config(cfg), in_channels=1, out_channels=1, time_conditioned=False,
                  with_transformer=False)


def dice_ce_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    prob = torch.sigmoid(logits)
    inter = (prob * target).sum()
    dice = (2 * inter + eps) / (prob.sum() + target.sum() + eps)
    return F.binary_cross_entropy_with_logits(logits, target) + (1 - dice)


def _load_case(case) -> tuple[np.ndarray, np.ndarray]:
    """A case is a dict with 'image' and 'ln_mask' paths, or an (image, mask) pair of arrays/volumes."""
    if isinstance(case, dict):
        img, ln = load_volume(case["image"]), load_volume(case["ln_mask"])
        return np.asarray(img.data, np.float32), (np.asarray(ln.data) > 0).astype(np.float32)
    img, ln = case
    img = getattr(img, "data", img)
    ln = getattr(ln, "data", ln)
    return np.asarray(img, np.float32), (np.asarray(ln) > 0).astype(np.float32)


def _random_patch(image, mask, patch, rng, node_fraction):
    pts = np.argwhere(mask > 0)
    if len(pts) and rng.random() < node_fraction:
        centre = pts[rng.integers(len(pts))] + rng.uniform(-0.25, 0.25, 3) * np.array(patch)
    else:
        centre = rng.uniform(0, 1, 3) * np.array(mask.shape)
    start = _box(centre, patch, mask.shape)
    return extract(image, start, patch, IMAGE_PAD), extract(mask, start, patch, 0.0)


def train_segmenter(spec: SegDatasetSpec, cfg: SegConfig, out_dir=None) -> dict:
    """Train and return ``{"checkpoint": path or None, "losses": [...], "plan": [...], "model": module}``."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    real = [_load_case(c) for c in spec.real_cases] if spec.strategy != "synt" else []
    synt = [_load_case(c) for c in spec.synthetic_cases] if spec.strategy != "real" else []
    pools = {"real": real, "synt": synt}
    plan = epoch_plan(spec)

    model = build_segmenter(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "seg_train_log.csv", "w")
        log_file.write("iteration,loss,lr,wall_ms\n")
        (out_dir / "epoch_plan.json").write_text(json.dumps(
            {"strategy": spec.strategy, "multiplier": spec.synthetic_multiplier, "plan": plan}))

    order: list = []
    losses = []
    model.train()
    try:
        for it in range(1, cfg.iterations + 1):
            tick = time.perf_counter()
            xs, ys = [], []
            for _ in range(cfg.batch_size):
                if not order:
                    order = [plan[i] for i in rng.permutation(len(plan))]
                src, idx = order.pop()
                x, y = _random_patch(*pools[src][idx], cfg.patch_shape, rng, cfg.node_patch_fraction)
                xs.append(x)
                ys.append(y)
            x = torch.from_numpy(np.stack(xs)[:, None])
            y = torch.from_numpy(np.stack(ys)[:, None])
            loss = dice_ce_loss(model(x), y)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite segmentation loss at iteration {it}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            if log_file:
                log_file.write(f"{it},{loss.item():.6f},{cfg.lr:g},{(time.perf_counter() - tick) * 1000:.1f}\n")
            if out_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                save_segmenter(out_dir / "segmenter.pt", model, cfg)
    finally:
        if log_file:
            log_file.close()
    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / "segmenter.pt"
        save_segmenter(ckpt, model, cfg)
    return {"checkpoint": ckpt, "losses": losses, "plan": plan, "model": model}


def save_segmenter(path, model: UNet3D, cfg: SegConfig) -> None:
    cfg_d = asdict(cfg)
    torch.save({"format": SEG_FORMAT, "config": cfg_d, "model": model.state_dict()}, path)


def load_segmenter(path) -> tuple[UNet3D, SegConfig]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != SEG_FORMAT:
        raise ValueError(f"{path} is not a segmenter checkpoint")
    d = dict(blob["config"])
    for k in ("patch_shape", "channel_multipliers"):
        d[k] = tuple(d[k])
    cfg = SegConfig(**d)
    model = build_segmenter(cfg)
    try:
        model.load_state_dict(blob["model"])
    except RuntimeError as exc:
        raise ValueError(f"checkpoint weights do not match its config: {exc}") from exc
    model.eval()
    return model, cfg


def _starts(n: int, p: int, step: int) -> list[int]:
    if n <= p:
        return [(n - p) // 2]
    out = list(range(0, n - p + 1, step))
    if out[-1] != n - p:
        out.append(n - p)
    return out


@torch.no_grad()
def sliding_window_probs(model: UNet3D, image: np.ndarray, patch, overlap: float = 0.5) -> np.ndarray:
    image = np.asarray(image, np.float32)
    prob = np.zeros(image.shape, np.float64)
    count = np.zeros(image.shape, np.float64)
    steps = [max(1, int(p * (1 - overlap))) for p in patch]
    grids = [_starts(n, p, s) for n, p, s in zip(image.shape, patch, steps)]
    for start in product(*grids):
        x = extract(image, start, patch, IMAGE_PAD)
        p = torch.sigmoid(model(torch.from_numpy(x)[None, None]))[0, 0].double().numpy()
        dst = tuple(slice(max(s, 0), min(s + q, n)) for s, q, n in zip(start, patch, image.shape))
        src = tuple(slice(d.start - s, d.stop - s) for d, s in zip(dst, start))
        prob[dst] += p[src]
        count[dst] += 1
    return prob / np.maximum(count, 1)


def infer_segmenter(checkpoint, image: ScalarVolume, roi_expansion_mm: float = 50.0,
                    roi_mask: LabelVolume | None = None) -> LabelVolume:
    """Binary prediction on ``image``'s grid.

    With ``roi_mask`` the prediction is restricted to the node bounding box grown by
    ``roi_expansion_mm``; voxels outside that region are background.
    """
    model, cfg = (checkpoint if isinstance(checkpoint, tuple) else load_segmenter(checkpoint))
    out = np.zeros(image.shape, np.uint8)
    if roi_mask is not None and (np.asarray(roi_mask.data) > 0).any():
        sub, sub_mask = crop_roi(image, roi_mask, roi_expansion_mm)
        lo = [int(round((o2 - o1) / s)) for o1, o2, s in zip(image.origin, sub.origin, image.spacing_mm)]
        probs = sliding_window_probs(model, sub.data, cfg.patch_shape, cfg.window_overlap)
        sl = tuple(slice(a, a + n) for a, n in zip(lo, sub.shape))
        out[sl] = probs > cfg.threshold
    else:
        out = (sliding_window_probs(model, image.data, cfg.patch_shape, cfg.window_overlap) > cfg.threshold)
    return LabelVolume(out.astype(np.uint8), image.spacing_mm, image.origin, {1: "lymph_node"})


def export_nnunet(cases: list[dict], out_dir, name: str = "Dataset001_LymphNode", split: dict | None = None) -> Path:
    """Write an imagesTr/labelsTr NIfTI layout with dataset.json and a split list."""
    import nibabel as nib

    root = Path(out_dir) / name
    (root / "imagesTr").mkdir(parents=True, exist_ok=True)
    (root / "labelsTr").mkdir(parents=True, exist_ok=True)
    ids = []
    for case in cases:
        cid = str(case["id"])
        img, ln = load_volume(case["image"]), load_volume(case["ln_mask"])
        affine = np.diag([*img.spacing_mm, 1.0])
        affine[:3, 3] = img.origin
        nib.save(nib.Nifti1Image(np.asarray(img.data, np.float32), affine), root / "imagesTr" / f"{cid}_0000.nii.gz")
        nib.save(nib.Nifti1Image((np.asarray(ln.data) > 0).astype(np.uint8), affine), root / "labelsTr" / f"{cid}.nii.gz")
        ids.append(cid)
    (root / "dataset.json").write_text(json.dumps({
        "channel_names": {"0": "CT"}, "labels": {"background": 0, "lymph_node": 1},
        "numTraining": len(ids), "file_ending": ".nii.gz"}, indent=2))
    (root / "splits_final.json").write_text(json.dumps([split or {"train": ids, "val": []}], indent=2))
    return root
