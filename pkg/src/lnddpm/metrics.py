"""Voxel- and node-level segmentation metrics."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError

log = logging.getLogger(__name__)

CONN26 = np.ones((3, 3, 3), dtype=bool)
FACE = ndimage.generate_binary_structure(3, 1)
METRIC_NAMES = ("dsc", "iou", "recall", "precision", "assd_mm", "node_recall")


def _binary_pair(pred, gt):
    p = np.asarray(getattr(pred, "data", pred)) > 0
    g = np.asarray(getattr(gt, "data", gt)) > 0
    if p.shape != g.shape:
        raise DataError(f"geometry mismatch: pred {p.shape} vs gt {g.shape}")
    return p, g


def voxel_overlap_metrics(pred, gt) -> tuple[float, float, float, float]:
    """(dsc, iou, recall, precision). Both empty -> all 1; exactly one empty -> all 0."""
    p, g = _binary_pair(pred, gt)
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return 1.0, 1.0, 1.0, 1.0
    if np_ == 0 or ng == 0:
        return 0.0, 0.0, 0.0, 0.0
    tp = int((p & g).sum())
    return 2.0 * tp / (np_ + ng), tp / (np_ + ng - tp), tp / ng, tp / np_


def surface(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one face neighbour outside the mask (outside the grid counts)."""
    return mask & ~ndimage.binary_erosion(mask, structure=FACE, border_value=0)


def assd(pred, gt, spacing_mm=(1.0, 1.0, 1.0)) -> float:
    """Average symmetric surface distance in mm: mean of the two directed mean distances."""
    p, g = _binary_pair(pred, gt)
    if not p.any() or not g.any():
        raise ValueError("ASSD is undefined when either mask is empty")
    sp, sg = surface(p), surface(g)
    dist_to_g = ndimage.distance_transform_edt(~sg, sampling=spacing_mm)
    dist_to_p = ndimage.distance_transform_edt(~sp, sampling=spacing_mm)
    return 0.5 * (float(dist_to_g[sp].mean()) + float(dist_to_p[sg].mean()))


def node_recall(pred, gt, dsc_threshold: float = 0.1) -> float:
    """Fraction of 26-connected ground-truth nodes with some predicted component at DSC > threshold."""
    p, g = _binary_pair(pred, gt)
    gl, ng = ndimage.label(g, structure=CONN26)
    if ng == 0:
        raise ValueError("node recall is undefined for an empty ground truth")
    pl, npred = ndimage.label(p, structure=CONN26)
    if npred == 0:
        return 0.0
    gsize = np.bincount(gl.ravel(), minlength=ng + 1)
    psize = np.bincount(pl.ravel(), minlength=npred + 1)
    both = (gl > 0) & (pl > 0)
    # overlap counts for every touching (gt, pred) pair; non-touching pairs have DSC 0
    pairs = gl[both].astype(np.int64) * (npred + 1) + pl[both]
    keys, counts = np.unique(pairs, return_counts=True)
    detected = np.zeros(ng + 1, dtype=bool)
    for key, inter in zip(keys, counts):
        gi, pi = divmod(int(key), npred + 1)
        if 2.0 * inter / (gsize[gi] + psize[pi]) > dsc_threshold:
            detected[gi] = True
    return float(detected[1:].sum()) / ng


@dataclass
class MetricsReport:
    dsc: float
    iou: float
    recall: float
    precision: float
    assd_mm: float
    node_recall: float
    per_case: list = field(default_factory=list)
    assd_missing: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        head = f"{'case':<16}" + "".join(f"{m:>12}" for m in METRIC_NAMES)
        lines = [head, "-" * len(head)]
        for row in self.per_case:
            lines.append(f"{str(row['case']):<16}" + "".join(_fmt(row[m]) for m in METRIC_NAMES))
        lines.append("-" * len(head))
        lines.append(f"{'mean':<16}" + "".join(_fmt(getattr(self, m)) for m in METRIC_NAMES))
        if self.assd_missing:
            lines.append(f"ASSD undefined for {self.assd_missing} case(s); excluded from the mean")
        return "\n".join(lines)


def _fmt(v):
    return f"{'n/a':>12}" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:>12.4f}"


def evaluate_case(pred, gt, spacing_mm, dsc_threshold: float = 0.1) -> dict:
    dsc, iou, rec, prec = voxel_overlap_metrics(pred, gt)
    p, g = _binary_pair(pred, gt)
    row = {"dsc": dsc, "iou": iou, "recall": rec, "precision": prec}
    row["assd_mm"] = assd(p, g, spacing_mm) if p.any() and g.any() else None
    row["node_recall"] = node_recall(p, g, dsc_threshold) if g.any() else None
    return row


def evaluate_dataset(cases, out_path=None, dsc_threshold: float = 0.1) -> MetricsReport:
    """Macro-average metrics over ``cases`` = [(pred, gt, spacing) or (case_id, pred, gt, spacing)].

    Writes ``<out_path>.json`` and ``<out_path>.txt`` when ``out_path`` is given.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("no cases to evaluate")
    rows = []
    for i, case in enumerate(cases):
        cid, pred, gt, spacing = case if len(case) == 4 else (i, *case)
        try:
            row = evaluate_case(pred, gt, spacing, dsc_threshold)
        except DataError as exc:
            raise DataError(f"case {cid}: {exc}") from exc
        rows.append({"case": cid, **row})

    def mean(key):
        vals = [r[key] for r in rows if r[key] is not None]
        return float(np.mean(vals)) if vals else float("nan")

    missing = sum(r["assd_mm"] is None for r in rows)
    if missing:
        log.warning("ASSD undefined for %d of %d cases (empty mask); excluded from the mean", missing, len(rows))
    report = MetricsReport(*(mean(m) for m in METRIC_NAMES), per_case=rows, assd_missing=missing)
    if out_path is not None:
        out = Path(out_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        stem = out.with_suffix("") if out.suffix in (".json", ".txt") else out
        stem.with_suffix(".json").write_text(json.dumps(report.to_dict(), indent=2, default=float))
        stem.with_suffix(".txt").write_text(report.table() + "\n")
    return report
