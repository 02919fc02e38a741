"""Command suite: phantom -> prepare -> train-diffusion -> sample -> train-seg -> infer-seg -> evaluate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, DataError, NumericalError

log = logging.getLogger("lnddpm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _map(fn, items, jobs: int):
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _load_run_config(path):
    from .config import RunConfig, load_config
    return load_config(path) if path else RunConfig().validate()


def _echo_config(cfg, out: Path):
    from .config import dump_config
    dump_config(cfg, out / "config.yaml")


# --- phantom ------------------------------------------------------------------------

def _phantom_case(args):
    from .phantom import PhantomSpec, generate_phantom
    from .volumes import save_volume
    spec_d, i, out = args
    spec = PhantomSpec(**{**spec_d, "rng_seed": spec_d.get("rng_seed", 0) + i})
    image, anatomy, ln = generate_phantom(spec)
    cid = f"case_{i:03d}"
    paths = {"image": out / f"{cid}_image.h5", "anatomy": out / f"{cid}_anatomy.h5", "ln_mask": out / f"{cid}_ln.h5"}
    save_volume(paths["image"], image)
    save_volume(paths["anatomy"], anatomy)
    save_volume(paths["ln_mask"], ln)
    return {"id": cid, **paths}


def cmd_phantom(args):
    from .phantom import PhantomSpec
    from .volumes import write_manifest
    spec_d = yaml.safe_load(Path(args.spec).read_text()) if args.spec else {}
    if not isinstance(spec_d, dict):
        raise ConfigError(f"{args.spec}: phantom spec must be a mapping")
    try:
        spec = PhantomSpec(**spec_d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"phantom spec: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cases = _map(_phantom_case, [(spec_d, i, out) for i in range(args.count)], args.jobs)
    (out / "phantom_spec.yaml").write_text(yaml.safe_dump(spec.to_dict(), sort_keys=False))
    write_manifest(out, cases, stage="raw")
    log.info("wrote %d phantom cases to %s", len(cases), out)


# --- prepare ------------------------------------------------------------------------

def _prepare_case(args):
    from .pipeline import prepare_case
    from .volumes import load_volume, save_volume
    case, cfg, out, expansion = args
    image, anatomy, ln = prepare_case(load_volume(case["image"]), load_volume(case["anatomy"]),
                                      load_volume(case["ln_mask"]), cfg.data, expansion)
    cid = case["id"]
    paths = {"image": out / f"{cid}_image.h5", "anatomy": out / f"{cid}_anatomy.h5", "ln_mask": out / f"{cid}_ln.h5"}
    save_volume(paths["image"], image)
    save_volume(paths["anatomy"], anatomy)
    save_volume(paths["ln_mask"], ln)
    return {"id": cid, **paths}


def cmd_prepare(args):
    from .volumes import read_manifest, write_manifest
    cfg = _load_run_config(args.config)
    cases, _ = read_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    expansion = args.expansion_mm
    done = _map(_prepare_case, [(c, cfg, out, expansion) for c in cases], args.jobs)
    _echo_config(cfg, out)
    write_manifest(out, done, stage="prepared", anatomy_channels=cfg.data.anatomy_channels)
    log.info("prepared %d cases into %s", len(done), out)


def _load_prepared(data_dir):
    from .volumes import load_volume, read_manifest
    cases, meta = read_manifest(data_dir)
    return [(c["id"], load_volume(c["image"]), load_volume(c["anatomy"]), load_volume(c["ln_mask"]))
            for c in cases], meta


# --- diffusion ----------------------------------------------------------------------

def cmd_train_diffusion(args):
    from .denoiser import DenoiserState
    from .diffusion import load_checkpoint, train
    from .pipeline import PatchStream
    cfg = _load_run_config(args.config)
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    cases, _ = _load_prepared(args.data)
    stream = PatchStream([c[1:] for c in cases], cfg.denoiser.patch_shape, cfg.denoiser.anatomy_channels,
                         seed=cfg.seed)
    state = load_checkpoint(args.resume)[0] if args.resume else DenoiserState.create(cfg.denoiser, seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out)
    train(stream, state, cfg.schedule.build(), cfg.train, out_dir=out, run_config=cfg.to_dict())
    log.info("trained to iteration %d; checkpoint %s", state.iteration, out / "checkpoint_latest.pt")


def _anatomy_from_onehot(onehot: np.ndarray) -> np.ndarray:
    labels = np.argmax(onehot, axis=0) + 1
    return np.where(onehot.any(0), labels, 0).astype(np.uint8)


def cmd_sample(args):
    from .conditions import transform_condition
    from .config import config_from_dict
    from .diffusion import load_checkpoint, sample_loop
    from .pipeline import node_center, patch_at
    from .volumes import LabelVolume, ScalarVolume, save_volume, write_manifest
    state, run_cfg = load_checkpoint(args.checkpoint)
    cfg = config_from_dict(run_cfg)
    if cfg.denoiser.to_dict() != state.config.to_dict():
        raise ConfigError("checkpoint config does not match its embedded run configuration")
    sched = cfg.schedule.build()
    cases, _ = _load_prepared(args.conditions)
    if not cases:
        raise DataError(f"no condition cases in {args.conditions}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(args.count):
        cid, image, anatomy, ln = cases[i % len(cases)]
        _, cond, _ = patch_at(image, anatomy, ln, node_center(ln), cfg.denoiser.patch_shape,
                              cfg.denoiser.anatomy_channels)
        if args.transform == "on":
            cond = transform_condition(cond, args.seed + i, cfg.transform)
        x = sample_loop(state, cond, sched, args.seed + i, use_ema=cfg.sampling.use_ema,
                        clip_x0=1.0 if cfg.sampling.clip_denoised else None)
        sid = f"synt_{i:04d}"
        sp = cfg.data.spacing_mm
        paths = {"image": out / f"{sid}_image.h5", "anatomy": out / f"{sid}_anatomy.h5",
                 "ln_mask": out / f"{sid}_ln.h5"}
        save_volume(paths["image"], ScalarVolume(x.astype(np.float32), sp))
        save_volume(paths["anatomy"], LabelVolume(_anatomy_from_onehot(cond.anatomy_onehot), sp,
                                                  label_table=anatomy.label_table))
        save_volume(paths["ln_mask"], LabelVolume(cond.ln_mask, sp, label_table={1: "lymph_node"}))
        rows.append({"id": sid, "source": cid, "seed": args.seed + i, **paths})
        log.info("sampled %s from %s", sid, cid)
    _echo_config(cfg, out)
    write_manifest(out, rows, stage="synthetic", transform=args.transform)


# --- segmentation ---------------------------------------------------------------------

def cmd_train_seg(args):
    from .seg import SegDatasetSpec, train_segmenter
    from .volumes import read_manifest
    cfg = _load_run_config(args.config)
    if args.iterations is not None:
        cfg.seg.iterations = args.iterations
    if args.strategy != "synt" and not args.real:
        raise ConfigError(f"strategy {args.strategy} requires --real")
    if args.strategy != "real" and not args.synt:
        raise ConfigError(f"strategy {args.strategy} requires --synt")
    real = read_manifest(args.real)[0] if args.real else []
    synt = read_manifest(args.synt)[0] if args.synt else []
    try:
        spec = SegDatasetSpec(real, synt, args.strategy, args.multiplier)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    res = train_segmenter(spec, cfg.seg, out)
    _echo_config(cfg, out)
    losses = res["losses"]
    log.info("segmenter trained (%s, x%d): loss %.4f -> %.4f", args.strategy, args.multiplier,
             losses[0] if losses else float("nan"), losses[-1] if losses else float("nan"))


def cmd_infer_seg(args):
    from .seg import infer_segmenter, load_segmenter
    from .volumes import load_volume, read_manifest, save_volume, write_manifest
    model = load_segmenter(args.checkpoint)
    cases, _ = read_manifest(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for c in cases:
        image = load_volume(c["image"])
        roi = load_volume(c["ln_mask"]) if args.roi_from_gt and "ln_mask" in c else None
        pred = infer_segmenter(model, image, args.roi_expansion_mm, roi)
        path = out / f"{c['id']}_pred.h5"
        save_volume(path, pred)
        rows.append({"id": c["id"], "ln_mask": path})
    write_manifest(out, rows, stage="prediction")


def cmd_evaluate(args):
    from .metrics import evaluate_dataset
    from .volumes import load_volume, read_manifest
    pred, _ = read_manifest(args.pred)
    gt, _ = read_manifest(args.gt)
    gt_by_id = {c["id"]: c for c in gt}
    missing = [c["id"] for c in pred if c["id"] not in gt_by_id]
    if missing:
        raise DataError(f"no ground truth for predicted case(s) {missing}")
    rows = []
    for c in pred:
        p = load_volume(c["ln_mask"])
        g = load_volume(gt_by_id[c["id"]]["ln_mask"])
        rows.append((c["id"], p, g, g.spacing_mm))
    report = evaluate_dataset(rows, args.out, args.dsc_threshold)
    print(report.table())


def cmd_slices(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from .volumes import load_volume
    vol = load_volume(args.case)
    overlay = load_volume(args.overlay) if args.overlay else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = np.asarray(vol.data, dtype=np.float32)
    stem = Path(args.case).stem
    for axis, name in enumerate(("sagittal", "coronal", "axial")):
        idx = data.shape[axis] // 2
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(np.take(data, idx, axis=axis).T, cmap="gray", origin="lower")
        if overlay is not None:
            m = np.take(np.asarray(overlay.data), idx, axis=axis).T
            ax.contour(m > 0, levels=[0.5], colors="r", linewidths=0.8)
        ax.set_title(f"{stem} {name} [{idx}]")
        ax.axis("off")
        fig.savefig(out / f"{stem}_{name}.png", dpi=100, bbox_inches="tight")
        plt.close(fig)


def cmd_export_nnunet(args):
    from .seg import export_nnunet
    from .volumes import read_manifest
    cases, _ = read_manifest(args.data)
    root = export_nnunet(cases, args.out, args.name)
    print(root)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lnddpm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate phantom cases and a manifest")
    s.add_argument("--spec", help="YAML phantom spec (PhantomSpec fields)")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(fn=cmd_phantom)

    s = sub.add_parser("prepare", help="crop / resample / window / anatomy-mask a manifest of cases")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--expansion-mm", type=float, default=None, help="ROI expansion (default: training value)")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(fn=cmd_prepare)

    s = sub.add_parser("train-diffusion", help="train the conditional denoiser")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--iterations", type=int, help="steps to run now (added to a resumed count)")
    s.add_argument("--resume")
    s.set_defaults(fn=cmd_train_diffusion)

    s = sub.add_parser("sample", help="synthesize paired image + mask cases")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--conditions", required=True)
    s.add_argument("--transform", choices=("on", "off"), default="on")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    s = sub.add_parser("train-seg", help="train the segmentation harness")
    s.add_argument("--strategy", choices=("real", "synt", "real+synt"), required=True)
    s.add_argument("--multiplier", type=int, default=10)
    s.add_argument("--real")
    s.add_argument("--synt")
    s.add_argument("--config")
    s.add_argument("--iterations", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_seg)

    s = sub.add_parser("infer-seg", help="sliding-window inference over a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--roi-expansion-mm", type=float, default=50.0)
    s.add_argument("--roi-from-gt", action="store_true", help="restrict inference to the node ROI")
    s.set_defaults(fn=cmd_infer_seg)

    s = sub.add_parser("evaluate", help="segmentation metrics report")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dsc-threshold", type=float, default=0.1)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("slices", help="orthogonal mid-slice PNGs of a volume")
    s.add_argument("--case", required=True)
    s.add_argument("--overlay")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_slices)

    s = sub.add_parser("export-nnunet", help="export a manifest as an nnU-Net style dataset folder")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--name", default="Dataset001_LymphNode")
    s.set_defaults(fn=cmd_export_nnunet)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    for name in ("jobs", "count", "multiplier", "iterations"):
        v = getattr(args, name, None)
        if v is not None and v < (0 if name == "iterations" else 1):
            print(f"lnddpm {args.command}: --{name} must be positive, got {v}", file=sys.stderr)
            return EXIT_USAGE
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"lnddpm {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"lnddpm {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"lnddpm {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
