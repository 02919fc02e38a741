import json

import numpy as np
import pytest
import torch

from lnddpm.conditions import window_normalize
from lnddpm.config import SegConfig
from lnddpm.errors import DataError
from lnddpm.phantom import PhantomSpec, generate_phantom
from lnddpm.seg import (SegDatasetSpec, epoch_plan, export_nnunet, infer_segmenter, load_segmenter,
                        train_segmenter)
from lnddpm.volumes import ScalarVolume, save_volume, write_manifest

CFG = SegConfig(patch_shape=(16, 16, 16), base_channels=8, channel_multipliers=(1, 2), iterations=120,
                lr=2e-3, batch_size=2, checkpoint_every=0, seed=0)


def _cases(n, seed=0):
    out = []
    for i in range(n):
        image, _, ln = generate_phantom(PhantomSpec(organ_count=2, rng_seed=seed + i))
        out.append((window_normalize(image), ln))
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("seg")
    spec = SegDatasetSpec(real_cases=_cases(4), strategy="real")
    return train_segmenter(spec, CFG, out), out


def test_epoch_plan_multiplier_arithmetic():
    spec = SegDatasetSpec(synthetic_cases=["a", "b", "c"], strategy="synt", synthetic_multiplier=2)
    plan = epoch_plan(spec)
    assert len(plan) == 6 and [i for _, i in plan] == [0, 1, 2, 0, 1, 2]


@pytest.mark.parametrize("m", [1, 5, 10, 20])
def test_mixing_frequency(m):
    spec = SegDatasetSpec(real_cases=list("abcd"), synthetic_cases=list("xyz"), strategy="real+synt",
                          synthetic_multiplier=m)
    plan = epoch_plan(spec)
    n_real = sum(s == "real" for s, _ in plan)
    n_syn = sum(s == "synt" for s, _ in plan)
    assert n_real == 4 and n_syn == m * n_real
    assert epoch_plan(SegDatasetSpec(real_cases=list("abcd"), strategy="real")) == [("real", i) for i in range(4)]


def test_dataset_spec_validation():
    with pytest.raises(DataError):
        SegDatasetSpec(strategy="synt")
    with pytest.raises(DataError):
        SegDatasetSpec(synthetic_cases=["x"], strategy="real+synt")
    with pytest.raises(ValueError):
        SegDatasetSpec(real_cases=["a"], strategy="both")
    with pytest.raises(ValueError):
        SegDatasetSpec(real_cases=["a"], synthetic_multiplier=0)


def test_training_loss_decreases(trained):
    res, out = trained
    losses = res["losses"]
    assert len(losses) == CFG.iterations
    assert np.mean(losses[-20:]) < np.mean(losses[:20])
    rows = (out / "seg_train_log.csv").read_text().splitlines()
    assert rows[0] == "iteration,loss,lr,wall_ms" and len(rows) == CFG.iterations + 1
    assert json.loads((out / "epoch_plan.json").read_text())["strategy"] == "real"


def test_training_is_reproducible():
    cfg = SegConfig(**{**CFG.__dict__, "iterations": 5})
    spec = SegDatasetSpec(real_cases=_cases(2), strategy="real")
    assert train_segmenter(spec, cfg)["losses"] == train_segmenter(spec, cfg)["losses"]


def test_inference_geometry_and_determinism(trained):
    res, out = trained
    model, cfg = load_segmenter(res["checkpoint"])
    image, ln = _cases(1, seed=50)[0]
    a = infer_segmenter((model, cfg), image)
    b = infer_segmenter(res["checkpoint"], image)
    assert a.shape == image.shape and a.spacing_mm == image.spacing_mm and a.origin == image.origin
    assert np.array_equal(a.data, b.data)
    roi = infer_segmenter((model, cfg), image, roi_expansion_mm=4, roi_mask=ln)
    assert roi.shape == image.shape
    lo = np.argwhere(ln.data).min(0) - 4
    hi = np.argwhere(ln.data).max(0) + 4
    outside = np.ones(image.shape, bool)
    outside[tuple(slice(max(a_, 0), b_ + 1) for a_, b_ in zip(lo, hi))] = False
    assert not roi.data[outside].any()


def test_all_air_gives_empty_mask(trained):
    res, _ = trained
    air = ScalarVolume(np.full((32, 32, 32), -1.0, np.float32), (1, 1, 1))
    assert infer_segmenter(res["checkpoint"], air).data.sum() == 0


def test_checkpoint_config_mismatch(trained, tmp_path):
    res, _ = trained
    blob = torch.load(res["checkpoint"], weights_only=False)
    blob["config"]["base_channels"] = 4
    torch.save(blob, tmp_path / "bad.pt")
    with pytest.raises(ValueError, match="do not match"):
        load_segmenter(tmp_path / "bad.pt")
    torch.save({"format": "other"}, tmp_path / "other.pt")
    with pytest.raises(ValueError):
        load_segmenter(tmp_path / "other.pt")


def test_export_nnunet_layout(tmp_path):
    nib = pytest.importorskip("nibabel")
    rows = []
    for i, (image, ln) in enumerate(_cases(2)):
        p_img, p_ln = tmp_path / f"c{i}_image.h5", tmp_path / f"c{i}_ln.h5"
        save_volume(p_img, image)
        save_volume(p_ln, ln)
        rows.append({"id": f"c{i}", "image": p_img, "ln_mask": p_ln})
    write_manifest(tmp_path, rows)
    root = export_nnunet(rows, tmp_path / "export", "Dataset001_Test")
    meta = json.loads((root / "dataset.json").read_text())
    assert meta["numTraining"] == 2 and meta["labels"]["lymph_node"] == 1
    img = nib.load(root / "imagesTr" / "c0_0000.nii.gz")
    assert img.shape == (32, 32, 32)
    lab = np.asarray(nib.load(root / "labelsTr" / "c0.nii.gz").dataobj)
    assert set(np.unique(lab)) <= {0, 1}
    assert json.loads((root / "splits_final.json").read_text())[0]["train"] == ["c0", "c1"]
