import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import _components_bfs, assd_oracle, node_recall_oracle, overlap_oracle, random_mask_pair

from lnddpm.errors import DataError
from lnddpm.metrics import assd, evaluate_dataset, node_recall, surface, voxel_overlap_metrics


def cube(shape=(8, 8, 8), lo=(2, 2, 2), size=2):
    m = np.zeros(shape, bool)
    m[tuple(slice(a, a + size) for a in lo)] = True
    return m


def test_overlap_examples():
    a = cube()
    assert voxel_overlap_metrics(a, a) == (1, 1, 1, 1)
    assert voxel_overlap_metrics(a, cube(lo=(5, 5, 5))) == (0, 0, 0, 0)
    dsc, iou, rec, prec = voxel_overlap_metrics(a, cube(lo=(3, 2, 2)))
    assert (dsc, rec, prec) == (0.5, 0.5, 0.5) and math.isclose(iou, 1 / 3)


def test_empty_conventions():
    z = np.zeros((4, 4, 4), bool)
    assert voxel_overlap_metrics(z, z) == (1, 1, 1, 1)
    assert voxel_overlap_metrics(z, cube((4, 4, 4), (0, 0, 0))) == (0, 0, 0, 0)
    with pytest.raises(ValueError):
        assd(z, cube((4, 4, 4), (0, 0, 0)))
    with pytest.raises(ValueError):
        node_recall(cube((4, 4, 4), (0, 0, 0)), z)
    with pytest.raises(DataError):
        voxel_overlap_metrics(z, np.zeros((4, 4, 5)))


def test_assd_examples():
    a = cube()
    assert assd(a, a) == 0
    p = np.zeros((8, 8, 8), bool)
    g = np.zeros((8, 8, 8), bool)
    p[1, 1, 1] = True
    g[1, 1, 6] = True
    assert assd(p, g) == 5.0
    assert assd(p, g, (1, 1, 0.5)) == 2.5


def test_surface_counts_grid_border():
    full = np.ones((3, 3, 3), bool)
    s = surface(full)
    assert s.sum() == 26 and not s[1, 1, 1]


def test_node_recall_examples():
    gt = cube((16, 16, 16), (1, 1, 1), 3) | cube((16, 16, 16), (10, 10, 10), 3)
    assert node_recall(cube((16, 16, 16), (1, 1, 1), 3), gt) == 0.5
    assert node_recall(gt, gt) == 1.0
    assert node_recall(np.zeros_like(gt), gt) == 0.0
    # one voxel of a 27-voxel node: DSC 2/28 < 0.1
    tiny = np.zeros_like(gt)
    tiny[1, 1, 1] = True
    assert node_recall(tiny, cube((16, 16, 16), (1, 1, 1), 3)) == 0.0
    assert node_recall(tiny, cube((16, 16, 16), (1, 1, 1), 3), dsc_threshold=0.05) == 1.0


@pytest.mark.parametrize("seed", range(15))
def test_metrics_match_oracles(seed):
    rng = np.random.default_rng(seed)
    a, b = random_mask_pair(rng)
    spacing = tuple(rng.uniform(0.5, 2.0, 3))
    got = voxel_overlap_metrics(a, b)
    assert np.allclose(got, overlap_oracle(a, b), rtol=0, atol=1e-9)
    assert abs(assd(a, b, spacing) - assd_oracle(a, b, spacing)) < 1e-9
    assert node_recall(a, b) == node_recall_oracle(a, b)
    assert abs(got[0] - 2 * got[1] / (1 + got[1])) < 1e-9


@given(seed=st.integers(0, 100_000))
@settings(max_examples=25, deadline=None)
def test_symmetry_and_scale(seed):
    rng = np.random.default_rng(seed)
    a, b = random_mask_pair(rng, (8, 8, 8))
    sp = tuple(rng.uniform(0.5, 2.0, 3))
    assert assd(a, b, sp) == pytest.approx(assd(b, a, sp), abs=1e-12)
    assert assd(a, b, tuple(2 * s for s in sp)) == pytest.approx(2 * assd(a, b, sp), rel=1e-12)
    m_ab = voxel_overlap_metrics(a, b)
    m_ba = voxel_overlap_metrics(b, a)
    assert m_ab[0] == m_ba[0] and m_ab[3] == m_ba[2]
    k = node_recall(a, b)
    n = len(_components_bfs(b))
    assert any(abs(k - i / n) < 1e-12 for i in range(n + 1))


@given(seed=st.integers(0, 100_000))
@settings(max_examples=25, deadline=None)
def test_adding_true_positive_is_monotone(seed):
    rng = np.random.default_rng(seed)
    a, b = random_mask_pair(rng, (8, 8, 8))
    missed = np.argwhere(b & ~a)
    if len(missed) == 0:
        return
    a2 = a.copy()
    a2[tuple(missed[rng.integers(len(missed))])] = True
    before, after = voxel_overlap_metrics(a, b), voxel_overlap_metrics(a2, b)
    assert after[0] >= before[0] and after[1] >= before[1] and after[2] >= before[2]


def test_evaluate_dataset_aggregation(tmp_path, caplog):
    a = cube()
    z = np.zeros_like(a)
    rep = evaluate_dataset([("one", a, a, (1, 1, 1))])
    assert (rep.dsc, rep.iou, rep.assd_mm, rep.node_recall) == (1, 1, 0, 1)
    rep = evaluate_dataset([("hit", a, a, (1, 1, 1)), ("miss", cube(lo=(5, 5, 5)), a, (1, 1, 1)),
                            ("empty", z, a, (1, 1, 1))], out_path=tmp_path / "report")
    assert rep.dsc == pytest.approx(1 / 3)
    assert rep.assd_missing == 1 and "ASSD undefined" in caplog.text
    data = json.loads((tmp_path / "report.json").read_text())
    assert set(data) >= {"dsc", "iou", "recall", "precision", "assd_mm", "node_recall", "per_case"}
    table = (tmp_path / "report.txt").read_text()
    assert "mean" in table and "n/a" in table
    for row in data["per_case"]:
        assert abs(row["dsc"] - 2 * row["iou"] / (1 + row["iou"])) < 1e-9
    rep = evaluate_dataset([(z, a, (1, 1, 1)), (a, a, (1, 1, 1))])
    assert rep.dsc == 0.5


def test_evaluate_dataset_errors():
    with pytest.raises(ValueError):
        evaluate_dataset([])
    with pytest.raises(DataError, match="case bad"):
        evaluate_dataset([("bad", np.zeros((4, 4, 4)), np.zeros((4, 4, 5)), (1, 1, 1))])
