import numpy as np
import pytest

from astn.metrics import MetricsReport, assd, boundary, dsc, evaluate, hd, iou

from oracles import hd_assd


def test_dsc_iou_counts():
    p = np.zeros((3, 3), int)
    q = np.zeros((3, 3), int)
    p[0, :3] = 1  # TP at (0,0),(0,1); FP at (0,2)
    q[0, :2] = 1
    q[1, 0] = 1  # FN
    assert dsc(p, q) == pytest.approx(4 / 6)
    assert iou(p, q) == pytest.approx(0.5)


def test_identical_and_disjoint():
    m = np.zeros((5, 5), int)
    m[1:3, 1:4] = 1
    assert dsc(m, m) == 1 and iou(m, m) == 1
    other = np.zeros((5, 5), int)
    other[4, 4] = 1
    assert dsc(m, other) == 0


def test_empty_conventions():
    z = np.zeros((4, 4))
    one = z.copy()
    one[1, 1] = 1
    assert dsc(z, z) == 1 and iou(z, z) == 1
    assert dsc(z, one) == 0 and iou(one, z) == 0
    row = evaluate(z, one)
    assert row["hd"] is None and row["assd"] is None


def test_extent_mismatch():
    with pytest.raises(ValueError):
        dsc(np.zeros((2, 2)), np.zeros((3, 3)))


def test_single_pixel_distances():
    p = np.zeros((6, 6))
    q = np.zeros((6, 6))
    p[0, 0] = 1
    q[3, 4] = 1
    assert hd(p, q) == 5 and hd(q, p) == 5
    assert assd(p, q) == 5


def test_hd_zero_on_identity():
    m = np.zeros((8, 8))
    m[2:6, 1:7] = 1
    assert hd(m, m) == 0 and assd(m, m) == 0


def test_boundary_counts_image_border():
    m = np.ones((3, 3))
    b = {tuple(x) for x in boundary(m).astype(int)}
    assert (1, 1) not in b and len(b) == 8


def test_translation_invariance():
    rng = np.random.default_rng(0)
    p = np.zeros((20, 20))
    q = np.zeros((20, 20))
    p[4:9, 5:10] = rng.integers(0, 2, (5, 5))
    q[5:10, 4:11] = rng.integers(0, 2, (5, 7))
    p[6, 7] = q[7, 7] = 1
    sp, sq = np.roll(p, (3, 2), (0, 1)), np.roll(q, (3, 2), (0, 1))
    for f in (dsc, iou, hd, assd):
        assert f(p, q) == pytest.approx(f(sp, sq), abs=1e-12)


def test_pairs_against_all_pairs_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        p, q = rng.integers(0, 2, (2, 4, 4))
        if not p.any() or not q.any():
            continue
        ref_hd, ref_assd = hd_assd(p.tolist(), q.tolist())
        assert hd(p, q) == ref_hd
        assert assd(p, q) == ref_assd


def test_report_aggregate_and_json():
    rep = MetricsReport(meta={"fusion": "astn"})
    m = np.zeros((4, 4))
    m[1:3, 1:3] = 1
    rep.add("x", m, m)
    rep.add("y", np.zeros((4, 4)), m)
    agg = rep.aggregate()
    assert agg["dsc"]["mean"] == 0.5 and agg["dsc"]["std"] == 0.5
    assert agg["hd"]["undefined_count"] == 1 and agg["hd"]["mean"] == 0
    assert rep.to_json() == rep.to_json()
    assert '"undefined_count": 1' in rep.to_json()
