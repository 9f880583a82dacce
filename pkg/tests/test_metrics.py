import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcswinu.errors import ValidationError
from mcswinu.metrics import dice, evaluate, extract_surface, hd95, nearest_rank
from mcswinu.volumes import LabelMap


# ------------------------------------------------------------------ brute-force oracles

def brute_dice(p, g):
    both = sum(1 for a, b in zip(p.ravel(), g.ravel()) if a and b)
    total = int(p.sum()) + int(g.sum())
    return 1.0 if total == 0 else 2.0 * both / total


def brute_surface(mask):
    out = []
    d, h, w = mask.shape
    for z in range(d):
        for y in range(h):
            for x in range(w):
                if not mask[z, y, x]:
                    continue
                for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    zz, yy, xx = z + dz, y + dy, x + dx
                    if not (0 <= zz < d and 0 <= yy < h and 0 <= xx < w) or not mask[zz, yy, xx]:
                        out.append((z, y, x))
                        break
    return out


def brute_hd(p, g, spacing, q=95.0):
    sp, sg = brute_surface(p), brute_surface(g)
    if not sp or not sg:
        return math.nan

    def dist(a, b):
        return math.sqrt(sum(((ai - bi) * s) ** 2 for ai, bi, s in zip(a, b, spacing)))

    def directed(a, b):
        mins = sorted(min(dist(x, y) for y in b) for x in a)
        return mins[math.ceil(q / 100 * len(mins)) - 1]

    return max(directed(sp, sg), directed(sg, sp))


# ------------------------------------------------------------------ dice

def test_dice_identity_and_disjoint():
    a = np.zeros((4, 4, 4), np.uint8)
    a[:2] = 3
    b = np.zeros_like(a)
    b[2:] = 3
    assert dice(a, a, 3) == 1.0
    assert dice(a, b, 3) == 0.0


def test_dice_two_thirds():
    p = np.zeros((1, 1, 3), np.uint8)
    g = np.zeros_like(p)
    p[0, 0, :2] = 1
    g[0, 0, 0] = 1
    assert dice(p, g, 1) == pytest.approx(2 / 3, abs=0)


def test_dice_empty_conventions():
    z = np.zeros((2, 2, 2), np.uint8)
    o = np.ones((2, 2, 2), np.uint8)
    assert dice(z, z, 4) == 1.0
    assert dice(z, o, 1) == 0.0


def test_dice_shape_mismatch():
    with pytest.raises(ValidationError):
        dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)), 1)


# ------------------------------------------------------------------ surfaces

def test_surface_single_voxel():
    m = np.zeros((3, 3, 3), np.uint8)
    m[1, 1, 1] = 2
    assert extract_surface(m, 2).coords.tolist() == [[1, 1, 1]]


def test_surface_of_solid_block():
    m = np.zeros((5, 5, 5), np.uint8)
    m[1:4, 1:4, 1:4] = 1
    s = extract_surface(m, 1)
    assert len(s) == 26
    assert [2, 2, 2] not in s.coords.tolist()


def test_surface_absent_class_and_grid_edge():
    m = np.ones((3, 3, 3), np.uint8)
    assert len(extract_surface(m, 4)) == 0
    assert len(extract_surface(m, 1)) == 26  # grid edge counts as outside


# ------------------------------------------------------------------ hd95

def test_hd95_identity():
    m = np.zeros((6, 6, 6), np.uint8)
    m[1:5, 2:4, 1:3] = 5
    assert hd95(m, m, 5) == 0.0


def test_hd95_single_points_and_spacing():
    p = np.zeros((1, 1, 4), np.uint8)
    g = np.zeros_like(p)
    p[0, 0, 0] = 1
    g[0, 0, 3] = 1
    assert hd95(p, g, 1, (1, 1, 1)) == pytest.approx(3.0, abs=1e-12)
    assert hd95(p, g, 1, (1, 1, 2)) == pytest.approx(6.0, abs=1e-12)


def test_hd95_undefined_when_empty():
    p = np.zeros((3, 3, 3), np.uint8)
    g = np.zeros_like(p)
    g[1, 1, 1] = 1
    assert math.isnan(hd95(p, g, 1))


def test_hd95_spacing_must_match_label_maps():
    lab = LabelMap(np.ones((2, 2, 2), np.uint8), (2.0, 1.0, 1.0))
    with pytest.raises(ValidationError):
        hd95(lab, lab, 1, (1.0, 1.0, 1.0))


def test_nearest_rank():
    values = np.arange(1, 21, dtype=float)  # n = 20 -> rank 19
    assert nearest_rank(values) == 19.0
    assert nearest_rank([7.0]) == 7.0
    assert nearest_rank(np.arange(1, 101, dtype=float)) == 95.0


masks = st.integers(1, 5).flatmap(
    lambda n: st.tuples(
        st.just(n),
        st.lists(st.integers(0, 1), min_size=n ** 3, max_size=n ** 3),
        st.lists(st.integers(0, 1), min_size=n ** 3, max_size=n ** 3),
        st.tuples(*[st.sampled_from([0.5, 1.0, 1.7, 3.0])] * 3),
    )
)


@settings(max_examples=150, deadline=None)
@given(masks)
def test_metrics_match_brute_force_within_5_cubed(case):
    n, a, b, spacing = case
    p = np.array(a, np.uint8).reshape(n, n, n)
    g = np.array(b, np.uint8).reshape(n, n, n)
    assert dice(p, g, 1) == brute_dice(p == 1, g == 1)
    expected = brute_hd(p == 1, g == 1, spacing)
    got = hd95(p, g, 1, spacing)
    if math.isnan(expected):
        assert math.isnan(got)
    else:
        assert abs(got - expected) <= 1e-9
        assert got == pytest.approx(hd95(g, p, 1, spacing), abs=1e-12)
        # percentile never exceeds the full Hausdorff distance
        assert got <= brute_hd(p == 1, g == 1, spacing, q=100.0) + 1e-12


@settings(max_examples=50, deadline=None)
@given(masks, st.sampled_from([0.5, 2.0, 3.7]))
def test_hd95_scales_with_isotropic_spacing(case, s):
    n, a, b, _ = case
    p = np.array(a, np.uint8).reshape(n, n, n)
    g = np.array(b, np.uint8).reshape(n, n, n)
    base = hd95(p, g, 1, (1, 1, 1))
    if not math.isnan(base):
        assert hd95(p, g, 1, (s, s, s)) == pytest.approx(s * base, rel=1e-12)
    assert dice(p, g, 1) == dice(g, p, 1)


# ------------------------------------------------------------------ reports

def _label(arr, spacing=(1.0, 1.0, 1.0)):
    return LabelMap(np.asarray(arr, np.uint8), spacing)


def _fixture_case(rng, shape=(6, 6, 6)):
    return rng.integers(0, 6, size=shape)


def test_evaluate_perfect_case():
    rng = np.random.default_rng(0)
    gt = _label(_fixture_case(rng))
    report = evaluate({"a": gt}, {"a": gt})
    assert all(m.dice == 1.0 and m.hd95 == 0.0 for m in report.per_class.values())
    assert (report.overall_dice, report.overall_hd95) == (1.0, 0.0)
    assert list(report.per_class) == ["Lung R", "Lung L", "Spinal Cord", "Esophagus", "GTV"]


def test_evaluate_three_cases_matches_recomputation(tmp_path):
    rng = np.random.default_rng(1)
    gts = {f"c{i}": _label(_fixture_case(rng), (2.0, 1.0, 1.0)) for i in range(3)}
    preds = {k: _label(_fixture_case(rng), (2.0, 1.0, 1.0)) for k in gts}
    preds["c2"].data[preds["c2"].data == 5] = 0  # GTV missing in one prediction
    report = evaluate(preds, gts)
    for c, name in enumerate(["Lung R", "Lung L", "Spinal Cord", "Esophagus", "GTV"], start=1):
        dices = [brute_dice(preds[k].data == c, gts[k].data == c) for k in sorted(gts)]
        hds = [brute_hd(preds[k].data == c, gts[k].data == c, (2.0, 1.0, 1.0)) for k in sorted(gts)]
        hds = [h for h in hds if not math.isnan(h)]
        assert report.per_class[name].dice == pytest.approx(np.mean(dices), abs=1e-12)
        assert report.per_class[name].hd95 == pytest.approx(np.mean(hds), abs=1e-9)
        assert report.per_class[name].hd95_cases == len(hds)
    assert report.per_class["GTV"].hd95_cases == 2
    assert report.overall_dice == pytest.approx(np.mean([m.dice for m in report.per_class.values()]), abs=1e-15)

    out = tmp_path / "r.csv"
    report.to_csv(out)
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["case", "class", "dice", "hd95_mm", "hd95_defined"]
    assert len(rows) == 15
    gtv_rows = [r for r in rows if r["class"] == "GTV"]
    assert [r["hd95_defined"] for r in gtv_rows] == ["1", "1", "0"]
    assert "Overall" in report.table()


def test_evaluate_errors():
    gt = _label(np.zeros((2, 2, 2)))
    with pytest.raises(ValidationError):
        evaluate({}, {})
    with pytest.raises(ValidationError):
        evaluate({"a": _label(np.zeros((2, 2, 3)))}, {"a": gt})
