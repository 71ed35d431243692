import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dbdmp.metrics import (
    CaseResult,
    aggregate,
    assd,
    assd_bruteforce,
    dsc,
    evaluate_case,
    read_results,
    surface,
    write_results,
)

import suites


def test_dsc_examples():
    a = np.zeros((4, 4, 4), bool)
    a[0, 0, :4] = True
    b = np.zeros_like(a)
    b[0, 0, 2:4] = True
    b[1, 1, :2] = True
    assert dsc(a, a) == 100.0
    assert dsc(a, b) == 50.0
    c = np.zeros_like(a)
    c[3, 3, 3] = True
    assert dsc(a, c) == 0.0
    assert dsc(np.zeros_like(a), np.zeros_like(a)) == 100.0
    assert dsc(a, np.zeros_like(a)) == 0.0
    with pytest.raises(ValueError):
        dsc(a, np.zeros((4, 4, 5)))


def test_assd_examples():
    a = np.zeros((3, 3, 8), bool)
    a[1, 1, 1] = True
    b = np.zeros_like(a)
    b[1, 1, 6] = True
    assert assd(a, b, (1.0, 1.0, 0.8)) == pytest.approx(4.0, abs=1e-12)
    assert assd(a, a) == 0.0
    assert assd(a, np.zeros_like(a)) is None
    assert assd_bruteforce(a, b, (1.0, 1.0, 0.8)) == pytest.approx(4.0, abs=1e-12)


def test_surface_six_connectivity():
    m = np.ones((3, 3, 3), bool)
    s = surface(m)
    # the centre voxel has all six face neighbours inside
    assert not s[1, 1, 1] and s.sum() == 26
    m = np.zeros((5, 5, 5), bool)
    m[1:4, 1:4, 1:4] = True
    assert surface(m).sum() == 26


def test_assd_matches_bruteforce_battery():
    diffs = list(suites.assd_oracle_diffs(n_pairs=60, seed=1))
    assert max(diffs) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(
    a=arrays(bool, (5, 4, 6)),
    b=arrays(bool, (5, 4, 6)),
    spacing=st.tuples(*[st.sampled_from([0.5, 0.8, 1.0, 3.0])] * 3),
)
def test_metric_symmetry_and_ranges(a, b, spacing):
    assert dsc(a, b) == dsc(b, a)
    assert 0.0 <= dsc(a, b) <= 100.0
    d1, d2 = assd(a, b, spacing), assd(b, a, spacing)
    assert (d1 is None) == (d2 is None)
    if d1 is not None:
        assert d1 == pytest.approx(d2, abs=1e-12)
        assert d1 >= 0
        assert d1 == pytest.approx(assd_bruteforce(a, b, spacing), abs=1e-9)


def _results(assds):
    return [CaseResult(f"c{i}", 50.0, v, 1, 1, 1) for i, v in enumerate(assds)]


def test_fill_rule_example():
    s = aggregate(_results([2.0, None, 4.0]))
    assert s["assd_mean"] == 10 / 3
    assert s["assd_fill_value"] == 4.0
    assert s["assd_fill_count"] == 1


def test_aggregate_plain_and_single():
    s = aggregate(_results([1.0, 3.0]))
    assert s["assd_mean"] == 2.0 and s["assd_fill_count"] == 0
    s = aggregate(_results([2.5]))
    assert s["assd_mean"] == 2.5 and s["assd_std"] == 0.0 and s["dsc_std"] == 0.0
    s = aggregate(_results([None, None]))
    assert s["assd_mean"] is None and not s["assd_defined"]
    with pytest.raises(ValueError):
        aggregate([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.one_of(st.none(), st.floats(0, 50)), min_size=1, max_size=10))
def test_fill_never_lowers_mean(values):
    computed = [v for v in values if v is not None]
    s = aggregate(_results(values))
    if computed:
        assert s["assd_mean"] >= np.mean(computed) - 1e-9


def test_evaluate_and_roundtrip(tmp_path):
    gt = np.zeros((6, 6, 6), np.uint8)
    gt[1:3, 1:3, 1:3] = 1
    gt[4, 4, 4] = 1
    pred = np.zeros_like(gt)
    pred[1:3, 1:3, 1:3] = 1
    r = evaluate_case("x", pred, gt, (1, 1, 1))
    assert (r.tp, r.fp, r.fn) == (8, 0, 1)
    assert r.recall == pytest.approx(8 / 9)
    empty = evaluate_case("y", np.zeros_like(gt), gt, (1, 1, 1))
    summary = aggregate([r, empty])
    assert empty.fill_applied
    write_results([r, empty], summary, tmp_path)
    back = read_results(tmp_path / "results.csv")
    assert back[1].assd is None and back[1].fill_applied
    assert json.loads((tmp_path / "summary.json").read_text())["assd_fill_count"] == 1
