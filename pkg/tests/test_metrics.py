import json

import numpy as np
import pytest

from esica import metrics
from esica.errors import ContractError
from esica.metrics import (
    BinaryMask,
    MetricReport,
    connected_components_3d,
    dsc,
    evaluate_case,
    hungarian_match,
    instance_scores,
    nsd,
)
from esica.verify import oracle_assignment_value, oracle_components, oracle_nsd, _partition


def _vox(shape, *points):
    m = np.zeros(shape, dtype=bool)
    for p in points:
        m[p] = True
    return m


def test_dsc_examples():
    a = _vox((3, 3, 3), (0, 0, 0), (1, 1, 1))
    assert dsc(a, a) == 1.0
    assert dsc(a, _vox((3, 3, 3), (2, 2, 2))) == 0.0
    assert dsc(a, _vox((3, 3, 3), (0, 0, 0), (2, 2, 2))) == 0.5
    assert dsc(np.zeros((2, 2, 2)), np.zeros((2, 2, 2))) == 1.0


def test_dsc_shape_mismatch():
    with pytest.raises(ContractError):
        dsc(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_nsd_examples():
    a = BinaryMask(_vox((5, 5, 5), (2, 2, 2)), (1.5, 1.5, 1.5))
    b = BinaryMask(_vox((5, 5, 5), (2, 2, 3)), (1.5, 1.5, 1.5))
    assert nsd(a, a) == 1.0
    assert nsd(a, b, tau_mm=2.0) == 1.0
    assert nsd(a, b, tau_mm=1.0) == 0.0


def test_nsd_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(10):
        sp = tuple(rng.choice([0.5, 1.0, 2.0], 3))
        p = rng.random((12, 12, 12)) < 0.2
        g = rng.random((12, 12, 12)) < 0.2
        val = nsd(BinaryMask(p, sp), BinaryMask(g, sp), 1.7)
        assert abs(val - oracle_nsd(p, g, np.array(sp), 1.7)) < 1e-9


def test_nsd_one_empty():
    a = _vox((4, 4, 4), (1, 1, 1))
    assert nsd(a, np.zeros((4, 4, 4), bool)) == 0.0


def test_components_examples():
    assert connected_components_3d(np.zeros((3, 3, 3)), 6)[1] == 0
    face = _vox((3, 3, 3), (0, 0, 0), (0, 0, 1))
    assert connected_components_3d(face, 6)[1] == connected_components_3d(face, 26)[1] == 1
    corner = _vox((3, 3, 3), (0, 0, 0), (1, 1, 1))
    assert connected_components_3d(corner, 6)[1] == 2
    assert connected_components_3d(corner, 26)[1] == 1


def test_components_label_order_and_oracle():
    rng = np.random.default_rng(1)
    for conn in (6, 26):
        m = rng.random((10, 10, 10)) < 0.3
        labels, n = connected_components_3d(m, conn)
        assert _partition(labels, n) == oracle_components(m, conn)
        # labels follow first appearance in C order
        flat = labels.ravel()
        firsts = [flat[flat > 0][0]]
        seen = set(firsts)
        for v in flat[flat > 0]:
            if v not in seen:
                seen.add(v)
                firsts.append(v)
        assert firsts == list(range(1, n + 1))


def test_components_bad_connectivity():
    with pytest.raises(Exception):
        connected_components_3d(np.zeros((2, 2, 2)), 18)


def test_hungarian_examples():
    assert [(p, g) for p, g, _ in hungarian_match([[0.9, 0.1], [0.1, 0.8]]).pairs] == [(0, 0), (1, 1)]
    m = hungarian_match([[0.6, 0.55], [0.58, 0.0]], threshold=0.0)
    assert [(p, g) for p, g, _ in m.pairs] == [(0, 1), (1, 0)]
    assert sum(v for *_, v in m.pairs) == pytest.approx(1.13)


def test_hungarian_random_vs_permutations():
    rng = np.random.default_rng(2)
    for _ in range(20):
        iou = rng.integers(0, 65, (5, 5)) / 64.0
        total = sum(v for *_, v in hungarian_match(iou, 0.0).pairs)
        assert total == oracle_assignment_value(iou)


def test_hungarian_threshold_and_rectangular():
    m = hungarian_match([[0.4, 0.0, 0.0], [0.0, 0.7, 0.0]])
    assert [(p, g) for p, g, _ in m.pairs] == [(1, 1)]
    assert m.unmatched_pred == [0] and m.unmatched_gt == [0, 2]
    assert hungarian_match(np.zeros((0, 3))).unmatched_gt == [0, 1, 2]


def test_hungarian_ties_lexicographic():
    m = hungarian_match(np.full((2, 2), 0.5), 0.0)
    assert [(p, g) for p, g, _ in m.pairs] == [(0, 0), (1, 1)]


def _ball(shape, c, r):
    g = np.indices(shape)
    return sum((g[i] - c[i]) ** 2 for i in range(3)) <= r * r


def test_instance_scores_examples():
    shape = (24, 24, 24)
    a, b = _ball(shape, (6, 6, 6), 3), _ball(shape, (17, 17, 17), 3)
    gt = a.astype(int) + 2 * b.astype(int)
    perfect = instance_scores(gt > 0, gt)
    assert perfect.f1 == 1.0 and perfect.dsc_tp == 1.0
    empty = instance_scores(np.zeros(shape, bool), np.where(gt > 0, gt, 0) + 3 * _ball(shape, (6, 18, 6), 2))
    assert empty.f1 == 0.0 and empty.no_matches
    blob = _ball(shape, (5, 18, 18), 2)
    s = instance_scores(a | blob, gt)
    assert (len(s.match.pairs), len(s.match.unmatched_pred), len(s.match.unmatched_gt)) == (1, 1, 1)
    assert s.f1 == 0.5 and s.dsc_tp == 1.0


def test_report_json_and_csv():
    gt = np.zeros((6, 6, 6), int)
    gt[1:3, 1:3, 1:3] = 1
    rep = MetricReport([evaluate_case("a", gt > 0, gt, instances=True)])
    doc = json.loads(rep.dumps())
    assert doc["schema"] == metrics.SCHEMA
    assert doc["aggregate"]["dsc"] == 1.0
    lines = rep.to_csv().strip().splitlines()
    assert lines[0] == "case,metric,value" and len(lines) == 1 + 4
