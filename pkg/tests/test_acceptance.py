"""Acceptance criteria 1-9.  Each test prints one PASS/FAIL line with the
measured value, the tolerance and the runtime; run with ``pytest -s`` (or
``-v`` with the tee'd output) to see them."""
import time

import pytest

from esica import experiments as ex
from esica import verify

from conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.acceptance


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print("\n" + line)
    return ok


def _suite(fn, *args):
    t0 = time.time()
    checks = fn(*args)
    return checks, time.time() - t0


def _worst(checks):
    failed = [c for c in checks if not c.passed]
    return failed, max(checks, key=lambda c: c.value / c.limit if c.limit else c.value)


def test_criterion_1_gradients():
    checks, sec = _suite(verify.gradcheck_suite, (0, 1, 2))
    failed, worst = _worst(checks)
    ok = not failed and sec < 300
    report(1, ok, f"{len(checks)} checks, worst {worst.name} rel err {worst.value:.2e} (< 1e-4), "
                  f"{sec:.0f}s (< 300s)")
    assert not failed, [(c.name, c.seed, c.value) for c in failed]
    assert sec < 300


def test_criterion_2_oracles():
    checks, sec = _suite(verify.oracle_suite, 200)
    failed, worst = _worst(checks)
    ok = not failed and sec < 120
    report(2, ok, f"{len(checks)} checks x 200 instances, worst {worst.name} {worst.value:.2e}, "
                  f"{sec:.0f}s (< 120s)")
    assert not failed, [(c.name, c.value) for c in failed]
    assert sec < 120


def test_criterion_3_attention():
    checks, _ = _suite(verify.attention_suite)
    failed = [c for c in checks if not c.passed]
    by = {}
    for c in checks:
        by[c.name] = max(by.get(c.name, 0.0), c.value)
    report(3, not failed, ", ".join(f"{k} {v:.1e}" for k, v in sorted(by.items()))
           + " (limits 1e-6 / 1e-6 / 1e-5)")
    assert not failed, [(c.name, c.seed, c.value) for c in failed]


def test_criterion_4_cost():
    checks, _ = _suite(verify.cost_suite, 20)
    measured, expected = verify.branch_delta()
    failed = [c for c in checks if not c.passed]
    ok = not failed and measured == expected
    report(4, ok, f"20 random specs, {sum(c.value for c in checks if c.name == 'instrumented_flops'):.0f} "
                  f"mismatches; branch delta {measured} vs 28*sum(C) {expected}")
    assert not failed and measured == expected


# training trends -------------------------------------------------------------------

@pytest.fixture(scope="module")
def refinement():
    t0 = time.time()
    res = ex.refinement_trend(seeds=(0, 1, 2, 3, 4), size=48, steps=150, keep_models=True)
    res["wall"] = time.time() - t0
    return res


def test_criterion_5_refinement(refinement):
    r = refinement
    ok_pair = r["mean_2pass"] >= r["mean_1pass"]
    ok = ok_pair and r["improvement"] > 0.02 and r["wall"] < 3600
    per = " ".join(f"s{row['seed']}:{row['dice_1pass']:.3f}->{row['dice_2pass']:.3f}" for row in r["rows"])
    report(5, ok, f"mean Dice 1-pass {r['mean_1pass']:.4f} 2-pass {r['mean_2pass']:.4f}, "
                  f"improvement {r['improvement']:+.4f} (> 0.02), {r['wall']:.0f}s (< 3600s) [{per}]")
    assert ok_pair
    assert r["improvement"] > 0.02
    assert r["wall"] < 3600


def test_criterion_6_curriculum(refinement):
    stage1 = {s: m for (s, n), m in refinement["models"].items() if n == 2}
    t0 = time.time()
    c = ex.curriculum_trend(stage1, seeds=(0, 1, 2, 3, 4), size=48, steps2=60)
    sec = time.time() - t0
    drop = c["dice_stage1"] - c["dice_stage2"]
    ok = c["fp_relative_drop"] >= 0.3 and drop < 0.05 and sec < 3600
    report(6, ok, f"neg FP fraction {c['fp_stage1']:.4f} -> {c['fp_stage2']:.4f} "
                  f"(drop {c['fp_relative_drop']:.1%}, >= 30%), pos Dice {c['dice_stage1']:.4f} -> "
                  f"{c['dice_stage2']:.4f} (loss {drop:+.4f}, < 0.05), {sec:.0f}s")
    assert all(row["text_frozen"] for row in c["rows"])
    assert c["fp_relative_drop"] >= 0.3
    assert drop < 0.05


@pytest.fixture(scope="module")
def convergence():
    return ex.convergence(seeds=(0, 1, 2), size=32, steps=200, keep_models=True)


def test_criterion_8_convergence(convergence):
    rows = convergence["rows"]
    worst = max(r["ratio"] for r in rows)
    sec = convergence["seconds"]
    ok = worst <= 0.5 and sec < 600
    per = " ".join(f"s{r['seed']}:{r['first']:.3f}->{r['final']:.3f}" for r in rows)
    report(8, ok, f"worst final/first loss ratio {worst:.3f} (<= 0.5), {sec:.0f}s (< 600s) [{per}]")
    assert worst <= 0.5
    assert sec < 600


def test_criterion_7_head_discrimination(convergence):
    # the seed-0 convergence run is the same stage-1 recipe the similarity arm would train
    h = ex.head_discrimination(size=32, steps=200, seed=0, similarity_model=convergence["models"][0])
    sim, conv = h["similarity"], h["conv"]
    ok = sim["iou"] < 0.2 and conv["identical"]
    report(7, ok, f"similarity-head IoU {sim['iou']:.3f} (< 0.2); conv-head masks identical="
                  f"{conv['identical']} (IoU {conv['iou']:.3f})")
    assert sim["iou"] < 0.2
    assert conv["identical"]


def test_criterion_9_serialization():
    checks, _ = _suite(verify.serialization_suite, 20)
    failed = [c for c in checks if not c.passed]
    report(9, not failed, ", ".join(f"{c.name}={'ok' if c.passed else 'FAIL'}" for c in checks))
    assert not failed, [(c.name, c.value) for c in failed]
