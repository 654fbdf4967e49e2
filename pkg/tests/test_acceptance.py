"""Acceptance gates, one PASS/FAIL line per criterion (2 through 10).

Run with ``pytest tests/test_acceptance.py -v``; the report lines are
written straight to the terminal even when pytest captures output. The
training gates (8 and 9) share one set of runs and take a few minutes on a
single CPU.

Criterion 1 (full-scale benchmark numbers) is out of reach at desk scale and
has no gate here; see the README.
"""
import math
import statistics
import time
from fractions import Fraction

import numpy as np
import pytest
import torch

import oracles
from strongreid import experiments
from strongreid.config import baseline, toy_config
from strongreid.data import AugmentConfig, random_erase
from strongreid.evaluation import FeatureSet, evaluate
from strongreid.losses import (ClassCenters, LossToggles, center_loss, cross_distances, id_loss, total_loss,
                               triplet_loss)
from strongreid.nets import BackboneConfig, build_model, count_parameters, forward_train
from strongreid.schedule import LRSchedule, lr_at

SEEDS = (0, 1, 2)


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} | {detail}", flush=True)
    return emit


@pytest.fixture
def note(capsys):
    def emit(text):
        with capsys.disabled():
            print(f"    {text}", flush=True)
    return emit


# -- 2 ------------------------------------------------------------------------------


def test_criterion_2_schedule(report):
    start = time.perf_counter()
    sched = LRSchedule()
    bad = []
    for t in range(1, 121):
        if t <= 10:
            want = float(Fraction("3.5e-4") * t / 10)
        elif t <= 40:
            want = 3.5e-4
        elif t <= 70:
            want = 3.5e-5
        else:
            want = 3.5e-6
        got = lr_at(sched, t)
        if got != want:
            bad.append((t, got, want))
    ramp = [lr_at(sched, t) for t in range(1, 11)]
    monotone = all(a < b for a, b in zip(ramp, ramp[1:]))
    elapsed = time.perf_counter() - start
    ok = not bad and monotone and lr_at(sched, 10) == 3.5e-4 and elapsed < 1.0
    report(2, "learning-rate schedule", ok,
           f"mismatches={len(bad)} lr(10)={lr_at(sched, 10)!r} lr(41)={lr_at(sched, 41)!r} "
           f"lr(71)={lr_at(sched, 71)!r} time={elapsed:.3f}s")
    assert ok, bad[:5]


# -- 3 ------------------------------------------------------------------------------


def _random_batch(rng):
    P, K = int(rng.integers(2, 5)), int(rng.integers(2, 4))
    D = int(rng.integers(2, 7))
    labels = np.repeat(np.arange(P), K)
    extra = int(rng.integers(0, 3))
    num_classes = P + extra
    # shuffle identities into random class slots so labels are not always 0..P-1
    labels = rng.permutation(num_classes)[:P][labels]
    labels = labels[rng.permutation(len(labels))]
    return rng.normal(size=(P * K, D)), labels, num_classes


def _worked_triplet(d_p, d_n):
    # anchor and positive are d_p apart; the negative is d_n from both
    h = math.sqrt(d_n ** 2 - (d_p / 2) ** 2)
    f = np.array([[0.0, 0.0], [d_p, 0.0], [d_p / 2, -h]])
    loss, _ = triplet_loss(f, np.array([0, 0, 1]), 0.3)
    return float(loss)


def test_criterion_3_loss_oracles(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        f, y, n = _random_batch(rng)
        logits = rng.normal(scale=3.0, size=(len(y), n))
        eps = float(rng.uniform(0, 0.3))
        margin = float(rng.uniform(0.05, 1.0))
        beta = float(rng.uniform(0, 0.01))
        centers = rng.normal(size=(n, f.shape[1]))

        l_id = id_loss(logits, y, eps)
        l_tri, active = triplet_loss(f, y, margin)
        l_cen = center_loss(f, y, ClassCenters(torch.from_numpy(centers)))
        rep = total_loss(l_id, l_tri, l_cen, beta, LossToggles(True, True, True), active)

        ref_id = oracles.id_loss(logits, y, eps)
        ref_tri, ref_active = oracles.triplet_batch_hard(f, y, margin)
        ref_cen = oracles.center_loss(f, y, centers)
        ref_total = ref_id + ref_tri + beta * ref_cen
        errs = [abs(float(l_id) - ref_id), abs(float(l_tri) - ref_tri), abs(float(l_cen) - ref_cen),
                abs(rep.total - ref_total), abs(active - ref_active)]
        worst = max(worst, *errs)
    worked = [_worked_triplet(0.3, 0.5), _worked_triplet(1.3, 1.5)]
    worked_ok = all(abs(v - 0.1) <= 1e-9 for v in worked)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and worked_ok and elapsed < 10
    report(3, "loss oracles", ok,
           f"200 instances, max abs error={worst:.2e}; worked triplet values={worked[0]:.12f}, "
           f"{worked[1]:.12f}; time={elapsed:.2f}s")
    assert ok


# -- 4 ------------------------------------------------------------------------------

KINK_GAP = 1e-3


def _triplet_is_smooth(f, y, margin):
    """Every active/inactive hinge and every hardest pick is clear of its kink."""
    rows = oracles.to_rows(f)
    any_active = False
    for a, ya in enumerate(y):
        pos = sorted(oracles.euclid(rows[a], rows[p]) for p, yp in enumerate(y) if yp == ya and p != a)
        neg = sorted(oracles.euclid(rows[a], rows[q]) for q, yq in enumerate(y) if yq != ya)
        if len(pos) > 1 and pos[-1] - pos[-2] < KINK_GAP:
            return False
        if len(neg) > 1 and neg[1] - neg[0] < KINK_GAP:
            return False
        hinge = pos[-1] - neg[0] + margin
        if abs(hinge) < KINK_GAP:
            return False
        any_active |= hinge > 0
    return any_active


def _rel_error(analytic, numeric):
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def _autograd(fn, x):
    t = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    fn(t).backward()
    return t.grad.numpy().ravel()


def test_criterion_4_gradients(report):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = {"id": 0.0, "triplet": 0.0, "center": 0.0}
    counts = dict.fromkeys(worst, 0)
    while min(counts.values()) < 50:
        f, y, n = _random_batch(rng)
        shape = f.shape

        if counts["id"] < 50:
            logits = rng.normal(scale=2.0, size=(len(y), n))
            eps = float(rng.uniform(0, 0.3))
            g_a = _autograd(lambda t: id_loss(t, y, eps), logits)
            g_n = oracles.central_difference(
                lambda v: oracles.id_loss(np.reshape(v, logits.shape), y, eps), logits.ravel().tolist())
            worst["id"] = max(worst["id"], _rel_error(g_a, g_n))
            counts["id"] += 1

        margin = float(rng.uniform(0.1, 1.0))
        if counts["triplet"] < 50 and _triplet_is_smooth(f, y, margin):
            g_a = _autograd(lambda t: triplet_loss(t, y, margin)[0], f)
            g_n = oracles.central_difference(
                lambda v: oracles.triplet_batch_hard(np.reshape(v, shape), y, margin)[0], f.ravel().tolist())
            worst["triplet"] = max(worst["triplet"], _rel_error(g_a, g_n))
            counts["triplet"] += 1

        if counts["center"] < 50:
            centers = rng.normal(size=(n, shape[1]))
            c = ClassCenters(torch.from_numpy(centers))
            g_a = _autograd(lambda t: center_loss(t, y, c), f)
            g_n = oracles.central_difference(
                lambda v: oracles.center_loss(np.reshape(v, shape), y, centers), f.ravel().tolist())
            worst["center"] = max(worst["center"], _rel_error(g_a, g_n))
            counts["center"] += 1
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 30
    detail = ", ".join(f"{k} max rel err={v:.2e}" for k, v in worst.items())
    report(4, "gradient checks", ok, f"50 instances per loss, {detail}; time={elapsed:.2f}s")
    assert ok


# -- 5 ------------------------------------------------------------------------------


def _eval_instance(rng, single_camera=False):
    n_q, n_g = int(rng.integers(1, 9)), int(rng.integers(2, 31))
    ids, cams = int(rng.integers(1, 5)), 1 if single_camera else int(rng.integers(2, 4))
    g_feats = rng.normal(size=(n_g, 4))
    g_feats[-1] = g_feats[0]
    q = FeatureSet(rng.normal(size=(n_q, 4)), rng.integers(0, ids, n_q), rng.integers(0, cams, n_q))
    g = FeatureSet(g_feats, rng.integers(0, ids, n_g), rng.integers(0, cams, n_g))
    return q, g


def test_criterion_5_evaluation_oracle(report):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    worst, excluded, skipped, all_skipped, failures = 0.0, 0, 0, 0, []
    for i in range(100):
        q, g = _eval_instance(rng, single_camera=i % 10 == 9)
        metric = ("euclidean", "cosine")[i % 2]
        max_rank = int(rng.integers(1, 12))
        ref = oracles.cmc_mAP(q.features, q.person_ids.tolist(), q.camera_ids.tolist(), g.features,
                              g.person_ids.tolist(), g.camera_ids.tolist(), metric, max_rank)
        same = (q.person_ids[:, None] == g.person_ids[None]) & (q.camera_ids[:, None] == g.camera_ids[None])
        excluded += int(same.any())
        if ref is None:
            all_skipped += 1
            try:
                evaluate(q, g, metric, max_rank)
                failures.append(i)
            except ValueError:
                pass
            continue
        cmc, mAP, valid = ref
        skipped += int(valid < len(q))
        got = evaluate(q, g, metric, max_rank)
        if got.num_valid_queries != valid:
            failures.append(i)
        worst = max(worst, float(np.max(np.abs(got.cmc - np.array(cmc)))), abs(got.mAP - mAP))
    elapsed = time.perf_counter() - start
    ok = not failures and worst <= 1e-9 and excluded > 0 and skipped > 0 and elapsed < 10
    report(5, "evaluation oracle", ok,
           f"100 instances, max abs error={worst:.2e}, with same-camera exclusions={excluded}, "
           f"with skipped queries={skipped}, all-skipped (error raised)={all_skipped}, "
           f"mismatches={len(failures)}; time={elapsed:.2f}s")
    assert ok


# -- 6 ------------------------------------------------------------------------------


def test_criterion_6_bnneck(report):
    start = time.perf_counter()
    torch.manual_seed(0)
    model = build_model(BackboneConfig("tiny_cnn", feature_dim=64, bnneck=True), 20).train()
    with torch.no_grad():
        zero_logits = model.classifier(torch.zeros(1, 64))
    zero_ok = model.classifier.bias is None and torch.count_nonzero(zero_logits) == 0

    x = np.random.default_rng(6).normal(size=(64, 64, 32, 3)).astype(np.float32)
    f_i = forward_train(model, x).f_i.detach().double()
    mu = float(f_i.mean(0).abs().max())
    var = float((f_i.var(0, unbiased=False) - 1).abs().max())
    stats_ok = mu < 1e-3 and var < 1e-2

    stride = {}
    for arch, dim, size in (("tiny_cnn", 64, (64, 32)), ("resnet50", 2048, (256, 128))):
        shapes, params = {}, {}
        for s in (2, 1):
            m = build_model(BackboneConfig(arch, last_stride=s, feature_dim=dim), 751).eval()
            with torch.no_grad():
                shapes[s] = tuple(m.feature_map(torch.zeros(1, 3, *size)).shape[2:])
            params[s] = count_parameters(m)
        stride[arch] = (shapes, params[1] == params[2])
    stride_ok = all(sh[1] == (2 * sh[2][0], 2 * sh[2][1]) and same for sh, same in stride.values())
    elapsed = time.perf_counter() - start
    ok = zero_ok and stats_ok and stride_ok and elapsed < 60
    maps = "; ".join(f"{a} stride2 {sh[2]} -> stride1 {sh[1]}, same params={same}" for a, (sh, same) in stride.items())
    report(6, "BNNeck invariants", ok,
           f"zero->zero logits={bool(zero_ok)}, B=64 max|mean|={mu:.1e} max|var-1|={var:.1e}; {maps}; "
           f"time={elapsed:.1f}s")
    assert ok


# -- 7 ------------------------------------------------------------------------------


def test_criterion_7_random_erasing(report):
    start = time.perf_counter()
    cfg = AugmentConfig(target_size=(256, 128), rea_prob=0.5)
    rng = np.random.default_rng(7)
    h, w = cfg.target_size
    erased, bad = 0, []
    areas, aspects = [], []
    # continuous noise never equals its own channel mean, so every erased pixel shows up in the diff
    image = rng.normal(size=(h, w, 3)).astype(np.float32)
    for trial in range(10_000):
        out = random_erase(image, cfg, rng)
        changed = np.any(out != image, axis=2)
        if not changed.any():
            continue
        erased += 1
        ys, xs = np.nonzero(changed)
        y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
        rh, rw = y1 - y0, x1 - x0
        rect = changed.sum() == rh * rw and y0 >= 0 and x0 >= 0 and y1 <= h and x1 <= w
        area, aspect = rh * rw / (h * w), rh / rw
        areas.append(area)
        aspects.append(aspect)
        if not (rect and 0.02 <= area <= 0.4 and 0.3 <= aspect <= 3.33):
            bad.append(trial)
    freq = erased / 10_000
    elapsed = time.perf_counter() - start
    ok = 0.47 <= freq <= 0.53 and not bad and elapsed < 60
    report(7, "random erasing statistics", ok,
           f"erase frequency={freq:.4f}, out-of-range rectangles={len(bad)}, "
           f"area in [{min(areas):.4f}, {max(areas):.4f}], aspect in [{min(aspects):.3f}, {max(aspects):.3f}]; "
           f"time={elapsed:.1f}s")
    assert ok


# -- 8 and 9: shared training runs ---------------------------------------------------


@pytest.fixture(scope="module")
def toy_runs():
    """Full-trick, baseline and minus-REA toy models for three seeds."""
    runs = {"full": [], "baseline": [], "-REA": []}
    for seed in SEEDS:
        cfg = toy_config(seed=seed)
        data_a = experiments.load_domain(cfg, cfg.domain)
        data_b = experiments.load_domain(cfg, cfg.cross_domain)
        for name, variant in (("full", cfg), ("baseline", baseline(cfg)), ("-REA", cfg.with_tricks(rea=False))):
            t0 = time.process_time()
            est, same = experiments.train(variant, data_a)
            cpu = time.process_time() - t0
            cross = est.evaluate(data_b["query"], data_b["gallery"], variant.eval_metric, variant.max_rank)
            table = experiments.feature_metric_table(est, data_a["query"], data_a["gallery"]) if name == "full" else None
            runs[name].append({"seed": seed, "same": same, "cross": cross, "cpu": cpu, "table": table})
    return runs


@pytest.mark.slow
def test_criterion_8_end_to_end(toy_runs, report, note):
    full = toy_runs["full"]
    r1 = statistics.median(r["same"].rank1 for r in full)
    mAP = statistics.median(r["same"].mAP for r in full)
    worst_cpu = max(r["cpu"] for r in full)
    ok = r1 >= 0.90 and mAP >= 0.70 and worst_cpu < 600
    report(8, "toy end-to-end run", ok,
           f"median over seeds {SEEDS}: rank-1={r1:.3f} (>=0.90), mAP={mAP:.3f} (>=0.70); "
           f"slowest run {worst_cpu:.0f} CPU-s")
    for r in full:
        note(f"seed {r['seed']}: rank-1={r['same'].rank1:.3f} mAP={r['same'].mAP:.3f} cpu={r['cpu']:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_9_directional_ablation(toy_runs, report, note):
    full = statistics.median(r["same"].mAP for r in toy_runs["full"])
    base = statistics.median(r["same"].mAP for r in toy_runs["baseline"])
    ok = full >= base + 0.02
    report(9, "directional ablation", ok,
           f"median mAP full={full:.3f} vs baseline={base:.3f} (gain {full - base:+.3f}, needs >= +0.020)")
    for r_f, r_b in zip(toy_runs["full"], toy_runs["baseline"]):
        note(f"seed {r_f['seed']}: full mAP={r_f['same'].mAP:.3f} baseline mAP={r_b['same'].mAP:.3f}")

    note("reported, not gated: feature x metric on the full-trick model (median over seeds)")
    for k, row in enumerate(toy_runs["full"][0]["table"]):
        r1 = statistics.median(r["table"][k]["rank1"] for r in toy_runs["full"])
        m = statistics.median(r["table"][k]["mAP"] for r in toy_runs["full"])
        note(f"  {row['feature']} {row['metric']:<9}: rank-1={r1:.3f} mAP={m:.3f}")

    plus = statistics.median(r["cross"].mAP for r in toy_runs["full"])
    minus = statistics.median(r["cross"].mAP for r in toy_runs["-REA"])
    plus_r1 = statistics.median(r["cross"].rank1 for r in toy_runs["full"])
    minus_r1 = statistics.median(r["cross"].rank1 for r in toy_runs["-REA"])
    verdict = "holds" if minus >= plus else "does not hold"
    note(f"soft check, not gated: cross-domain A->B -REA >= +REA {verdict}: "
         f"-REA rank-1={minus_r1:.3f} mAP={minus:.3f}, +REA rank-1={plus_r1:.3f} mAP={plus:.3f}")
    assert ok


# -- 10 -----------------------------------------------------------------------------


def test_criterion_10_ranking_identity(report):
    start = time.perf_counter()
    rng = np.random.default_rng(10)
    mismatched = 0
    for _ in range(100):
        dim = int(rng.integers(2, 65))
        q = rng.normal(size=(int(rng.integers(1, 9)), dim))
        g = rng.normal(size=(int(rng.integers(2, 60)), dim))
        g[-1] = g[0]  # a guaranteed tie
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        a = np.argsort(cross_distances(q, g, "cosine"), axis=1, kind="stable")
        b = np.argsort(cross_distances(q, g, "euclidean"), axis=1, kind="stable")
        mismatched += int(not np.array_equal(a, b))
    elapsed = time.perf_counter() - start
    ok = mismatched == 0 and elapsed < 5
    report(10, "cosine/euclidean ranking identity", ok,
           f"100 normalized feature sets, orderings differing={mismatched}; time={elapsed:.2f}s")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
