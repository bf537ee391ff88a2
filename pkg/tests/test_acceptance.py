"""End-to-end acceptance checks, one test per criterion.

Each test records a ``criterion N: PASS|FAIL ...`` line; the lines are
printed together in the pytest terminal summary.
"""

import json
import math
import random
import time

import numpy as np
import pytest

from oracles import DYADIC, auroc_pairs, random_formula, random_signal, rob, soft_bound_windows
from stlconf import cli, estimator, hyper, metrics, miner, synth
from stlconf.metrics import auroc, brier, ece
from stlconf.patterns import FittedPattern, PatternSet
from stlconf.stl import parse_formula, robustness_at, robustness_scalar, soft_robustness
from stlconf.trace import ConfidenceSignal, labels_of, load_dataset


@pytest.fixture
def verdict(record_property):
    def check(k, ok, detail):
        line = f"criterion {k}: {'PASS' if ok else 'FAIL'} {detail}"
        record_property("acceptance", line)
        print(line)
        assert ok, line

    return check


def corpus(n=1000, seed=2024, aggregates=True):
    rng = random.Random(seed)
    return [(random_formula(rng, 3, aggregates=aggregates), random_signal(rng, 6)) for _ in range(n)]


def test_criterion_1_semantics_oracle(verdict):
    cases = corpus()
    t0 = time.perf_counter()
    mismatches = 0
    for phi, values in cases:
        S = ConfidenceSignal.from_values(values)
        for t in range(len(values)):
            if robustness_at(phi, None, S, t) != rob(phi, values, t):
                mismatches += 1
    elapsed = time.perf_counter() - t0
    verdict(1, mismatches == 0 and elapsed < 5.0, f"{len(cases)} cases, {mismatches} mismatches, {elapsed:.2f}s")


def test_criterion_2_soft_convergence(verdict):
    tau = 1000.0
    single_worst, nested_excess = 0.0, 0
    n_single = 0
    for phi, values in corpus(aggregates=False):
        S = ConfidenceSignal.from_values(values)
        gap = abs(soft_robustness(phi, None, S, tau) - robustness_scalar(phi, None, S))
        count, widest = soft_bound_windows(phi, len(values))
        if count <= 1:
            n_single += 1
            single_worst = max(single_worst, gap - math.log(6) / tau)
            assert widest <= 6
        elif gap > count * math.log(6) / tau + 1e-9:
            nested_excess += 1
    ok = single_worst <= 1e-9 and nested_excess == 0
    verdict(2, ok, f"single-reduction cases {n_single}, worst excess over log(6)/tau {single_worst:.2e}; "
                   f"nested cases over the per-reduction sum: {nested_excess}")


def test_criterion_3_metric_oracles(verdict):
    examples = [
        metrics.ece([1, 1], [1, 1], 10) == 0.0,
        abs(metrics.ece([0.9, 0.9, 0.1, 0.1], [1, 0, 0, 1], 10) - 0.4) < 1e-15,
        metrics.ece([0.5], [1], 1) == 0.5,
        metrics.brier([1, 0], [1, 0]) == 0.0,
        metrics.brier([0.5, 0.5], [1, 0]) == 0.25,
        abs(metrics.brier([0.8], [0]) - 0.64) < 1e-15,
        metrics.auroc([0.9, 0.1], [1, 0]) == 1.0,
        metrics.auroc([0.4] * 4, [1, 0, 1, 0]) == 0.5,
        metrics.auroc([0.9, 0.8, 0.7], [1, 0, 1]) == 0.5,
    ]
    rng = random.Random(3)
    agree = 0
    for _ in range(200):
        n = rng.randint(2, 50)
        preds = [rng.choice(DYADIC) if rng.random() < 0.5 else rng.random() for _ in range(n)]
        labels = [rng.randint(0, 1) for _ in range(n)]
        agree += metrics.auroc(preds, labels) == auroc_pairs(preds, labels)
    verdict(3, all(examples) and agree == 200, f"{sum(examples)}/{len(examples)} examples, {agree}/200 AUROC oracle matches")


def test_criterion_4_mining_recovery(tmp_path, verdict):
    train, test = tmp_path / "train.jsonl", tmp_path / "test.jsonl"
    assert cli.main(["synth", "--scenario", "sharp_drop", "--n", "400", "--seed", "7", "--out", str(train)]) == 0
    assert cli.main(["synth", "--scenario", "sharp_drop", "--n", "400", "--seed", "1007", "--out", str(test)]) == 0
    t0 = time.perf_counter()
    assert cli.main(["mine", "--train", str(train), "--seed", "7", "--out", str(tmp_path / "ps.json")]) == 0
    elapsed = time.perf_counter() - t0
    ps = PatternSet.load(tmp_path / "ps.json")
    held = load_dataset(test)
    score = auroc(estimator.predict(ps, held)[0], labels_of(held))
    signature = miner.skeleton_of("(F 0.0 1.0 (le d -0.25))")
    found = signature in ps.skeletons("neg")
    verdict(4, score >= 0.95 and found and elapsed < 60.0,
            f"held-out AUROC {score:.4f}, SharpDrop skeleton in neg set: {found}, mine {elapsed:.1f}s")


def test_criterion_5_calibration(verdict):
    train = synth.generate("stable_high", 400, 7)
    test = synth.generate("stable_high", 400, 1007)
    ps = estimator.fit_mapping(miner.mine(train, seed=7), train, seed=7)
    P = estimator.predict(ps, test)[0]
    y = labels_of(test)
    e, b = ece(P, y, 10), brier(P, y)
    verdict(5, e <= 0.05 and b <= 0.10, f"test ECE {e:.4f}, Brier {b:.4f}")


def test_criterion_6_hypernetwork_value(verdict):
    rows, ok = [], True
    for seed in (0, 1, 2):
        train = synth.generate("instance_threshold", 800, seed)
        test = synth.generate("instance_threshold", 800, seed + 1000)
        ps = estimator.fit_mapping(miner.mine(train, seed=seed), train, seed=seed)
        model = hyper.train_hyper(ps, train, seed=seed)
        y = labels_of(test)
        P_fixed = estimator.predict(ps, test)[0]
        P_hyper = hyper.predict_with_hyper(model, ps, test)[0]
        d_ece = ece(P_fixed, y) - ece(P_hyper, y)
        d_auc = auroc(P_hyper, y) - auroc(P_fixed, y)
        ok &= d_ece >= 0.03 and d_auc >= 0.05
        rows.append(f"seed {seed}: dECE {d_ece:.3f} dAUROC {d_auc:.3f}")
    verdict(6, ok, "; ".join(rows))


def test_criterion_7_template_count(verdict):
    data = synth.generate("sharp_drop", 200, 11) + synth.generate("oscillate", 200, 12)
    big = miner.mine(data, seed=11, n_pos=5, n_neg=5).provenance["val_nll"]
    small = miner.mine(data, seed=11, n_pos=1, n_neg=1).provenance["val_nll"]
    verdict(7, big <= small, f"validation NLL 5+5 {big:.5f} vs 1+1 {small:.5f}")


ALL_HEADS = PatternSet(
    (
        FittedPattern("wl", parse_formula("(G 0.1 0.6 (ge s 0.55))")[0], "pos", 2.0, 0.5),
        FittedPattern("gain", parse_formula("(gain 0.25 0.1)")[0], "pos", 3.0, -0.2),
        FittedPattern("var", parse_formula("(varle 0.05)")[0], "pos"),
    ),
    (
        FittedPattern("rec", parse_formula("(and (F 0.0 1.0 (le s 0.3)) (F 0.0 1.0 (ge s 0.8)))")[0], "neg", 4.0, 1.0),
        FittedPattern("sd", parse_formula("(F 0.0 1.0 (le d -0.2))")[0], "neg"),
        FittedPattern("loss", parse_formula("(or (G 0.0 0.5 (ge s 0.4)) (loss 0.1 0.05))")[0], "neg"),
    ),
    np.array([0.0, -0.5, -1.0, 0.0, -0.2, -2.0]),
)


def test_criterion_8_gradient_check(verdict):
    from stlconf.trace import SignalBatch

    worst = 0.0
    h = 1e-4
    for case in range(20):
        rng = np.random.default_rng(case)
        data = synth.generate(synth.SCENARIOS[case % 5], 6, case)
        model = hyper.HyperModel.init(ALL_HEADS, hidden=4, seed=case)
        base = model.flat() + rng.normal(0.0, 0.3, model.flat().size)
        model.set_flat(base)
        X, batch, y = hyper.featurize_all(data), SignalBatch.from_instances(data), labels_of(data)
        _, g = hyper.loss_and_grad(model, ALL_HEADS, X, batch, y)

        def f(x):
            model.set_flat(x)
            return hyper.loss_and_grad(model, ALL_HEADS, X, batch, y, grad=False)

        dirs = [rng.normal(size=base.size) for _ in range(5)]
        dirs += [np.eye(1, base.size, j).ravel() for j in np.argsort(-np.abs(g))[:10]]
        for d in dirs:
            d = d / np.linalg.norm(d)
            fd = (f(base + h * d) - f(base - h * d)) / (2 * h)
            an = float(g @ d)
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
        model.set_flat(base)
    verdict(8, worst <= 1e-3, f"20 cases, worst relative error {worst:.2e}")


def _pipeline(d):
    steps = [
        ["synth", "--scenario", "sharp_drop", "--n", "200", "--seed", "5", "--out", d / "train.jsonl"],
        ["synth", "--scenario", "sharp_drop", "--n", "100", "--seed", "6", "--out", d / "test.jsonl"],
        ["mine", "--train", d / "train.jsonl", "--seed", "5", "--out", d / "ps.json"],
        ["fit-hyper", "--train", d / "train.jsonl", "--patterns", d / "ps.json", "--seed", "5", "--epochs", "10",
         "--out", d / "hyper.json"],
        ["predict", "--data", d / "test.jsonl", "--patterns", d / "ps.json", "--hyper", d / "hyper.json",
         "--seed", "5", "--out", d / "preds.jsonl"],
        ["evaluate", "--preds", d / "preds.jsonl", "--seed", "5", "--out", d / "report.json"],
    ]
    for argv in steps:
        assert cli.main([str(a) for a in argv]) == 0


def test_criterion_9_determinism(tmp_path, verdict):
    a, b = tmp_path / "a", tmp_path / "b"
    _pipeline(a)
    _pipeline(b)
    names = ["ps.json", "hyper.json", "preds.jsonl", "report.json"]
    same = [(a / n).read_bytes() == (b / n).read_bytes() for n in names]
    verdict(9, all(same), ", ".join(f"{n} {'identical' if s else 'DIFFERS'}" for n, s in zip(names, same)))


def test_criterion_10_analysis(tmp_path, capsys, verdict):
    def neg_set(name, texts):
        PatternSet((FittedPattern("p", parse_formula("(ge s 0.5)")[0], "pos"),),
                   tuple(FittedPattern(t, parse_formula(t)[0], "neg") for t in texts)).save(tmp_path / name)
        return str(tmp_path / name)

    def value(*argv):
        assert cli.main(list(argv)) == 0
        return float(capsys.readouterr().out)

    A, B, C = "(F 0.0 1.0 (le s 0.3))", "(F 0.0 1.0 (le d -0.2))", "(varle 0.1)"
    ab, ab2, c, bc = neg_set("ab.json", [A, B]), neg_set("ab2.json", [A, B]), neg_set("c.json", [C]), neg_set("bc.json", [B, C])
    vecs = {}
    for name, v in (("v02", 0.2), ("v02b", 0.2), ("v04", 0.4)):
        vecs[name] = str(tmp_path / f"{name}.json")
        (tmp_path / f"{name}.json").write_text(json.dumps({"q.mu1": v}))
    got = [
        value("analyze", "jaccard", ab, ab2),
        value("analyze", "jaccard", ab, c),
        value("analyze", "jaccard", ab, bc),
        value("analyze", "param-mae", vecs["v02"], vecs["v02b"], "--grouping", "threshold"),
        value("analyze", "param-mae", vecs["v02"], vecs["v04"], "--grouping", "threshold"),
    ]
    want = [1.0, 0.0, 1 / 3, 0.0, 0.2]
    exact = got[:4] == want[:4] and abs(got[4] - 0.2) < 1e-15
    verdict(10, exact, "got " + ", ".join(repr(x) for x in got))
