import json

import numpy as np
import pytest

from stlconf import estimator, hyper, miner, synth
from stlconf.errors import DegenerateData, SchemaError, StateError
from stlconf.metrics import ece
from stlconf.patterns import FittedPattern, PatternSet
from stlconf.stl import bind, canonical_skeleton, check_params, parse_formula
from stlconf.trace import ConfidenceSignal, LabeledInstance, SignalBatch, labels_of

# one block per parameter shape the heads know about
MIXED = PatternSet(
    (
        FittedPattern("wl", parse_formula("(G 0.1 0.6 (ge s 0.55))")[0], "pos", 2.0, 0.5),
        FittedPattern("gain", parse_formula("(gain 0.25 0.1)")[0], "pos", 3.0, -0.2),
        FittedPattern("var", parse_formula("(varle 0.05)")[0], "pos"),
    ),
    (
        FittedPattern("rec", parse_formula("(and (F 0.0 1.0 (le s 0.3)) (F 0.0 1.0 (ge s 0.8)))")[0], "neg", 4.0, 1.0),
        FittedPattern("sd", parse_formula("(F 0.0 1.0 (le d -0.2))")[0], "neg"),
        FittedPattern("lift", parse_formula("(or (G 0.0 0.5 (ge s 0.4)) (loss 0.1 0.05))")[0], "neg"),
    ),
    np.array([0.0, -0.5, -1.0, 0.0, -0.2, -2.0]),
)


def inst(values, question="what is it", label=1, i="x"):
    return LabeledInstance(i, "t", question, ConfidenceSignal.from_values(values), label)


def test_signal_stats_examples():
    s = hyper.signal_stats([0.5] * 10)
    assert (s[0], s[1], s[2]) == (0.5, 0.0, 0.0)
    s = hyper.signal_stats([0.0, 1.0])
    assert s[2] == 1.0 and s[0] == 0.5 and s[6] == 0.5
    assert hyper.signal_stats([0.3])[2] == 0.0


def test_featurize_width_and_determinism():
    a = hyper.featurize(inst([0.1, 0.9], "Which river is longest?"))
    b = hyper.featurize(inst([0.4], "which river is LONGEST"))
    assert a.shape == (hyper.HASH_WIDTH + hyper.N_STATS,)
    assert np.array_equal(a[: hyper.HASH_WIDTH], b[: hyper.HASH_WIDTH])
    assert np.all(np.isfinite(a))
    assert not np.array_equal(a[: hyper.HASH_WIDTH], hyper.text_features("a different question"))
    assert np.all(hyper.text_features("") == 0.0)


def test_zero_weights_give_midpoints():
    model = hyper.HyperModel.init(MIXED, hidden=8, init="midpoint")
    out = hyper.predict_params(model, MIXED, [inst([0.2, 0.7, 0.9])])
    wl, gain, var, rec, sd, lift = out
    assert (wl["a0"][0], wl["b0"][0], wl["mu1"][0]) == (0.5, 0.75, 0.5)
    assert (gain["w0"][0], gain["eps0"][0]) == (0.25, 0.25)
    assert var["nu0"][0] == 0.125
    assert (rec["mu2"][0], rec["mu4"][0]) == (0.25, 0.75)
    assert sd["dl1"][0] == 0.0
    for block in out:
        assert (block["alpha"][0], block["beta"][0]) == (5.0, 0.0)
    assert np.array_equal(model.g, np.zeros(6))


def test_layout_groups():
    layout = hyper.output_layout(MIXED)
    kinds = [(k, kind) for k, kind, _ in layout]
    assert (0, "interval") in kinds and (3, "order") in kinds
    assert (3, "mu") not in kinds
    rec_names = [names for k, kind, names in layout if k == 3 and kind == "order"]
    assert rec_names == [("mu2", "mu4")]
    # an inverted pair is not ordered: it gets two independent heads
    flipped = PatternSet((), (FittedPattern("r", parse_formula("(and (F 0.0 1.0 (le s 0.8)) (F 0.0 1.0 (ge s 0.3)))")[0], "neg"),))
    assert [kind for _, kind, _ in hyper.output_layout(flipped)].count("mu") == 2


def test_range_safety_random_weights():
    rng = np.random.default_rng(0)
    data = synth.generate("instance_threshold", 100, 3) + synth.generate("gain", 100, 4)
    X = hyper.featurize_all(data)
    model = hyper.HyperModel.init(MIXED, hidden=16)
    draws = 0
    for draw in range(50):
        scale = rng.choice([0.1, 1.0, 10.0, 100.0])
        model.set_flat(rng.normal(0.0, scale, model.flat().size))
        rows = rng.choice(len(data), 200, replace=False)
        draws += len(rows)
        raw, _ = model.raw_outputs(X[rows])
        thetas, alpha, beta = hyper._block_thetas(model, MIXED, raw)
        for k, pat in enumerate(MIXED.patterns):
            for i in range(len(rows)):
                th = {name: float(np.broadcast_to(v, (len(rows),))[i]) for name, v in thetas[k].items()}
                th["alpha"], th["beta"] = float(alpha[k][i]), float(beta[k][i])
                check_params(th)
                if k == 3:
                    assert th["mu2"] < th["mu4"]
    assert draws == 10_000


def _grad_case(seed, hidden=5, n=20):
    rng = np.random.default_rng(seed)
    data = synth.generate("instance_threshold", n, seed)
    model = hyper.HyperModel.init(MIXED, hidden=hidden, seed=seed)
    model.set_flat(model.flat() + rng.normal(0.0, 0.3, model.flat().size))
    return model, hyper.featurize_all(data), SignalBatch.from_instances(data), labels_of(data), rng


def _fd_relative_errors(model, X, batch, y, rng, n_dirs=6, n_coords=30, h=1e-4):
    base = model.flat()
    _, g = hyper.loss_and_grad(model, MIXED, X, batch, y)

    def f(x):
        model.set_flat(x)
        return hyper.loss_and_grad(model, MIXED, X, batch, y, grad=False)

    errs = []
    dirs = [rng.normal(size=base.size) for _ in range(n_dirs)]
    dirs += [np.eye(1, base.size, j).ravel() for j in rng.choice(base.size, n_coords, replace=False)]
    big = np.argsort(-np.abs(g))[:10]
    dirs += [np.eye(1, base.size, j).ravel() for j in big]
    for d in dirs:
        d = d / np.linalg.norm(d)
        fd = (f(base + h * d) - f(base - h * d)) / (2 * h)
        an = float(g @ d)
        errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    model.set_flat(base)
    return errs


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed):
    model, X, batch, y, rng = _grad_case(seed)
    assert max(_fd_relative_errors(model, X, batch, y, rng)) <= 1e-3


def test_unbound_model_rejected(small_patterns):
    data, ps = small_patterns
    model = hyper.HyperModel.init(MIXED, hidden=4)
    with pytest.raises(StateError):
        hyper.predict_params(model, ps, data)
    with pytest.raises(StateError):
        hyper.predict_with_hyper(model, ps, data)


def test_zero_epochs_midpoint_init():
    data = synth.generate("stable_high", 40, 0)
    model = hyper.train_hyper(MIXED, data, epochs=0, hidden=8, init="midpoint")
    for block in hyper.predict_params(model, MIXED, data):
        assert np.all(block["alpha"] == 5.0)
        assert np.all(block["beta"] == 0.0)
    assert len(model.history) == 1


def test_fitted_init_reproduces_fixed_predictions(small_patterns):
    data, ps = small_patterns
    model = hyper.train_hyper(ps, data, epochs=0, hidden=8)
    a, rho_h, _ = hyper.predict_with_hyper(model, ps, data)
    b, rho_f, _ = estimator.predict(ps, data)
    np.testing.assert_allclose(a, b, atol=1e-9)
    soft, _, _ = estimator.predict(ps, data, 20.0)
    assert model.history[0] == pytest.approx(estimator.binary_nll(soft, labels_of(data)), abs=1e-9)


def test_training_never_ends_above_fixed_and_keeps_structure(small_patterns):
    data, ps = small_patterns
    before = sorted(p.skeleton for p in ps.patterns)
    model = hyper.train_hyper(ps, data, epochs=5, hidden=8, batch=16)
    assert min(model.history) <= model.history[0]
    assert len(model.history) == 6
    assert sorted(p.skeleton for p in ps.patterns) == before
    assert model.pattern_hash == ps.content_hash()
    params = hyper.predict_params(model, ps, data[:5])
    for k, pat in enumerate(ps.patterns):
        th = {n: float(v[0]) for n, v in params[k].items() if n not in ("alpha", "beta")}
        assert canonical_skeleton(bind(pat.formula, th)) == pat.skeleton


def test_training_is_deterministic(small_patterns):
    data, ps = small_patterns
    a = hyper.train_hyper(ps, data, epochs=2, hidden=6, seed=4)
    b = hyper.train_hyper(ps, data, epochs=2, hidden=6, seed=4)
    assert a.dumps() == b.dumps()


def test_training_errors(small_patterns):
    data, ps = small_patterns
    with pytest.raises(DegenerateData):
        hyper.train_hyper(ps, [i for i in data if i.label == 1], epochs=1)
    with pytest.raises(ValueError):
        hyper.train_hyper(ps, data, epochs=1, batch=0)
    with pytest.raises(ValueError):
        hyper.HyperModel.init(ps, init="random")


def test_save_load_round_trip(tmp_path, small_patterns):
    data, ps = small_patterns
    model = hyper.train_hyper(ps, data, epochs=1, hidden=6)
    path = tmp_path / "h.json"
    model.save(path)
    again = hyper.HyperModel.load(path)
    assert again.dumps() == model.dumps()
    assert np.array_equal(hyper.predict_with_hyper(again, ps, data)[0], hyper.predict_with_hyper(model, ps, data)[0])
    doc = json.loads(path.read_text())
    assert doc["feature_width"] == 263 and doc["hidden"] == [6, 6]
    path.write_text("{}")
    with pytest.raises(SchemaError):
        hyper.HyperModel.load(path)
    doc["feature_width"] = 10
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaError):
        hyper.HyperModel.load(path)


def test_no_harm_when_one_threshold_fits_all():
    train = synth.generate("stable_high", 400, 21)
    test = synth.generate("stable_high", 400, 1021)
    ps = estimator.fit_mapping(miner.mine(train, seed=21), train, seed=21)
    model = hyper.train_hyper(ps, train, seed=21)
    y = labels_of(test)
    fixed = ece(estimator.predict(ps, test)[0], y)
    adaptive = ece(hyper.predict_with_hyper(model, ps, test)[0], y)
    assert adaptive <= fixed + 0.02


def test_thresholds_vary_per_question():
    train = synth.generate("instance_threshold", 300, 5)
    ps = PatternSet((FittedPattern("wl", parse_formula("(G 0.0 1.0 (ge s 0.6))")[0], "pos", 5.0, 0.0),), ())
    model = hyper.train_hyper(ps, train, seed=5, epochs=30)
    mu = hyper.predict_params(model, ps, train)[0]["mu1"]
    assert np.ptp(mu) > 0.05
