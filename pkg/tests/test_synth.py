import numpy as np
import pytest

from stlconf import synth
from stlconf.errors import DegenerateData
from stlconf.trace import labels_of


@pytest.mark.parametrize("scenario", synth.SCENARIOS)
def test_balance_lengths_and_range(scenario):
    data = synth.generate(scenario, 101, 4)
    y = labels_of(data)
    assert y.sum() == 50 and len(y) == 101
    for inst in data:
        assert synth.LENGTH_RANGE[0] <= len(inst.signal) <= synth.LENGTH_RANGE[1]
        assert np.all((inst.signal.values >= 0) & (inst.signal.values <= 1))
    assert len({i.id for i in data}) == 101


@pytest.mark.parametrize("scenario", synth.SCENARIOS)
def test_deterministic(scenario):
    a, b = synth.generate(scenario, 30, 9), synth.generate(scenario, 30, 9)
    assert [i.to_record() for i in a] == [i.to_record() for i in b]
    c = synth.generate(scenario, 30, 10)
    assert [i.to_record() for i in a] != [i.to_record() for i in c]


@pytest.mark.parametrize("scenario", [s for s in synth.SCENARIOS if s != "instance_threshold"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_planted_formula_separates(scenario, seed):
    data = synth.generate(scenario, 400, seed)
    assert synth.oracle_auroc(scenario, data) == 1.0


def test_sharp_drop_happens_exactly_once():
    for inst in synth.generate("sharp_drop", 300, 5):
        d = np.diff(inst.signal.values)
        big = int(np.sum(d <= -0.4))
        assert big == (0 if inst.label == 1 else 1)
        assert np.all(np.abs(d[d > -0.4]) <= 0.1)


def test_stable_high_failures_dip():
    for inst in synth.generate("stable_high", 200, 6):
        low = inst.signal.values.min()
        assert (low < 0.35) if inst.label == 0 else (low >= 0.6)


def test_gain_margin():
    for inst in synth.generate("gain", 2000, 8):
        v = inst.signal.values
        k = max(1, int(np.ceil(0.25 * len(v) - 1e-6)))
        if inst.label == 1:
            assert v[-k:].mean() - v[:k].mean() >= 0.3


def test_instance_threshold_needs_question_identity():
    data = synth.generate("instance_threshold", 800, 0)
    assert synth.per_instance_oracle_auroc(data) == 1.0
    assert synth.fixed_threshold_auroc(data) < 0.9
    for inst in data:
        assert 0.4 <= synth.question_threshold(synth.question_id(inst)) <= 0.8


def test_oracle_document():
    data = synth.generate("instance_threshold", 60, 2)
    doc = synth.oracle_document("instance_threshold", 60, 2, data)
    assert doc["formula"] == "(G 0.0 1.0 (ge s 0.6))"
    assert len(doc["thresholds"]) == synth.N_QUESTION_IDS
    assert synth.dumps_oracle(doc) == synth.dumps_oracle(dict(reversed(list(doc.items()))))


def test_bad_arguments():
    with pytest.raises(ValueError):
        synth.generate("nope", 10, 0)
    with pytest.raises(DegenerateData):
        synth.generate("gain", 1, 0)
