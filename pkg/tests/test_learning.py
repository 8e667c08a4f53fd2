import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridpush.learning import (Dataset, DatasetError, LabelContext, MlpClassifier, SamplingSpec, TrainConfig,
                                 TrainingDivergedError, evaluate, generate_dataset, inverse_frequency_weights,
                                 softmax, train)
from hybridpush.modes import ModeSchedule
from hybridpush.mpc import MpcProblem, case_a_config, solve_mpc_miqp

SEGS = (1, 2, 2)


def small_ctx(model, traj):
    cfg = case_a_config().with_segments(SEGS, [0.0, 0.3, 0.1])
    return LabelContext(model, traj, cfg, 0.0)


def random_dataset(n, segments=SEGS, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.normal(0, 1, (n, 4)), rng.integers(0, 3, (n, len(segments))), tuple(segments))


# -- softmax and gradients --------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.floats(-100, 100))
def test_softmax_properties(logits, shift):
    z = np.array(logits)
    p = softmax(z)
    assert abs(p.sum() - 1.0) <= 1e-9 and np.all(p >= 0)
    assert np.allclose(softmax(z + shift), p, atol=1e-12)


def test_softmax_large_logits_stable():
    p = softmax(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.all(np.isfinite(p)) and p[0, 0] == pytest.approx(1.0)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    model = MlpClassifier(SEGS, hidden=(6, 5), seed=2)
    X = rng.normal(0, 1, (7, 4))
    Y = rng.integers(0, 3, (7, 3))
    wts = rng.uniform(0.5, 2.0, (7, 3))
    _, grads = model.loss_and_grads(X, Y, wts)
    params = model.params
    eps = 1e-6
    for t, (p, g) in enumerate(zip(params, grads)):
        flat = p.reshape(-1)
        for k in rng.choice(flat.size, size=min(20, flat.size), replace=False):
            old = flat[k]
            flat[k] = old + eps
            up = model.loss(X, Y, wts)
            flat[k] = old - eps
            down = model.loss(X, Y, wts)
            flat[k] = old
            fd = (up - down) / (2 * eps)
            assert abs(fd - g.reshape(-1)[k]) <= 1e-5 * max(1.0, abs(fd)), (t, k)


def test_normalization_round_trip():
    rng = np.random.default_rng(3)
    X = rng.normal([0.01, -0.02, 0.3, 0.0], [0.03, 0.03, 0.4, 0.025], (200, 4))
    model = MlpClassifier(SEGS)
    model.fit_normalization(X)
    assert np.max(np.abs(model.denormalize(model.normalize(X)) - X)) <= 1e-12
    assert np.allclose(model.normalize(X).mean(axis=0), 0, atol=1e-12)


def test_constant_feature_normalization():
    X = np.zeros((10, 4))
    model = MlpClassifier(SEGS)
    model.fit_normalization(X)
    assert np.array_equal(model.std, np.ones(4))


# -- training ------------------------------------------------------------------

def test_overfits_ten_points():
    data = random_dataset(10, seed=4)
    model = train(data, config=TrainConfig(learning_rate=1e-2, batch_size=10, epochs=600, seed=0),
                  hidden=(32, 32))
    assert evaluate(model, data).per_segment_accuracy.min() >= 0.99


def test_constant_labels_converge():
    data = random_dataset(300, seed=5)
    data.Y[:] = 0
    model = train(data, config=TrainConfig(learning_rate=1e-2, batch_size=50, epochs=30))
    assert model.history["train_loss"][-1] < 0.02
    assert np.all(model.predict(data.X) == 0)


def test_training_reproducible():
    data = random_dataset(120, seed=6)
    cfg = TrainConfig(batch_size=32, epochs=5, seed=11)
    a, b = train(data, config=cfg), train(data, config=cfg)
    assert a.dumps() == b.dumps()
    c = train(data, config=TrainConfig(batch_size=32, epochs=5, seed=12))
    assert a.dumps() != c.dumps()


def test_loss_decreases():
    rng = np.random.default_rng(7)
    X = rng.normal(0, 1, (600, 4))
    Y = np.stack([(X[:, 0] > 0).astype(int), (X[:, 1] > 0).astype(int) * 2, np.zeros(600, int)], axis=1)
    model = train(Dataset(X, Y, SEGS), config=TrainConfig(learning_rate=3e-3, batch_size=64, epochs=20))
    h = model.history["train_loss"]
    assert h[-1] < 0.5 * h[0]
    assert evaluate(model, Dataset(X, Y, SEGS)).per_segment_accuracy.min() > 0.95


def test_divergence_reports_checkpoint(monkeypatch):
    data = random_dataset(50, seed=8)
    real = MlpClassifier.loss_and_grads
    calls = []

    def flaky(self, *args, **kw):
        loss, grads = real(self, *args, **kw)
        calls.append(1)
        # the full-set evaluation of the second epoch goes non-finite
        return (float("nan") if len(calls) == 4 else loss), grads
    monkeypatch.setattr(MlpClassifier, "loss_and_grads", flaky)
    with pytest.raises(TrainingDivergedError) as info:
        train(data, config=TrainConfig(batch_size=50, epochs=5))
    assert len(info.value.checkpoint.history["train_loss"]) == 1


def test_empty_training_set():
    with pytest.raises(ValueError):
        train(Dataset(np.zeros((0, 4)), np.zeros((0, 3), int), SEGS))


def test_inverse_frequency_weights():
    Y = np.array([[0], [0], [0], [1]])
    w = inverse_frequency_weights(Y)
    # each present class carries the same total weight
    assert w[:3, 0].sum() == pytest.approx(w[3, 0])


# -- evaluation ------------------------------------------------------------------

class _Lookup:
    def __init__(self, Y):
        self.Y = Y

    def predict(self, X):
        return self.Y


def test_perfect_predictor_scores_one():
    data = random_dataset(90, seed=9)
    rep = evaluate(_Lookup(data.Y), data)
    assert np.all(rep.per_segment_accuracy == 1.0) and rep.exact_match == 1.0
    assert np.all(rep.per_class_recall == 1.0)
    assert rep.confusion.sum() == 90 * 3


def test_random_model_near_chance():
    data = random_dataset(6000, seed=10)
    rep = evaluate(MlpClassifier(SEGS, seed=3), data)
    assert np.all(np.abs(rep.per_segment_accuracy - 1 / 3) < 0.04)
    assert np.all(rep.majority_baseline < 0.36)


def test_report_format_and_dict():
    data = random_dataset(30, seed=11)
    rep = evaluate(MlpClassifier(SEGS), data)
    text = rep.format()
    assert text.splitlines()[0].startswith("segment") and len(text.splitlines()) == 3 + 2
    json.dumps(rep.to_dict())


# -- persistence -----------------------------------------------------------------

def test_json_round_trip(tmp_path):
    data = random_dataset(40, seed=12)
    model = train(data, config=TrainConfig(batch_size=16, epochs=2))
    path = tmp_path / "m.json"
    model.save(path)
    other = MlpClassifier.load(path)
    assert np.array_equal(other.logits(data.X), model.logits(data.X))
    assert other.dumps() == model.dumps()


def test_rejects_foreign_model_file():
    d = MlpClassifier(SEGS).to_dict()
    d["format"] = "other"
    with pytest.raises(ValueError):
        MlpClassifier.from_dict(d)
    d = MlpClassifier(SEGS).to_dict()
    d["layers"][1]["shape"] = [5, 10]
    d["layers"][1]["weights"] = [0.0] * 50
    with pytest.raises(ValueError):
        MlpClassifier.from_dict(d)


def test_predict_schedule_type():
    model = MlpClassifier(SEGS)
    s = model.predict_schedule(np.zeros(4))
    assert isinstance(s, ModeSchedule) and s.segment_lengths == SEGS


# -- datasets ----------------------------------------------------------------------

def test_sampling_independent_of_sharding():
    spec = SamplingSpec(count=50, seed=3)
    assert np.array_equal(spec.sample(0), np.zeros(4))
    assert np.array_equal(spec.sample(17), SamplingSpec(count=999, seed=3).sample(17))
    assert not np.array_equal(spec.sample(17), SamplingSpec(count=50, seed=4).sample(17))
    with pytest.raises(ValueError):
        SamplingSpec(std=(1, 1, 1))


def test_sampling_statistics():
    spec = SamplingSpec(count=4001, seed=0)
    X = np.array([spec.sample(i) for i in range(1, 4001)])
    assert np.allclose(X.std(axis=0), spec.std, rtol=0.05)
    assert np.all(np.abs(X.mean(axis=0)) < 4 * np.array(spec.std) / np.sqrt(4000))


def test_labels_match_enumeration_oracle(model_a, traj_a):
    ctx = small_ctx(model_a, traj_a)
    spec = SamplingSpec(count=30, seed=2)
    data = generate_dataset(ctx, spec)
    assert len(data) == 30 and data.discarded == 0
    prob = MpcProblem(model_a, traj_a, 0.0, ctx.config)
    for i, (x, y) in enumerate(zip(data.X, data.Y)):
        assert np.array_equal(x, spec.sample(i))
        ref = solve_mpc_miqp(prob, x).schedule
        assert tuple(int(m) for m in ref.modes) == tuple(y)
    assert np.array_equal(data.X[0], np.zeros(4)) and np.all(data.Y[0] == 0)


def test_shards_concatenate_to_single_run(model_a, traj_a):
    ctx = small_ctx(model_a, traj_a)
    spec = SamplingSpec(count=24, seed=5)
    whole = generate_dataset(ctx, spec)
    parts = generate_dataset(ctx, spec, 0, 10).concat(generate_dataset(ctx, spec, 10, 24))
    assert whole.to_csv() == parts.to_csv()
    parallel = generate_dataset(ctx, SamplingSpec(count=420, seed=5), 0, 420, jobs=2)
    serial_head = generate_dataset(ctx, SamplingSpec(count=420, seed=5), 0, 24)
    assert parallel.to_csv().splitlines()[:25] == serial_head.to_csv().splitlines()


def test_empty_dataset_csv(model_a, traj_a):
    data = generate_dataset(small_ctx(model_a, traj_a), SamplingSpec(count=0))
    assert data.to_csv() == "ex,ey,etheta,ephi,m1,m2,m3\n"
    again = Dataset.from_csv(data.to_csv(), SEGS)
    assert len(again) == 0


def test_csv_round_trip():
    data = random_dataset(25, seed=13)
    again = Dataset.from_csv(data.to_csv(), SEGS)
    assert np.array_equal(again.X, data.X) and np.array_equal(again.Y, data.Y)
    with pytest.raises(ValueError):
        Dataset.from_csv("a,b\n", SEGS)


def test_split_two_thirds():
    tr, va = random_dataset(30).split()
    assert len(tr) == 20 and len(va) == 10


def test_invalid_range(model_a, traj_a):
    with pytest.raises(ValueError):
        generate_dataset(small_ctx(model_a, traj_a), SamplingSpec(count=5), 3, 9)


def test_failure_rate_guard(model_a, traj_a, monkeypatch):
    import hybridpush.learning as L
    from hybridpush.mpc import MpcInfeasibleError

    def boom(prob, x):
        raise MpcInfeasibleError("no schedule")
    monkeypatch.setattr(L, "label", boom)
    with pytest.raises(DatasetError):
        generate_dataset(small_ctx(model_a, traj_a), SamplingSpec(count=5))
