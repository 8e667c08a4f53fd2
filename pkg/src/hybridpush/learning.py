"""Offline mode-schedule learning: MIQP-labelled datasets and a multi-head MLP."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dynamics import PusherSlider
from .modes import ContactMode, ModeSchedule
from .mpc import MpcConfig, MpcInfeasibleError, MpcProblem, NominalTrajectory, branch_and_bound

log = logging.getLogger(__name__)

N_MODES = len(ContactMode)
FEATURES = ("ex", "ey", "etheta", "ephi")
MODEL_FORMAT = "hybridpush-mlp"
MODEL_VERSION = 1


class DatasetError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, checkpoint: "MlpClassifier"):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class SamplingSpec:
    std: tuple[float, ...] = (0.03, 0.03, 0.4, 0.025)
    count: int = 1000
    seed: int = 0
    include_origin: bool = True

    def __post_init__(self):
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))
        if len(self.std) != len(FEATURES):
            raise ValueError(f"need {len(FEATURES)} standard deviations")
        if not all(s > 0 for s in self.std):
            raise ValueError("standard deviations must be positive")
        if self.count < 0:
            raise ValueError("count must be non-negative")

    def sample(self, index: int) -> np.ndarray:
        """Error state number ``index``; independent of how samples are sharded."""
        if self.include_origin and index == 0:
            return np.zeros(len(self.std))
        rng = np.random.default_rng([self.seed, index])
        return rng.normal(0.0, self.std)


CASE_A_SAMPLING = SamplingSpec()
CASE_B_SAMPLING = SamplingSpec(std=(0.03, 0.03, 0.4, 0.01))


@dataclass(frozen=True)
class TrainingExample:
    x_err: np.ndarray
    schedule: ModeSchedule


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    segment_lengths: tuple[int, ...]
    discarded: int = 0

    def __len__(self) -> int:
        return len(self.X)

    @property
    def M(self) -> int:
        return len(self.segment_lengths)

    def examples(self) -> list[TrainingExample]:
        return [TrainingExample(x.copy(), ModeSchedule(tuple(y), self.segment_lengths))
                for x, y in zip(self.X, self.Y)]

    @classmethod
    def from_examples(cls, examples: Sequence[TrainingExample], segment_lengths) -> "Dataset":
        M = len(segment_lengths)
        X = np.array([e.x_err for e in examples], dtype=float).reshape(-1, len(FEATURES))
        Y = np.array([[int(m) for m in e.schedule.modes] for e in examples], dtype=int).reshape(-1, M)
        return cls(X, Y, tuple(segment_lengths))

    def split(self, train_fraction: float = 2 / 3) -> tuple["Dataset", "Dataset"]:
        k = int(round(len(self) * train_fraction))
        return (Dataset(self.X[:k], self.Y[:k], self.segment_lengths),
                Dataset(self.X[k:], self.Y[k:], self.segment_lengths))

    def concat(self, other: "Dataset") -> "Dataset":
        if self.segment_lengths != other.segment_lengths:
            raise ValueError("segment structures differ")
        return Dataset(np.vstack([self.X, other.X]), np.vstack([self.Y, other.Y]),
                       self.segment_lengths, self.discarded + other.discarded)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([*FEATURES, *(f"m{j + 1}" for j in range(self.M))])
        for x, y in zip(self.X, self.Y):
            w.writerow([*(repr(float(v)) for v in x), *("SLR"[int(m)] for m in y)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, segment_lengths) -> "Dataset":
        rows = list(csv.reader(io.StringIO(text)))
        M = len(segment_lengths)
        expected = [*FEATURES, *(f"m{j + 1}" for j in range(M))]
        if not rows or rows[0] != expected:
            raise ValueError(f"dataset header must be {','.join(expected)}")
        X = np.array([[float(v) for v in r[:4]] for r in rows[1:]], dtype=float).reshape(-1, 4)
        Y = np.array([[int(ContactMode.from_letter(c)) for c in r[4:]] for r in rows[1:]],
                     dtype=int).reshape(-1, M)
        return cls(X, Y, tuple(segment_lengths))


# --------------------------------------------------------------------------
# labelling

@dataclass(frozen=True)
class LabelContext:
    """Everything a worker needs to rebuild the labelling problem."""

    model: PusherSlider
    traj: NominalTrajectory
    config: MpcConfig
    t0: float = 0.0

    def problem(self) -> MpcProblem:
        return MpcProblem(self.model, self.traj, self.t0, self.config)


def label(prob: MpcProblem, x_err) -> ModeSchedule:
    return branch_and_bound(prob, x_err).schedule


_worker_ctx: tuple | None = None


def _init_worker(ctx: LabelContext, spec: SamplingSpec):
    global _worker_ctx
    _worker_ctx = (ctx.problem(), spec)


def _label_range(bounds: tuple[int, int]):
    prob, spec = _worker_ctx
    return _label_indices(prob, spec, range(*bounds))


def _label_indices(prob: MpcProblem, spec: SamplingSpec, indices) -> list:
    out = []
    for i in indices:
        x = spec.sample(i)
        try:
            out.append((i, x, tuple(int(m) for m in label(prob, x).modes)))
        except MpcInfeasibleError as exc:
            log.warning("sample %d discarded: %s", i, exc)
            out.append((i, x, None))
    return out


def generate_dataset(ctx: LabelContext, spec: SamplingSpec, start: int = 0, stop: int | None = None,
                     jobs: int = 1, progress: Callable[[int, int], None] | None = None,
                     max_failure_rate: float = 0.01) -> Dataset:
    """Label samples ``start..stop`` of ``spec`` with the exact MIQP schedule.

    Sample ``i`` depends only on ``(spec.seed, i)``, so shards generated
    separately concatenate to the single-run dataset for any ``jobs``.
    """
    stop = spec.count if stop is None else stop
    if not 0 <= start <= stop <= spec.count:
        raise ValueError(f"invalid sample range [{start}, {stop}) for count {spec.count}")
    chunk = 200
    ranges = [(a, min(a + chunk, stop)) for a in range(start, stop, chunk)]
    results: list = []
    if jobs > 1 and len(ranges) > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(ctx, spec)) as pool:
            for part in pool.map(_label_range, ranges):
                results.extend(part)
                if progress:
                    progress(len(results), stop - start)
    else:
        prob = ctx.problem()
        for r in ranges:
            results.extend(_label_indices(prob, spec, range(*r)))
            if progress:
                progress(len(results), stop - start)
    kept = [(x, y) for _, x, y in sorted(results, key=lambda r: r[0]) if y is not None]
    discarded = len(results) - len(kept)
    if results and discarded / len(results) > max_failure_rate:
        raise DatasetError(f"{discarded} of {len(results)} samples had no feasible schedule")
    M = ctx.config.M
    X = np.array([x for x, _ in kept], dtype=float).reshape(-1, len(FEATURES))
    Y = np.array([y for _, y in kept], dtype=int).reshape(-1, M)
    return Dataset(X, Y, tuple(ctx.config.segments), discarded)


# --------------------------------------------------------------------------
# classifier

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 50
    seed: int = 0
    class_weights: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be >= 1 and epochs >= 0")


class MlpClassifier:
    """ReLU trunk with one 3-way softmax head per horizon segment."""

    def __init__(self, segment_lengths: Sequence[int], hidden: Sequence[int] = (32, 50, 50),
                 n_inputs: int = len(FEATURES), seed: int = 0):
        self.segment_lengths = tuple(int(n) for n in segment_lengths)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_inputs = n_inputs
        sizes = [n_inputs, *self.hidden, self.M * N_MODES]
        rng = np.random.default_rng(seed)
        self.weights = [rng.normal(0.0, math.sqrt(2.0 / a), (a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
        self.biases = [np.zeros(b) for b in sizes[1:]]
        self.mean = np.zeros(n_inputs)
        self.std = np.ones(n_inputs)
        self.history: dict[str, list[float]] = {"train_loss": [], "val_loss": []}

    @property
    def M(self) -> int:
        return len(self.segment_lengths)

    @property
    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "MlpClassifier":
        other = MlpClassifier(self.segment_lengths, self.hidden, self.n_inputs)
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        other.mean, other.std = self.mean.copy(), self.std.copy()
        other.history = {k: list(v) for k, v in self.history.items()}
        return other

    # normalization
    def fit_normalization(self, X: np.ndarray) -> None:
        self.mean = X.mean(axis=0)
        std = X.std(axis=0)
        self.std = np.where(std > 0, std, 1.0)

    def normalize(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.std

    def denormalize(self, Xn) -> np.ndarray:
        return np.asarray(Xn, dtype=float) * self.std + self.mean

    # forward / backward
    def _forward(self, Xn: np.ndarray):
        acts = [Xn]
        h = Xn
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ W + b, 0.0)
            acts.append(h)
        logits = (h @ self.weights[-1] + self.biases[-1]).reshape(len(Xn), self.M, N_MODES)
        return logits, acts

    def logits(self, X) -> np.ndarray:
        return self._forward(self.normalize(np.atleast_2d(X)))[0]

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.logits(X))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.logits(X), axis=-1)

    def predict_schedule(self, x_err) -> ModeSchedule:
        return ModeSchedule(tuple(int(m) for m in self.predict(x_err)[0]), self.segment_lengths)

    def predict_first_modes(self, X) -> np.ndarray:
        return self.predict(X)[:, 0]

    def loss_and_grads(self, X, Y, sample_weights: np.ndarray | None = None, normalized: bool = False):
        """Mean over samples of the summed per-head cross-entropy, with gradients."""
        Xn = np.asarray(X, dtype=float) if normalized else self.normalize(X)
        Y = np.asarray(Y, dtype=int)
        n = len(Xn)
        logits, acts = self._forward(Xn)
        P = softmax(logits)
        onehot = np.zeros_like(P)
        np.put_along_axis(onehot, Y[..., None], 1.0, axis=-1)
        wts = np.ones((n, self.M)) if sample_weights is None else np.asarray(sample_weights, dtype=float)
        logp = logits - logits.max(axis=-1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
        loss = float(-np.sum(wts * np.sum(onehot * logp, axis=-1)) / n)

        delta = ((P - onehot) * wts[..., None] / n).reshape(n, -1)
        gW = [None] * len(self.weights)
        gb = [None] * len(self.biases)
        for layer in range(len(self.weights) - 1, -1, -1):
            gW[layer] = acts[layer].T @ delta
            gb[layer] = delta.sum(axis=0)
            if layer:
                delta = (delta @ self.weights[layer].T) * (acts[layer] > 0)
        grads = [g for pair in zip(gW, gb) for g in pair]
        return loss, grads

    def loss(self, X, Y, sample_weights=None) -> float:
        return self.loss_and_grads(X, Y, sample_weights)[0]

    # persistence
    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT, "version": MODEL_VERSION,
            "segment_lengths": list(self.segment_lengths), "hidden": list(self.hidden),
            "n_inputs": self.n_inputs, "modes": "SLR",
            "normalization": {"mean": self.mean.tolist(), "std": self.std.tolist()},
            "layers": [{"shape": list(W.shape), "weights": W.ravel().tolist(), "bias": b.tolist()}
                       for W, b in zip(self.weights, self.biases)],
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpClassifier":
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise ValueError("unsupported model file")
        m = cls(d["segment_lengths"], d["hidden"], d["n_inputs"])
        m.mean = np.array(d["normalization"]["mean"], dtype=float)
        m.std = np.array(d["normalization"]["std"], dtype=float)
        m.weights = [np.array(L["weights"], dtype=float).reshape(L["shape"]) for L in d["layers"]]
        m.biases = [np.array(L["bias"], dtype=float) for L in d["layers"]]
        for W, W0 in zip(m.weights, cls(d["segment_lengths"], d["hidden"], d["n_inputs"]).weights):
            if W.shape != W0.shape:
                raise ValueError("layer shapes do not chain")
        m.history = {k: list(v) for k, v in d.get("history", {}).items()}
        return m

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def loads(cls, text: str) -> "MlpClassifier":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "MlpClassifier":
        with open(path) as fh:
            return cls.loads(fh.read())


def inverse_frequency_weights(Y: np.ndarray) -> np.ndarray:
    """Per-sample, per-head weights proportional to 1 / class frequency."""
    n, M = Y.shape
    w = np.empty((n, M))
    for j in range(M):
        counts = np.bincount(Y[:, j], minlength=N_MODES).astype(float)
        per_class = np.where(counts > 0, n / (N_MODES * np.maximum(counts, 1)), 0.0)
        w[:, j] = per_class[Y[:, j]]
    return w


def train(train_set: Dataset, val_set: Dataset | None = None, config: TrainConfig | None = None,
          hidden: Sequence[int] = (32, 50, 50)) -> MlpClassifier:
    """Adam on the summed per-head cross-entropy; deterministic for a fixed seed."""
    config = config or TrainConfig()
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    model = MlpClassifier(train_set.segment_lengths, hidden, seed=config.seed)
    model.fit_normalization(train_set.X)
    Xn = model.normalize(train_set.X)
    Y = train_set.Y
    sw = inverse_frequency_weights(Y) if config.class_weights else None
    rng = np.random.default_rng([config.seed, 1])
    m1 = [np.zeros_like(p) for p in model.params]
    m2 = [np.zeros_like(p) for p in model.params]
    step = 0
    checkpoint = model.copy()
    n = len(Xn)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            _, grads = model.loss_and_grads(Xn[idx], Y[idx], None if sw is None else sw[idx], normalized=True)
            step += 1
            c1 = 1 - config.beta1**step
            c2 = 1 - config.beta2**step
            for p, g, a, b in zip(model.params, grads, m1, m2):
                a *= config.beta1
                a += (1 - config.beta1) * g
                b *= config.beta2
                b += (1 - config.beta2) * g * g
                p -= config.learning_rate * (a / c1) / (np.sqrt(b / c2) + config.eps)
        tl = model.loss_and_grads(Xn, Y, sw, normalized=True)[0]
        if not math.isfinite(tl):
            raise TrainingDivergedError(f"training loss became {tl} at epoch {epoch + 1}", checkpoint)
        model.history["train_loss"].append(tl)
        if val_set is not None and len(val_set):
            model.history["val_loss"].append(model.loss(val_set.X, val_set.Y))
        checkpoint = model.copy()
    return model


@dataclass
class EvaluationReport:
    per_segment_accuracy: np.ndarray
    majority_baseline: np.ndarray
    exact_match: float
    confusion: np.ndarray  # (M, true, predicted)
    n: int

    @property
    def per_class_recall(self) -> np.ndarray:
        tot = self.confusion.sum(axis=2)
        diag = np.einsum("mii->mi", self.confusion)
        return np.where(tot > 0, diag / np.maximum(tot, 1), np.nan)

    def to_dict(self) -> dict:
        return {"n": self.n, "exact_match": self.exact_match,
                "per_segment_accuracy": self.per_segment_accuracy.tolist(),
                "majority_baseline": self.majority_baseline.tolist(),
                "per_class_recall": [[None if math.isnan(v) else v for v in row]
                                     for row in self.per_class_recall.tolist()],
                "confusion": self.confusion.tolist()}

    def format(self) -> str:
        lines = ["segment  accuracy  baseline  recall(S/L/R)"]
        for j, (a, b) in enumerate(zip(self.per_segment_accuracy, self.majority_baseline)):
            rec = "/".join("-" if math.isnan(v) else f"{v:.2f}" for v in self.per_class_recall[j])
            lines.append(f"m{j + 1:<7d} {a:8.4f}  {b:8.4f}  {rec}")
        lines.append(f"exact schedule match {self.exact_match:.4f} over {self.n} examples")
        return "\n".join(lines)


def evaluate(model: MlpClassifier, data: Dataset) -> EvaluationReport:
    M = data.M
    if len(data) == 0:
        raise ValueError("evaluation set is empty")
    pred = model.predict(data.X)
    acc = (pred == data.Y).mean(axis=0)
    base = np.array([np.bincount(data.Y[:, j], minlength=N_MODES).max() / len(data) for j in range(M)])
    conf = np.zeros((M, N_MODES, N_MODES), dtype=int)
    for j in range(M):
        np.add.at(conf[j], (data.Y[:, j], pred[:, j]), 1)
    exact = float(np.mean(np.all(pred == data.Y, axis=1)))
    return EvaluationReport(acc, base, exact, conf, len(data))
