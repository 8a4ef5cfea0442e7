"""Training loop, optimizer, evaluation, and the gradient-check harness.

Batches are emulated by per-sample forward/backward passes with gradient
accumulation (question length varies per sample, so there is no padded
batching). The optimizer is Adam with the standard constants; the learning
rate halves on a fixed epoch interval.
"""

from __future__ import annotations

import hashlib
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .model import Model, ModelConfig, check_ablations

THREADS_ENV = "BTA_THREADS"


class NumericError(Exception):
    """A gradient or update became non-finite; the message names the parameter."""


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 16
    lr: float = 1e-4
    lr_decay: float = 0.5
    lr_decay_every: int = 5
    lam: float = 10.0
    ablations: tuple = ()
    seed: int = 0
    precision: str = "f32"
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")
        self.ablations = tuple(check_ablations(self.ablations))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablations"] = list(self.ablations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["ablations"] = tuple(d.get("ablations", ()))
        return cls(**d)


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    epoch_metrics: list = field(default_factory=list)
    metric_name: str = "accuracy"
    best_epoch: int = -1
    wall_time_s: float = 0.0
    param_checksum: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Stepwise decay: lr * decay^(epoch // interval)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr * config.lr_decay ** (epoch // config.lr_decay_every)


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, model: Model):
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in model.params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in model.params.items()}


def optimizer_step(model: Model, state: AdamState, lr: float) -> None:
    """One Adam update over every parameter; missing grads count as zero."""
    state.step += 1
    t = state.step
    b1, b2, eps = AdamState.BETA1, AdamState.BETA2, AdamState.EPS
    for name, p in model.params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


def param_checksum(model: Model) -> str:
    digest = hashlib.sha256()
    for name in sorted(model.params.names()):
        digest.update(name.encode())
        digest.update(model.params[name].data.tobytes())
    return digest.hexdigest()


def train_epoch(model: Model, samples, config: TrainConfig, state: AdamState,
                epoch: int) -> float:
    """One pass over the dataset; returns the mean per-sample loss."""
    if not samples:
        raise ValueError("train_epoch: empty dataset")
    order = np.arange(len(samples))
    if config.shuffle:
        np.random.default_rng([config.seed, epoch]).shuffle(order)
    lr = lr_schedule(epoch, config)
    losses = []
    for start in range(0, len(order), config.batch_size):
        batch = order[start:start + config.batch_size]
        model.params.zero_grads()
        for idx in batch:
            loss = model.loss(samples[int(idx)], ablations=config.ablations)
            T.backward(loss)
            losses.append(loss.item())
        inv = 1.0 / len(batch)
        for p in model.params.tensors():
            if p.grad is not None:
                p.grad *= inv
        optimizer_step(model, state, lr)
    model.params.zero_grads()
    return float(np.mean(losses))


def _max_workers() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def evaluate(model: Model, samples, config: TrainConfig) -> float:
    """Accuracy for classification/ranking tasks, MSE of rounded counts."""
    if not samples:
        raise ValueError("evaluate: empty dataset")

    def predict(sample):
        with T.no_grad():
            out = model.predict(sample, ablations=config.ablations)
        return out[0] if isinstance(out, tuple) else out

    workers = _max_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(predict, samples))
    else:
        preds = [predict(s) for s in samples]

    if model.config.task == "count":
        errs = [(p - s.answer) ** 2 for p, s in zip(preds, samples)]
        return float(np.mean(errs))
    hits = [int(p == s.answer) for p, s in zip(preds, samples)]
    return float(np.mean(hits))


def metric_improved(task: str, new: float, best: float | None) -> bool:
    if best is None:
        return True
    return new < best if task == "count" else new > best


def fit(model: Model, samples, config: TrainConfig, eval_samples=None) -> tuple[TrainReport, dict]:
    """Train for config.epochs; returns (report, best parameter snapshot).

    The snapshot is taken whenever the evaluation metric improves, mirroring
    best-validation-epoch checkpointing. eval_samples defaults to the
    training set.
    """
    eval_samples = samples if eval_samples is None else eval_samples
    state = AdamState(model)
    report = TrainReport(metric_name="mse" if model.config.task == "count" else "accuracy")
    best_metric = None
    best_params = model.param_arrays()
    start = time.perf_counter()
    for epoch in range(config.epochs):
        report.epoch_losses.append(train_epoch(model, samples, config, state, epoch))
        metric = evaluate(model, eval_samples, config)
        report.epoch_metrics.append(metric)
        if metric_improved(model.config.task, metric, best_metric):
            best_metric = metric
            best_params = model.param_arrays()
            report.best_epoch = epoch
    report.wall_time_s = time.perf_counter() - start
    report.param_checksum = param_checksum(model)
    return report, best_params


# ---------------------------------------------------------------------------
# gradient-check harness


TINY = dict(num_frames=8, num_clips=2, num_tokens=5, d_model=16,
            feature_dim=3, embed_dim=4, num_labels=3, num_candidates=2)

GRAD_TOL = 1e-4


@dataclass
class GradCheckResult:
    task: str
    errors: dict        # parameter name -> max relative error
    worst: float
    worst_param: str

    def failed(self) -> list:
        return sorted(name for name, err in self.errors.items() if err > GRAD_TOL)


def _tiny_sample(task: str, rng: np.random.Generator, spec: dict):
    """In-memory sample for the tiny configuration (no files involved)."""
    from .data import Candidate, QASample

    k = spec["num_tokens"]
    edges = [(int(rng.integers(0, j)), j, "dep") for j in range(1, k)]
    sample = QASample(
        sample_id="gradcheck",
        appearance=rng.uniform(-1, 1, (spec["num_frames"], spec["feature_dim"])),
        motion=rng.uniform(-1, 1, (spec["num_clips"], spec["feature_dim"])),
        tokens=[f"w{t}" for t in range(k)],
        embeddings=rng.uniform(-1, 1, (k, spec["embed_dim"])),
        edges=edges,
        answer=0,
        candidates=[],
    )
    if task == "open_ended":
        sample.answer = int(rng.integers(0, spec["num_labels"]))
    elif task == "count":
        sample.answer = 2
    else:
        sample.answer = int(rng.integers(0, spec["num_candidates"]))
        for j in range(spec["num_candidates"]):
            kc = 2
            sample.candidates.append(Candidate(
                tokens=[f"c{j}_{t}" for t in range(kc)],
                embeddings=rng.uniform(-1, 1, (kc, spec["embed_dim"])),
                edges=[(int(rng.integers(0, t)), t, "dep") for t in range(1, kc)],
            ))
    return sample


def _tiny_model(task: str, spec: dict, seed: int) -> Model:
    return Model(ModelConfig(
        task=task, feature_dim=spec["feature_dim"], embed_dim=spec["embed_dim"],
        d_model=spec["d_model"], num_labels=spec["num_labels"],
        num_candidates=spec["num_candidates"], count_min=1, count_max=5,
        lam=10.0, precision="f64", seed=seed))


def gradient_check_task(task: str, seed: int = 0, h: float = 1e-5,
                        spec: dict | None = None) -> GradCheckResult:
    """Compare backward() with central differences for one task head.

    Only parameters that participate in the loss graph are perturbed; for the
    rest the loss provably cannot change, so both sides are identically zero.
    """
    spec = dict(TINY if spec is None else spec)
    model = _tiny_model(task, spec, seed)
    rng = np.random.default_rng([seed, 17])
    sample = _tiny_sample(task, rng, spec)

    def loss_fn():
        return model.loss(sample).item()

    model.params.zero_grads()
    T.backward(model.loss(sample))

    errors = {}
    for name, p in model.params.items():
        if p.grad is None:       # not in the loss graph for this head
            continue
        analytic = p.grad.copy()
        numeric = T.finite_difference_gradient(lambda _t: loss_fn(), p, h=h)
        errors[name] = T.relative_error(analytic, numeric, floor=1e-2)
    model.params.zero_grads()

    worst_param = max(errors, key=errors.get)
    return GradCheckResult(task, errors, errors[worst_param], worst_param)


def gradient_check_model(seed: int = 0, h: float = 1e-5,
                         tasks=("open_ended", "count", "multi_choice")) -> list[GradCheckResult]:
    """Run the finite-difference comparison for every task head."""
    return [gradient_check_task(task, seed=seed, h=h) for task in tasks]
