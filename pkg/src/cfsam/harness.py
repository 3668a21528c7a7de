"""Synthetic pyramids, a cross-scale regression task, and a toy trainer.

The task labels mix a linear functional of per-scale pooled features
with a multiplicative cross-scale interaction, so a purely linear
readout over pooled raw maps carries an irreducible error floor while a
model that mixes information across scales can go below it. Training is
plain full-batch gradient descent on mean squared error, deterministic
per seed.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from cfsam import tensor as T
from cfsam.module import CfsamConfig, CfsamWeights, FeaturePyramid, cfsam_forward, init_weights
from cfsam.tensor import Tensor

DEFAULT_TASK_SHAPES = [(4, 4, 6), (2, 2, 6)]


def gen_pyramid(shapes, seed: int, precision: str = "f64") -> FeaturePyramid:
    """Deterministic standard-normal pyramid for the given shape spec."""
    rng = np.random.default_rng(seed)
    dt = T.DTYPES[precision]
    return FeaturePyramid([Tensor(rng.standard_normal(s).astype(dt)) for s in shapes])


@dataclass
class SyntheticTask:
    shapes: list[tuple[int, int, int]] = field(default_factory=lambda: list(DEFAULT_TASK_SHAPES))
    seed: int = 1234
    n_examples: int = 8
    label_dim: int = 2
    noise: float = 0.01
    cross_scale_weight: float = 1.0
    precision: str = "f64"

    def build(self):
        """Materialize the fixed (pyramids, labels) dataset.

        Labels: per-scale linear functionals of spatially pooled maps
        plus a product of pooled projections from the two largest
        scales (dropped when the pyramid has a single scale), plus
        bounded gaussian noise.
        """
        rng = np.random.default_rng(self.seed)
        dt = T.DTYPES[self.precision]
        proj = [rng.standard_normal((c, self.label_dim)) for _, _, c in self.shapes]
        u = rng.standard_normal(self.shapes[0][2])
        v = rng.standard_normal(self.shapes[-1][2])
        mix = rng.standard_normal(self.label_dim)

        pyramids, labels = [], []
        for i in range(self.n_examples):
            pyr = gen_pyramid(self.shapes, seed=self.seed + 101 * (i + 1), precision=self.precision)
            pooled = [m.data.reshape(-1, m.shape[2]).mean(axis=0) for m in pyr.maps]
            y = np.zeros(self.label_dim)
            for p, A in zip(pooled, proj):
                y += p @ A
            if len(pooled) > 1 and self.cross_scale_weight:
                y += self.cross_scale_weight * (pooled[0] @ u) * (pooled[-1] @ v) * mix
            y += self.noise * rng.standard_normal(self.label_dim)
            y = np.clip(y, -100.0, 100.0)
            pyramids.append(pyr)
            labels.append(y.astype(dt))
        return pyramids, labels


@dataclass
class TrainRecord:
    step: int
    loss: float
    seconds: float
    seed: int
    diverged: bool = False


class ReadoutModel:
    """Spatial-mean pooling per scale, concat, then a linear readout."""

    def __init__(self, shapes, label_dim, dtype, rng):
        in_dim = sum(c for _, _, c in shapes)
        bound = 1.0 / np.sqrt(in_dim)
        self.w = Tensor(rng.uniform(-bound, bound, (in_dim, label_dim)).astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(label_dim, dtype=dtype), requires_grad=True)

    def params(self):
        return [self.w, self.b]

    @staticmethod
    def pool(pyramid: FeaturePyramid) -> Tensor:
        pooled = []
        for m in pyramid.maps:
            h, w, c = m.shape
            flat = T.reshape(m, (h * w, c))
            mean_row = Tensor(np.full((1, h * w), 1.0 / (h * w), dtype=m.dtype))
            pooled.append(T.matmul(mean_row, flat))
        return pooled[0] if len(pooled) == 1 else T.concat(pooled, axis=1)

    def predict(self, pyramid: FeaturePyramid) -> Tensor:
        return T.add_rowvec(T.matmul(self.pool(pyramid), self.w), self.b)


class BaselineModel(ReadoutModel):
    """Identity passthrough: the readout sees the raw pyramid."""

    def forward(self, pyramid: FeaturePyramid) -> Tensor:
        return self.predict(pyramid)


class CfsamModel(ReadoutModel):
    """The attention module ahead of the same pooled linear readout."""

    def __init__(self, shapes, label_dim, config: CfsamConfig, rng, seed):
        super().__init__(shapes, label_dim, config.dtype, rng)
        self.config = config
        self.weights: CfsamWeights = init_weights(config, [c for _, _, c in shapes], seed=seed)

    def params(self):
        return [t for _, t in self.weights.named_tensors()] + [self.w, self.b]

    def forward(self, pyramid: FeaturePyramid) -> Tensor:
        return self.predict(cfsam_forward(pyramid, self.weights, self.config))


def make_model(kind: str, task: SyntheticTask, seed: int, config: CfsamConfig | None = None):
    rng = np.random.default_rng(seed)
    dt = T.DTYPES[task.precision]
    if kind == "baseline":
        return BaselineModel(task.shapes, task.label_dim, dt, rng)
    if kind == "cfsam":
        if config is None:
            config = CfsamConfig(channels=8, part=2, num_heads=2, transformer_layers=1,
                                 precision=task.precision)
        return CfsamModel(task.shapes, task.label_dim, config, rng, seed=seed + 1)
    raise ValueError(f"unknown model kind {kind!r}")


def mse_loss(model, pyramids, labels) -> Tensor:
    total = None
    for pyr, y in zip(pyramids, labels):
        pred = model.forward(pyr)
        diff = T.add(pred, Tensor(-y.reshape(1, -1)))
        sq = T.sum_all(T.mul(diff, diff))
        total = sq if total is None else T.add(total, sq)
    scale = 1.0 / (len(pyramids) * labels[0].size)
    return T.mul(total, scale)


def toy_train(model_kind: str, task: SyntheticTask, steps: int, lr: float, seed: int,
              config: CfsamConfig | None = None) -> list[TrainRecord]:
    """Full-batch gradient descent; one loss record per step."""
    if steps < 1 or lr < 0:
        raise ValueError("steps must be >= 1 and lr >= 0")
    pyramids, labels = task.build()
    model = make_model(model_kind, task, seed, config)
    params = model.params()
    records: list[TrainRecord] = []
    t0 = time.perf_counter()
    for step in range(steps):
        for p in params:
            p.zero_grad()
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss = mse_loss(model, pyramids, labels)
        except T.NonFiniteError:
            records.append(TrainRecord(step, float("nan"), time.perf_counter() - t0, seed, diverged=True))
            return records
        T.backward(loss)
        val = loss.item()
        if not np.isfinite(val):
            records.append(TrainRecord(step, val, time.perf_counter() - t0, seed, diverged=True))
            return records
        for p in params:
            if p.grad is not None:
                p.data -= lr * p.grad
        records.append(TrainRecord(step, val, time.perf_counter() - t0, seed))
    return records


def records_to_csv(records: list[TrainRecord]) -> str:
    """CSV stream: step, loss, seconds, seed; full round-trip floats."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "seconds", "seed"])
    for r in records:
        w.writerow([r.step, repr(r.loss), repr(r.seconds), r.seed])
    return buf.getvalue()
