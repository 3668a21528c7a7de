"""Finite-difference verification of analytic gradients.

Central differences with configurable step, compared against tape
gradients via max |analytic − numeric| / max(1, |analytic|).
"""

from __future__ import annotations

import numpy as np

from cfsam import tensor as T
from cfsam.module import CfsamConfig, FeaturePyramid, cfsam_forward, init_weights

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4


def numeric_grad(f, param: np.ndarray, h: float = DEFAULT_H) -> np.ndarray:
    """Central-difference gradient of scalar f() w.r.t. param, in place."""
    g = np.zeros_like(param)
    flat = param.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_tensor_op(build_loss, params, h: float = DEFAULT_H) -> float:
    """Gradcheck arbitrary op compositions.

    ``build_loss()`` must rebuild the graph from ``params`` (list of
    Tensors with requires_grad) and return the scalar loss Tensor.
    Returns the worst relative error over all parameters.
    """
    for p in params:
        p.zero_grad()
    loss = build_loss()
    T.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_grad(lambda: build_loss().item(), p.data, h)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def toy_gradcheck_shapes() -> list[tuple[int, int, int]]:
    return [(4, 4, 6), (2, 2, 6)]


def toy_gradcheck_config(**overrides) -> CfsamConfig:
    base = dict(channels=4, part=2, num_heads=1, transformer_layers=1,
                ffn_ratio=2.0, precision="f64")
    base.update(overrides)
    return CfsamConfig(**base)


def gradcheck_cfsam(config: CfsamConfig, shapes, seed: int,
                    h: float = DEFAULT_H, corrupt_group: str | None = None) -> dict[str, float]:
    """End-to-end check of d(sum of outputs)/d(weights), per weight group.

    ``corrupt_group`` is a test hook: the analytic gradient of that
    group is perturbed before comparison, so the check must flag it.
    """
    rng = np.random.default_rng(seed)
    dt = config.dtype
    pyramid = FeaturePyramid(
        [T.Tensor(rng.standard_normal(s).astype(dt)) for s in shapes]
    )
    weights = init_weights(config, [s[2] for s in shapes], seed=seed + 1)

    def loss_tensor():
        out = cfsam_forward(pyramid, weights, config)
        total = T.sum_all(out.maps[0])
        for m in out.maps[1:]:
            total = T.add(total, T.sum_all(m))
        return total

    for _, t in weights.named_tensors():
        t.zero_grad()
    T.backward(loss_tensor())

    results = {}
    for name, t in weights.named_tensors():
        analytic = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        if corrupt_group is not None and name.startswith(corrupt_group):
            analytic = analytic + 1.0
        numeric = numeric_grad(lambda: loss_tensor().item(), t.data, h)
        results[name] = rel_error(analytic, numeric)
    return results
