"""Central finite-difference check of the regressor's analytic gradients.

The loss is re-evaluated with the value-only loss functions, so the finite
differences never touch the hand-written backward pass. Relative error is
``|a - n| / max(|a|, |n|, FLOOR)``: below FLOOR the roundoff of a float64
central difference with h = 1e-5 (about 1e-11 absolute for O(1) losses) is
no longer small against the gradient itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from trical.losses import LossWeights, loss_pair, loss_pcd, loss_rotation, loss_translation
from trical.regressor import (
    N_CONV,
    Batch,
    RegressorConfig,
    _lrelu,
    conv_forward,
    heads_forward,
    init_params,
    loss_and_grads,
)
from trical.rng import substream

H = 1e-5
FLOOR = 1e-6
MINI = RegressorConfig(in_channels=9, height=2, width=3, growth=2, kernel=3, fc_width=6, head_width=4)


@dataclass(frozen=True)
class GradCheckResult:
    seed: int
    max_rel_err: float
    worst: str  # "name[index]"
    n_params: int


def mini_problem(seed: int, cfg: RegressorConfig = MINI, batch: int = 3, n_points: int = 16):
    rng = substream(seed, 0xC0DE)
    params = init_params(cfg, rng, out_scale=1.0)
    for k in params:
        params[k] = params[k] + rng.normal(0.0, 0.1, params[k].shape)
    cv = rng.normal(size=(batch, cfg.in_channels, cfg.height, cfg.width))
    t = rng.normal(0.0, 1.0, (batch, 3))
    q = rng.normal(size=(batch, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    clouds = rng.normal(0.0, 3.0, (batch, n_points, 3))
    return params, Batch(cv, t, q, clouds)


def _loss_from_latent(latent, params, cfg, b: Batch, weights: LossWeights) -> float:
    t_hat, q_raw = heads_forward(latent, params, cfg)
    q_hat = q_raw / np.linalg.norm(q_raw, axis=1, keepdims=True)
    lt = loss_translation(t_hat, b.t)
    lr = loss_rotation(q_hat, b.q)
    lp = loss_pcd((q_hat, t_hat), (b.q, b.t), b.clouds)
    return loss_pair(lt, lr, lp, weights).l_pair


def _dense_inputs(cv, params, cfg) -> list[np.ndarray]:
    """Input of every conv layer followed by the flattened latent."""
    xs = [cv]
    for i in range(N_CONV):
        pre, _ = conv_forward(xs[-1], params[f"conv{i}.w"], params[f"conv{i}.b"])
        xs.append(np.concatenate([xs[-1], _lrelu(pre, cfg.slope)], axis=1))
    return xs


def _latent_from(x, start: int, params, cfg) -> np.ndarray:
    for i in range(start, N_CONV):
        pre, _ = conv_forward(x, params[f"conv{i}.w"], params[f"conv{i}.b"])
        x = np.concatenate([x, _lrelu(pre, cfg.slope)], axis=1)
    return x.reshape(x.shape[0], -1)


def numeric_grads(params: dict, cfg: RegressorConfig, b: Batch, weights: LossWeights, h: float = H) -> dict:
    # layers before the perturbed one are unaffected, so restart from their output
    xs = _dense_inputs(b.cv, params, cfg)
    latent = xs[-1].reshape(xs[-1].shape[0], -1)
    out = {}
    for name, arr in params.items():
        flat = arr.reshape(-1)
        g = np.empty(flat.size)
        layer = int(name[4]) if name.startswith("conv") else None
        for i in range(flat.size):
            orig = flat[i]
            vals = []
            for x in (orig + h, orig - h):
                flat[i] = x
                lat = latent if layer is None else _latent_from(xs[layer], layer, params, cfg)
                vals.append(_loss_from_latent(lat, params, cfg, b, weights))
            flat[i] = orig
            g[i] = (vals[0] - vals[1]) / (2 * h)
        out[name] = g.reshape(arr.shape)
    return out


def relative_error(a: np.ndarray, n: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_seed(seed: int, weights: LossWeights = LossWeights(1.0, 1.0, 0.5), cfg: RegressorConfig = MINI) -> GradCheckResult:
    params, b = mini_problem(seed, cfg)
    _, analytic = loss_and_grads(b, params, cfg, weights)
    numeric = numeric_grads(params, cfg, b, weights)
    worst, where = -1.0, ""
    for name in params:
        err = relative_error(analytic[name], numeric[name]).reshape(-1)
        i = int(np.argmax(err))
        if err[i] > worst:
            worst, where = float(err[i]), f"{name}[{i}]"
    return GradCheckResult(seed, worst, where, sum(v.size for v in params.values()))
