"""Context module and split pose heads with a hand-written backward pass.

Topology per modality pair:

    cost volume (M, H, W)
      -> 5 x [conv k x k, LeakyReLU], each output concatenated onto the running tensor
      -> flatten -> shared FC + LeakyReLU
      -> translation head: FC, LeakyReLU, FC -> t (3)
      -> rotation head:    FC, LeakyReLU, FC -> q (4), normalized
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from trical.losses import PAIRS, LossWeights, PairLossBreakdown, mean_breakdown, pair_loss_and_grad

log = logging.getLogger(__name__)

N_CONV = 5


class RegressorError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, stage: Optional[int] = None):
        self.epoch = epoch
        self.stage = stage
        where = f"stage {stage}, " if stage is not None else ""
        super().__init__(f"NaN loss at {where}epoch {epoch}")


@dataclass(frozen=True)
class RegressorConfig:
    in_channels: int = 81
    height: int = 16
    width: int = 32
    growth: int = 8
    kernel: int = 3
    fc_width: int = 128
    head_width: int = 64
    slope: float = 0.1

    @property
    def latent_size(self) -> int:
        return (self.in_channels + N_CONV * self.growth) * self.height * self.width


def param_shapes(cfg: RegressorConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    c = cfg.in_channels
    for i in range(N_CONV):
        shapes[f"conv{i}.w"] = (cfg.growth, c, cfg.kernel, cfg.kernel)
        shapes[f"conv{i}.b"] = (cfg.growth,)
        c += cfg.growth
    shapes["fc.w"] = (cfg.fc_width, cfg.latent_size)
    shapes["fc.b"] = (cfg.fc_width,)
    for head, out in (("trans", 3), ("rot", 4)):
        shapes[f"{head}1.w"] = (cfg.head_width, cfg.fc_width)
        shapes[f"{head}1.b"] = (cfg.head_width,)
        shapes[f"{head}2.w"] = (out, cfg.head_width)
        shapes[f"{head}2.b"] = (out,)
    return shapes


def init_params(cfg: RegressorConfig, rng: np.random.Generator, out_scale: float = 0.01) -> dict[str, np.ndarray]:
    """He-style init; the output layers start near zero so the first prediction
    is close to the identity (rotation bias is (1, 0, 0, 0))."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        std = math.sqrt(2.0 / fan_in)
        if name in ("trans2.w", "rot2.w"):
            std *= out_scale
        params[name] = rng.normal(0.0, std, shape)
    params["rot2.b"] = np.array([1.0, 0.0, 0.0, 0.0])
    return params


def check_params(params: dict, cfg: RegressorConfig) -> None:
    for name, shape in param_shapes(cfg).items():
        if name not in params:
            raise RegressorError(f"missing parameter {name}")
        if params[name].shape != shape:
            raise RegressorError(f"{name}: shape {params[name].shape} != expected {shape}")


def _lrelu(x, slope):
    return np.where(x >= 0, x, slope * x)


def _lrelu_grad(pre, g, slope):
    return np.where(pre >= 0, g, slope * g)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    b, c, h, w = x.shape
    p = k // 2
    xp = np.zeros((b, c, h + 2 * p, w + 2 * p))
    xp[:, :, p : p + h, p : p + w] = x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (B, C, H, W, k, k)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * h * w, c * k * k)


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Stride-1 'same' convolution (cross-correlation) of (B, C, H, W) input."""
    bsz, c, h, wd = x.shape
    if w.shape[1] != c:
        raise RegressorError(f"conv expects {w.shape[1]} input channels, got {c}")
    cols = _im2col(x, w.shape[-1])
    y = cols @ w.reshape(w.shape[0], -1).T + b
    return y.reshape(bsz, h, wd, -1).transpose(0, 3, 1, 2), cols


def conv_backward(g: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape):
    bsz, c, h, wd = x_shape
    k = w.shape[-1]
    p = k // 2
    gr = g.transpose(0, 2, 3, 1).reshape(-1, w.shape[0])
    gw = (gr.T @ cols).reshape(w.shape)
    gb = gr.sum(axis=0)
    # (B, H, W, k, k, C) so each tap is a contiguous channels-last block
    wt = w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)
    gcols = (gr @ wt).reshape(bsz, h, wd, k, k, c)
    gxp = np.zeros((bsz, h + 2 * p, wd + 2 * p, c))
    for i in range(k):
        for j in range(k):
            gxp[:, i : i + h, j : j + wd] += gcols[:, :, :, i, j]
    return gxp[:, p : p + h, p : p + wd].transpose(0, 3, 1, 2), gw, gb


def _as_batch(cv: np.ndarray) -> np.ndarray:
    cv = np.asarray(cv, dtype=np.float64)
    return cv[None] if cv.ndim == 3 else cv


def context_forward(cv: np.ndarray, params: dict, cfg: RegressorConfig, cache: Optional[dict] = None) -> np.ndarray:
    """Latent vector(s) from cost volume(s): (M, H, W) -> (D,), or batched."""
    single = np.ndim(cv) == 3
    x = _as_batch(cv)
    if x.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
        raise RegressorError(f"cost volume shape {x.shape[1:]} does not match the regressor")
    layers = []
    for i in range(N_CONV):
        pre, cols = conv_forward(x, params[f"conv{i}.w"], params[f"conv{i}.b"])
        layers.append((pre, cols, x.shape))
        x = np.concatenate([x, _lrelu(pre, cfg.slope)], axis=1)
    latent = x.reshape(x.shape[0], -1)
    if cache is not None:
        cache["conv"] = layers
        cache["latent"] = latent
    return latent[0] if single else latent


def _dense(x, params, name):
    return x @ params[f"{name}.w"].T + params[f"{name}.b"]


def heads_forward(latent: np.ndarray, params: dict, cfg: RegressorConfig, cache: Optional[dict] = None):
    """Raw translation (B, 3) and pre-normalization rotation (B, 4) outputs."""
    latent = np.atleast_2d(latent)
    if latent.shape[1] != params["fc.w"].shape[1]:
        raise RegressorError(f"latent length {latent.shape[1]} does not match the regressor")
    h_pre = _dense(latent, params, "fc")
    h = _lrelu(h_pre, cfg.slope)
    t1 = _dense(h, params, "trans1")
    r1 = _dense(h, params, "rot1")
    t = _dense(_lrelu(t1, cfg.slope), params, "trans2")
    q_raw = _dense(_lrelu(r1, cfg.slope), params, "rot2")
    if cache is not None:
        cache.update(h_pre=h_pre, h=h, t1=t1, r1=r1, latent=latent)
    return t, q_raw


def normalize_rotation(q_raw: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    if np.any(n < 1e-8):
        raise RegressorError("degenerate head output")
    return q_raw / n


def predict_pose(latent: np.ndarray, params: dict, cfg: RegressorConfig):
    """(t_hat, q_hat) for one latent vector (or a batch)."""
    single = np.ndim(latent) == 1
    t, q_raw = heads_forward(latent, params, cfg)
    q = normalize_rotation(q_raw)
    return (t[0], q[0]) if single else (t, q)


def forward(cv: np.ndarray, params: dict, cfg: RegressorConfig, cache: Optional[dict] = None):
    latent = context_forward(_as_batch(cv), params, cfg, cache)
    t, q_raw = heads_forward(latent, params, cfg, cache)
    normalize_rotation(q_raw)
    return t, q_raw


def backward(cache: dict, g_t: np.ndarray, g_qraw: np.ndarray, params: dict, cfg: RegressorConfig) -> dict:
    """Gradients of a scalar loss for every parameter given d loss / d outputs."""
    s = cfg.slope
    grads = {}
    g_h = np.zeros_like(cache["h"])
    for head, g_out, pre in (("trans", g_t, cache["t1"]), ("rot", g_qraw, cache["r1"])):
        a = _lrelu(pre, s)
        grads[f"{head}2.w"] = g_out.T @ a
        grads[f"{head}2.b"] = g_out.sum(axis=0)
        g_pre = _lrelu_grad(pre, g_out @ params[f"{head}2.w"], s)
        grads[f"{head}1.w"] = g_pre.T @ cache["h"]
        grads[f"{head}1.b"] = g_pre.sum(axis=0)
        g_h += g_pre @ params[f"{head}1.w"]
    g_hpre = _lrelu_grad(cache["h_pre"], g_h, s)
    grads["fc.w"] = g_hpre.T @ cache["latent"]
    grads["fc.b"] = g_hpre.sum(axis=0)
    if "conv" not in cache:
        return grads
    g_x = (g_hpre @ params["fc.w"]).reshape(g_hpre.shape[0], -1, cfg.height, cfg.width)
    for i in reversed(range(N_CONV)):
        pre, cols, x_shape = cache["conv"][i]
        c_in = x_shape[1]
        g_pre = _lrelu_grad(pre, g_x[:, c_in:], s)
        g_in, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = conv_backward(g_pre, cols, params[f"conv{i}.w"], x_shape)
        g_x = g_x[:, :c_in] + g_in
    return {name: grads[name] for name in params}


@dataclass
class Batch:
    """Supervision for one modality pair: cost volumes, target correction, clouds."""

    cv: np.ndarray  # (B, M, H, W)
    t: np.ndarray  # (B, 3)
    q: np.ndarray  # (B, 4)
    clouds: np.ndarray  # (B, N, 3) in the miscalibrated camera frame


def loss_and_grads(batch: Batch, params: dict, cfg: RegressorConfig, weights: LossWeights):
    cache: dict = {}
    t_hat, q_raw = forward(batch.cv, params, cfg, cache)
    breakdown, g_t, g_q = pair_loss_and_grad(t_hat, q_raw, batch.t, batch.q, batch.clouds, weights)
    return breakdown, backward(cache, g_t, g_q, params, cfg)


# --- training ----------------------------------------------------------------


@dataclass
class TrainingConfig:
    batch_size: int = 8
    lr: float = 1e-3
    milestones: tuple[int, ...] = ()
    gamma: float = 0.5
    epochs: int = 10
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    optimizer: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise RegressorError("batch size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise RegressorError(f"unknown optimizer {self.optimizer!r}")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.gamma ** sum(1 for m in self.milestones if epoch >= m)


class Optimizer:
    """Plain gradient descent, or Adam, over a dict of parameter arrays."""

    def __init__(self, cfg: TrainingConfig, params: dict):
        self.cfg = cfg
        self.step_count = 0
        if cfg.optimizer == "adam":
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.step_count += 1
        if self.cfg.optimizer == "sgd":
            for k, g in grads.items():
                params[k] -= lr * g
            return
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        c1 = 1 - b1**self.step_count
        c2 = 1 - b2**self.step_count
        for k, g in grads.items():
            self.m[k] *= b1
            self.m[k] += (1 - b1) * g
            self.v[k] *= b2
            self.v[k] += (1 - b2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.cfg.eps)


@dataclass
class StageResult:
    params: dict  # pair -> parameter dict
    curve: list  # per epoch: {pair: PairLossBreakdown}
    warnings: list


def train_stage(
    epoch_batches: Callable[[int], Iterable[dict]],
    cfg: TrainingConfig,
    rcfg: RegressorConfig,
    params_init: dict,
    stage: Optional[int] = None,
) -> StageResult:
    """Train one regressor per pair on the batches yielded for each epoch.

    ``epoch_batches(epoch)`` yields dicts mapping pair id to :class:`Batch`.
    Pairs are independent (no shared parameters), so minimizing the summed
    loss is the same as stepping each pair on its own loss.
    """
    params = {p: {k: v.copy() for k, v in prm.items()} for p, prm in params_init.items()}
    opts = {p: Optimizer(cfg, params[p]) for p in params}
    curve = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        seen: dict = {p: [] for p in params}
        for batches in epoch_batches(epoch):
            for pair, batch in batches.items():
                breakdown, grads = loss_and_grads(batch, params[pair], rcfg, cfg.weights)
                if not np.isfinite(breakdown.l_pair) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise TrainingDiverged(epoch, stage)
                seen[pair].append(breakdown)
                if lr != 0.0:
                    opts[pair].step(params[pair], grads, lr)
        curve.append({p: mean_breakdown(v, cfg.weights, p) for p, v in seen.items() if v})
        log.info(
            "stage %s epoch %d lr %.3g loss %s",
            stage,
            epoch,
            lr,
            " ".join(f"{p}={b.l_pair:.4f}" for p, b in curve[-1].items()),
        )
    return StageResult(params, curve, window_warnings(curve))


def window_warnings(curve: list, window: int = 10) -> list[str]:
    """Flag 10-epoch windows whose total loss ends above where it started."""
    totals = [sum(b.l_pair for b in e.values()) for e in curve]
    out = []
    for start in range(0, len(totals) - window + 1):
        if totals[start + window - 1] > totals[start]:
            out.append(f"loss rose over epochs {start}-{start + window - 1}")
    return out


# --- checkpoints -------------------------------------------------------------

MAGIC = "TRICAL-CHECKPOINT 1"


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Text manifest (names and shapes) followed by little-endian float64 data."""
    lines = [MAGIC]
    for k, v in (meta or {}).items():
        lines.append(f"meta {k} {v}")
    for name, arr in tensors.items():
        lines.append(" ".join(["tensor", name] + [str(s) for s in arr.shape]))
    lines.append("end")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for arr in tensors.values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    data = Path(path).read_bytes()
    end = data.find(b"\nend\n")
    if not data.startswith(MAGIC.encode()) or end < 0:
        raise RegressorError(f"{path}: not a checkpoint file")
    header = data[:end].decode("ascii").splitlines()[1:]
    offset = end + len(b"\nend\n")
    tensors, meta = {}, {}
    for line in header:
        parts = line.split()
        if parts[0] == "meta":
            meta[parts[1]] = " ".join(parts[2:])
            continue
        shape = tuple(int(s) for s in parts[2:])
        n = int(np.prod(shape)) if shape else 1
        if offset + 8 * n > len(data):
            raise RegressorError(f"{path}: truncated tensor {parts[1]} at byte {offset}")
        tensors[parts[1]] = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape).copy()
        offset += 8 * n
    return tensors, meta


def save_stage(path, stage_params: dict, rcfg: RegressorConfig) -> None:
    flat = {f"{pair}.{k}": v for pair in PAIRS if pair in stage_params for k, v in stage_params[pair].items()}
    meta = {f: getattr(rcfg, f) for f in RegressorConfig.__dataclass_fields__}
    save_checkpoint(path, flat, meta)


def load_stage(path) -> tuple[dict, RegressorConfig]:
    flat, meta = load_checkpoint(path)
    kw = {}
    for f, fld in RegressorConfig.__dataclass_fields__.items():
        if f in meta:
            kw[f] = float(meta[f]) if fld.type in (float, "float") else int(meta[f])
    rcfg = RegressorConfig(**kw)
    out: dict = {}
    for name, arr in flat.items():
        pair, key = name.split(".", 1)
        out.setdefault(pair, {})[key] = arr
    for prm in out.values():
        check_params(prm, rcfg)
    return out, rcfg
