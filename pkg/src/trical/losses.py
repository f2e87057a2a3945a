"""Translation, rotation and point-cloud losses with their analytic gradients.

Batched arrays: translations (B, 3) in meters, quaternions (B, 4) scalar-first,
clouds (B, N, 3) or a sequence of (N_i, 3) arrays. Rotation loss is in radians.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from trical.geometry import UNIT_TOL, quat_to_matrix

PAIRS = ("rgb", "ev")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_t: float = 1.0
    lambda_r: float = 1.0
    w: float = 0.5

    def __post_init__(self):
        if self.lambda_t < 0 or self.lambda_r < 0:
            raise LossError("lambda_t and lambda_r must be non-negative")
        if not 0.0 <= self.w <= 1.0:
            raise LossError("w must lie in [0, 1]")


@dataclass(frozen=True)
class PairLossBreakdown:
    l_trans: float
    l_rot: float
    l_pcd: float
    l_pair: float
    pair: Optional[str] = None


def _batch(a, width: int, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None]
    if a.ndim != 2 or a.shape[1] != width:
        raise LossError(f"{name} must have shape (B, {width})")
    if a.shape[0] == 0:
        raise LossError("empty batch")
    return a


def _check_unit(q: np.ndarray) -> None:
    if np.any(np.abs(np.linalg.norm(q, axis=1) - 1.0) > UNIT_TOL):
        raise LossError("rotation loss needs unit quaternions")


def smooth_l1(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def loss_translation(t_hat, t) -> float:
    t_hat, t = _batch(t_hat, 3, "t_hat"), _batch(t, 3, "t")
    if t_hat.shape != t.shape:
        raise LossError("batch sizes differ")
    return float(smooth_l1(t_hat - t).sum(axis=1).mean())


def grad_translation(t_hat, t) -> np.ndarray:
    t_hat, t = _batch(t_hat, 3, "t_hat"), _batch(t, 3, "t")
    return np.clip(t_hat - t, -1.0, 1.0) / t_hat.shape[0]


def loss_rotation(q_hat, q) -> float:
    q_hat, q = _batch(q_hat, 4, "q_hat"), _batch(q, 4, "q")
    if q_hat.shape != q.shape:
        raise LossError("batch sizes differ")
    _check_unit(q_hat)
    _check_unit(q)
    d, e = _half_chords(q_hat, q)
    return float((4.0 * np.arctan2(np.linalg.norm(d, axis=1), np.linalg.norm(e, axis=1))).mean())


def _half_chords(q_hat, q):
    # theta = 2 arccos|<q_hat, q>| = 4 atan2(|q_hat - s q|, |q_hat + s q|) on unit
    # quaternions; the atan2 form keeps full precision and a bounded gradient
    # as theta -> 0, where arccos' derivative blows up
    s = np.where(np.einsum("bi,bi->b", q_hat, q) >= 0, 1.0, -1.0)[:, None]
    return q_hat - s * q, q_hat + s * q


def grad_rotation(q_hat, q) -> np.ndarray:
    """Gradient w.r.t. the unit quaternion ``q_hat``; zero at exact agreement."""
    q_hat, q = _batch(q_hat, 4, "q_hat"), _batch(q, 4, "q")
    d, e = _half_chords(q_hat, q)
    nd = np.linalg.norm(d, axis=1, keepdims=True)
    ne = np.linalg.norm(e, axis=1, keepdims=True)
    ud = np.divide(d, nd, out=np.zeros_like(d), where=nd > 0)
    ue = np.divide(e, ne, out=np.zeros_like(e), where=ne > 0)
    g = 4.0 * (ne * ud - nd * ue) / (nd**2 + ne**2)
    return g / q_hat.shape[0]


def _clouds(pc_batch) -> list[np.ndarray]:
    if isinstance(pc_batch, np.ndarray) and pc_batch.ndim == 3:
        clouds = list(pc_batch)
    else:
        clouds = [np.asarray(getattr(p, "points", p), dtype=np.float64).reshape(-1, 3) for p in pc_batch]
    if not clouds:
        raise LossError("empty batch")
    if any(c.shape[0] == 0 for c in clouds):
        raise LossError("empty cloud")
    return clouds


def _as_rt(transforms):
    """(R, t) batches from a sequence of RigidTransform or a (q, t) pair of arrays."""
    if isinstance(transforms, tuple) and len(transforms) == 2 and isinstance(transforms[0], np.ndarray):
        q, t = transforms
        return quat_to_matrix(_batch(q, 4, "q")), _batch(t, 3, "t")
    r = np.stack([tr.rotation_matrix() for tr in transforms])
    t = np.stack([tr.t for tr in transforms])
    return r, t


def loss_pcd(t_hat, t_true, pc_batch) -> float:
    """Mean over the batch of the mean point displacement between both transforms."""
    clouds = _clouds(pc_batch)
    r_hat, tr_hat = _as_rt(t_hat)
    r, tr = _as_rt(t_true)
    if not (len(clouds) == r_hat.shape[0] == r.shape[0]):
        raise LossError("batch sizes differ")
    per = [
        np.linalg.norm(x @ (r_hat[i] - r[i]).T + (tr_hat[i] - tr[i]), axis=1).mean() for i, x in enumerate(clouds)
    ]
    return float(np.mean(per))


def rotation_jacobian(q: np.ndarray) -> np.ndarray:
    """d R(q) / d q for (B, 4) quaternions; shape (B, 3, 3, 4)."""
    w, x, y, z = q.T
    o = np.zeros_like(w)
    j = np.array(
        [
            [[o, o, -4 * y, -4 * z], [-2 * z, 2 * y, 2 * x, -2 * w], [2 * y, 2 * z, 2 * w, 2 * x]],
            [[2 * z, 2 * y, 2 * x, 2 * w], [o, -4 * x, o, -4 * z], [-2 * x, -2 * w, 2 * z, 2 * y]],
            [[-2 * y, 2 * z, -2 * w, 2 * x], [2 * x, 2 * w, 2 * z, 2 * y], [o, -4 * x, -4 * y, o]],
        ]
    )
    return np.moveaxis(j, -1, 0)


def grad_pcd(q_hat: np.ndarray, t_hat: np.ndarray, q: np.ndarray, t: np.ndarray, clouds: np.ndarray):
    """Gradients of the point-cloud loss w.r.t. unit ``q_hat`` and ``t_hat``.

    ``clouds`` is (B, N, 3). Points with zero displacement contribute nothing.
    """
    b, n, _ = clouds.shape
    r_hat = quat_to_matrix(q_hat)
    r = quat_to_matrix(q)
    e = np.einsum("bij,bnj->bni", r_hat - r, clouds) + (t_hat - t)[:, None, :]
    norm = np.linalg.norm(e, axis=2, keepdims=True)
    u = np.divide(e, norm, out=np.zeros_like(e), where=norm > 0) / (b * n)
    g_t = u.sum(axis=1)
    g_r = np.einsum("bni,bnj->bij", u, clouds)
    g_q = np.einsum("bij,bijk->bk", g_r, rotation_jacobian(q_hat))
    return g_q, g_t


def normalize_backward(raw: np.ndarray, g_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``raw / |raw|`` back to ``raw``."""
    n = np.linalg.norm(raw, axis=1, keepdims=True)
    unit = raw / n
    return (g_unit - unit * np.sum(unit * g_unit, axis=1, keepdims=True)) / n


def loss_pair(l_trans: float, l_rot: float, l_pcd: float, weights: LossWeights = LossWeights(), pair=None):
    if not isinstance(weights, LossWeights):
        weights = LossWeights(*weights)
    total = (1.0 - weights.w) * (weights.lambda_t * l_trans + weights.lambda_r * l_rot) + weights.w * l_pcd
    return PairLossBreakdown(l_trans, l_rot, l_pcd, total, pair)


def loss_total(*pairs: Optional[PairLossBreakdown]) -> float:
    present = [p for p in pairs if p is not None]
    if not present:
        raise LossError("no modality pair present")
    return float(sum(p.l_pair for p in present))


def pair_loss_and_grad(t_hat, q_raw, t, q, clouds, weights: LossWeights = LossWeights()):
    """Pair loss and its gradients w.r.t. the translation output and the
    pre-normalization rotation output."""
    n = np.linalg.norm(q_raw, axis=1, keepdims=True)
    q_hat = q_raw / n
    lt = loss_translation(t_hat, t)
    lr = loss_rotation(q_hat, q)
    lp = loss_pcd((q_hat, t_hat), (q, t), clouds)
    br = loss_pair(lt, lr, lp, weights)
    a = 1.0 - weights.w
    gp_q, gp_t = grad_pcd(q_hat, t_hat, q, t, clouds)
    g_t = a * weights.lambda_t * grad_translation(t_hat, t) + weights.w * gp_t
    g_qhat = a * weights.lambda_r * grad_rotation(q_hat, q) + weights.w * gp_q
    return br, g_t, normalize_backward(q_raw, g_qhat)


LOSS_CSV_HEADER = (
    "epoch,l_trans_rgb,l_rot_rgb,l_pcd_rgb,l_pair_rgb,l_trans_ev,l_rot_ev,l_pcd_ev,l_pair_ev,l_total"
)


def loss_csv_row(epoch: int, rgb: Optional[PairLossBreakdown], ev: Optional[PairLossBreakdown]) -> str:
    vals = [str(epoch)]
    for p in (rgb, ev):
        if p is None:
            vals += ["nan"] * 4
        else:
            vals += [repr(float(v)) for v in (p.l_trans, p.l_rot, p.l_pcd, p.l_pair)]
    vals.append(repr(loss_total(rgb, ev)))
    return ",".join(vals)


def mean_breakdown(items: Sequence[PairLossBreakdown], weights: LossWeights, pair=None) -> PairLossBreakdown:
    lt = float(np.mean([i.l_trans for i in items]))
    lr = float(np.mean([i.l_rot for i in items]))
    lp = float(np.mean([i.l_pcd for i in items]))
    return loss_pair(lt, lr, lp, weights, pair)
