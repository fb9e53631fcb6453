"""Per-query prediction heads, 6D rotation recovery, set matching and training losses."""
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .layers import MLP, Module
from .numerics import Tensor

SHAPE_DIM = 64
LOSS_WEIGHTS = (2.0, 0.06, 0.02)   # (cls, pose, shape)


class DegenerateRotationError(ValueError):
    pass


class CapacityError(ValueError):
    pass


class PredictionHeads(Module):
    """Independent two-layer MLPs for class, pose and shape code.

    The pose head emits 12 numbers per query: location (3), log-size (3)
    and the 6D rotation (6). Location is ``t_offset + t_scale * raw``;
    size is ``exp(raw)``.
    """

    def __init__(self, dim, n_classes, rng, shape_dim=SHAPE_DIM, hidden=None):
        hidden = hidden or dim
        self.cls = MLP([dim, hidden, n_classes + 1], rng)
        self.pose = MLP([dim, hidden, 12], rng)
        self.shape = MLP([dim, hidden, shape_dim], rng)
        self.n_classes = n_classes
        self.t_offset = np.zeros(3)
        self.t_scale = np.ones(3)

    def set_priors(self, t_mean=None, t_scale=None, log_size_mean=None):
        """Start the regression outputs near the data prior (biases only)."""
        if t_mean is not None:
            self.t_offset = np.asarray(t_mean, dtype=np.float64)
        if t_scale is not None:
            self.t_scale = np.asarray(t_scale, dtype=np.float64)
        last = self.pose.layers[-1]
        last.bias.data[:] = 0.0
        if log_size_mean is not None:
            last.bias.data[3:6] = log_size_mean
        last.bias.data[6:12] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]

    def class_head(self, emb):
        return nx.softmax(self.cls(emb), axis=-1)

    def pose_head(self, emb):
        raw = self.pose(emb)
        t = nx.add(nx.mul(nx.index(raw, (..., slice(0, 3))), self.t_scale), self.t_offset)
        s = nx.exp(nx.index(raw, (..., slice(3, 6))))
        r6 = nx.index(raw, (..., slice(6, 12)))
        return t, s, r6

    def shape_head(self, emb):
        return self.shape(emb)

    def __call__(self, emb):
        probs = self.class_head(emb)
        t, s, r6 = self.pose_head(emb)
        return {"probs": probs, "t": t, "s": s, "r6d": r6, "z": self.shape_head(emb)}


def rotation_from_6d(r6d, eps=1e-8):
    """Rotation matrices from 6D vectors [r1 | r2] (last axis 6, NumPy in and out).

    Columns: R1 = normalize(r1), R3 = normalize(R1 x r2), R2 = R3 x R1.
    """
    r6d = np.asarray(r6d, dtype=np.float64)
    r1, r2 = r6d[..., :3], r6d[..., 3:]
    n1 = np.linalg.norm(r1, axis=-1, keepdims=True)
    if np.any(n1 <= eps):
        raise DegenerateRotationError("first 6D column has (near) zero norm")
    c1 = r1 / n1
    x = np.cross(c1, r2)
    nx_ = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(nx_ <= eps * np.maximum(1.0, np.linalg.norm(r2, axis=-1, keepdims=True))):
        raise DegenerateRotationError("6D columns are (near) parallel")
    c3 = x / nx_
    c2 = np.cross(c3, c1)
    return np.stack([c1, c2, c3], axis=-1)


def rotation_from_6d_t(r6d):
    """Differentiable version on Tensors; output (..., 3, 3)."""
    c1 = nx.normalize(nx.index(r6d, (..., slice(0, 3))))
    c3 = nx.normalize(nx.cross(c1, nx.index(r6d, (..., slice(3, 6)))))
    c2 = nx.cross(c3, c1)
    return nx.stack([c1, c2, c3], axis=-1)


def safe_rotation_from_6d(r6d, rng=None, tries=5, scale=1e-6):
    """Training-time recovery: perturb degenerate inputs and retry."""
    rng = rng if rng is not None else np.random.default_rng(0)
    r = np.array(r6d, dtype=np.float64)
    for _ in range(tries):
        try:
            return rotation_from_6d(r)
        except DegenerateRotationError:
            r = r + rng.normal(0.0, scale, size=r.shape)
            scale *= 10
    return rotation_from_6d(r)


def build_cost_matrix(probs, t_pred, s_pred, gt_classes, gt_t, gt_s, weights=LOSS_WEIGHTS):
    """N_gt x N_q matching cost: class term plus L1 location and size terms (NumPy)."""
    lam_cls, lam_pose, _ = weights
    probs = np.asarray(probs)
    if probs.shape[0] < 1:
        raise ValueError("need at least one prediction")
    gt_classes = np.asarray(gt_classes, dtype=int)
    c_cls = 1.0 - probs[:, gt_classes].T
    c_loc = np.abs(np.asarray(gt_t)[:, None, :] - np.asarray(t_pred)[None]).sum(-1)
    c_size = np.abs(np.asarray(gt_s)[:, None, :] - np.asarray(s_pred)[None]).sum(-1)
    return lam_cls * c_cls + lam_pose * c_loc + lam_pose * c_size


@dataclass
class Assignment:
    gt_to_query: np.ndarray   # query index for every GT row
    total_cost: float


def hungarian_match(cost):
    """Minimum-cost injective assignment of rows (GT) to columns (queries).

    Shortest augmenting paths with row/column potentials (Kuhn-Munkres),
    O(n^2 m) for n rows and m >= n columns.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise CapacityError(f"{n} ground-truth objects but only {m} queries")
    if n == 0:
        return Assignment(np.zeros(0, dtype=int), 0.0)
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)      # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(m + 1, dtype=int)
    a = np.zeros((n + 1, m + 1))
    a[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = a[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, INF)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    gt_to_query = np.zeros(n, dtype=int)
    for j in range(1, m + 1):
        if p[j]:
            gt_to_query[p[j] - 1] = j - 1
    total = float(sum(cost[i, gt_to_query[i]] for i in range(n)))
    return Assignment(gt_to_query, total)


def focal_loss(probs, targets, alpha=0.25, gamma=2.0):
    """Mean over queries of -alpha (1 - p_t)^gamma log p_t, with p_t clamped at 1e-12."""
    flat = nx.reshape(probs, (-1, probs.shape[-1]))
    targets = np.asarray(targets, dtype=int).reshape(-1)
    p_t = nx.index(flat, (np.arange(len(targets)), targets))
    logp = nx.log(nx.clamp(p_t, 1e-12, None))
    w = nx.power(nx.sub(1.0, p_t), gamma) if gamma != 0 else 1.0
    return nx.mul(nx.mean(nx.mul(w, logp)), -alpha)


def pose_loss(t_pred, s_pred, R_pred, t_gt, s_gt, R_gt):
    """L1 location + L1 size + mean elementwise L1 between rotation matrices (matched pairs)."""
    loc = nx.mean(nx.tabs(nx.sub(t_pred, t_gt)))
    size = nx.mean(nx.tabs(nx.sub(s_pred, s_gt)))
    rot = nx.mean(nx.tabs(nx.sub(R_pred, R_gt)))
    return nx.add(nx.add(loc, size), rot), (loc, size, rot)


def shape_loss(z_pred, z_gt):
    return nx.mean(nx.tabs(nx.sub(z_pred, z_gt)))


def total_loss(l_cls, l_pose, l_shape, weights=LOSS_WEIGHTS):
    lam_cls, lam_pose, lam_shape = weights
    return nx.add(nx.add(nx.mul(l_cls, lam_cls), nx.mul(l_pose, lam_pose)), nx.mul(l_shape, lam_shape))


def gather_matches(assignments):
    """Flatten per-scene assignments to (scene, query, gt) index arrays."""
    rows_b, rows_q, rows_g = [], [], []
    for b, asg in enumerate(assignments):
        for g, q in enumerate(asg.gt_to_query):
            rows_b.append(b)
            rows_q.append(int(q))
            rows_g.append(g)
    return np.array(rows_b, dtype=int), np.array(rows_q, dtype=int), np.array(rows_g, dtype=int)


def matched_losses(out, targets, weights=LOSS_WEIGHTS, alpha=0.25, gamma=2.0, match_weights=None):
    """Hungarian-matched training loss for a batch.

    ``out`` holds batched head Tensors (B, N_q, ...); ``targets`` is a list
    of per-scene dicts with ``classes, t, s, R, z`` arrays. Returns the total
    Tensor and a dict of float components.
    """
    probs = out["probs"]
    B, Nq, K1 = probs.shape
    no_obj = K1 - 1
    assignments = []
    for b, tg in enumerate(targets):
        if len(tg["classes"]) == 0:
            assignments.append(Assignment(np.zeros(0, dtype=int), 0.0))
            continue
        cost = build_cost_matrix(probs.data[b], out["t"].data[b], out["s"].data[b],
                                 tg["classes"], tg["t"], tg["s"], match_weights or weights)
        assignments.append(hungarian_match(cost))
    cls_targets = np.full((B, Nq), no_obj, dtype=int)
    bi, qi, gi = gather_matches(assignments)
    for b, q, g in zip(bi, qi, gi):
        cls_targets[b, q] = targets[b]["classes"][g]
    l_cls = focal_loss(probs, cls_targets, alpha, gamma)
    if len(bi):
        t_gt = np.stack([targets[b]["t"][g] for b, g in zip(bi, gi)])
        s_gt = np.stack([targets[b]["s"][g] for b, g in zip(bi, gi)])
        R_gt = np.stack([targets[b]["R"][g] for b, g in zip(bi, gi)])
        z_gt = np.stack([targets[b]["z"][g] for b, g in zip(bi, gi)])
        sel = (bi, qi)
        R_pred = rotation_from_6d_t(nx.index(out["r6d"], sel))
        l_pose, parts = pose_loss(nx.index(out["t"], sel), nx.index(out["s"], sel), R_pred,
                                  t_gt, s_gt, R_gt)
        l_shape = shape_loss(nx.index(out["z"], sel), z_gt)
    else:
        l_pose = l_shape = Tensor(0.0)
        parts = (Tensor(0.0),) * 3
    total = total_loss(l_cls, l_pose, l_shape, weights)
    info = {"loss_total": total.item(), "loss_cls": l_cls.item(), "loss_pose": l_pose.item(),
            "loss_shape": l_shape.item(), "loss_loc": parts[0].item(),
            "loss_size": parts[1].item(), "loss_rot": parts[2].item()}
    return total, info, assignments
