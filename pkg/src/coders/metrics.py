"""Evaluation metrics: oriented 3D IoU, pose errors, threshold precision and Chamfer distance."""
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

IOU_THRESHOLDS = (0.25, 0.50, 0.75)
POSE_THRESHOLDS = ((5, 2), (5, 5), (10, 5), (10, 10))   # (degrees, centimetres)
REPORT_KEYS = ("iou25", "iou50", "iou75", "deg5cm2", "deg5cm5", "deg10cm5", "deg10cm10", "chamfer_x100")


@dataclass
class OrientedBox:
    t: np.ndarray
    s: np.ndarray          # full extents along the box axes
    R: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.s = np.asarray(self.s, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        if np.any(self.s <= 0):
            raise ValueError(f"box extents must be positive, got {self.s}")
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-6) or np.linalg.det(self.R) < 0:
            raise ValueError("box rotation is not in SO(3)")

    @property
    def volume(self):
        return float(np.prod(self.s))

    def corners(self):
        signs = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
        return self.t + (signs * self.s / 2) @ self.R.T

    def faces(self):
        """Six quads with vertices in cyclic order."""
        c = self.corners()
        idx = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
        return [[c[i] for i in quad] for quad in idx]

    def planes(self):
        """Outward half-spaces n.x <= d."""
        out = []
        for k in range(3):
            for sign in (-1.0, 1.0):
                n = sign * self.R[:, k]
                out.append((n, float(n @ self.t + self.s[k] / 2)))
        return out

    def contains(self, pts):
        local = (np.asarray(pts) - self.t) @ self.R
        return np.all(np.abs(local) <= self.s / 2, axis=-1)


def _clip_polygon(poly, n, d, eps):
    out, on_plane = [], []
    m = len(poly)
    for i in range(m):
        cur, nxt = poly[i], poly[(i + 1) % m]
        dc, dn = n @ cur - d, n @ nxt - d
        if dc <= eps:
            out.append(cur)
            if dc >= -eps:
                on_plane.append(cur)
        if (dc < -eps and dn > eps) or (dc > eps and dn < -eps):
            p = cur + (nxt - cur) * (dc / (dc - dn))
            out.append(p)
            on_plane.append(p)
    return out, on_plane


def _order_cap(points, n, eps):
    pts = []
    for p in points:
        if all(np.linalg.norm(p - q) > eps for q in pts):
            pts.append(p)
    if len(pts) < 3:
        return None
    pts = np.array(pts)
    c = pts.mean(axis=0)
    u = pts[0] - c
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    ang = np.arctan2((pts - c) @ v, (pts - c) @ u)
    return list(pts[np.argsort(ang)])


def clip_polytope(faces, planes, eps=1e-10):
    """Clip a convex polytope (list of planar polygons) by half-spaces n.x <= d."""
    for n, d in planes:
        new_faces, cut = [], []
        coplanar = False
        for poly in faces:
            out, on_plane = _clip_polygon(poly, n, d, eps)
            cut.extend(on_plane)
            if len(out) >= 3:
                new_faces.append(out)
                # a face already lying in the plane is the cap
                coplanar |= len(on_plane) == len(poly) == len(out)
        cap = None if coplanar else _order_cap(cut, n, eps)
        if cap is not None:
            new_faces.append(cap)
        faces = new_faces
        if not faces:
            break
    return faces


def polytope_volume(faces):
    if not faces:
        return 0.0
    c = np.mean(np.concatenate([np.asarray(f) for f in faces]), axis=0)
    vol = 0.0
    for f in faces:
        f = np.asarray(f) - c
        for i in range(1, len(f) - 1):
            vol += abs(np.linalg.det(np.stack([f[0], f[i], f[i + 1]]))) / 6.0
    return vol


def box_iou_3d(a, b):
    inter = polytope_volume(clip_polytope(a.faces(), b.planes()))
    union = a.volume + b.volume - inter
    return float(np.clip(inter / union, 0.0, 1.0)) if union > 0 else 0.0


def box_iou_monte_carlo(a, b, n=2_000_000, rng=None):
    """Sampling estimate of the IoU: uniform points in ``a``, fraction also inside ``b``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    M = b.R.T @ a.R                     # a-local -> b-local
    off = b.R.T @ (a.t - b.t)
    half_b = b.s / 2
    hits = 0
    for start in range(0, n, 500_000):
        m = min(500_000, n - start)
        p = (rng.random((m, 3), dtype=np.float32) - 0.5) * a.s.astype(np.float32)
        q = p @ M.T.astype(np.float32) + off.astype(np.float32)
        hits += np.count_nonzero(np.all(np.abs(q) <= half_b.astype(np.float32), axis=1))
    inter = a.volume * hits / n
    union = a.volume + b.volume - inter
    return inter / union if union > 0 else 0.0


def rotation_error(R_pred, R_gt, symmetry=None):
    """Geodesic angle in degrees; ``symmetry=k`` ignores rotation about body axis k."""
    R_pred = np.asarray(R_pred, dtype=np.float64)
    R_gt = np.asarray(R_gt, dtype=np.float64)
    if symmetry is None or symmetry == "none":
        cos = (np.trace(R_gt.T @ R_pred) - 1.0) / 2.0
    else:
        k = {"x": 0, "y": 1, "z": 2}.get(symmetry, symmetry)
        cos = float(R_pred[:, k] @ R_gt[:, k])
    return math.degrees(math.acos(float(np.clip(cos, -1.0, 1.0))))


def translation_error(t_pred, t_gt):
    return float(np.linalg.norm(np.asarray(t_pred, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)) * 100.0)


@dataclass
class Detection:
    box: OrientedBox
    label: int
    confidence: float = 1.0


@dataclass
class MetricsReport:
    overall: dict = field(default_factory=dict)
    per_category: dict = field(default_factory=dict)
    n_gt: int = 0
    n_pred: int = 0
    undefined: bool = False

    def to_dict(self):
        def clean(d):
            return {k: (clean(v) if isinstance(v, dict) else
                        None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}
        return {"overall": clean(self.overall), "per_category": clean(self.per_category),
                "n_gt": self.n_gt, "n_pred": self.n_pred, "undefined": self.undefined}

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=False)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _key_iou(th):
    return f"iou{int(round(th * 100))}"


def _key_pose(deg, cm):
    return f"deg{deg:g}cm{cm:g}"


def match_greedy(preds, gts):
    """Confidence-ordered one-to-one matching to same-class GT of maximum IoU (> 0).

    Returns a list of (pred_index, gt_index, iou).
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i].confidence)
    taken = set()
    pairs = []
    for i in order:
        best, best_iou = None, 0.0
        for j, g in enumerate(gts):
            if j in taken or g.label != preds[i].label:
                continue
            iou = box_iou_3d(preds[i].box, g.box)
            if iou > best_iou:
                best, best_iou = j, iou
        if best is not None:
            taken.add(best)
            pairs.append((i, best, best_iou))
    return pairs


def _tally(records, n_gt, iou_thresholds, pose_thresholds):
    out = {}
    for th in iou_thresholds:
        hit = sum(1 for r in records if r["iou"] >= th)
        out[_key_iou(th)] = hit / n_gt if n_gt else float("nan")
    for deg, cm in pose_thresholds:
        hit = sum(1 for r in records if r["rot"] <= deg and r["trans"] <= cm)
        out[_key_pose(deg, cm)] = hit / n_gt if n_gt else float("nan")
    return out


def precision_at(predictions, ground_truth, iou_thresholds=IOU_THRESHOLDS, pose_thresholds=POSE_THRESHOLDS,
                 symmetry=None, class_names=None):
    """Threshold precision over scenes.

    ``predictions`` and ``ground_truth`` are per-scene lists of
    :class:`Detection`. ``symmetry`` maps class label to a symmetry axis
    (or None). Values are fractions of the ground-truth count.
    """
    symmetry = symmetry or {}
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground truth cover different scene counts")
    records = []
    gt_labels = []
    n_pred = 0
    for preds, gts in zip(predictions, ground_truth):
        n_pred += len(preds)
        gt_labels.extend(g.label for g in gts)
        for i, j, iou in match_greedy(preds, gts):
            p, g = preds[i], gts[j]
            records.append({"label": g.label, "iou": iou,
                            "rot": rotation_error(p.box.R, g.box.R, symmetry.get(g.label)),
                            "trans": translation_error(p.box.t, g.box.t)})
    n_gt = len(gt_labels)
    report = MetricsReport(n_gt=n_gt, n_pred=n_pred, undefined=n_gt == 0)
    report.overall = _tally(records, n_gt, iou_thresholds, pose_thresholds)
    for label in sorted(set(gt_labels)):
        name = class_names[label] if class_names else str(label)
        cnt = gt_labels.count(label)
        report.per_category[name] = _tally([r for r in records if r["label"] == label], cnt,
                                           iou_thresholds, pose_thresholds)
        report.per_category[name]["n_gt"] = cnt
    return report


def chamfer(A, B):
    """Sum of the two directed mean-of-min squared distances."""
    A = np.asarray(A, dtype=np.float64).reshape(-1, 3)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 3)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    d_ab, _ = cKDTree(B).query(A)
    d_ba, _ = cKDTree(A).query(B)
    return float(np.mean(d_ab ** 2) + np.mean(d_ba ** 2))


def chamfer_x100(A, B):
    return 100.0 * chamfer(A, B)


def chamfer_naive(A, B, chunk=2048):
    """O(NM) reference used to cross-check the tree-based version."""
    A = np.asarray(A, dtype=np.float64).reshape(-1, 3)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 3)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    min_ab = np.empty(len(A))
    min_ba = np.full(len(B), np.inf)
    for i in range(0, len(A), chunk):
        d = ((A[i:i + chunk, None, :] - B[None]) ** 2).sum(-1)
        min_ab[i:i + chunk] = d.min(1)
        min_ba = np.minimum(min_ba, d.min(0))
    return float(min_ab.mean() + min_ba.mean())
