"""Pinhole stereo rig, frustum lattices and lifting of pixel/depth samples to world space."""
import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import ConfigurationError


class MatrixError(ValueError):
    pass


def _check_rotation(R, tol=1e-9):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ConfigurationError(f"rotation must be 3x3, got {R.shape}")
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ConfigurationError("rotation is not orthonormal with det +1")
    return R


def intrinsic_matrix(fx, fy, cx, cy):
    """4x4 homogeneous intrinsics acting on (u*d, v*d, d, 1)."""
    K = np.eye(4)
    K[0, 0], K[1, 1], K[0, 2], K[1, 2] = fx, fy, cx, cy
    return K


@dataclass
class CameraRig:
    """Two-view rig. Extrinsics map camera coordinates to world coordinates.

    The world frame is the left camera frame, so the left view carries the
    identity transform and the right view sits ``baseline`` metres along +x.
    """

    K: np.ndarray
    R: list = field(default_factory=lambda: [np.eye(3), np.eye(3)])
    T: list = field(default_factory=lambda: [np.zeros(3), np.zeros(3)])
    baseline: float = 0.0
    image_size: tuple = (64, 96)

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        if self.K.shape != (4, 4):
            raise ConfigurationError("K must be 4x4")
        if abs(np.linalg.det(self.K)) < 1e-12:
            raise MatrixError("intrinsic matrix is singular")
        self.R = [_check_rotation(r) for r in self.R]
        self.T = [np.asarray(t, dtype=np.float64).reshape(3) for t in self.T]
        self.image_size = tuple(int(v) for v in self.image_size)

    @classmethod
    def canonical(cls, focal=80.0, baseline=0.1, image_size=(64, 96)):
        H, W = image_size
        K = intrinsic_matrix(focal, focal, W / 2.0, H / 2.0)
        return cls(K=K, R=[np.eye(3), np.eye(3)],
                   T=[np.zeros(3), np.array([baseline, 0.0, 0.0])],
                   baseline=baseline, image_size=image_size)

    @property
    def focal(self):
        return float(self.K[0, 0])

    def extrinsics(self, view):
        return self.R[view], self.T[view]

    def centers(self):
        return [t.copy() for t in self.T]

    def to_dict(self):
        return {"K": self.K.tolist(), "R": [r.tolist() for r in self.R],
                "T": [t.tolist() for t in self.T], "baseline": self.baseline,
                "image_size": list(self.image_size)}

    @classmethod
    def from_dict(cls, d):
        return cls(K=np.array(d["K"]), R=[np.array(r) for r in d["R"]],
                   T=[np.array(t) for t in d["T"]], baseline=float(d["baseline"]),
                   image_size=tuple(d["image_size"]))

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass
class FrustumGrid:
    dims: tuple
    P_c: np.ndarray        # (D, H, W, 4): (u*d, v*d, d, 1)
    depths: np.ndarray     # (D,)
    depth_range: tuple

    def camera_points(self, K):
        """Metric camera-frame points K^-1 P_c, shape (D, H, W, 4)."""
        return self.P_c @ np.linalg.inv(K).T


@dataclass
class WorldPointGrid:
    P_w: np.ndarray                   # (D, H, W, 4)
    normalized: np.ndarray = None     # (D, H, W, 3) in [0, 1]


def depth_bins(D, depth_range, spacing="linear"):
    d_min, d_max = depth_range
    if D < 2:
        raise ConfigurationError("need at least two depth bins")
    if not (d_min > 0 and d_max > d_min):
        raise ValueError(f"invalid depth range {depth_range}")
    if spacing == "linear":
        return np.linspace(d_min, d_max, D)
    if spacing == "inverse":
        return 1.0 / np.linspace(1.0 / d_min, 1.0 / d_max, D)
    raise ConfigurationError(f"unknown depth spacing {spacing!r}")


def frustum_meshgrid(feat_dims, D, depth_range, K, stride=1.0, spacing="linear"):
    """Sample D depths along the ray through every feature-cell centre.

    Cell (i, j) of a feature map with the given ``stride`` (image pixels per
    cell) looks through pixel ((j + 0.5) * stride, (i + 0.5) * stride).
    """
    H, W = feat_dims
    depths = depth_bins(D, depth_range, spacing)
    u = (np.arange(W) + 0.5) * stride
    v = (np.arange(H) + 0.5) * stride
    dd, vv, uu = np.meshgrid(depths, v, u, indexing="ij")
    P_c = np.stack([uu * dd, vv * dd, dd, np.ones_like(dd)], axis=-1)
    return FrustumGrid(dims=(D, H, W), P_c=P_c, depths=depths, depth_range=tuple(depth_range))


def rt_matrix(R, T):
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = T
    return M


def inverse_project(P_c, K, R, T):
    """P_w = [R, T] K^-1 P_c on homogeneous (..., 4) arrays."""
    P_c = np.asarray(P_c, dtype=np.float64)
    if not np.allclose(P_c[..., 3], 1.0):
        raise ValueError("P_c must be homogeneous with w = 1")
    K = np.asarray(K, dtype=np.float64)
    if abs(np.linalg.det(K)) < 1e-12:
        raise MatrixError("intrinsic matrix is singular")
    M = rt_matrix(R, T) @ np.linalg.inv(K)
    return WorldPointGrid(P_w=P_c @ M.T)


def project(points_w, K, R, T):
    """World points (..., 3) to homogeneous pixel/depth samples (u*d, v*d, d, 1)."""
    pts = np.asarray(points_w, dtype=np.float64)
    cam = (pts - T) @ R      # R^T (x - T) row-wise
    hom = np.concatenate([cam, np.ones(cam.shape[:-1] + (1,))], axis=-1)
    return hom @ np.asarray(K).T


def pixel_of(points_w, K, R, T):
    """Pixel coordinates (u, v) and depth of world points."""
    P = project(points_w, K, R, T)
    d = P[..., 2]
    return P[..., 0] / d, P[..., 1] / d, d


def normalize_coords(P_w, scene_bounds):
    """Affine map of each axis of the world bounds into [0, 1], clamped."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in scene_bounds)
    extent = hi - lo
    if np.any(extent <= 0):
        raise ConfigurationError(f"degenerate scene bounds {scene_bounds}")
    xyz = np.asarray(P_w)[..., :3]
    return np.clip((xyz - lo) / extent, 0.0, 1.0)


def frustum_bounds(rig, depth_range):
    """Axis-aligned world box enclosing both views' frusta over ``depth_range``."""
    H, W = rig.image_size
    corners = []
    for view in (0, 1):
        R, T = rig.extrinsics(view)
        for d in depth_range:
            for u in (0.0, W):
                for v in (0.0, H):
                    P = np.array([u * d, v * d, d, 1.0])
                    corners.append(inverse_project(P, rig.K, R, T).P_w[:3])
    corners = np.array(corners)
    return corners.min(axis=0), corners.max(axis=0)


def lift_views(rig, feat_dims, D, depth_range, stride, spacing="linear", bounds=None):
    """Frustum lattice of each view lifted to world space and normalised.

    Returns one WorldPointGrid per view.
    """
    grid = frustum_meshgrid(feat_dims, D, depth_range, rig.K, stride, spacing)
    if bounds is None:
        bounds = frustum_bounds(rig, depth_range)
    out = []
    for view in (0, 1):
        R, T = rig.extrinsics(view)
        wp = inverse_project(grid.P_c, rig.K, R, T)
        wp.normalized = normalize_coords(wp.P_w, bounds)
        out.append(wp)
    return out
