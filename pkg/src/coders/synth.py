"""Synthetic stereo scenes of analytic primitives with exact ground truth.

Objects are ray-cast into both views of a :class:`CameraRig`. Each image has
three channels: category-keyed albedo under a fixed directional light,
normalised hit depth, and the silhouette.
"""
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraRig
from .shape import KINDS, PrimitiveSpec

FORMAT_NAME = "coders-stereo"
FORMAT_VERSION = 1
CHANNELS = ("shade", "depth", "silhouette")
BACKGROUND = (0.05, 1.0, 0.0)
ALBEDO = {"sphere": 0.9, "box": 0.6, "cylinder": 0.35}
LIGHT = np.array([0.4, -0.6, -0.7]) / np.linalg.norm([0.4, -0.6, -0.7])   # direction towards the light
# normalised-unit parameter ranges (everything fits in [-0.9, 0.9]^3)
PARAM_RANGES = {"sphere": [(0.45, 0.9)], "box": [(0.35, 0.9)] * 3, "cylinder": [(0.35, 0.9), (0.35, 0.9)]}
SYMMETRY = {"sphere": "full", "box": None, "cylinder": 1}


class CrowdingError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class SceneConfig:
    categories: tuple = KINDS
    min_objects: int = 1
    max_objects: int = 4
    center_depth: tuple = (0.5, 1.5)
    depth_range: tuple = (0.3, 2.0)
    metric_scale: float = 0.15          # metres per normalised shape unit
    rotation: str = "yaw"               # "yaw" or "so3"
    yaw_range: tuple = (-90.0, 90.0)    # degrees
    max_tries: int = 1000

    def validate(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        lo, hi = self.center_depth
        if not (self.depth_range[0] <= lo < hi <= self.depth_range[1]):
            raise ValueError("object depth range must lie inside the frustum depth range")
        if self.rotation not in ("yaw", "so3"):
            raise ValueError(f"unknown rotation mode {self.rotation!r}")
        if any(c not in KINDS for c in self.categories):
            raise ValueError(f"unknown category in {self.categories}")
        return self


@dataclass
class SceneObject:
    spec: PrimitiveSpec
    category: int
    t: np.ndarray
    R: np.ndarray
    s: np.ndarray           # metric extents (m)
    scale: float            # metres per normalised unit

    @property
    def radius(self):
        return float(np.linalg.norm(self.s) / 2)

    def to_dict(self):
        return {"shape_ref": self.spec.instance_id, "primitive": self.spec.to_dict(),
                "category": int(self.category), "t": [float(v) for v in self.t],
                "R": [float(v) for v in np.asarray(self.R).reshape(-1)],
                "s": [float(v) for v in self.s], "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d):
        return cls(PrimitiveSpec.from_dict(d["primitive"]), int(d["category"]), np.array(d["t"]),
                   np.array(d["R"]).reshape(3, 3), np.array(d["s"]), float(d["scale"]))


@dataclass
class Scene:
    objects: list
    rig: CameraRig
    seed: int
    scene_id: str = ""
    split: str = "train"
    depth_range: tuple = (0.3, 2.0)
    images: np.ndarray = None        # (2, H, W, 3) float32
    depth: np.ndarray = None         # (H, W) left depth, 0 on background
    mask: np.ndarray = None          # (H, W) uint16, instance index + 1

    def annotation(self):
        return {"id": self.scene_id, "split": self.split, "seed": int(self.seed),
                "objects": [o.to_dict() for o in self.objects]}


# ---------------------------------------------------------------------------
# instances


def make_instances(seed, categories=KINDS, n_train=12, n_test=4):
    """Per-category primitive instances; test parameter tuples never occur in train."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for kind in categories:
        seen = set()
        picked = []
        while len(picked) < n_train + n_test:
            params = tuple(round(float(rng.uniform(lo, hi)), 3) for lo, hi in PARAM_RANGES[kind])
            if params in seen:
                continue
            seen.add(params)
            picked.append(params)
        for i, params in enumerate(picked):
            split = "train" if i < n_train else "test"
            spec = PrimitiveSpec(kind, params, f"{kind}-{split}-{i:02d}")
            (train if split == "train" else test).append(spec)
    return train, test


def canonical_rotation(kind, R):
    """Fold out rotations the shape cannot reveal (sphere: all; cylinder: about its axis)."""
    if SYMMETRY[kind] == "full":
        return np.eye(3)
    if SYMMETRY[kind] == 1:
        # keep where the axis points, drop the spin about it
        y = R[:, 1]
        ref = np.array([1.0, 0.0, 0.0]) if abs(y[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
        x = ref - (ref @ y) * y
        x /= np.linalg.norm(x)
        return np.column_stack([x, y, np.cross(x, y)])
    return R


def _yaw(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _random_so3(rng):
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                     [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                     [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])


def _in_both_views(rig, t, radius):
    H, W = rig.image_size
    f = rig.focal
    for view in (0, 1):
        c = t - rig.T[view]
        u = f * c[0] / c[2] + rig.K[0, 2]
        v = f * c[1] / c[2] + rig.K[1, 2]
        r_px = f * radius / c[2]
        if not (r_px <= u <= W - r_px and r_px <= v <= H - r_px):
            return False
    return True


def sample_scene(seed, instances, rig=None, config=None, scene_id="", split="train"):
    """Draw a scene from ``instances`` (list of PrimitiveSpec) deterministically from ``seed``."""
    cfg = (config or SceneConfig()).validate()
    rig = rig or CameraRig.canonical()
    rng = np.random.default_rng(seed)
    pool = [s for s in instances if s.kind in cfg.categories]
    if not pool:
        raise ValueError("no instances for the configured categories")
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects = []
    for _ in range(n):
        spec = pool[int(rng.integers(len(pool)))]
        if cfg.rotation == "yaw":
            R = _yaw(math.radians(rng.uniform(*cfg.yaw_range)))
        else:
            R = _random_so3(rng)
        R = canonical_rotation(spec.kind, R)
        s = 2.0 * spec.half_extents() * cfg.metric_scale
        radius = float(np.linalg.norm(s) / 2)
        for _ in range(cfg.max_tries):
            z = rng.uniform(*cfg.center_depth)
            half_w = z * rig.image_size[1] / (2 * rig.focal)
            half_h = z * rig.image_size[0] / (2 * rig.focal)
            t = np.array([rng.uniform(-half_w, half_w + rig.baseline), rng.uniform(-half_h, half_h), z])
            if not (cfg.depth_range[0] <= z - radius and z + radius <= cfg.depth_range[1]):
                continue
            if not _in_both_views(rig, t, radius):
                continue
            if any(np.linalg.norm(t - o.t) <= radius + o.radius for o in objects):
                continue
            break
        else:
            raise CrowdingError(f"could not place object {len(objects) + 1} of {n} after {cfg.max_tries} tries "
                                f"(seed {seed})")
        objects.append(SceneObject(spec, KINDS.index(spec.kind), t, R, s, cfg.metric_scale))
    return Scene(objects, rig, seed, scene_id, split, tuple(cfg.depth_range))


# ---------------------------------------------------------------------------
# ray casting


def pixel_rays(rig, view):
    """Origins (3,) and directions (H, W, 3) with unit z, so the hit parameter is the depth."""
    H, W = rig.image_size
    K = rig.K
    u = np.arange(W) + 0.5
    v = np.arange(H) + 0.5
    uu, vv = np.meshgrid(u, v)
    d = np.stack([(uu - K[0, 2]) / K[0, 0], (vv - K[1, 2]) / K[1, 1], np.ones_like(uu)], axis=-1)
    R, T = rig.extrinsics(view)
    return T.copy(), d @ R.T


def intersect(obj, origin, dirs):
    """Nearest positive hit parameter and world normal for rays against one object.

    Returns ``(lam, normal)``; ``lam`` is inf where the ray misses.
    """
    o = (origin - obj.t) @ obj.R                  # local frame
    d = dirs @ obj.R
    sc = obj.scale
    kind, p = obj.spec.kind, obj.spec.params
    lam = np.full(d.shape[:-1], np.inf)
    nloc = np.zeros(d.shape)
    if kind == "sphere":
        r = p[0] * sc
        a = (d * d).sum(-1)
        b = 2 * (d @ o)
        c = o @ o - r * r
        disc = b * b - 4 * a * c
        hit = disc >= 0
        root = np.where(hit, (-b - np.sqrt(np.where(hit, disc, 0.0))) / (2 * a), np.inf)
        ok = hit & (root > 0)
        lam = np.where(ok, root, np.inf)
        nloc = (o + np.where(ok, root, 0.0)[..., None] * d) / r
    elif kind == "box":
        h = np.asarray(p) * sc
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h - o) / d
            t2 = (h - o) / d
        tlo, thi = np.minimum(t1, t2), np.maximum(t1, t2)
        tmin, tmax = tlo.max(-1), thi.min(-1)
        ok = (tmax >= tmin) & (tmin > 0)
        lam = np.where(ok, tmin, np.inf)
        axis = tlo.argmax(-1)
        nloc = np.zeros(d.shape)
        sign = -np.sign(np.take_along_axis(d, axis[..., None], -1))[..., 0]
        np.put_along_axis(nloc, axis[..., None], sign[..., None], -1)
    else:
        r, hh = p[0] * sc, p[1] * sc
        a = d[..., 0] ** 2 + d[..., 2] ** 2
        b = 2 * (o[0] * d[..., 0] + o[2] * d[..., 2])
        c = o[0] ** 2 + o[2] ** 2 - r * r
        disc = b * b - 4 * a * c
        with np.errstate(divide="ignore", invalid="ignore"):
            side = np.where(disc >= 0, (-b - np.sqrt(np.maximum(disc, 0.0))) / (2 * a), np.inf)
            y_side = o[1] + side * d[..., 1]
            side = np.where((side > 0) & (np.abs(y_side) <= hh), side, np.inf)
            caps = []
            for yc in (-hh, hh):
                tc = (yc - o[1]) / d[..., 1]
                x, zc = o[0] + tc * d[..., 0], o[2] + tc * d[..., 2]
                caps.append(np.where((tc > 0) & (x * x + zc * zc <= r * r), tc, np.inf))
        cap = np.minimum(*caps)
        lam = np.minimum(side, cap)
        pt = o + np.where(np.isfinite(lam), lam, 0.0)[..., None] * d
        n_side = np.stack([pt[..., 0], np.zeros_like(lam), pt[..., 2]], -1) / r
        n_cap = np.stack([np.zeros_like(lam), np.sign(pt[..., 1]), np.zeros_like(lam)], -1)
        nloc = np.where((cap < side)[..., None], n_cap, n_side)
    nloc = np.where(np.isfinite(lam)[..., None], nloc, 0.0)
    return lam, nloc @ obj.R.T


def render_view(scene, view):
    """Image (H, W, 3) float32, depth (H, W) float64 and instance mask (H, W) uint16."""
    rig = scene.rig
    H, W = rig.image_size
    origin, dirs = pixel_rays(rig, view)
    best = np.full((H, W), np.inf)
    normal = np.zeros((H, W, 3))
    mask = np.zeros((H, W), dtype=np.uint16)
    albedo = np.zeros((H, W))
    for i, obj in enumerate(scene.objects):
        lam, n = intersect(obj, origin, dirs)
        closer = lam < best
        best = np.where(closer, lam, best)
        normal[closer] = n[closer]
        mask[closer] = i + 1
        albedo[closer] = ALBEDO[obj.spec.kind]
    hit = mask > 0
    img = np.empty((H, W, 3), dtype=np.float64)
    img[...] = BACKGROUND
    near, far = scene.depth_range
    lambert = np.clip(normal @ LIGHT, 0.0, None)
    img[hit, 0] = albedo[hit] * (0.25 + 0.75 * lambert[hit])
    img[hit, 1] = np.clip((best[hit] - near) / (far - near), 0.0, 1.0)
    img[hit, 2] = 1.0
    depth = np.where(hit, best, 0.0)
    return img.astype(np.float32), depth, mask


def render_stereo(scene):
    """Render both views in place; returns ``(images (2,H,W,3), depth_left, mask_left)``."""
    left, depth, mask = render_view(scene, 0)
    right, _, _ = render_view(scene, 1)
    scene.images = np.stack([left, right])
    scene.depth, scene.mask = depth, mask
    return scene.images, depth, mask


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    rig: CameraRig
    scenes: list
    instances: list = field(default_factory=list)      # (PrimitiveSpec, split)
    config: dict = field(default_factory=dict)

    def split(self, name):
        return [s for s in self.scenes if s.split == name]


def generate_dataset(n_train, n_test, seed=0, config=None, rig=None, instance_seed=None,
                     n_inst_train=12, n_inst_test=4):
    """Scenes over disjoint train/test instance sets; test scenes use test instances only."""
    cfg = (config or SceneConfig()).validate()
    rig = rig or CameraRig.canonical()
    train_inst, test_inst = make_instances(seed if instance_seed is None else instance_seed,
                                           cfg.categories, n_inst_train, n_inst_test)
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=n_train + n_test)
    scenes = []
    for k, sd in enumerate(seeds):
        split = "train" if k < n_train else "test"
        sc = sample_scene(int(sd), train_inst if split == "train" else test_inst, rig, cfg,
                          scene_id=f"{k:05d}", split=split)
        render_stereo(sc)
        scenes.append(sc)
    instances = [(s, "train") for s in train_inst] + [(s, "test") for s in test_inst]
    return Dataset(rig, scenes, instances, cfg.__dict__.copy())


def _sha256(data):
    return hashlib.sha256(data).hexdigest()


def _write_array(path, arr, dtype, channels=None):
    raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
    with open(path, "wb") as fh:
        fh.write(raw)
    side = {"dtype": np.dtype(dtype).str, "shape": list(arr.shape), "sha256": _sha256(raw)}
    if channels:
        side["channels"] = list(channels)
    with open(path + ".json", "w") as fh:
        json.dump(side, fh)


def _read_array(path):
    try:
        with open(path + ".json") as fh:
            side = json.load(fh)
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError as exc:
        raise FormatError(f"missing dataset file: {exc.filename}") from exc
    if _sha256(raw) != side["sha256"]:
        raise FormatError(f"checksum mismatch in {path}")
    return np.frombuffer(raw, dtype=np.dtype(side["dtype"])).reshape(side["shape"]).copy()


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def write_dataset(dataset, root):
    os.makedirs(os.path.join(root, "scenes"), exist_ok=True)
    entries = []
    for sc in dataset.scenes:
        if sc.images is None:
            render_stereo(sc)
        d = os.path.join(root, "scenes", sc.scene_id)
        os.makedirs(d, exist_ok=True)
        _write_array(os.path.join(d, "left.f32"), sc.images[0], "<f4", CHANNELS)
        _write_array(os.path.join(d, "right.f32"), sc.images[1], "<f4", CHANNELS)
        _write_array(os.path.join(d, "depth_left.f32"), sc.depth, "<f4")
        _write_array(os.path.join(d, "mask_left.u16"), sc.mask, "<u2")
        ann = sc.annotation()
        with open(os.path.join(d, "ann.json"), "w") as fh:
            json.dump(ann, fh, indent=1)
        entries.append({"id": sc.scene_id, "split": sc.split, "dir": f"scenes/{sc.scene_id}",
                        "n_objects": len(sc.objects)})
    manifest = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "rig": dataset.rig.to_dict(),
                "config": {k: _jsonable(v) for k, v in dataset.config.items()},
                "instances": [dict(spec.to_dict(), split=split) for spec, split in dataset.instances],
                "scenes": entries}
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def read_manifest(root):
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise FormatError(f"no manifest.json in {root}")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT_NAME or manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format {manifest.get('format')!r} "
                          f"version {manifest.get('version')!r} (expected {FORMAT_VERSION})")
    return manifest


def read_dataset(root, splits=None):
    manifest = read_manifest(root)
    rig = CameraRig.from_dict(manifest["rig"])
    scenes = []
    for e in manifest["scenes"]:
        if splits is not None and e["split"] not in splits:
            continue
        d = os.path.join(root, e["dir"])
        with open(os.path.join(d, "ann.json")) as fh:
            ann = json.load(fh)
        sc = Scene([SceneObject.from_dict(o) for o in ann["objects"]], rig, ann["seed"], ann["id"], ann["split"],
                   tuple(manifest.get("config", {}).get("depth_range", (0.3, 2.0))))
        sc.images = np.stack([_read_array(os.path.join(d, "left.f32")), _read_array(os.path.join(d, "right.f32"))])
        sc.depth = _read_array(os.path.join(d, "depth_left.f32"))
        sc.mask = _read_array(os.path.join(d, "mask_left.u16"))
        scenes.append(sc)
    instances = [(PrimitiveSpec.from_dict(i), i["split"]) for i in manifest["instances"]]
    return Dataset(rig, scenes, instances, manifest.get("config", {}))


def split_disjoint(instances):
    """True when no test parameter tuple (per kind) occurs among the train instances."""
    train = {(s.kind, s.params) for s, sp in instances if sp == "train"}
    test = {(s.kind, s.params) for s, sp in instances if sp == "test"}
    return not (train & test)
