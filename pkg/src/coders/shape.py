"""Category-level SDF shape space: analytic primitives, auto-decoder training,
latent fitting for unseen instances, mesh extraction and mesh I/O.

Shapes live in normalised units inside [-1, 1]^3; metric scale is carried
separately by the object size.
"""
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .layers import Linear, Module
from .numerics import NumericError, Parameter, Tensor

log = logging.getLogger(__name__)

KINDS = ("sphere", "box", "cylinder")
CODE_DIM = 64


class TrainingError(RuntimeError):
    pass


class DegenerateBatchError(ValueError):
    pass


class EmptyMeshError(ValueError):
    pass


@dataclass(frozen=True)
class PrimitiveSpec:
    """A parametric primitive in normalised shape units.

    params: sphere ``(r,)``; box ``(hx, hy, hz)`` half-extents; cylinder
    ``(r, hh)`` radius and half-height, axis along local y.
    """

    kind: str
    params: tuple
    instance_id: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        expected = {"sphere": 1, "box": 3, "cylinder": 2}[self.kind]
        if len(self.params) != expected:
            raise ValueError(f"{self.kind} takes {expected} parameters, got {len(self.params)}")
        if any(not p > 0 for p in self.params):
            raise ValueError(f"primitive parameters must be positive: {self.params}")
        if np.any(self.half_extents() > 1.0):
            raise ValueError(f"{self.kind} {self.params} does not fit inside [-1, 1]^3")

    @property
    def category(self):
        return KINDS.index(self.kind)

    def half_extents(self):
        p = self.params
        if self.kind == "sphere":
            return np.array([p[0]] * 3, dtype=float)
        if self.kind == "box":
            return np.array(p, dtype=float)
        return np.array([p[0], p[1], p[0]], dtype=float)

    def to_dict(self):
        d = asdict(self)
        d["params"] = list(self.params)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], params=tuple(float(v) for v in d["params"]),
                   instance_id=d.get("instance_id", ""))


def analytic_sdf(spec, x):
    """Exact signed distance of ``spec`` at points ``x`` (..., 3); negative inside."""
    x = np.asarray(x, dtype=np.float64)
    p = spec.params
    if spec.kind == "sphere":
        return np.linalg.norm(x, axis=-1) - p[0]
    if spec.kind == "box":
        q = np.abs(x) - np.asarray(p)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)
    r, hh = p
    d = np.stack([np.hypot(x[..., 0], x[..., 2]) - r, np.abs(x[..., 1]) - hh], axis=-1)
    return np.minimum(d.max(axis=-1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=-1)


def surface_area(spec):
    p = spec.params
    if spec.kind == "sphere":
        return 4 * math.pi * p[0] ** 2
    if spec.kind == "box":
        hx, hy, hz = p
        return 8 * (hx * hy + hy * hz + hx * hz)
    r, hh = p
    return 2 * math.pi * r * 2 * hh + 2 * math.pi * r * r


def sample_primitive_surface(spec, n, rng):
    """Area-uniform samples on the exact primitive surface."""
    p = spec.params
    if spec.kind == "sphere":
        v = rng.normal(size=(n, 3))
        return p[0] * v / np.linalg.norm(v, axis=1, keepdims=True)
    if spec.kind == "box":
        h = np.asarray(p)
        # face pairs normal to x, y, z have areas 4*hy*hz, 4*hx*hz, 4*hx*hy
        areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
        axis = rng.choice(3, size=n, p=areas / areas.sum())
        pts = rng.uniform(-1, 1, size=(n, 3)) * h
        sign = rng.choice([-1.0, 1.0], size=n)
        pts[np.arange(n), axis] = sign * h[axis]
        return pts
    r, hh = p
    side, cap = 2 * math.pi * r * 2 * hh, 2 * math.pi * r * r
    on_side = rng.uniform(size=n) < side / (side + cap)
    theta = rng.uniform(0, 2 * math.pi, size=n)
    rad = np.where(on_side, r, r * np.sqrt(rng.uniform(size=n)))
    y = np.where(on_side, rng.uniform(-hh, hh, size=n), rng.choice([-hh, hh], size=n))
    return np.column_stack([rad * np.cos(theta), y, rad * np.sin(theta)])


def sample_sdf_points(spec, n, rng, near=(0.01, 0.04), uniform_frac=0.2):
    """Training samples: jittered surface points plus uniform points in [-1, 1]^3."""
    n_uni = int(n * uniform_frac)
    n_near = n - n_uni
    surf = sample_primitive_surface(spec, n_near, rng)
    sig = np.where(np.arange(n_near) % 2 == 0, near[0], near[1])[:, None]
    pts = np.concatenate([surf + rng.normal(size=surf.shape) * sig,
                          rng.uniform(-1, 1, size=(n_uni, 3))])
    return pts, analytic_sdf(spec, pts)


# ---------------------------------------------------------------------------
# decoder


class SDFDecoder(Module):
    """MLP f(z, x) -> signed distance; z and x are concatenated at the input.

    The first layer's weight is kept as separate code and coordinate blocks
    so a per-instance code is projected once and broadcast over its points.
    """

    def __init__(self, rng, code_dim=CODE_DIM, width=128, depth=4):
        # each input block gets its own fan-in init so the 3 coordinates are
        # not drowned by the 64 code inputs at the start of training
        code_in, xyz_in = Linear(code_dim, width, rng), Linear(3, width, rng)
        self.w_code = code_in.weight
        self.w_xyz = xyz_in.weight
        self.b_in = xyz_in.bias
        self.hidden = [Linear(width, width, rng) for _ in range(depth - 1)]
        self.out = Linear(width, 1, rng)
        self.code_dim = code_dim
        self.assign_names()

    def __call__(self, z, x):
        """z: (..., code_dim) Tensor/array, x: (..., P, 3) -> (..., P)."""
        z, x = nx.as_tensor(z), nx.as_tensor(x)
        hz = nx.matmul(nx.reshape(z, z.shape[:-1] + (1, self.code_dim)), self.w_code)
        h = nx.add(nx.add(nx.linear(x, self.w_xyz), hz), self.b_in)
        h = nx.gelu(h)
        for layer in self.hidden:
            h = nx.gelu(layer(h))
        out = self.out(h)
        return nx.reshape(out, out.shape[:-1])

    def evaluate(self, z, x, chunk=32768):
        """NumPy evaluation over many points for one code, chunked."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        z = np.asarray(z, dtype=np.float64)
        out = np.empty(len(x))
        for i in range(0, len(x), chunk):
            out[i:i + chunk] = self(z, x[i:i + chunk]).data
        return out


def sdf_forward(f, z, x, delta=None):
    """f(z, x), optionally clamped to [-delta, delta]."""
    y = f(z, x)
    return nx.clamp(y, -delta, delta) if delta is not None else y


def clamped_l1(pred, target, delta):
    """Mean truncated L1 between prediction and target SDF values.

    Equal to ``|clamp(pred) - clamp(target)|`` whenever the prediction lies in
    [-delta, delta]. Outside the band the prediction is not clamped, so a
    prediction on the far side of a near-surface target still gets a gradient;
    for far-field targets only predictions on the wrong side of +-delta cost.
    """
    target = np.asarray(target, dtype=np.float64)
    band = (np.abs(target) < delta).astype(np.float64)
    sign = np.where(target >= 0, 1.0, -1.0)
    near = nx.tabs(nx.sub(pred, target))
    far = nx.clamp(nx.sub(delta, nx.mul(pred, sign)), 0.0, None)
    return nx.mean(nx.add(nx.mul(near, band), nx.mul(far, 1.0 - band)))


# ---------------------------------------------------------------------------
# contrastive term


def supervised_contrastive_loss(codes, labels, tau=0.07):
    """Supervised contrastive loss over cosine similarities of ``codes`` (N, d).

    Anchors without positives are skipped; an anchor also needs at least two
    other codes so that its denominator is not the positive alone.
    """
    codes = nx.as_tensor(codes)
    labels = np.asarray(labels)
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    eye = np.eye(n, dtype=bool)
    pos = same & ~eye
    n_pos = pos.sum(axis=1)
    valid = (n_pos > 0) & (n - 1 >= 2)
    if not valid.any():
        raise DegenerateBatchError("no anchor has a positive and a non-trivial denominator")
    u = nx.normalize(codes, axis=-1)
    sim = nx.mul(nx.matmul(u, nx.transpose(u)), 1.0 / tau)
    lse = nx.logsumexp(nx.where_fill(sim, eye, -np.inf), axis=1)
    log_prob = nx.sub(sim, nx.reshape(lse, (n, 1)))
    w = np.where(valid[:, None], pos / np.maximum(n_pos, 1)[:, None], 0.0) / valid.sum()
    return nx.mul(nx.tsum(nx.mul(nx.where_fill(log_prob, eye, 0.0), w)), -1.0)


def code_similarity(codes, labels):
    """Mean cosine similarity within and across categories (diagonal excluded)."""
    codes = np.asarray(codes)
    labels = np.asarray(labels)
    u = codes / np.linalg.norm(codes, axis=1, keepdims=True)
    S = u @ u.T
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    intra = S[same & off].mean() if (same & off).any() else float("nan")
    inter = S[~same].mean() if (~same).any() else float("nan")
    return float(intra), float(inter)


# ---------------------------------------------------------------------------
# auto-decoder training


@dataclass
class SDFTrainConfig:
    steps: int = 1500
    points_per_instance: int = 256
    pool_size: int = 16384
    lr: float = 5e-3
    code_lr: float = 1e-2
    delta: float = 0.1
    lambda_contr: float = 0.1
    tau: float = 0.07
    code_init_std: float = 0.01
    width: int = 128
    depth: int = 4
    seed: int = 0
    log_every: int = 100


def _adam_group(params):
    return nx.OptimState(params)


def train_auto_decoder(instances, labels, config=None, callback=None):
    """Jointly fit the decoder and one code per instance.

    Returns ``(decoder, codes, history)`` where ``codes`` is (N, 64) and
    ``history`` a list of per-step loss dicts.
    """
    cfg = config or SDFTrainConfig()
    labels = np.asarray(labels)
    if cfg.lambda_contr > 0 and len(set(labels.tolist())) < 2:
        raise ValueError("the contrastive term needs at least two categories")
    rng = np.random.default_rng(cfg.seed)
    decoder = SDFDecoder(rng, width=cfg.width, depth=cfg.depth).assign_names("decoder.")
    codes = Parameter(rng.normal(0.0, cfg.code_init_std, size=(len(instances), CODE_DIM)), name="codes")
    pools = [sample_sdf_points(spec, cfg.pool_size, rng) for spec in instances]
    pool_x = np.stack([p[0] for p in pools])
    pool_y = np.stack([p[1] for p in pools])
    dec_params = decoder.parameters()
    st_dec, st_code = nx.OptimState(dec_params), nx.OptimState([codes])
    history = []
    rows = np.arange(len(instances))[:, None]
    for step in range(cfg.steps):
        idx = rng.integers(0, cfg.pool_size, size=(len(instances), cfg.points_per_instance))
        x, y = pool_x[rows, idx], pool_y[rows, idx]
        nx.zero_grad(dec_params + [codes])
        l_sdf = clamped_l1(decoder(codes, x), y, cfg.delta)
        loss = l_sdf
        l_con = None
        if cfg.lambda_contr > 0:
            l_con = supervised_contrastive_loss(codes, labels, cfg.tau)
            loss = nx.add(loss, nx.mul(l_con, cfg.lambda_contr))
        if not np.isfinite(loss.item()):
            raise TrainingError(f"SDF training diverged at step {step}: loss={loss.item()}, "
                                f"sdf={l_sdf.item()}, code-norm max={np.abs(codes.data).max():.3g}")
        nx.backward(loss)
        frac = nx.cosine_lr(step, cfg.steps, 1.0)
        nx.adamw_step(dec_params, st_dec, lr=max(cfg.lr * frac, 1e-12), weight_decay=0.0)
        nx.adamw_step([codes], st_code, lr=max(cfg.code_lr * frac, 1e-12), weight_decay=0.0)
        rec = {"step": step, "loss": loss.item(), "sdf": l_sdf.item(),
               "contrastive": l_con.item() if l_con is not None else 0.0}
        history.append(rec)
        if callback is not None:
            callback(rec)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("sdf step %d loss %.5f sdf %.5f", step, rec["loss"], rec["sdf"])
    return decoder, codes.data.copy(), history


def fit_latent(decoder, points, sdf_values, z_init=None, candidates=None, iters=300, lr=5e-3,
               delta=0.1, max_halvings=8):
    """Fit a code to SDF samples with the decoder frozen.

    Steps follow the Adam direction; a step is accepted only when it does
    not increase the loss, otherwise the step size is halved. Returns
    ``(z, losses)`` with ``losses`` the accepted loss sequence
    (non-increasing by construction).
    """
    x = np.asarray(points, dtype=np.float64)
    y = np.asarray(sdf_values, dtype=np.float64)
    for p in decoder.parameters():
        p.requires_grad = False
    try:
        def loss_of(zv):
            return clamped_l1(decoder(Tensor(zv), x), y, delta).item()

        if candidates is not None and len(candidates):
            scores = [loss_of(c) for c in candidates]
            z = np.array(candidates[int(np.argmin(scores))], dtype=np.float64)
        elif z_init is not None:
            z = np.array(z_init, dtype=np.float64)
        else:
            z = np.zeros(decoder.code_dim)
        zp = Parameter(z, name="z")
        state = nx.OptimState([zp])
        cur = loss_of(zp.data)
        losses = [cur]
        step_lr = lr
        for _ in range(iters):
            zp.grad = np.zeros_like(zp.data)
            nx.backward(clamped_l1(decoder(zp, x), y, delta))
            if not np.all(np.isfinite(zp.grad)):
                raise NumericError("latent fit produced non-finite gradients")
            backup = zp.data.copy()
            m_b, v_b = state.m["z"].copy(), state.v["z"].copy()
            accepted = False
            for _ in range(max_halvings):
                nx.adamw_step([zp], state, lr=step_lr, weight_decay=0.0)
                new = loss_of(zp.data)
                if new <= cur:
                    accepted = True
                    break
                zp.data[...] = backup
                state.m["z"][...], state.v["z"][...] = m_b, v_b
                state.step -= 1
                step_lr *= 0.5
            if not accepted:
                break
            cur = new
            losses.append(cur)
        return zp.data.copy(), losses
    finally:
        for p in decoder.parameters():
            p.requires_grad = True


# ---------------------------------------------------------------------------
# meshes


@dataclass
class Mesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    empty: bool = False

    def triangle_areas(self):
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def transformed(self, scale, R, t):
        return Mesh(self.vertices * scale @ np.asarray(R).T + t, self.faces.copy(), self.empty)


def grid_points(resolution, bounds=(-1.0, 1.0)):
    lo, hi = bounds
    axis = np.linspace(lo, hi, resolution)
    g = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    return g.reshape(-1, 3), (hi - lo) / (resolution - 1)


def marching_cubes(f, z=None, resolution=64, bounds=(-1.0, 1.0)):
    """Zero level set of ``f`` on a resolution^3 lattice spanning ``bounds``.

    ``f`` is an :class:`SDFDecoder` (evaluated with code ``z``) or any
    callable mapping (N, 3) points to (N,) values. Returns an empty Mesh
    (``empty=True``) when the field has no sign change.
    """
    from skimage.measure import marching_cubes as _mc

    if resolution < 8:
        raise ValueError("marching cubes needs resolution >= 8")
    pts, cell = grid_points(resolution, bounds)
    vals = f.evaluate(z, pts) if isinstance(f, SDFDecoder) else np.asarray(f(pts), dtype=np.float64)
    vol = vals.reshape(resolution, resolution, resolution)
    if not (vol.min() < 0.0 < vol.max()):
        return Mesh(empty=True)
    verts, faces, _, _ = _mc(vol, level=0.0, spacing=(cell, cell, cell))
    verts = verts.astype(np.float64) + bounds[0]
    mesh = Mesh(verts, faces.astype(np.int64))
    keep = mesh.triangle_areas() > 1e-14 * cell * cell
    mesh.faces = mesh.faces[keep]
    return mesh


def sample_mesh_points(mesh, n=10_000, rng=None):
    """Area-weighted uniform samples on the triangles of ``mesh``."""
    if mesh.empty or len(mesh.faces) == 0:
        raise EmptyMeshError("cannot sample an empty mesh")
    rng = rng if rng is not None else np.random.default_rng(0)
    areas = mesh.triangle_areas()
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.uniform(size=n), rng.uniform(size=n)
    s = np.sqrt(r1)
    w0, w1, w2 = 1 - s, s * (1 - r2), s * r2
    v = mesh.vertices[mesh.faces[tri]]
    return w0[:, None] * v[:, 0] + w1[:, None] * v[:, 1] + w2[:, None] * v[:, 2]


def write_obj(mesh, path):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_ply(mesh, path):
    """Binary little-endian PLY with float32 vertices and int32 triangle indices."""
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(mesh.vertices)}\n"
              "property float x\nproperty float y\nproperty float z\n"
              f"element face {len(mesh.faces)}\n"
              "property list uchar int vertex_indices\nend_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.asarray(mesh.vertices, dtype="<f4").tobytes())
        rec = np.zeros(len(mesh.faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        rec["n"] = 3
        rec["idx"] = mesh.faces
        fh.write(rec.tobytes())


def read_ply(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    nv = int(next(l for l in header if l.startswith("element vertex")).split()[-1])
    nf = int(next(l for l in header if l.startswith("element face")).split()[-1])
    verts = np.frombuffer(raw, dtype="<f4", count=nv * 3, offset=end).reshape(nv, 3)
    rec = np.frombuffer(raw, dtype=[("n", "u1"), ("idx", "<i4", (3,))], count=nf, offset=end + nv * 12)
    return Mesh(verts.astype(np.float64), rec["idx"].astype(np.int64))
