"""End-to-end model assembly, matched-loss training, checkpointing and inference."""
import csv
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .decoder import TransformerDecoder, flatten_tokens
from .geometry import frustum_bounds
from .heads import LOSS_WEIGHTS, DegenerateRotationError, PredictionHeads, hungarian_match, build_cost_matrix, \
    matched_losses, rotation_from_6d, safe_rotation_from_6d
from .ism import ImplicitStereoMatching, position_inputs
from .layers import Module
from .metrics import Detection, OrientedBox, chamfer, precision_at
from .numerics import ConfigurationError, NumericError
from .shape import KINDS, SDFDecoder, marching_cubes, sample_mesh_points, sample_primitive_surface

log = logging.getLogger(__name__)

LOSS_CSV_FIELDS = ("epoch", "step", "loss_total", "loss_cls", "loss_pose", "loss_shape", "lr")
HEAD_MODES = ("both", "pose", "shape")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2.0e-4
    weight_decay: float = 1e-2
    loss_weights: tuple = LOSS_WEIGHTS
    seed: int = 0
    dim: int = 128
    n_queries: int = 25
    n_layers: int = 6
    n_heads: int = 4
    ffn_dim: int = 256
    depth_bins: int = 64
    patch: int = 8
    depth_range: tuple = (0.3, 2.0)
    depth_spacing: str = "linear"
    pe_mode: str = "stereo"
    monocular: bool = False
    heads: str = "both"
    small_pose_weight: float = 1e-3
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    grad_clip: float = 0.0
    conf_threshold: float = 0.5

    def validate(self):
        for name in ("epochs", "batch_size", "dim", "n_queries", "n_layers", "n_heads", "ffn_dim",
                     "depth_bins", "patch"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < (0 if name == "epochs" else 1):
                raise ConfigurationError(f"{name} must be a positive integer, got {v!r}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigurationError("lr and weight_decay must be non-negative")
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            raise ConfigurationError("loss_weights is (cls, pose, shape), each >= 0")
        if self.dim % self.n_heads:
            raise ConfigurationError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if self.heads not in HEAD_MODES:
            raise ConfigurationError(f"heads must be one of {HEAD_MODES}")
        if self.pe_mode not in ("stereo", "2d", "none"):
            raise ConfigurationError(f"unknown pe_mode {self.pe_mode!r}")
        return self

    def effective_weights(self):
        """Loss weights after the head ablation switch."""
        cls_w, pose_w, shape_w = self.loss_weights
        if self.heads == "pose":
            shape_w = 0.0
        elif self.heads == "shape":
            pose_w = pose_w * self.small_pose_weight
        return (cls_w, pose_w, shape_w)

    def to_dict(self):
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


class StereoDetector(Module):
    """Implicit stereo matching, query decoder and prediction heads."""

    def __init__(self, cfg, rig, rng, n_classes=len(KINDS)):
        self.cfg = cfg
        self.rig = rig
        H, W = rig.image_size
        if H % cfg.patch or W % cfg.patch:
            raise ConfigurationError(f"image {H}x{W} not divisible by patch {cfg.patch}")
        self.feat_dims = (H // cfg.patch, W // cfg.patch)
        self.ism = ImplicitStereoMatching(cfg.dim, cfg.patch, 3, cfg.depth_bins, rng, pe_mode=cfg.pe_mode)
        self.decoder = TransformerDecoder(cfg.dim, cfg.n_queries, cfg.n_layers, cfg.n_heads, cfg.ffn_dim, rng)
        self.heads = PredictionHeads(cfg.dim, n_classes, rng)
        self.rays = position_inputs(rig, self.feat_dims, cfg.depth_bins, tuple(cfg.depth_range), cfg.patch,
                                    mode=cfg.pe_mode, spacing=cfg.depth_spacing,
                                    bounds=frustum_bounds(rig, tuple(cfg.depth_range)))
        self.assign_names()

    def __call__(self, images):
        """images (B, 2, H, W, 3) -> dict of per-query head outputs, each (B, N_q, ...)."""
        feats = self.ism(images, self.rays)
        views = (0,) if self.cfg.monocular else (0, 1)
        memory = flatten_tokens(feats, views)
        return self.heads(self.decoder(memory))


@dataclass
class Prediction:
    label: int
    confidence: float
    t: np.ndarray
    s: np.ndarray
    R: np.ndarray
    z: np.ndarray
    query: int
    flagged: bool = False

    def detection(self):
        return Detection(OrientedBox(self.t, self.s, self.R), self.label, self.confidence)


class TrainingAborted(NumericError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# data plumbing


def scene_targets(scene, codes):
    """Per-scene regression targets; ``codes`` maps instance id -> 64-d code."""
    objs = scene.objects
    z = [codes[o.spec.instance_id] if o.spec.instance_id in codes else np.zeros(64) for o in objs]
    return {"classes": np.array([o.category for o in objs], dtype=int),
            "t": np.array([o.t for o in objs]).reshape(-1, 3),
            "s": np.array([o.s for o in objs]).reshape(-1, 3),
            "R": np.array([o.R for o in objs]).reshape(-1, 3, 3),
            "z": np.array(z).reshape(-1, 64)}


def data_priors(scenes):
    t = np.concatenate([[o.t for o in sc.objects] for sc in scenes if sc.objects])
    s = np.concatenate([[o.s for o in sc.objects] for sc in scenes if sc.objects])
    return t.mean(0), t.std(0) + 1e-3, np.log(s).mean(0)


def build_model(cfg, rig, train_scenes=None):
    rng = np.random.default_rng(cfg.seed)
    model = StereoDetector(cfg, rig, rng)
    if train_scenes:
        t_mean, t_std, log_s = data_priors(train_scenes)
        model.heads.set_priors(t_mean, t_std, log_s)
    return model


def _head_priors(model):
    return {"t_offset": model.heads.t_offset.tolist(), "t_scale": model.heads.t_scale.tolist()}


def _clip_gradients(params, max_norm):
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params))
    if total > max_norm:
        for p in params:
            p.grad *= max_norm / (total + 1e-12)
    return total


# ---------------------------------------------------------------------------
# checkpoints


def save_training_state(path, model, opt, cfg, epoch, rng, history, extra=None):
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    tensors.update({f"adam_m/{k}": v for k, v in opt.m.items()})
    tensors.update({f"adam_v/{k}": v for k, v in opt.v.items()})
    meta = {"config": cfg.to_dict(), "epoch": epoch, "opt_step": opt.step,
            "rng": rng.bit_generator.state if rng is not None else None,
            "history": history, "heads": _head_priors(model), "rig": model.rig.to_dict()}
    if extra:
        meta.update(extra)
    tmp = str(path) + ".tmp"
    nx.save_checkpoint(tmp, tensors, meta)
    os.replace(tmp, path)


def load_model(path):
    """Model (and checkpoint meta) from a training checkpoint."""
    from .geometry import CameraRig
    tensors, meta = nx.load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"]).validate()
    model = StereoDetector(cfg, CameraRig.from_dict(meta["rig"]), np.random.default_rng(cfg.seed))
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model/")})
    model.heads.t_offset = np.array(meta["heads"]["t_offset"])
    model.heads.t_scale = np.array(meta["heads"]["t_scale"])
    return model, tensors, meta


# ---------------------------------------------------------------------------
# training


def train(dataset, cfg, codes, checkpoint_dir=None, resume=None, loss_csv=None, eval_fn=None,
          stop_after_epoch=None, callback=None):
    """Train on the dataset's train split.

    ``codes`` maps instance ids to shape-code targets. Checkpoints are
    written at every epoch boundary when ``checkpoint_dir`` is given.
    Returns ``(model, history)`` where history holds one record per step.
    """
    cfg.validate()
    scenes = dataset.split("train")
    if not scenes:
        raise ValueError("dataset has no training scenes")
    images = np.stack([sc.images for sc in scenes]).astype(np.float64)
    targets = [scene_targets(sc, codes) for sc in scenes]
    weights = cfg.effective_weights()

    if resume is not None:
        model, tensors, meta = load_model(resume)
        if meta["config"] != cfg.to_dict():
            raise ConfigurationError("resume checkpoint was written with a different config")
        params = model.parameters()
        opt = nx.OptimState(params)
        for p in params:
            opt.m[p.name][...] = tensors[f"adam_m/{p.name}"]
            opt.v[p.name][...] = tensors[f"adam_v/{p.name}"]
        opt.step = meta["opt_step"]
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        start_epoch = meta["epoch"]
        history = meta["history"]
    else:
        model = build_model(cfg, dataset.rig, scenes)
        params = model.parameters()
        opt = nx.OptimState(params)
        rng = np.random.default_rng(cfg.seed + 1)
        start_epoch = 0
        history = []

    steps_per_epoch = math.ceil(len(scenes) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    last_good = None
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
        last_good = os.path.join(checkpoint_dir, "last.ckpt")
        if resume is None:
            save_training_state(last_good, model, opt, cfg, 0, rng, history)

    for epoch in range(start_epoch, cfg.epochs):
        order = rng.permutation(len(scenes))
        for k in range(steps_per_epoch):
            step = epoch * steps_per_epoch + k
            idx = order[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            lr = nx.cosine_lr(step, total_steps, cfg.lr)
            nx.zero_grad(params)
            out = model(images[idx])
            loss, info, _ = matched_losses(out, [targets[i] for i in idx], weights,
                                           cfg.focal_alpha, cfg.focal_gamma, match_weights=cfg.loss_weights)
            if not np.isfinite(loss.item()):
                raise TrainingAborted(f"non-finite loss at epoch {epoch} step {step}: {info}", last_good)
            nx.backward(loss)
            if cfg.grad_clip > 0:
                _clip_gradients(params, cfg.grad_clip)
            if lr > 0:
                nx.adamw_step(params, opt, lr=lr, weight_decay=cfg.weight_decay)
            rec = {"epoch": epoch, "step": step, "lr": lr, **info}
            history.append(rec)
            if callback is not None:
                callback(rec)
        ep = [r["loss_total"] for r in history if r["epoch"] == epoch]
        log.info("epoch %d mean loss %.5f", epoch, float(np.mean(ep)))
        if eval_fn is not None:
            history[-1]["eval"] = eval_fn(model)
        if checkpoint_dir is not None:
            save_training_state(last_good, model, opt, cfg, epoch + 1, rng, history)
            save_training_state(os.path.join(checkpoint_dir, f"epoch{epoch + 1:03d}.ckpt"), model, opt, cfg,
                                epoch + 1, rng, history)
        if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
            break
    if loss_csv is not None:
        write_loss_csv(history, loss_csv)
    return model, history


def write_loss_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_CSV_FIELDS, extrasaction="ignore")
        w.writeheader()
        for rec in history:
            w.writerow({k: rec[k] for k in LOSS_CSV_FIELDS})


def epoch_losses(history):
    by = {}
    for r in history:
        by.setdefault(r["epoch"], []).append(r["loss_total"])
    return [float(np.mean(by[e])) for e in sorted(by)]


# ---------------------------------------------------------------------------
# inference and evaluation


def forward_numpy(model, images, batch=16):
    images = np.asarray(images, dtype=np.float64)
    outs = []
    for i in range(0, len(images), batch):
        o = model(images[i:i + batch])
        outs.append({k: v.data for k, v in o.items()})
    return {k: np.concatenate([o[k] for o in outs]) for k in outs[0]}


def predictions_from_output(out, b, threshold):
    """Decode scene ``b`` of a numpy head output; keeps queries with confidence > threshold."""
    probs = out["probs"][b]
    obj = probs[:, :-1]
    labels = obj.argmax(-1)
    conf = obj.max(-1)
    preds = []
    for q in range(len(probs)):
        if threshold > 0 and not conf[q] > threshold:
            continue
        flagged = False
        try:
            R = rotation_from_6d(out["r6d"][b, q])
        except DegenerateRotationError:
            R = safe_rotation_from_6d(out["r6d"][b, q])
            flagged = True
        preds.append(Prediction(int(labels[q]), float(conf[q]), out["t"][b, q].copy(), out["s"][b, q].copy(),
                                R, out["z"][b, q].copy(), q, flagged))
    return preds


def infer(model, images, confidence_threshold=0.5):
    """Per-scene Prediction lists for a batch of stereo pairs (B, 2, H, W, 3)."""
    images = np.asarray(images)
    if images.ndim == 4:
        images = images[None]
    out = forward_numpy(model, images)
    return [predictions_from_output(out, b, confidence_threshold) for b in range(len(images))]


def oracle_queries(out, b, scene, cfg):
    """Hungarian assignment of the scene's GT objects to queries (the training matcher)."""
    tg = scene_targets(scene, {})
    if len(tg["classes"]) == 0:
        return np.zeros(0, dtype=int)
    cost = build_cost_matrix(out["probs"][b], out["t"][b], out["s"][b], tg["classes"], tg["t"], tg["s"],
                             tuple(cfg.loss_weights))
    return hungarian_match(cost).gt_to_query


def evaluate(model, scenes, shape_decoder=None, threshold=None, symmetry=None, chamfer_objects=48,
             mc_resolution=32, chamfer_points=10_000, seed=0):
    """MetricsReport over ``scenes`` plus mean Chamfer x100 of decoded shape codes.

    Chamfer uses the query the training matcher assigns to each GT object;
    the mesh from the predicted code is compared with the analytic surface,
    both in normalised shape units.
    """
    cfg = model.cfg
    threshold = cfg.conf_threshold if threshold is None else threshold
    if not scenes:
        raise ValueError("no scenes to evaluate")
    images = np.stack([sc.images for sc in scenes])
    out = forward_numpy(model, images)
    preds = [[p.detection() for p in predictions_from_output(out, b, threshold)] for b in range(len(scenes))]
    gts = [[Detection(OrientedBox(o.t, o.s, o.R), o.category) for o in sc.objects] for sc in scenes]
    report = precision_at(preds, gts, symmetry=symmetry, class_names=KINDS)
    report.overall["chamfer_x100"] = None
    if shape_decoder is not None and report.n_gt:
        rng = np.random.default_rng(seed)
        pairs = []
        for b, sc in enumerate(scenes):
            for g, q in enumerate(oracle_queries(out, b, sc, cfg)):
                pairs.append((b, g, int(q)))
        if len(pairs) > chamfer_objects:
            pairs = [pairs[i] for i in sorted(rng.choice(len(pairs), chamfer_objects, replace=False))]
        vals, per_cat, empty = [], {}, 0
        for b, g, q in pairs:
            spec = scenes[b].objects[g].spec
            mesh = marching_cubes(shape_decoder, out["z"][b, q], resolution=mc_resolution)
            if mesh.empty or len(mesh.faces) == 0:
                empty += 1
                continue
            cd = 100.0 * chamfer(sample_mesh_points(mesh, chamfer_points, rng),
                                 sample_primitive_surface(spec, chamfer_points, rng))
            vals.append(cd)
            per_cat.setdefault(spec.kind, []).append(cd)
        report.overall["chamfer_x100"] = float(np.mean(vals)) if vals else None
        report.overall["chamfer_empty"] = empty
        for kind, v in per_cat.items():
            report.per_category.setdefault(kind, {})["chamfer_x100"] = float(np.mean(v))
    te = translation_errors(out, scenes, cfg)
    report.overall["mean_trans_err_cm"] = float(np.mean(te)) if len(te) else None
    return report


def translation_errors(out, scenes, cfg):
    """Translation error (cm) of the matcher-assigned query for every GT object."""
    errs = []
    for b, sc in enumerate(scenes):
        for g, q in enumerate(oracle_queries(out, b, sc, cfg)):
            errs.append(100.0 * float(np.linalg.norm(out["t"][b, q] - sc.objects[g].t)))
    return np.array(errs)


def save_shape_model(path, decoder, codes, instance_ids, labels, extra=None):
    tensors = {f"decoder/{k}": v for k, v in decoder.state_dict().items()}
    tensors["codes"] = np.asarray(codes)
    meta = {"instance_ids": list(instance_ids), "labels": [int(l) for l in labels],
            "width": decoder.hidden[0].weight.shape[0], "depth": len(decoder.hidden) + 1}
    if extra:
        meta.update(extra)
    nx.save_checkpoint(path, tensors, meta)


def load_shape_model(path):
    tensors, meta = nx.load_checkpoint(path)
    dec = SDFDecoder(np.random.default_rng(0), width=meta["width"], depth=meta["depth"])
    dec.load_state_dict({k[8:]: v for k, v in tensors.items() if k.startswith("decoder/")})
    codes = {iid: tensors["codes"][i] for i, iid in enumerate(meta["instance_ids"])}
    return dec, codes, meta
