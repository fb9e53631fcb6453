"""Run configuration, presets and the pipeline stages behind the command-line tool.

Configuration is a flat mapping of dotted keys (``data.n_train``,
``train.lr`` ...) so presets, JSON files and ``--set`` overrides all merge
the same way.
"""
import copy
import dataclasses
import json
import logging
import os

import numpy as np

from .geometry import CameraRig
from .metrics import REPORT_KEYS
from .numerics import ConfigurationError
from .shape import (SDFTrainConfig, code_similarity, fit_latent, marching_cubes, sample_sdf_points,
                    train_auto_decoder, write_obj, write_ply)
from .synth import SYMMETRY, SceneConfig, generate_dataset, read_dataset, write_dataset
from .trainer import TrainConfig, evaluate, infer, load_model, load_shape_model, save_shape_model, train

log = logging.getLogger(__name__)

OUTPUT_ENV = "CODERS_OUTPUT_DIR"


def _defaults():
    d = {
        "data.n_train": 1000,
        "data.n_test": 200,
        "data.seed": 0,
        "data.min_objects": 1,
        "data.max_objects": 4,
        "data.center_depth": [0.5, 1.5],
        "data.depth_range": [0.3, 2.0],
        "data.metric_scale": 0.15,
        "data.rotation": "yaw",
        "data.yaw_range": [-90.0, 90.0],
        "data.focal": 80.0,
        "data.baseline": 0.1,
        "data.height": 64,
        "data.width": 96,
        "data.instances_train": 12,
        "data.instances_test": 4,
        "sdf.fit_iters": 100,
        "sdf.fit_points": 2000,
        "eval.threshold": 0.5,
        "eval.symmetry": "none",
        "eval.chamfer_objects": 48,
        "eval.mc_resolution": 32,
    }
    for f in dataclasses.fields(SDFTrainConfig):
        d[f"sdf.{f.name}"] = f.default
    for f in dataclasses.fields(TrainConfig):
        v = f.default
        d[f"train.{f.name}"] = list(v) if isinstance(v, tuple) else v
    return d


DEFAULTS = _defaults()

PRESETS = {
    "smoke": {
        "data.n_train": 50, "data.n_test": 10,
        "sdf.steps": 150, "sdf.width": 64, "sdf.depth": 3, "sdf.pool_size": 4096, "sdf.points_per_instance": 128,
        "sdf.fit_iters": 20, "sdf.fit_points": 500,
        "train.epochs": 3, "train.batch_size": 8, "train.dim": 32, "train.n_queries": 10, "train.n_layers": 2,
        "train.n_heads": 4, "train.ffn_dim": 64, "train.depth_bins": 8,
        "eval.chamfer_objects": 6, "eval.mc_resolution": 24,
    },
    "toy": {},
    "full": {"train.dim": 256, "train.n_queries": 150, "train.n_layers": 6, "train.n_heads": 8, "train.ffn_dim": 2048,
              "train.epochs": 24},
}


def resolve_config(preset=None, config_file=None, overrides=(), seed=None):
    """Defaults, then preset, then JSON file, then ``key=value`` overrides, then ``--seed``."""
    cfg = copy.deepcopy(DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg.update(PRESETS[preset])
    if config_file is not None:
        with open(config_file) as fh:
            loaded = json.load(fh)
        _merge(cfg, loaded, f"config file {config_file}")
    parsed = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            parsed[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            parsed[key.strip()] = raw
    _merge(cfg, parsed, "--set")
    if seed is not None:
        cfg["data.seed"] = cfg["sdf.seed"] = cfg["train.seed"] = int(seed)
    return cfg


def _merge(cfg, new, source):
    unknown = sorted(set(new) - set(DEFAULTS))
    if unknown:
        raise ConfigurationError(f"unknown config keys from {source}: {unknown}")
    for k, v in new.items():
        default = DEFAULTS[k]
        if isinstance(default, bool) and not isinstance(v, bool):
            raise ConfigurationError(f"{k} expects true/false, got {v!r}")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise ConfigurationError(f"{k} expects a number, got {v!r}")
            v = float(v) if isinstance(default, float) else v
            if isinstance(default, int) and not float(v).is_integer():
                raise ConfigurationError(f"{k} expects an integer, got {v!r}")
            v = int(v) if isinstance(default, int) else v
        if isinstance(default, list) and (not isinstance(v, list) or len(v) != len(default)):
            raise ConfigurationError(f"{k} expects a list of {len(default)} numbers, got {v!r}")
        cfg[k] = v


def section(cfg, prefix):
    return {k[len(prefix) + 1:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def scene_config(cfg):
    d = section(cfg, "data")
    return SceneConfig(min_objects=d["min_objects"], max_objects=d["max_objects"],
                       center_depth=tuple(d["center_depth"]), depth_range=tuple(d["depth_range"]),
                       metric_scale=d["metric_scale"], rotation=d["rotation"],
                       yaw_range=tuple(d["yaw_range"])).validate()


def rig_from(cfg):
    d = section(cfg, "data")
    return CameraRig.canonical(focal=d["focal"], baseline=d["baseline"], image_size=(d["height"], d["width"]))


def sdf_config(cfg):
    s = section(cfg, "sdf")
    return SDFTrainConfig(**{f.name: s[f.name] for f in dataclasses.fields(SDFTrainConfig)})


def train_config(cfg):
    t = section(cfg, "train")
    kw = {f.name: t[f.name] for f in dataclasses.fields(TrainConfig)}
    kw["loss_weights"] = tuple(kw["loss_weights"])
    kw["depth_range"] = tuple(cfg["data.depth_range"])
    return TrainConfig(**kw).validate()


def symmetry_map(cfg):
    """Per-class symmetry axes for rotation error: 'none' or 'axis' (category symmetry folded out)."""
    mode = cfg["eval.symmetry"]
    if mode == "none":
        return None
    if mode != "axis":
        raise ConfigurationError("eval.symmetry must be 'none' or 'axis'")
    from .shape import KINDS
    return {i: (1 if SYMMETRY[k] is not None else None) for i, k in enumerate(KINDS)}


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# stages


def gen_data(cfg, out_dir):
    d = section(cfg, "data")
    ds = generate_dataset(d["n_train"], d["n_test"], seed=d["seed"], config=scene_config(cfg), rig=rig_from(cfg),
                          n_inst_train=d["instances_train"], n_inst_test=d["instances_test"])
    write_dataset(ds, out_dir)
    return ds


def train_sdf(cfg, data_dir, out_path):
    ds = read_dataset(data_dir, splits=())
    train_inst = [s for s, sp in ds.instances if sp == "train"]
    labels = [s.category for s in train_inst]
    dec, codes, hist = train_auto_decoder(train_inst, labels, sdf_config(cfg))
    intra, inter = code_similarity(codes, labels)
    save_shape_model(out_path, dec, codes, [s.instance_id for s in train_inst], labels,
                     {"intra_similarity": intra, "inter_similarity": inter,
                      "final_sdf_loss": hist[-1]["sdf"] if hist else None})
    return dec, codes, (intra, inter), hist


def per_category_similarity(codes, labels):
    codes = np.asarray(codes)
    labels = np.asarray(labels)
    u = codes / np.linalg.norm(codes, axis=1, keepdims=True)
    S = u @ u.T
    out = {}
    for c in sorted(set(labels.tolist())):
        m = labels == c
        off = m[:, None] & m[None, :] & ~np.eye(len(labels), dtype=bool)
        out[int(c)] = (float(S[off].mean()) if off.any() else float("nan"), float(S[m][:, ~m].mean()))
    return out


def train_model(cfg, data_dir, shape_path, out_dir, resume=None):
    ds = read_dataset(data_dir, splits=("train",))
    _, codes, _ = load_shape_model(shape_path)
    os.makedirs(out_dir, exist_ok=True)
    tcfg = train_config(cfg)
    model, hist = train(ds, tcfg, codes, checkpoint_dir=os.path.join(out_dir, "checkpoints"), resume=resume,
                        loss_csv=os.path.join(out_dir, "loss.csv"))
    final = os.path.join(out_dir, "model.ckpt")
    os.replace(os.path.join(out_dir, "checkpoints", "last.ckpt"), final)
    write_json(os.path.join(out_dir, "config.json"), cfg)
    return model, hist, final


def eval_model(cfg, data_dir, model_path, shape_path=None, split="test"):
    ds = read_dataset(data_dir, splits=(split,))
    if sum(len(s.objects) for s in ds.scenes) == 0:
        raise EmptyEvaluation("zero ground-truth objects")
    model, _, _ = load_model(model_path)
    decoder = load_shape_model(shape_path)[0] if shape_path else None
    return evaluate(model, ds.scenes, shape_decoder=decoder, threshold=cfg["eval.threshold"],
                    symmetry=symmetry_map(cfg), chamfer_objects=cfg["eval.chamfer_objects"],
                    mc_resolution=cfg["eval.mc_resolution"], seed=cfg["data.seed"])


class EmptyEvaluation(ValueError):
    pass


def reconstruct(cfg, data_dir, model_path, shape_path, scene_id, out_dir, resolution=None):
    """Meshes (OBJ and PLY, world frame) for every detection in one scene."""
    ds = read_dataset(data_dir)
    match = [s for s in ds.scenes if s.scene_id == scene_id]
    if not match:
        raise FileNotFoundError(f"scene {scene_id!r} not in dataset {data_dir}")
    model, _, _ = load_model(model_path)
    decoder, _, _ = load_shape_model(shape_path)
    preds = infer(model, match[0].images, cfg["eval.threshold"])[0]
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for k, p in enumerate(preds):
        mesh = marching_cubes(decoder, p.z, resolution=resolution or cfg["eval.mc_resolution"])
        if mesh.empty or len(mesh.faces) == 0:
            written.append({"detection": k, "empty": True})
            continue
        ext = np.ptp(mesh.vertices, axis=0)
        scale = float(np.mean(p.s / np.maximum(ext, 1e-9)))
        world = mesh.transformed(scale, p.R, p.t)
        stem = os.path.join(out_dir, f"{scene_id}_det{k:02d}")
        write_obj(world, stem + ".obj")
        write_ply(world, stem + ".ply")
        written.append({"detection": k, "label": p.label, "confidence": p.confidence,
                        "obj": stem + ".obj", "ply": stem + ".ply", "flagged": p.flagged})
    return written


def fit_test_codes(decoder, codes, specs, cfg, rng):
    """Latent codes for unseen instances, starting from the best training code."""
    out = {}
    cand = np.array(list(codes.values())) if codes else None
    for spec in specs:
        x, y = sample_sdf_points(spec, cfg["sdf.fit_points"], rng)
        out[spec.instance_id] = fit_latent(decoder, x, y, candidates=cand, iters=cfg["sdf.fit_iters"])[0]
    return out


def metric_columns():
    return list(REPORT_KEYS)
