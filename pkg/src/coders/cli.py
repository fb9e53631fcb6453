"""Command-line entry point: ``coders <subcommand> [options]``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
Failures print one JSON line to stderr: ``{"error": kind, "code": n, "message": ...}``.
"""
import argparse
import csv
import json
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from . import pipeline
from .numerics import ConfigurationError, NumericError
from .shape import TrainingError
from .synth import CrowdingError, FormatError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

TABLE_COLUMNS = (("iou25", "3D_25"), ("iou50", "3D_50"), ("iou75", "3D_75"), ("deg5cm2", "5°2cm"),
                 ("deg5cm5", "5°5cm"), ("deg10cm5", "10°5cm"), ("deg10cm10", "10°10cm"),
                 ("chamfer_x100", "CD×100"))


class DataError(Exception):
    pass


def default_out(name):
    return os.path.join(os.environ.get(pipeline.OUTPUT_ENV, "coders_out"), name)


def config_help():
    lines = ["config keys (override with --set key=value; values parse as JSON):"]
    width = max(map(len, pipeline.DEFAULTS))
    for k, v in pipeline.DEFAULTS.items():
        lines.append(f"  {k:<{width}}  {json.dumps(v)}")
    lines.append("")
    lines.append("presets: " + ", ".join(f"{n} ({len(p)} overrides)" for n, p in pipeline.PRESETS.items()))
    lines.append(f"default output dir: ${pipeline.OUTPUT_ENV} or ./coders_out")
    lines.append("exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure")
    return "\n".join(lines)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=sorted(pipeline.PRESETS), help="named config preset")
    common.add_argument("--config", help="JSON file of config keys")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="sets data.seed, sdf.seed and train.seed")
    common.add_argument("--threads", type=int, default=1, help="BLAS thread cap; 1 is the reproducible mode")
    common.add_argument("-v", "--verbose", action="store_true")

    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="coders", description="Stereo detection with category-level shape codes.",
                                epilog=config_help(), formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="render a synthetic stereo dataset",
                       epilog=config_help(), formatter_class=fmt)
    s.add_argument("--out", default=None, help="dataset directory")

    s = sub.add_parser("train-sdf", parents=[common], help="train the shape auto-decoder",
                       epilog=config_help(), formatter_class=fmt)
    s.add_argument("--data", required=True)
    s.add_argument("--out", default=None, help="shape checkpoint file")

    s = sub.add_parser("train", parents=[common], help="train the detector", epilog=config_help(),
                       formatter_class=fmt)
    s.add_argument("--data", required=True)
    s.add_argument("--shape", required=True, help="shape checkpoint from train-sdf")
    s.add_argument("--out", default=None, help="run directory")
    s.add_argument("--resume", help="checkpoint to resume from")

    s = sub.add_parser("eval", parents=[common], help="evaluate a detector checkpoint", epilog=config_help(),
                       formatter_class=fmt)
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--shape", help="shape checkpoint; enables the Chamfer column")
    s.add_argument("--split", default="test")
    s.add_argument("--out", default=None, help="metrics JSON path")

    s = sub.add_parser("reconstruct", parents=[common], help="mesh every detection of one scene",
                       epilog=config_help(), formatter_class=fmt)
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--shape", required=True)
    s.add_argument("--scene", required=True, help="scene id, e.g. 00012")
    s.add_argument("--resolution", type=int, default=None)
    s.add_argument("--out", default=None)

    s = sub.add_parser("report", parents=[common], help="merge metrics JSON files into CSV, Markdown and figures",
                       formatter_class=fmt)
    s.add_argument("metrics", nargs="+")
    s.add_argument("--names", nargs="+", help="run names (default: file stems)")
    s.add_argument("--loss", nargs="*", default=[], help="loss.csv files to plot")
    s.add_argument("--out", default=None)
    return p


def _require(*paths):
    for p in paths:
        if p is not None and not os.path.exists(p):
            raise FileNotFoundError(f"no such file or directory: {p}")


def format_table(rows):
    """Markdown table in the precision-table column layout, one row per run."""
    head = "| run | " + " | ".join(lbl for _, lbl in TABLE_COLUMNS) + " |"
    sep = "|---|" + "---:|" * len(TABLE_COLUMNS)
    out = [head, sep]
    for r in rows:
        cells = []
        for k, _ in TABLE_COLUMNS:
            v = r.get(k)
            cells.append("n/a" if v is None else (f"{v:.2f}" if k == "chamfer_x100" else f"{100 * v:.1f}"))
        out.append(f"| {r['run']} | " + " | ".join(cells) + " |")
    return "\n".join(out)


def cmd_gen_data(args, cfg):
    out = args.out or default_out("data")
    ds = pipeline.gen_data(cfg, out)
    n_tr, n_te = len(ds.split("train")), len(ds.split("test"))
    print(f"scenes {len(ds.scenes)} train {n_tr} test {n_te} -> {out}")


def cmd_train_sdf(args, cfg):
    _require(os.path.join(args.data, "manifest.json"))
    out = args.out or default_out("shape.ckpt")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    _, codes, (intra, inter), hist = pipeline.train_sdf(cfg, args.data, out)
    from .shape import KINDS
    labels = [s.category for s, sp in pipeline.read_dataset(args.data, splits=()).instances if sp == "train"]
    print("category  intra_cos  inter_cos")
    for c, (a, b) in pipeline.per_category_similarity(codes, labels).items():
        print(f"{KINDS[c]:<9} {a:9.3f}  {b:9.3f}")
    print(f"overall   {intra:9.3f}  {inter:9.3f}")
    print(f"final sdf loss {hist[-1]['sdf']:.5f} -> {out}" if hist else f"no steps -> {out}")


def cmd_train(args, cfg):
    _require(os.path.join(args.data, "manifest.json"), args.shape, args.resume)
    out = args.out or default_out("run")
    _, hist, final = pipeline.train_model(cfg, args.data, args.shape, out, resume=args.resume)
    last = hist[-1] if hist else {}
    print(f"steps {len(hist)} final loss {last.get('loss_total', float('nan')):.5f} -> {final}")


def cmd_eval(args, cfg):
    _require(os.path.join(args.data, "manifest.json"), args.model, args.shape)
    out = args.out or default_out("metrics.json")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    try:
        report = pipeline.eval_model(cfg, args.data, args.model, args.shape, split=args.split)
    except pipeline.EmptyEvaluation as e:
        raise DataError(str(e)) from e
    with open(out, "w") as fh:
        fh.write(report.to_json() + "\n")
    row = dict(report.to_dict()["overall"], run=os.path.splitext(os.path.basename(out))[0])
    print(format_table([row]))
    print(f"gt {report.n_gt} predictions {report.n_pred} -> {out}")


def cmd_reconstruct(args, cfg):
    _require(os.path.join(args.data, "manifest.json"), args.model, args.shape)
    out = args.out or default_out(f"meshes_{args.scene}")
    written = pipeline.reconstruct(cfg, args.data, args.model, args.shape, args.scene, out, args.resolution)
    pipeline.write_json(os.path.join(out, "detections.json"), written)
    print(f"detections {len(written)} meshes {sum(1 for w in written if not w.get('empty'))} -> {out}")


def load_rows(paths, names=None):
    if names is not None and len(names) != len(paths):
        raise ConfigurationError("--names must match the number of metrics files")
    rows = []
    for i, path in enumerate(paths):
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}: not valid JSON ({e})") from e
        if "overall" not in d:
            raise FormatError(f"{path}: missing 'overall' section")
        name = names[i] if names else os.path.splitext(os.path.basename(path))[0]
        row = {"run": name}
        row.update(d["overall"])
        row["n_gt"], row["n_pred"] = d.get("n_gt"), d.get("n_pred")
        rows.append(row)
    return rows


def cmd_report(args, cfg):
    _require(*args.metrics, *args.loss)
    from . import plotting
    rows = load_rows(args.metrics, args.names)
    out = args.out or default_out("report")
    os.makedirs(out, exist_ok=True)
    extra = sorted({k for r in rows for k in r} - {"run"} - {k for k, _ in TABLE_COLUMNS})
    fields = ["run"] + [k for k, _ in TABLE_COLUMNS] + extra
    with open(os.path.join(out, "report.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in fields})
    table = format_table(rows)
    with open(os.path.join(out, "report.md"), "w") as fh:
        fh.write(table + "\n")
    plotting.precision_bars(rows, [k for k, _ in TABLE_COLUMNS if k != "chamfer_x100"],
                            os.path.join(out, "precision.png"))
    plotting.chamfer_bars(rows, os.path.join(out, "chamfer.png"))
    if args.loss:
        curves = {}
        for path in args.loss:
            with open(path) as fh:
                curves[os.path.basename(os.path.dirname(os.path.abspath(path))) or path] = list(csv.DictReader(fh))
        plotting.loss_curves(curves, os.path.join(out, "loss.png"))
    print(table)
    print(f"runs {len(rows)} -> {out}")


COMMANDS = {"gen-data": cmd_gen_data, "train-sdf": cmd_train_sdf, "train": cmd_train, "eval": cmd_eval,
            "reconstruct": cmd_reconstruct, "report": cmd_report}


def _fail(kind, code, exc):
    msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
    print(json.dumps({"error": kind, "code": code, "message": msg}), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise ConfigurationError("--threads must be >= 1")
        cfg = pipeline.resolve_config(args.preset, args.config, args.overrides, args.seed)
        try:
            pipeline.scene_config(cfg)
            pipeline.train_config(cfg)
            pipeline.symmetry_map(cfg)
        except ConfigurationError:
            raise
        except ValueError as e:
            raise ConfigurationError(str(e)) from e
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](args, cfg)
    except ConfigurationError as e:
        return _fail("config", EXIT_CONFIG, e)
    except json.JSONDecodeError as e:
        return _fail("config", EXIT_CONFIG, e)
    except (DataError, FormatError, CrowdingError, FileNotFoundError, KeyError) as e:
        return _fail("data", EXIT_DATA, e)
    except (NumericError, TrainingError, FloatingPointError) as e:
        return _fail("numeric", EXIT_NUMERIC, e)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
