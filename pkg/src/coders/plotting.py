"""Figures for the ``report`` command.  Agg backend only; no display needed."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLUMN_LABELS = {
    "iou25": "3D$_{25}$", "iou50": "3D$_{50}$", "iou75": "3D$_{75}$",
    "deg5cm2": "5°2cm", "deg5cm5": "5°5cm", "deg10cm5": "10°5cm", "deg10cm10": "10°10cm",
    "chamfer_x100": "CD×100",
}


def precision_bars(rows, keys, path):
    """Grouped bars of the precision columns, one group per metric and one bar per run."""
    names = [r["run"] for r in rows]
    x = np.arange(len(keys))
    width = 0.8 / max(len(rows), 1)
    fig, ax = plt.subplots(figsize=(1.1 * len(keys) + 2, 3.6))
    for i, r in enumerate(rows):
        vals = [np.nan if r.get(k) is None else r[k] for k in keys]
        ax.bar(x + (i - (len(rows) - 1) / 2) * width, vals, width, label=names[i])
    ax.set_xticks(x)
    ax.set_xticklabels([COLUMN_LABELS.get(k, k) for k in keys])
    ax.set_ylim(0, 1)
    ax.set_ylabel("precision")
    if len(rows) > 1:
        ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def chamfer_bars(rows, path):
    vals = [r.get("chamfer_x100") for r in rows]
    if all(v is None for v in vals):
        return False
    fig, ax = plt.subplots(figsize=(0.6 * len(rows) + 2.5, 3.2))
    ax.bar(range(len(rows)), [np.nan if v is None else v for v in vals], color="tab:gray")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([r["run"] for r in rows], rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("CD×100")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return True


def loss_curves(curves, path):
    """``curves``: mapping run name -> list of loss.csv rows (dicts of strings)."""
    fig, axes = plt.subplots(1, 3, figsize=(10, 3), sharex=True)
    for name, rows in curves.items():
        step = np.array([int(r["step"]) for r in rows])
        for ax, key in zip(axes, ("loss_total", "loss_cls", "loss_pose")):
            ax.plot(step, [float(r[key]) for r in rows], lw=0.8, label=name)
            ax.set_title(key, fontsize=9)
            ax.set_yscale("log")
    axes[0].set_xlabel("step")
    if len(curves) > 1:
        axes[-1].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
