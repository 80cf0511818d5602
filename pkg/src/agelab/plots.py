"""Report figures written next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import encoding as enc  # noqa: E402

FIGSIZE = (6.4, 4.0)


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_train_log(tlog, path):
    epochs = [e.epoch for e in tlog.entries]
    fig, (ax_loss, ax_metric) = plt.subplots(1, 2, figsize=(9.6, 3.8))
    ax_loss.plot(epochs, [e.train_loss for e in tlog.entries], label="train")
    ax_loss.plot(epochs, [e.val_loss for e in tlog.entries], label="validation")
    if tlog.best_epoch is not None:
        ax_loss.axvline(tlog.best_epoch, color="0.6", ls="--", lw=1, label="best")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(frameon=False)
    ax_metric.plot(epochs, [e.val_metric for e in tlog.entries], color="C2")
    ax_metric.set_xlabel("epoch")
    ax_metric.set_ylabel(f"validation {tlog.metric_name}")
    # serial chunks share one epoch axis; mark where each new chunk starts
    for prev, cur in zip(tlog.entries, tlog.entries[1:]):
        if cur.chunk != prev.chunk:
            for ax in (ax_loss, ax_metric):
                ax.axvline(cur.epoch - 0.5, color="0.85", lw=0.8)
    return _finish(fig, path)


def plot_sweep(rows, axis, path, head):
    ok = [r for r in rows if not r.error]
    labels = [r.value for r in ok]
    x = np.arange(len(ok))
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(x, [r.best_metric for r in ok], "o-", label="best")
    ax.plot(x, [r.final_metric for r in ok], "s--", label="final")
    if head == "age":
        ax.plot(x, [r.best_argmax for r in ok], "^:", label="best (argmax)")
    ax.set_xticks(x, labels)
    ax.set_xlabel(axis)
    ax.set_ylabel("accuracy" if head == "gender" else "MAE (years)")
    ax.legend(frameon=False)
    return _finish(fig, path)


def plot_encodings(rows, path):
    """``rows`` as produced by ``encoding.distribution_rows``."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for row in rows:
        ax.plot(enc.AGES, row[1:], label=str(row[0]))
    ax.set_xlabel("age")
    ax.set_ylabel("probability")
    if len(rows) <= 10:
        ax.legend(title="label", frameon=False)
    return _finish(fig, path)


def plot_hierarchy(report, path):
    names = ["hierarchy", "hierarchy (male)", "hierarchy (female)"]
    values = [report["hierarchy_mae"], report["hierarchy_mae_male"], report["hierarchy_mae_female"]]
    if "single_mae" in report:
        names.append("single model")
        values.append(report["single_mae"])
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.bar(names, values, color=["C0", "C0", "C0", "C1"][:len(values)])
    ax.set_ylabel("MAE (years)")
    ax.tick_params(axis="x", labelrotation=15)
    return _finish(fig, path)
