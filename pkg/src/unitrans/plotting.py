"""Training-curve figures rendered from a run's metrics.tsv."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .data import FormatError  # noqa: E402


def read_metrics(path):
    """Parse metrics.tsv into ({task: [(step, loss)]}, [(step, dev_bleu)])."""
    losses, dev = defaultdict(list), []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
        try:
            step, value = int(parts[0]), float(parts[2])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed number") from None
        if parts[1] == "dev_bleu":
            dev.append((step, value))
        else:
            losses[parts[1]].append((step, value))
    return dict(losses), dev


def bin_losses(losses, bin_size):
    """Mean loss per task over consecutive ``bin_size``-step windows, keyed by window end."""
    out = {}
    for task, points in losses.items():
        sums = defaultdict(lambda: [0.0, 0])
        for step, v in points:
            b = ((step - 1) // bin_size + 1) * bin_size
            sums[b][0] += v
            sums[b][1] += 1
        out[task] = [(b, s / n) for b, (s, n) in sorted(sums.items())]
    return out


def render_run_report(run_dir, out_dir=None, bin_size=100):
    """Write loss_curves.tsv, loss_curves.png and (if evaluated) dev_bleu.png; return the paths."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir or run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    losses, dev = read_metrics(run_dir / "metrics.tsv")
    binned = bin_losses(losses, bin_size)
    written = []

    tsv = out_dir / "loss_curves.tsv"
    with open(tsv, "w", encoding="utf-8") as fh:
        fh.write("step\ttask\tmean_loss\n")
        for task in sorted(binned):
            for step, v in binned[task]:
                fh.write(f"{step}\t{task}\t{v:.6f}\n")
    written.append(tsv)

    fig, ax = plt.subplots(figsize=(7, 4))
    for task in sorted(binned):
        xs, ys = zip(*binned[task])
        ax.plot(xs, ys, label=task)
    ax.set_xlabel("step")
    ax.set_ylabel(f"mean loss per {bin_size} steps")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    png = out_dir / "loss_curves.png"
    fig.savefig(png, dpi=100, metadata={"Software": None})
    plt.close(fig)
    written.append(png)

    if dev:
        fig, ax = plt.subplots(figsize=(7, 4))
        xs, ys = zip(*dev)
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel("step")
        ax.set_ylabel("dev Sign2Text BLEU")
        ax.set_ylim(0, 100)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        png = out_dir / "dev_bleu.png"
        fig.savefig(png, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(png)
    return written
