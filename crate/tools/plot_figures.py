"""Render figures from the CSVs the `ul2prune` CLI writes.

Usage: python tools/plot_figures.py RUN_DIR [--sweeps SWEEP_DIR] [--out FIG_DIR]

RUN_DIR is a `ul2prune pipeline` output directory. SWEEP_DIR holds
sweep_layer.csv, sweep_neural.csv and sweep_vocab.csv from `ul2prune prune sweep`.
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd

NOISERS = ["R1", "R2", "S", "X1", "X2", "X3", "X4"]


def stage_dirs(run: Path):
    names = ["base"] + [f"stage{i}" for i in range(1, 6)]
    return [(n, run / n) for n in names if (run / n).is_dir()]


def plot_trajectories(run: Path, out: Path):
    for name, d in stage_dirs(run):
        path = d / "trajectory.csv"
        if not path.exists():
            continue
        df = pd.read_csv(path)
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.stackplot(df["step"], *[df[f"p_{n}"] for n in NOISERS], labels=NOISERS)
        ax.set(xlabel="step", ylabel="noiser probability", title=f"Mixture weights, {name}", ylim=(0, 1))
        ax.legend(loc="upper left", bbox_to_anchor=(1, 1))
        fig.tight_layout()
        fig.savefig(out / f"trajectory_{name}.png", dpi=120)
        plt.close(fig)


def plot_dev_loss(run: Path, out: Path):
    fig, ax = plt.subplots(figsize=(8, 4))
    offset = 0
    for name, d in stage_dirs(run):
        path = d / "eval_log.csv"
        if not path.exists():
            continue
        df = pd.read_csv(path)
        ax.plot(df["step"] + offset, df["dev_loss"], label=name)
        offset += int(df["step"].max())
    ax.set(xlabel="cumulative step", ylabel="dev loss", title="Dev loss across stages")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "dev_loss.png", dpi=120)
    plt.close(fig)


def plot_sweeps(sweeps: Path, out: Path):
    fig, ax = plt.subplots(figsize=(6, 4))
    drawn = False
    for kind in ["layer", "neural"]:
        path = sweeps / f"sweep_{kind}.csv"
        if path.exists():
            df = pd.read_csv(path)
            ax.plot(df["params_pruned"] / (df["params"] + df["params_pruned"]), df["dev_loss"], marker="o", label=kind)
            drawn = True
    if drawn:
        ax.set(xlabel="fraction of parameters pruned", ylabel="dev loss", title="Direct pruning without recovery")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "sweep_direct.png", dpi=120)
    plt.close(fig)

    path = sweeps / "sweep_vocab.csv"
    if path.exists():
        df = pd.read_csv(path)
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(df["k"], df["dev_loss_zh"], marker="o", label="zh")
        ax.plot(df["k"], df["dev_loss_en"], marker="o", label="en")
        ax.invert_xaxis()
        ax.set(xlabel="vocabulary kept", ylabel="dev loss", title="Vocabulary pruning")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "sweep_vocab.png", dpi=120)
        plt.close(fig)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("run", type=Path)
    parser.add_argument("--sweeps", type=Path)
    parser.add_argument("--out", type=Path, default=Path("figures"))
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    plot_trajectories(args.run, args.out)
    plot_dev_loss(args.run, args.out)
    if args.sweeps:
        plot_sweeps(args.sweeps, args.out)


if __name__ == "__main__":
    main()
