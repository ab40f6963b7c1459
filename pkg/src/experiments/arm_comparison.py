"""
Experiment Script — Arm Comparison

Trains the three arms on the same synthetic benchmark over several seeds:
- source_only: detection loss on labelled source scenes
- da_cnn: plus per-pixel alignment of the last backbone map
- sfa: plus sequence alignment and bipartite matching consistency

and reports, per arm, the median target-domain mAP@0.5 and the median proxy
A-distance of the last encoder layer (per-image mean-pooled tokens). A lower
distance means source and target sequences are harder to tell apart.

Usage:
    python -m src.experiments.arm_comparison --data data/fog --seeds 0,1,2 --save
"""

import argparse
import copy
import logging
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from src.analysis.domain_divergence import proxy_a_distance
from src.analysis.feature_dumps import layer_features
from src.config import ExperimentConfig, load_config, write_resolved_config
from src.errors import DivergenceError
from src.training.trainer import ARMS, Datasets, fit, load_datasets

logger = logging.getLogger(__name__)

arm_colors = {"source_only": "#dc3e04", "da_cnn": "#451ddc", "sfa": "#01dc04"}


def encoder_divergence(detector, datasets: Datasets, seed: int = 0) -> float:
    """Proxy A-distance of the last encoder layer on the val splits; NaN if too few scenes."""
    fs = layer_features(detector, datasets.source_val, "encoder", pooled=True)
    ft = layer_features(detector, datasets.target_val, "encoder", pooled=True)
    if not fs or not ft:
        return float("nan")
    last = max(fs)
    try:
        return proxy_a_distance(fs[last][0], ft[last][0], seed=seed)
    except DivergenceError as exc:
        logger.warning("encoder proxy A-distance skipped: %s", exc)
        return float("nan")


def train_and_score(config: ExperimentConfig, datasets: Datasets, output_dir: Path) -> dict:
    """Fit one configuration and collect its final target/source mAP and encoder divergence."""
    write_resolved_config(config, output_dir)
    result = fit(datasets, config, output_dir)
    last = result.state.history[-1] if result.state.history else {}
    return {
        "arm": config.train.arm,
        "seed": config.seed,
        "target_mAP50": last.get("target_mAP50", float("nan")),
        "source_mAP50": last.get("source_mAP50", float("nan")),
        "best_target_mAP50": result.state.best_metric,
        "enc_pad": encoder_divergence(result.model.detector, datasets, seed=config.seed),
    }


def run_all_arms(base: ExperimentConfig, datasets: Datasets, seeds: list[int], output_root: Path | str,
                 arms: tuple[str, ...] = ARMS) -> pd.DataFrame:
    """
    Train every arm for every seed.

    Parameters
    ----------
    base : ExperimentConfig
        Shared settings; arm and seed are replaced per run.
    datasets : Datasets
    seeds : list of int
    output_root : path
        Each run writes into `<output_root>/<arm>/seed_<seed>`.

    Returns
    -------
    pd.DataFrame
        One row per (arm, seed).
    """
    rows = []
    for arm in arms:
        for seed in seeds:
            config = copy.deepcopy(base)
            config.train.arm, config.train.seed = arm, seed
            config.validate()
            run_dir = Path(output_root) / arm / f"seed_{seed}"
            logger.info("arm %s seed %d -> %s", arm, seed, run_dir)
            rows.append(train_and_score(config, datasets, run_dir))
    return pd.DataFrame(rows)


def summarise(runs: pd.DataFrame, by: str = "arm") -> pd.DataFrame:
    """Median over seeds."""
    return runs.groupby(by, sort=False)[["target_mAP50", "source_mAP50", "enc_pad"]].median().reset_index()


def plot_arm_comparison(summary: pd.DataFrame, save: bool = False,
                        output_path: Path | str = Path("results") / "arm_comparison.png") -> Path | None:
    """
    Bar chart of median target mAP and encoder proxy A-distance per arm.

    Parameters
    ----------
    summary : pd.DataFrame
        Output of `summarise`.
    save : bool, optional
        Whether to save the figure. Default is False.
    """
    plt.rc("font", family="serif")
    plt.rcParams.update({"font.size": 16})
    fig, axs = plt.subplots(1, 2, figsize=(12, 5))
    x = np.arange(len(summary))
    colors = [arm_colors.get(arm, "#583419") for arm in summary["arm"]]

    for ax, column, label in zip(axs, ["target_mAP50", "enc_pad"],
                                 ["Target mAP@0.5", "Encoder proxy A-distance"]):
        ax.bar(x, summary[column].to_numpy(), color=colors, width=0.6, zorder=2)
        ax.set_xticks(x)
        ax.set_xticklabels(summary["arm"], rotation=15)
        ax.set_facecolor("#d9e9f9")
        ax.grid(color="white", linestyle="-", linewidth=1, axis="y", zorder=0)
        ax.set_ylabel(label)
    axs[1].set_ylim(0, 2)

    fig.tight_layout()
    if save:
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(output_path, dpi=300)
        plt.close(fig)
        print(f"✅ Plot saved to: {output_path}")
        return output_path
    plt.show()
    return None


def main():
    parser = argparse.ArgumentParser(description="Compare source_only, da_cnn and sfa over several seeds.")
    parser.add_argument("--config", default=None, help="Base TOML/JSON config")
    parser.add_argument("--data", required=True, help="Dataset root written by gen-data")
    parser.add_argument("--seeds", default="0,1,2", help="Comma-separated seeds (default: 0,1,2)")
    parser.add_argument("--epochs", type=int, default=None, help="Override train.epochs")
    parser.add_argument("--out", default="runs/arm_comparison", help="Root of the run directories")
    parser.add_argument("--save", action="store_true", help="Save the figure to png.")
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    base = load_config(args.config)
    if args.epochs is not None:
        base.train.epochs = args.epochs
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]

    runs = run_all_arms(base, load_datasets(args.data), seeds, args.out)
    summary = summarise(runs)
    out = Path(args.out)
    runs.to_csv(out / "runs.csv", index=False, float_format="%.6g")
    summary.to_csv(out / "summary.csv", index=False, float_format="%.6g")
    print(f"📊 Median over seeds {seeds}:\n{summary.to_string(index=False)}")
    plot_arm_comparison(summary, save=args.save)


__all__ = [
    "encoder_divergence",
    "train_and_score",
    "run_all_arms",
    "summarise",
    "plot_arm_comparison",
]


if __name__ == "__main__":
    main()
