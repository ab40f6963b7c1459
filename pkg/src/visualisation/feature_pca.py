"""
Visualisation Script — Feature PCA by Domain

Scatter plots of the 2-D PCA projection written by `dump_features`, one panel
per layer, source and target tokens coloured by domain. Well-aligned features
show overlapping clouds; a domain gap shows up as two separated clouds.
"""

import argparse
from pathlib import Path

import matplotlib.pyplot as plt
import pandas as pd

from src.data.preprocessing import DOMAIN_NAMES, domain_colors


def read_pca(path: Path | str) -> pd.DataFrame:
    return pd.read_csv(path, sep=" ", comment="#", header=None, names=["layer", "domain", "pc1", "pc2"])


def plot_feature_pca(projection: pd.DataFrame, stage: str = "", max_points: int = 4000,
                     save: bool = False, output_path: Path | str = Path("results") / "feature_pca.png") -> Path | None:
    """
    Plot each layer's PCA projection coloured by domain.

    Parameters
    ----------
    projection : pd.DataFrame
        Columns layer, domain, pc1, pc2.
    stage : str, optional
        Used in the panel titles.
    max_points : int, optional
        Per-layer, per-domain cap on plotted points (evenly strided). Default is 4000.
    save : bool, optional
        Whether to save the figure as png. Default is False.
    """
    layers = sorted(projection["layer"].unique())
    fig, axs = plt.subplots(1, max(len(layers), 1), figsize=(4.5 * max(len(layers), 1), 4.5), squeeze=False)
    plt.rc("font", family="serif")

    for ax, layer in zip(axs[0], layers):
        group = projection[projection["layer"] == layer]
        for domain, name in DOMAIN_NAMES.items():
            points = group[group["domain"] == domain]
            stride = max(1, len(points) // max_points)
            ax.scatter(points["pc1"].to_numpy()[::stride], points["pc2"].to_numpy()[::stride], s=4, alpha=0.5,
                       color=domain_colors[domain], label=name)
        ax.set_facecolor("#d9e9f9")
        ax.grid(color="white", linestyle="-", linewidth=1)
        ax.set_title(f"{stage} layer {layer}".strip())
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
    axs[0][0].legend(loc="best", fancybox=False, shadow=False, markerscale=3)

    fig.tight_layout()
    if save:
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(output_path, dpi=300)
        plt.close(fig)
        print(f"✅ Plot saved to: {output_path.resolve()}")
        return output_path
    plt.show()
    return None


def main():
    parser = argparse.ArgumentParser(description="PCA scatter of dumped features by domain.")
    parser.add_argument("pca_file", help="A *.pca.dat file written by `diagnose`")
    parser.add_argument("--stage", default="", help="Stage label for the titles")
    parser.add_argument("--save", action="store_true", help="Save figure as png")
    args = parser.parse_args()

    name = Path(args.pca_file).name.split(".")[0]
    plot_feature_pca(read_pca(args.pca_file), stage=args.stage, save=args.save,
                     output_path=Path("results") / f"{name}_pca.png")


if __name__ == "__main__":
    main()
