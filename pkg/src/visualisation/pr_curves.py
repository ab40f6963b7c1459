"""
Visualisation Script — Precision-Recall Curves

Per-class precision-recall curves of a trained detector on one split of the
synthetic benchmark, either plotted with matplotlib or written as a
gnuplot-readable data file (one block per class, blocks separated by two blank
lines so `plot 'file' index i` selects class i).
"""

import argparse
from pathlib import Path

import matplotlib.pyplot as plt

from src.analysis.detection_metrics import EvalReport, evaluate_map
from src.data.dataset_io import load_split
from src.data.preprocessing import CLASS_NAMES, DOMAIN_NAMES, class_colors
from src.training.trainer import load_trained_model


def write_gnuplot(report: EvalReport, path: Path | str) -> Path:
    """Write recall/precision pairs per class."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks = []
    for name, (recall, precision) in report.pr_curves.items():
        lines = [f"# class {name} AP {report.per_class_ap[name]:.6f}", "# recall precision"]
        lines += [f"{r:.8g} {p:.8g}" for r, p in zip(recall, precision)]
        blocks.append("\n".join(lines))
    path.write_text("\n\n\n".join(blocks) + "\n", encoding="utf-8")
    return path


def plot_pr_curves(report: EvalReport, title: str = "", save: bool = False,
                   output_path: Path | str = Path("results") / "pr_curves.png") -> Path | None:
    """
    Plot one precision-recall curve per class.

    Parameters
    ----------
    report : EvalReport
        Must carry `pr_curves` (as returned by `evaluate_map`).
    title : str, optional
        Figure title.
    save : bool, optional
        Whether to save the figure as png instead of showing it. Default is False.
    output_path : path, optional
        Destination when saving.
    """
    plt.figure(figsize=(7, 6))
    plt.rc("font", family="serif")
    plt.rcParams.update({"font.size": 14})

    for class_id, name in enumerate(CLASS_NAMES):
        if name not in report.pr_curves:
            continue
        recall, precision = report.pr_curves[name]
        plt.step(recall, precision, where="post", color=class_colors[class_id], linewidth=2.5,
                 label=f"{name} (AP {report.per_class_ap[name]:.3f})")

    ax = plt.gca()
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower left", fancybox=False, shadow=False, fontsize=12)
    ax.set_facecolor("#d9e9f9")
    ax.grid(color="white", linestyle="-", linewidth=1)
    ax.set_title(title or f"Precision-recall at IoU {report.iou_threshold:g} (mAP {report.map:.3f})")
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")

    plt.tight_layout()
    if save:
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        plt.savefig(output_path, dpi=300)
        plt.close()
        print(f"✅ Plot saved to: {output_path.resolve()}")
        return output_path
    plt.show()
    return None


def main():
    parser = argparse.ArgumentParser(description="Precision-recall curves of a trained detector.")
    parser.add_argument("--checkpoint", required=True, help="Checkpoint written by training")
    parser.add_argument("--data", required=True, help="Dataset root directory")
    parser.add_argument("--domain", choices=sorted(DOMAIN_NAMES.values()), default="target",
                        help="Domain to evaluate (default: target)")
    parser.add_argument("--split", choices=["train", "val"], default="val", help="Split (default: val)")
    parser.add_argument("--gnuplot", default=None, help="Also write the curves as a gnuplot data file")
    parser.add_argument("--save", action="store_true", help="Save figure as png")
    args = parser.parse_args()

    domain = {v: k for k, v in DOMAIN_NAMES.items()}[args.domain]
    model, _, _ = load_trained_model(args.checkpoint)
    report = evaluate_map(model.detector, load_split(args.data, domain, args.split))
    if args.gnuplot:
        print(f"✅ Curves written to: {write_gnuplot(report, args.gnuplot).resolve()}")
    plot_pr_curves(report, title=f"{args.domain} {args.split}: mAP@0.5 = {report.map:.3f}", save=args.save,
                   output_path=Path("results") / f"pr_curves_{args.domain}_{args.split}.png")


if __name__ == "__main__":
    main()
