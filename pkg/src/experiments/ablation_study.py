"""
Experiment Script — Ablation Study

Isolates each component of sequence feature alignment on one benchmark. A row
switches components on by name:
- CNN: per-pixel alignment of the last backbone map
- DQ: domain-query alignment (encoder and decoder)
- TW: token-wise alignment (encoder and decoder)
- BMC: bipartite matching consistency
- HR: hierarchical alignment of every layer instead of the last one

The `sides` table splits DQ and TW into their encoder/decoder halves, without
HR or BMC.

Usage:
    python -m src.experiments.ablation_study --data data/fog --table main --epochs 20
"""

import argparse
import copy
import logging
from pathlib import Path

import pandas as pd

from src.config import ExperimentConfig, load_config
from src.errors import ConfigError
from src.experiments.arm_comparison import train_and_score
from src.training.trainer import AblationFlags, Datasets, load_datasets

logger = logging.getLogger(__name__)

COMPONENTS = ("CNN", "DQ", "TW", "BMC", "HR")
SIDE_COMPONENTS = ("DQ_enc", "DQ_dec", "TW_enc", "TW_dec")

ABLATION_TABLES = {
    "main": [
        (),
        ("CNN",),
        ("DQ",),
        ("TW",),
        ("BMC",),
        ("DQ", "TW"),
        ("DQ", "TW", "HR"),
        ("CNN", "DQ", "TW", "HR"),
        ("DQ", "TW", "BMC", "HR"),
    ],
    "sides": [
        (),
        ("DQ_enc",),
        ("DQ_dec",),
        ("TW_enc",),
        ("TW_dec",),
        ("DQ_enc", "DQ_dec"),
        ("TW_enc", "TW_dec"),
        ("DQ_enc", "TW_enc"),
        ("DQ_dec", "TW_dec"),
    ],
}


def row_config(base: ExperimentConfig, components: tuple[str, ...]) -> ExperimentConfig:
    """
    Configuration of one ablation row.

    No component gives the source-only arm and CNN alone the da_cnn arm;
    everything else is the sfa arm with only the named terms switched on.
    """
    config = copy.deepcopy(base)
    unknown = set(components) - set(COMPONENTS) - set(SIDE_COMPONENTS)
    if unknown:
        raise ConfigError(f"unknown ablation components {sorted(unknown)}")
    if not components:
        config.train.arm = "source_only"
        return config.validate()
    if components == ("CNN",):
        config.train.arm = "da_cnn"
        return config.validate()

    on = set(components)
    config.train.arm = "sfa"
    config.ablation = AblationFlags(
        dqfa_enc="DQ" in on or "DQ_enc" in on,
        dqfa_dec="DQ" in on or "DQ_dec" in on,
        tda_enc="TW" in on or "TW_enc" in on,
        tda_dec="TW" in on or "TW_dec" in on,
        hierarchical="HR" in on,
        bmc="BMC" in on,
        cnn="CNN" in on,
    )
    return config.validate()


def row_label(components: tuple[str, ...]) -> str:
    return "+".join(components) if components else "source"


def run_ablation(base: ExperimentConfig, datasets: Datasets, table: str, output_root: Path | str) -> pd.DataFrame:
    """Train every row of `table`; one result row per ablation row, with a check column per component."""
    names = COMPONENTS if table == "main" else SIDE_COMPONENTS
    rows = []
    for components in ABLATION_TABLES[table]:
        config = row_config(base, components)
        label = row_label(components)
        logger.info("ablation row %s (arm %s)", label, config.train.arm)
        scores = train_and_score(config, datasets, Path(output_root) / table / label.replace("+", "_"))
        rows.append({"row": label, **{name: name in components for name in names}, **scores})
    return pd.DataFrame(rows)


def main():
    parser = argparse.ArgumentParser(description="Ablation of the sequence feature alignment components.")
    parser.add_argument("--config", default=None, help="Base TOML/JSON config")
    parser.add_argument("--data", required=True, help="Dataset root written by gen-data")
    parser.add_argument("--table", choices=sorted(ABLATION_TABLES), default="main", help="Which rows to run")
    parser.add_argument("--epochs", type=int, default=None, help="Override train.epochs")
    parser.add_argument("--seed", type=int, default=None, help="Override the seed")
    parser.add_argument("--out", default="runs/ablation", help="Root of the run directories")
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    base = load_config(args.config)
    if args.epochs is not None:
        base.train.epochs = args.epochs
    if args.seed is not None:
        base.train.seed = args.seed

    results = run_ablation(base, load_datasets(args.data), args.table, args.out)
    output_path = Path(args.out) / f"ablation_{args.table}.csv"
    output_path.parent.mkdir(parents=True, exist_ok=True)
    results.to_csv(output_path, index=False, float_format="%.6g")
    print(f"📊 Ablation ({args.table}):\n{results[['row', 'target_mAP50', 'enc_pad']].to_string(index=False)}")
    print(f"✅ Table saved to: {output_path}")


__all__ = ["COMPONENTS", "SIDE_COMPONENTS", "ABLATION_TABLES", "row_config", "row_label", "run_ablation"]


if __name__ == "__main__":
    main()
