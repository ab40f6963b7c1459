"""
Feature Distribution Dumps

Extracts backbone, encoder or decoder features of scenes from both domains:
- dump_features: one CSV row per token (stage, layer, domain, scene, token, f0..f{C-1})
  plus a whitespace-separated 2-D PCA projection per layer for gnuplot/matplotlib
- layer_features: per-layer arrays, optionally mean-pooled to one vector per image
- pca_project: principal-component projection via SVD

Features are taken without domain queries, so they depend on the image alone.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from src.autodiff.tensor import Tensor, no_grad
from src.data.preprocessing import iterate_batches
from src.data.synthetic_scenes import Scene
from src.errors import ConfigError
from src.models.detection_transformer import DetectionTransformer

logger = logging.getLogger(__name__)

STAGES = ("backbone", "encoder", "decoder")


def _batch_features(model: DetectionTransformer, images: np.ndarray, stage: str) -> dict[int, np.ndarray]:
    """layer -> (B, tokens, C) array for one image batch."""
    out = model(Tensor(images))
    if stage == "backbone":
        maps = {}
        for level, fmap in enumerate(out.features):
            b, c, h, w = fmap.shape
            maps[level] = fmap.data.reshape(b, c, h * w).transpose(0, 2, 1)
        return maps
    states = out.encoder_states if stage == "encoder" else out.decoder_states
    return {state.layer_index: state.content.data for state in states}


def layer_features(model: DetectionTransformer, scenes: Sequence[Scene], stage: str, pooled: bool = False,
                   batch_size: int = 16) -> dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """
    Features of every layer of `stage` for scenes of a single domain.

    Returns
    -------
    dict
        layer -> (features, domains, scene_index). Features are (n * tokens, C),
        or (n, C) when `pooled` averages each image's tokens.
    """
    if stage not in STAGES:
        raise ConfigError(f"stage must be one of {STAGES}, got {stage!r}")
    collected: dict[int, list] = {}
    offset = 0
    with no_grad():
        for batch in iterate_batches(scenes, batch_size):
            for layer, feats in _batch_features(model, batch.images, stage).items():
                b, n, _ = feats.shape
                if pooled:
                    feats, tokens = feats.mean(axis=1, keepdims=True), 1
                else:
                    tokens = n
                scene_idx = np.repeat(np.arange(offset, offset + b), tokens)
                domains = np.full(b * tokens, batch.domain)
                collected.setdefault(layer, []).append((feats.reshape(b * tokens, -1), domains, scene_idx))
            offset += len(batch)
    return {
        layer: tuple(np.concatenate([part[k] for part in parts]) for k in range(3))
        for layer, parts in collected.items()
    }


def pca_project(features: np.ndarray, n_components: int = 2) -> np.ndarray:
    """Project centred rows onto the leading right-singular vectors."""
    x = np.asarray(features, dtype=np.float64)
    centred = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    projected = centred @ vt[:n_components].T
    if projected.shape[1] < n_components:
        projected = np.pad(projected, ((0, 0), (0, n_components - projected.shape[1])))
    return projected


def dump_features(model: DetectionTransformer, scenes: Sequence[Scene], stage: str,
                  out: Path | str | None = None, batch_size: int = 16) -> pd.DataFrame:
    """
    Token features of `scenes` at every layer of `stage`.

    Scenes of both domains are processed in their own batches, so the domain
    column follows each scene.

    Parameters
    ----------
    out : path, optional
        CSV destination; the PCA projection goes next to it as `<stem>.pca.dat`.

    Returns
    -------
    pd.DataFrame
    """
    frames = []
    by_domain: dict[int, list[Scene]] = {}
    for scene in scenes:
        by_domain.setdefault(scene.domain, []).append(scene)
    scene_offset = 0
    for domain in sorted(by_domain):
        group = by_domain[domain]
        for layer, (feats, domains, scene_idx) in layer_features(model, group, stage,
                                                                   batch_size=batch_size).items():
            counts = np.bincount(scene_idx)
            token = np.concatenate([np.arange(c) for c in counts])
            frame = pd.DataFrame(feats, columns=[f"f{i}" for i in range(feats.shape[1])])
            frame.insert(0, "token", token)
            frame.insert(0, "scene", scene_idx + scene_offset)
            frame.insert(0, "domain", domains)
            frame.insert(0, "layer", layer)
            frame.insert(0, "stage", stage)
            frames.append(frame)
        scene_offset += len(group)
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
    table = table.sort_values(["layer", "domain", "scene", "token"], kind="stable").reset_index(drop=True) \
        if len(table) else table

    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(out, index=False)
        write_pca(table, out.with_suffix(".pca.dat"))
        logger.info("wrote %d %s feature rows to %s", len(table), stage, out)
    return table


def pca_table(table: pd.DataFrame) -> pd.DataFrame:
    """Per-layer 2-D PCA of a feature table: columns layer, domain, pc1, pc2."""
    feature_cols = [c for c in table.columns if c.startswith("f") and c[1:].isdigit()]
    parts = []
    for layer, group in table.groupby("layer", sort=True):
        projected = pca_project(group[feature_cols].to_numpy())
        parts.append(pd.DataFrame({"layer": layer, "domain": group["domain"].to_numpy(),
                                   "pc1": projected[:, 0], "pc2": projected[:, 1]}))
    return pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=["layer", "domain", "pc1", "pc2"])


def write_pca(table: pd.DataFrame, path: Path | str) -> Path:
    """Gnuplot-readable PCA file: a '#' header line, then space-separated rows."""
    path = Path(path)
    projection = pca_table(table)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# layer domain pc1 pc2\n")
        projection.to_csv(fh, sep=" ", header=False, index=False, float_format="%.8g")
    return path


__all__ = ["STAGES", "layer_features", "pca_project", "dump_features", "pca_table", "write_pca"]
