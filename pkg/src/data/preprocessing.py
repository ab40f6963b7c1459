"""
Data Preprocessing Module

Constants and batching helpers shared by generation, training and evaluation:
- Class and domain names, plotting colours by class and by domain
- Stacking scenes into (B, 3, H, W) image batches with per-image ground truth
- Shuffled mini-batch iteration and equal-sized source/target batch pairs
- A background prefetch thread feeding batches through a bounded queue

Everything that needs the class list or the domain labels imports it from here.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Iterator, Sequence

import numpy as np

from src.errors import TrainingError
from src.losses.matching import GroundTruth

if TYPE_CHECKING:
    from src.data.synthetic_scenes import Scene


# === Classes and Domains ===

CLASS_NAMES = ("circle", "square", "triangle")
NUM_CLASSES = len(CLASS_NAMES)

SOURCE, TARGET = 0, 1
DOMAIN_NAMES = {SOURCE: "source", TARGET: "target"}
SPLITS = ("train", "val")

IMAGE_SIZE = (64, 64)
MAX_OBJECTS = 5


# === Colours ===

class_colors = ["#dc3e04", "#2ca02c", "#9467bd"]
domain_colors = {SOURCE: "#1f77b4", TARGET: "#7f7f7f"}


# === Batching ===

@dataclass
class Batch:
    """
    Stacked scenes of one domain.

    images : (B, 3, H, W) float64 in [0, 1]
    targets : one GroundTruth per image (kept for target batches, unused in training)
    domain : 0 source, 1 target
    """
    images: np.ndarray
    targets: list[GroundTruth]
    domain: int

    def __len__(self) -> int:
        return len(self.targets)


def scenes_to_batch(scenes: Sequence["Scene"]) -> Batch:
    if not scenes:
        raise TrainingError("cannot build a batch from zero scenes")
    domains = {s.domain for s in scenes}
    if len(domains) != 1:
        raise TrainingError(f"batch mixes domains {sorted(domains)}")
    images = np.stack([s.image for s in scenes]).astype(np.float64)
    return Batch(images=images, targets=[s.annotations for s in scenes], domain=domains.pop())


def iterate_batches(scenes: Sequence["Scene"], batch_size: int,
                    rng: np.random.Generator | None = None) -> Iterator[Batch]:
    """Batches in file order, or shuffled when `rng` is given; the last batch may be short."""
    order = rng.permutation(len(scenes)) if rng is not None else np.arange(len(scenes))
    for start in range(0, len(order), batch_size):
        yield scenes_to_batch([scenes[i] for i in order[start:start + batch_size]])


def paired_batches(source: Sequence["Scene"], target: Sequence["Scene"], batch_size: int,
                   rng: np.random.Generator) -> Iterator[tuple[Batch, Batch]]:
    """
    One epoch of equal-sized (source, target) batch pairs.

    The epoch length is set by the source split. Target scenes are drawn from
    fresh permutations, cycling when the target split is the smaller one, so an
    epoch depends only on the generator state at its start.
    """
    if not source or not target:
        raise TrainingError("both source and target splits need at least one scene")
    source_order = rng.permutation(len(source))
    cycles = -(-len(source) // len(target))
    target_order = np.concatenate([rng.permutation(len(target)) for _ in range(cycles)])
    for start in range(0, len(source_order), batch_size):
        idx = slice(start, start + batch_size)
        yield (
            scenes_to_batch([source[i] for i in source_order[idx]]),
            scenes_to_batch([target[i] for i in target_order[idx]]),
        )


# === Prefetch ===

_DONE = object()


def prefetch(batches: Iterable, depth: int = 2) -> Iterator:
    """
    Produce `batches` on a daemon worker thread, at most `depth` items ahead.

    Order is preserved. An exception raised by the producer is re-raised in
    the consumer at the position where it occurred.
    """
    if depth < 1:
        yield from batches
        return
    buffer: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def worker():
        try:
            for item in batches:
                if stop.is_set():
                    return
                buffer.put(item)
        except BaseException as exc:
            buffer.put(exc)
            return
        buffer.put(_DONE)

    thread = threading.Thread(target=worker, name="batch-prefetch", daemon=True)
    thread.start()
    try:
        while True:
            item = buffer.get()
            if item is _DONE:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while thread.is_alive():
            try:
                buffer.get_nowait()
            except queue.Empty:
                thread.join(timeout=0.05)


__all__ = [
    "CLASS_NAMES",
    "NUM_CLASSES",
    "SOURCE",
    "TARGET",
    "DOMAIN_NAMES",
    "SPLITS",
    "IMAGE_SIZE",
    "MAX_OBJECTS",
    "class_colors",
    "domain_colors",
    "Batch",
    "scenes_to_batch",
    "iterate_batches",
    "paired_batches",
    "prefetch",
]
