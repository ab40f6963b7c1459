"""
On-Disk Dataset Format

Layout written by `write_dataset`:

    <root>/manifest.json
    <root>/{source,target}/{train,val}/img_00000.ppm ...
    <root>/{source,target}/{train,val}/annotations.json

Images are binary 8-bit PPM (P6). Each annotations file is a JSON list with one
entry per image: {"file", "domain", "seed", "objects": [{"class", "cx", "cy", "w", "h"}]}.
The manifest records the base seed, counts, image size and the ShiftConfig, so
a dataset can be regenerated bit-identically.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from src import __version__
from src.data.preprocessing import CLASS_NAMES, DOMAIN_NAMES, IMAGE_SIZE, MAX_OBJECTS, SOURCE, SPLITS, TARGET
from src.data.synthetic_scenes import Scene, ShiftConfig, generate_scene, scene_seed
from src.errors import DatasetFormatError, MatchingError
from src.losses.matching import GroundTruth

logger = logging.getLogger(__name__)

ANNOTATIONS_FILE = "annotations.json"
MANIFEST_FILE = "manifest.json"
IMAGE_PATTERN = "img_{:05d}.ppm"
_WHITESPACE = b" \t\n\r\x0b\x0c"


# === PPM ===

def write_ppm(path: Path, image: np.ndarray) -> None:
    """Quantise a (3, H, W) image in [0, 1] to 8 bits and save it as P6."""
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(np.ascontiguousarray(pixels)).save(path, format="PPM")


def _header_token(data: bytes, pos: int, path: Path) -> tuple[bytes, int, int]:
    """Next whitespace-delimited header token, skipping '#' comments: (token, start, end)."""
    while pos < len(data):
        if data[pos] in _WHITESPACE:
            pos += 1
        elif data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        else:
            break
    start = pos
    while pos < len(data) and data[pos] not in _WHITESPACE and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DatasetFormatError(path, "unexpected end of PPM header", offset=start)
    return data[start:pos], start, pos


def read_ppm(path: Path | str) -> np.ndarray:
    """
    Parse a binary 8-bit PPM.

    Returns
    -------
    np.ndarray
        (3, H, W) float64 in [0, 1].

    Raises
    ------
    DatasetFormatError
        With the byte offset of the offending header token or of the end of a
        truncated pixel payload.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise DatasetFormatError(path, "image file not found") from None

    magic, start, pos = _header_token(data, 0, path)
    if magic != b"P6":
        raise DatasetFormatError(path, f"expected magic 'P6', found {magic[:8]!r}", offset=start)
    values = []
    for label in ("width", "height", "maxval"):
        token, start, pos = _header_token(data, pos, path)
        if not token.isdigit() or int(token) <= 0:
            raise DatasetFormatError(path, f"invalid {label} {token[:16]!r}", offset=start)
        values.append(int(token))
    width, height, maxval = values
    if maxval > 255:
        raise DatasetFormatError(path, f"only 8-bit PPM is supported (maxval {maxval})", offset=start)
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise DatasetFormatError(path, "missing whitespace after PPM header", offset=pos)
    pos += 1

    expected = width * height * 3
    payload = data[pos:pos + expected]
    if len(payload) < expected:
        raise DatasetFormatError(
            path, f"truncated pixel data: {len(payload)} of {expected} bytes", offset=len(data)
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / maxval


# === Annotations ===

def _annotation_entry(scene: Scene, file_name: str) -> dict:
    gt = scene.annotations
    return {
        "file": file_name,
        "domain": scene.domain,
        "seed": scene.seed,
        "objects": [
            {"class": int(c), "cx": float(b[0]), "cy": float(b[1]), "w": float(b[2]), "h": float(b[3])}
            for c, b in zip(gt.classes, gt.boxes)
        ],
    }


def _load_json(path: Path):
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DatasetFormatError(path, "file not found") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(path, exc.msg, offset=exc.pos) from None


def _parse_entry(entry, index: int, path: Path) -> tuple[str, int, int, GroundTruth]:
    try:
        objects = entry["objects"]
        classes = [int(o["class"]) for o in objects]
        boxes = [[float(o[k]) for k in ("cx", "cy", "w", "h")] for o in objects]
        return str(entry["file"]), int(entry["domain"]), int(entry.get("seed", -1)), \
            GroundTruth(np.array(classes, dtype=np.int64), np.array(boxes).reshape(-1, 4))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(path, f"entry {index}: malformed annotation ({exc!s})") from None
    except MatchingError as exc:
        raise DatasetFormatError(path, f"entry {index}: {exc}") from None


# === Splits ===

def split_dir(root: Path | str, domain: int, split: str) -> Path:
    return Path(root) / DOMAIN_NAMES[domain] / split


def write_split(directory: Path | str, scenes: Sequence[Scene]) -> Path:
    """Write the scenes of one split: one PPM per scene plus annotations.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, scene in enumerate(scenes):
        name = IMAGE_PATTERN.format(i)
        write_ppm(directory / name, scene.image)
        entries.append(_annotation_entry(scene, name))
    (directory / ANNOTATIONS_FILE).write_text(json.dumps(entries, indent=1) + "\n", encoding="utf-8")
    return directory


def read_dataset(directory: Path | str) -> Iterator[Scene]:
    """
    Stream the scenes of one split directory.

    An empty annotations list yields nothing. Every listed image must exist.
    """
    directory = Path(directory)
    path = directory / ANNOTATIONS_FILE
    entries = _load_json(path)
    if not isinstance(entries, list):
        raise DatasetFormatError(path, "expected a JSON list of image entries", offset=0)
    for index, entry in enumerate(entries):
        file_name, domain, seed, gt = _parse_entry(entry, index, path)
        image_path = directory / file_name
        if not image_path.is_file():
            raise DatasetFormatError(image_path, f"listed in {path} but missing")
        yield Scene(image=read_ppm(image_path), annotations=gt, domain=domain, seed=seed, name=file_name)


def load_split(root: Path | str, domain: int, split: str) -> list[Scene]:
    return list(read_dataset(split_dir(root, domain, split)))


def write_dataset(root: Path | str, count: int, shift: ShiftConfig, seed: int = 0,
                  val_count: int | None = None, image_size: tuple[int, int] = IMAGE_SIZE,
                  max_objects: int = MAX_OBJECTS, shift_name: str | None = None) -> dict:
    """
    Generate and write the full two-domain dataset.

    Parameters
    ----------
    root : path
        Output directory.
    count : int
        Scenes per domain in the train split.
    shift : ShiftConfig
        Applied to the target domain.
    seed : int
        Base seed; scene i of a split uses the same seed in both domains.
    val_count : int, optional
        Scenes per domain in the val split, default 2 * count // 5.

    Returns
    -------
    dict
        The manifest that was written.
    """
    root = Path(root)
    shift.validate()
    val_count = 2 * count // 5 if val_count is None else val_count
    counts = {"train": count, "val": val_count}

    splits = {}
    for split in SPLITS:
        seeds = [scene_seed(seed, split, i) for i in range(counts[split])]
        for domain in (SOURCE, TARGET):
            scenes = [generate_scene(s, domain, shift, image_size, max_objects) for s in seeds]
            directory = write_split(split_dir(root, domain, split), scenes)
            splits[f"{DOMAIN_NAMES[domain]}/{split}"] = {"count": len(scenes)}
            logger.info("wrote %d %s scenes to %s", len(scenes), DOMAIN_NAMES[domain], directory)

    manifest = {
        "version": __version__,
        "seed": seed,
        "count": count,
        "val_count": val_count,
        "image_size": list(image_size),
        "max_objects": max_objects,
        "classes": list(CLASS_NAMES),
        "shift_preset": shift_name,
        "shift": shift.to_dict(),
        "splits": splits,
    }
    (root / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def read_manifest(root: Path | str) -> dict:
    path = Path(root) / MANIFEST_FILE
    manifest = _load_json(path)
    if not isinstance(manifest, dict):
        raise DatasetFormatError(path, "expected a JSON object", offset=0)
    return manifest


__all__ = [
    "ANNOTATIONS_FILE",
    "MANIFEST_FILE",
    "write_ppm",
    "read_ppm",
    "split_dir",
    "write_split",
    "read_dataset",
    "load_split",
    "write_dataset",
    "read_manifest",
]
