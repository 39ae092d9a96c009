"""File formats: 8-bit RGB images, genotype documents, manifests, history logs."""
from __future__ import annotations

import datetime as _dt
import json
import math
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import __version__
from .config import ConfigError
from .data import Sample
from .search_space import Genotype, GenotypeFormatError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def encode(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> uint8 with round-half-up."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def decode(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 255.0


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return decode(np.asarray(im.convert("RGB")))
    except (UnidentifiedImageError, OSError) as exc:
        raise ConfigError(f"cannot read image {path}: {exc}") from exc


def save_image(path, image: np.ndarray):
    image = np.asarray(image)
    mode = "L" if image.ndim == 2 or image.shape[-1] == 1 else "RGB"
    data = encode(image.reshape(image.shape[:2]) if mode == "L" else image)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode=mode).save(path)


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"input directory {d} does not exist or is not a directory")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ConfigError(f"no images found in {d}")
    return files


def load_dataset(directory) -> list[Sample]:
    return [Sample(p.name, load_image(p)) for p in list_images(directory)]


def write_samples(directory, samples: list[Sample]):
    d = Path(directory)
    for s in samples:
        save_image(d / "input" / f"{s.name}.png", s.image)
        if s.reference is not None:
            save_image(d / "reference" / f"{s.name}.png", s.reference)
        if s.illumination is not None:
            save_image(d / "illumination" / f"{s.name}.png", s.illumination)


def write_genotype(path, g: Genotype):
    Path(path).write_text(g.to_text())


def read_genotype(path) -> Genotype:
    try:
        return Genotype.from_text(Path(path).read_text())
    except OSError as exc:
        raise GenotypeFormatError(f"cannot read genotype {path}: {exc}") from exc


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_manifest(directory, command: str, config: dict, seed: int | None,
                   inputs: dict, outputs: dict) -> Path:
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "tool_version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    path = Path(directory) / "manifest.json"
    path.write_text(json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n")
    return path


def read_config_file(path) -> dict:
    """A plain config dict, or a manifest whose ``config`` section is reused."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if "command" in doc and "config" in doc:
        return doc["config"]
    return doc


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(_clean(r), sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
