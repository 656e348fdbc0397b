"""Export learned kernels, modulator maps and gating maps as PGM + CSV pairs.

Every map is written twice: a CSV with the raw values (ground truth) and an
8-bit PGM after min-max normalization (see :func:`focalmod.pnm.to_uint8`).
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fmt1
from .backbone import DWConvMixer, FocalMixer, Model
from .exceptions import InputError, UnsupportedError
from .modulation import Aggregator
from .pnm import read_pnm, to_uint8, write_pgm


class ArtifactKind(enum.Enum):
    KERNEL_GRID = "kernels"
    MODULATOR_MAP = "modulator"
    GATING_MAPS = "gating"


@dataclass
class InspectionArtifact:
    kind: ArtifactKind
    payload: list  # raw 2-D maps
    source: str
    files: list


def _write_map(out_dir: Path, stem: str, values: np.ndarray, display: np.ndarray | None = None):
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    try:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in values:
                w.writerow([repr(float(v)) for v in row])
    except OSError as exc:
        raise InputError(f"cannot write {csv_path}: {exc}") from exc
    pgm_path = write_pgm(out_dir / f"{stem}.pgm", to_uint8(values if display is None else display))
    return [pgm_path, csv_path]


def upsample_nearest(values: np.ndarray, H: int, W: int) -> np.ndarray:
    h, w = values.shape
    rows = np.arange(H) * h // H
    cols = np.arange(W) * w // W
    return values[rows][:, cols]


def load_image(path) -> np.ndarray:
    """Read a PPM (P6) or FMT1 image as float64 ``(1, H, W, 3)`` in [0, 1]."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(4)
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    if head == fmt1.MAGIC:
        arr = fmt1.load(path)[0].astype(np.float64)
        if arr.ndim == 3:
            arr = arr[None]
    else:
        raw = read_pnm(path)
        if raw.ndim == 2:
            raw = np.repeat(raw[..., None], 3, axis=2)
        arr = raw[None].astype(np.float64) / 255.0
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise InputError(f"{path}: expected an RGB image, got shape {arr.shape}")
    return arr


def _last_blocks_per_stage(model: Model):
    last = {}
    for i, layer in enumerate(model.layers):
        if hasattr(layer, "mixer"):
            last[model.stage_of[i]] = layer
    return [last[s] for s in sorted(last)]


def export_kernels(model: Model, out_dir) -> InspectionArtifact:
    """Channel-averaged kernel magnitude for each level of the last block per stage."""
    out_dir = Path(out_dir)
    files, maps = [], []
    for block in _last_blocks_per_stage(model):
        mixer = block.mixer
        if isinstance(mixer, FocalMixer) and mixer.cfg.aggregator is not Aggregator.DWCONV:
            raise UnsupportedError("pooling aggregators have no learned kernels")
        s = block.prefix.split(".")[1]
        for lvl in range(mixer.cfg.levels):
            w = model.params[f"{mixer.prefix}hc.{lvl}.weight"]
            grid = np.abs(w).mean(axis=2)
            maps.append(grid)
            files += _write_map(out_dir, f"kernels_stage{s}_level{lvl + 1}", grid)
    return InspectionArtifact(ArtifactKind.KERNEL_GRID, maps, "last block of each stage", files)


def _last_trace(model: Model, image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[None]
    if image.shape[0] != 1:
        raise InputError(f"inspection takes a single image, got batch of {image.shape[0]}")
    block = model.blocks[-1] if model.blocks else None
    if block is None:
        raise UnsupportedError("model has no blocks to inspect")
    if isinstance(block.mixer, DWConvMixer):
        raise UnsupportedError("depth-wise ConvNet variant has no modulator or gates")
    _, traces = model.forward(image, train=False, capture=True)
    name, trace = traces[-1]
    return image, block, name, trace


def export_modulator(model: Model, image, out_dir) -> InspectionArtifact:
    """Channel-mean of the modulator at the last block, raw CSV + upsampled PGM."""
    image, _, name, trace = _last_trace(model, image)
    raw = trace.M[0].mean(axis=-1)
    display = upsample_nearest(raw, image.shape[1], image.shape[2])
    files = _write_map(Path(out_dir), "modulator", raw, display)
    return InspectionArtifact(ArtifactKind.MODULATOR_MAP, [raw], name, files)


def export_gating(model: Model, image, out_dir) -> InspectionArtifact:
    """One raw (unnormalized) gate map per aggregated level, the global level last."""
    _, block, name, trace = _last_trace(model, image)
    if not block.mixer.cfg.use_gating:
        raise UnsupportedError("gating is disabled for this model")
    cfg = block.mixer.cfg
    labels = [f"level{li + 1}" for li in cfg.local_levels] + (["global"] if cfg.use_global_pool else [])
    files, maps = [], []
    for i, label in enumerate(labels):
        g = trace.G[0, :, :, i]
        maps.append(g)
        files += _write_map(Path(out_dir), f"gating_{label}", g)
    return InspectionArtifact(ArtifactKind.GATING_MAPS, maps, name, files)
