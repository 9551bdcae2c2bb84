"""PNG images, run configs, record CSVs and metrics files."""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import filters
from .optimize import RECORD_FIELDS, RunRecord


class ImageIOError(ValueError):
    """Unreadable or unsupported image file; the message carries the path."""


_MODES = {"L": 1, "RGB": 3}


def load_image(path) -> np.ndarray:
    """8-bit grey or RGB PNG as a (C, H, W) float array in [0, 1].

    Palette and alpha images are converted (alpha dropped); 16-bit and
    float images are rejected.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I", "I;16", "I;16B", "I;16L", "F"):
                raise ImageIOError(f"unsupported bit depth ({mode}) in {path}")
            if mode in ("LA", "1"):
                im = im.convert("L")
            elif mode not in _MODES:
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except ImageIOError:
        raise
    except Exception as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    return arr[None] if arr.ndim == 2 else np.moveaxis(arr, -1, 0).copy()


def load_mask(path) -> np.ndarray:
    """Binary (H, W) mask: 1 where the grey level exceeds 127."""
    img = load_image(path)
    grey = img[0] if img.shape[0] == 1 else img.mean(axis=0)
    return (np.rint(grey * 255.0) > 127).astype(np.float64)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    """Write a (C, H, W) or (H, W) array in [0, 1] as an 8-bit PNG (C = 1 or 3)."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[0] not in (1, 3):
            raise ImageIOError(f"cannot save {arr.shape[0]}-channel image to {path}")
        arr = arr[0] if arr.shape[0] == 1 else np.moveaxis(arr, 0, -1)
    elif arr.ndim != 2:
        raise ImageIOError(f"cannot save array of shape {arr.shape} to {path}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(arr)).save(path, format="PNG")


# ---------------------------------------------------------------- records and metrics

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_record(record: RunRecord, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_FIELDS)
        for row in record.rows:
            w.writerow([_fmt(row.get(k, "")) for k in RECORD_FIELDS])


def read_record(path) -> list[dict]:
    """Rows of a record CSV with numeric fields parsed (empty cells become None)."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if v == "":
                    parsed[k] = None
                elif k in ("phase", "step"):
                    parsed[k] = v
                else:
                    parsed[k] = int(v) if k in ("iteration", "restart") else float(v)
            out.append(parsed)
    return out


def write_rows(rows, columns, path) -> None:
    """CSV of dataclass instances or dicts restricted to ``columns``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            d = dataclasses.asdict(r) if dataclasses.is_dataclass(r) else r
            w.writerow([_fmt(d[c]) for c in columns])


DIRECTIONS = {"mse": "↓", "psnr": "↑", "tv": "↓", "wall_clock_s": "↓"}


def compute_metrics(result: np.ndarray, ground_truth: np.ndarray | None = None,
                    wall_clock: float | None = None) -> dict:
    """mse/psnr against ``ground_truth`` when given, plus tv and wall-clock."""
    out = {}
    if ground_truth is not None:
        if np.shape(result) != np.shape(ground_truth):
            raise ValueError(f"result {np.shape(result)} and ground truth "
                             f"{np.shape(ground_truth)} differ in shape")
        out["mse"] = filters.mse(result, ground_truth)
        out["psnr"] = filters.psnr(result, ground_truth)
    out["tv"] = filters.total_variation(result)
    if wall_clock is not None:
        out["wall_clock_s"] = float(wall_clock)
    out["better"] = {k: DIRECTIONS[k] for k in out if k in DIRECTIONS}
    return out


def report_metrics(result: np.ndarray, ground_truth: np.ndarray | None = None,
                   wall_clock: float | None = None, path=None, extra: dict | None = None) -> dict:
    """Compute metrics and, if ``path`` is given, write them as JSON."""
    m = compute_metrics(result, ground_truth, wall_clock)
    if extra:
        m.update(extra)
    if path is not None:
        write_json(m, path)
    return m


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


# ---------------------------------------------------------------- configs

class ConfigError(ValueError):
    pass


def config_from_dict(cls, data: dict):
    """Instantiate dataclass ``cls`` from ``data``, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"config must be a JSON object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys for {cls.__name__}: {', '.join(unknown)}")
    values = dict(data)
    for f in fields(cls):
        if f.name in values and isinstance(values[f.name], list):
            values[f.name] = tuple(values[f.name])
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(cls, path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return config_from_dict(cls, data)


def save_config(cfg, path) -> None:
    write_json(dataclasses.asdict(cfg), path)


@dataclass
class RunConfig:
    """Everything needed to rerun one restoration job.

    Paths are stored as given; ``None`` means "not used by this task".
    """

    task: str = "denoise"
    source: str | None = None
    clean: str | None = None
    mask: str | None = None
    flash: str | None = None
    out: str = "out"
    beta: float = 0.1
    gamma: float | None = None
    rho: float | None = None
    noise_sigma: float = 0.02
    sr_factor: int | None = None
    iters: int = 400
    seed: int = 0
    norm: str = "l1"
    reg_groups: tuple[str, ...] = ("upper",)
    lambda_tv: float = 0.05
    n_blocks: int = 2
    channels: int = 32
    small_convs: int = 3
    small_channels: int = 16
    upsample_mode: str = "bilinear"
    lr: float = 0.01
    lr_y: float | None = None
    xi: float = 1e-4
    b: float = 0.5
    memory: int = 10
    adaptive_gamma: bool = True
    snapshot_every: int = 200

    def __post_init__(self):
        if self.iters < 1:
            raise ConfigError("iters must be >= 1")
        if self.snapshot_every < 0:
            raise ConfigError("snapshot_every must be >= 0")
