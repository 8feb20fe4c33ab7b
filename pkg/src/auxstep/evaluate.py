"""Depth evaluation: absolute relative error, error maps, reports, rasters.

The per-image metric is mean(|pred - gt| / gt) over valid pixels; the
dataset score is the mean of per-image scores in manifest order. Sums
accumulate sequentially in row-major order so a given input yields one
exact float regardless of array-library reduction strategy.

Error maps hold the per-pixel relative error at valid pixels and NaN
elsewhere; the validity pattern is part of the value and must match before
two maps are differenced.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_io import Dataset, valid_depth_mask


def sequential_mean(values: np.ndarray) -> float:
    """Left-to-right accumulation; order is part of the contract."""
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise ValueError("sequential_mean: empty input")
    total = 0.0
    for v in flat:
        total += float(v)
    return total / flat.size


def _checked_mask(gt: np.ndarray, mask: np.ndarray | None, who: str) -> np.ndarray:
    if mask is None:
        mask = valid_depth_mask(gt)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape:
            raise ValueError(f"{who}: mask shape {mask.shape} vs {gt.shape}")
        bad = mask & ~(np.isfinite(gt) & (gt > 0))
        if bad.any():
            raise ValueError(f"{who}: ground truth not positive at {int(bad.sum())} valid pixels")
    if not mask.any():
        raise ValueError(f"{who}: no valid pixels")
    return mask


def absrel_image(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean |pred - gt| / gt over valid pixels of one image, row-major order."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"absrel_image: shape mismatch {pred.shape} vs {gt.shape}")
    mask = _checked_mask(gt, mask, "absrel_image")
    flat = mask.reshape(-1)
    ratio = np.abs(pred - gt).reshape(-1)[flat] / gt.reshape(-1)[flat]
    return sequential_mean(ratio)


def error_map(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel relative error at valid pixels, NaN elsewhere."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"error_map: shape mismatch {pred.shape} vs {gt.shape}")
    mask = _checked_mask(gt, mask, "error_map")
    out = np.full(gt.shape, np.nan)
    out[mask] = np.abs(pred[mask] - gt[mask]) / gt[mask]
    return out


def error_diff_map(err_baseline: np.ndarray, err_ours: np.ndarray) -> np.ndarray:
    """Baseline error minus ours per valid pixel (positive means ours is
    closer to the truth); NaN where either map is undefined. The two maps
    must share one validity pattern."""
    a = np.asarray(err_baseline, dtype=np.float64)
    b = np.asarray(err_ours, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"error_diff_map: shape mismatch {a.shape} vs {b.shape}")
    mask_a, mask_b = np.isfinite(a), np.isfinite(b)
    if not np.array_equal(mask_a, mask_b):
        raise ValueError("error_diff_map: validity masks differ")
    out = np.full(a.shape, np.nan)
    out[mask_a] = a[mask_a] - b[mask_a]
    return out


def gain_percent(baseline: float, ours: float) -> float:
    """Relative improvement of ``ours`` over ``baseline`` in percent."""
    if not baseline > 0:
        raise ValueError(f"gain_percent: baseline must be positive, got {baseline}")
    return (baseline - ours) / baseline * 100.0


def extra_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> dict[str, float]:
    """RMSE and threshold accuracies (delta < 1.25^k); diagnostics only."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = _checked_mask(gt, mask, "extra_metrics")
    p, g = pred[mask], gt[mask]
    ratio = np.maximum(p / g, g / np.maximum(p, 1e-12))
    out = {"rmse": float(np.sqrt(np.mean((p - g) ** 2)))}
    for k in (1, 2, 3):
        out[f"delta{k}"] = float(np.mean(ratio < 1.25 ** k))
    return out


# ---------------------------------------------------------------------------
# reports

@dataclass
class EvalReport:
    dataset: str
    split: str
    seed: int | None
    absrel: float
    per_image: list[tuple[str, float]]
    extras: dict[str, float] = field(default_factory=dict)

    @property
    def n_images(self) -> int:
        return len(self.per_image)

    @property
    def absrel_x1e4(self) -> float:
        return self.absrel * 1e4

    def to_json(self) -> dict:
        doc = {"dataset": self.dataset, "split": self.split, "seed": self.seed,
               "absrel": self.absrel, "absrel_x1e4": self.absrel_x1e4,
               "n_images": self.n_images,
               "per_image": [{"id": i, "absrel": v} for i, v in self.per_image]}
        if self.extras:
            doc["extras"] = self.extras
        return doc

    def save_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "absrel"])
            for sid, value in self.per_image:
                writer.writerow([sid, repr(value)])
            writer.writerow(["mean", repr(self.absrel)])


def load_report(path: str | Path) -> EvalReport:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return EvalReport(doc["dataset"], doc["split"], doc.get("seed"), doc["absrel"],
                      [(row["id"], row["absrel"]) for row in doc["per_image"]],
                      doc.get("extras", {}))


def evaluate_model(model, dataset: Dataset, batch_size: int = 16,
                   seed: int | None = None, with_extras: bool = False) -> EvalReport:
    """Per-image absolute relative error over a dataset in manifest order."""
    if len(dataset) == 0:
        raise ValueError("evaluate_model: empty dataset")
    per_image: list[tuple[str, float]] = []
    extra_sums: dict[str, float] = {}
    n = len(dataset)
    for start in range(0, n, batch_size):
        batch = [dataset.load(i) for i in range(start, min(start + batch_size, n))]
        images = np.stack([s.image for s in batch]).astype(np.float64)
        preds = model.predict_depth(images)
        for sample, pred in zip(batch, preds):
            if sample.depth is None:
                raise ValueError(f"evaluate_model: sample '{sample.id}' has no depth")
            per_image.append((sample.id, absrel_image(pred, sample.depth)))
            if with_extras:
                for key, value in extra_metrics(pred, sample.depth).items():
                    extra_sums[key] = extra_sums.get(key, 0.0) + value
    manifest = dataset.manifest
    mean = sequential_mean(np.array([v for _, v in per_image]))
    extras = {k: v / len(per_image) for k, v in sorted(extra_sums.items())}
    return EvalReport(manifest.name, manifest.split, seed, mean, per_image, extras)


# ---------------------------------------------------------------------------
# rasters

def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """8-bit binary PPM (P6). rgb is (H, W, 3) uint8."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"write_ppm: need (H, W, 3) uint8, got {rgb.shape} {rgb.dtype}")
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6" or len(parts) < 4 or parts[2] != b"255":
        raise ValueError(f"{path}: not an 8-bit P6 image")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3][: h * w * 3], dtype=np.uint8).reshape(h, w, 3).copy()


def diff_raster(diff: np.ndarray) -> np.ndarray:
    """Signed diff map to RGB: positive green, negative red, NaN black.

    Intensities scale linearly by the largest magnitude; an all-zero map
    renders black.
    """
    diff = np.asarray(diff, dtype=np.float64)
    if diff.ndim != 2:
        raise ValueError(f"diff_raster: need a 2-d map, got {diff.shape}")
    valid = np.isfinite(diff)
    peak = np.abs(diff[valid]).max() if valid.any() else 0.0
    scale = np.zeros_like(diff)
    if peak > 0:
        scale[valid] = diff[valid] / peak
    rgb = np.zeros(diff.shape + (3,), dtype=np.uint8)
    rgb[..., 1] = np.round(255.0 * np.clip(scale, 0.0, 1.0)).astype(np.uint8)
    rgb[..., 0] = np.round(255.0 * np.clip(-scale, 0.0, 1.0)).astype(np.uint8)
    return rgb
