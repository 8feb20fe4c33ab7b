"""Task losses.

Predictions are autodiff tensors, targets plain arrays; every loss returns
a scalar tensor. Single samples (K, H, W) and batches (B, K, H, W) are both
accepted; a batch averages the per-sample reductions with equal weights
(the masked depth loss pools valid pixels across the whole batch).

Conventions:

* depth: L1 over valid pixels; an empty mask is an error, not a zero loss;
* segmentation: per-pixel cross entropy, ``IGNORE_ID`` pixels excluded;
* class presence (multi-label): per-pixel sigmoid probabilities averaged
  over space into one probability per class, clamped to
  [1e-7, 1 - 1e-7], then binary cross entropy against the 0/1 presence
  vector;
* dominant class (single-label): logits mean-pooled over space, cross
  entropy against the most frequent class (ties to the smallest id);
* reconstruction: mean squared error over every element.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .data_io import IGNORE_ID, dominant_class, presence_vector

PROB_CLAMP = 1e-7


def _as_const(array: np.ndarray) -> ad.Tensor:
    return ad.Tensor(np.asarray(array, dtype=np.float64), requires_grad=False)


def _batched(t: ad.Tensor, want_ndim: int) -> ad.Tensor:
    """Insert a leading batch axis when a single sample comes in."""
    if t.data.ndim == want_ndim - 1:
        return ad.reshape(t, (1,) + t.data.shape)
    if t.data.ndim != want_ndim:
        raise ad.ShapeError(f"expected {want_ndim - 1}- or {want_ndim}-d input, got {t.data.shape}")
    return t


def depth_loss(pred: ad.Tensor, gt: np.ndarray, mask: np.ndarray | None = None) -> ad.Tensor:
    """Masked L1: mean |pred - gt| over valid pixels.

    pred is (H, W), (1, H, W), (B, H, W) or (B, 1, H, W); gt matches after
    channel squeeze. ``mask`` defaults to the finite-and-positive pixels of
    gt. Ground truth must be finite wherever the mask holds.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if pred.data.ndim == gt.ndim + 1:
        if pred.data.shape[-3] != 1:
            raise ad.ShapeError(f"depth_loss: expected a single channel, got {pred.data.shape}")
        squeezed = pred.data.shape[:-3] + pred.data.shape[-2:]
        pred = ad.reshape(pred, squeezed)
    if pred.data.shape != gt.shape:
        raise ad.ShapeError(f"depth_loss: shape mismatch {pred.data.shape} vs {gt.shape}")
    if mask is None:
        mask = np.isfinite(gt) & (gt > 0)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape:
            raise ad.ShapeError(f"depth_loss: mask shape {mask.shape} vs {gt.shape}")
        if not np.isfinite(gt[mask]).all():
            raise ValueError("depth_loss: non-finite ground truth at a valid pixel")
    if not mask.any():
        raise ValueError("depth_loss: mask has no valid pixels")
    return ad.masked_mean(ad.absolute(ad.sub(pred, _as_const(np.where(mask, gt, 0.0)))), mask)


def segmentation_ce(logits: ad.Tensor, labels: np.ndarray,
                    ignore_id: int = IGNORE_ID) -> ad.Tensor:
    """Pixelwise cross entropy. logits (B, K, H, W) or (K, H, W); labels are ids."""
    logits = _batched(logits, 4)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    b, k, h, w = logits.data.shape
    if labels.shape != (b, h, w):
        raise ad.ShapeError(f"segmentation_ce: labels {labels.shape} do not match logits {logits.data.shape}")
    keep = labels != ignore_id
    if not keep.any():
        raise ValueError("segmentation_ce: batch has no labeled pixels")
    ids = labels.astype(np.int64)
    if ids[keep].max() >= k or ids[keep].min() < 0:
        raise ValueError(f"segmentation_ce: label outside [0, {k})")
    onehot = np.zeros((b, k, h, w), dtype=np.float64)
    bb, hh, ww = np.nonzero(keep)
    onehot[bb, ids[keep], hh, ww] = 1.0
    picked = ad.sum_axes(ad.mul(ad.log_softmax(logits, axis=1), _as_const(onehot)), (1,))
    return ad.neg(ad.masked_mean(picked, keep))


def mldc_target(gt_mask: np.ndarray, num_classes: int,
                ignore_id: int = IGNORE_ID) -> np.ndarray:
    """Binary presence vector: entry k is 1 iff class k appears at any
    non-ignored pixel."""
    return presence_vector(np.asarray(gt_mask), num_classes, ignore_id).astype(np.float64)


def mldc_prediction(logits: ad.Tensor) -> ad.Tensor:
    """(K, H, W) -> (K,) or (B, K, H, W) -> (B, K): spatial mean of per-pixel
    sigmoid probabilities, clamped away from {0, 1}."""
    if logits.data.ndim not in (3, 4):
        raise ad.ShapeError(f"mldc_prediction: expected (K, H, W) or (B, K, H, W), got {logits.data.shape}")
    pooled = ad.mean_axes(ad.sigmoid(logits), (-2, -1))
    return ad.clamp(pooled, PROB_CLAMP, 1.0 - PROB_CLAMP)


def mldc_loss(pred: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    """Binary cross entropy between pooled presence probabilities and the
    0/1 presence vector, averaged over every entry."""
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ad.ShapeError(f"mldc_loss: {pred.data.shape} vs target {target.shape}")
    if not np.isin(target, (0.0, 1.0)).all():
        raise ValueError("mldc_loss: targets must be 0 or 1")
    pos = ad.mul(_as_const(target), ad.log(pred))
    neg = ad.mul(_as_const(1.0 - target), ad.log(ad.add_scalar(ad.neg(pred), 1.0)))
    return ad.neg(ad.mean_axes(ad.add(pos, neg), tuple(range(pred.data.ndim))))


def slc_loss(logits: ad.Tensor, gt_mask: np.ndarray,
             ignore_id: int = IGNORE_ID) -> ad.Tensor:
    """Cross entropy of spatially mean-pooled logits against the dominant
    (most frequent non-ignored) class; ties break to the smallest id."""
    logits = _batched(logits, 4)
    gt_mask = np.asarray(gt_mask)
    if gt_mask.ndim == 2:
        gt_mask = gt_mask[None]
    b, k = logits.data.shape[0], logits.data.shape[1]
    if gt_mask.shape[0] != b:
        raise ad.ShapeError(f"slc_loss: {gt_mask.shape[0]} masks for batch of {b}")
    targets = np.array([dominant_class(m, k, ignore_id) for m in gt_mask], dtype=np.int64)
    pooled = ad.mean_axes(logits, (2, 3))
    onehot = np.zeros((b, k), dtype=np.float64)
    onehot[np.arange(b), targets] = 1.0
    picked = ad.sum_axes(ad.mul(ad.log_softmax(pooled, axis=1), _as_const(onehot)), (1,))
    return ad.neg(ad.mean_axes(picked, (0,)))


def reconstruction_mse(pred: ad.Tensor, image: np.ndarray) -> ad.Tensor:
    """Mean squared error against the input image, over every element."""
    image = np.asarray(image, dtype=np.float64)
    if pred.data.shape != image.shape:
        raise ad.ShapeError(f"reconstruction_mse: {pred.data.shape} vs {image.shape}")
    diff = ad.sub(pred, _as_const(image))
    return ad.mean_axes(ad.mul(diff, diff), tuple(range(pred.data.ndim)))


# ---------------------------------------------------------------------------
# batched target builders

def batch_presence_targets(segs: np.ndarray, num_classes: int,
                           ignore_id: int = IGNORE_ID) -> np.ndarray:
    return np.stack([mldc_target(s, num_classes, ignore_id) for s in segs])


def batch_dominant_classes(segs: np.ndarray, num_classes: int,
                           ignore_id: int = IGNORE_ID) -> np.ndarray:
    return np.array([dominant_class(s, num_classes, ignore_id) for s in segs], dtype=np.int64)
