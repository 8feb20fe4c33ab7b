"""Synthetic scene generator with coupled depth, color, and class labels.

Scenes are a background plane plus flat object cards (rectangles and
ellipses) painted far to near. The couplings that make the auxiliary tasks
informative about depth are built in:

* each object class has a characteristic depth; per-object jitter stays
  within a small fraction of it, so class identity constrains depth;
* each class has a fixed hue at constant mean luminance, so color alone
  does not reveal depth;
* pixel brightness falls off with depth (near is bright), so shading does —
  though an optional per-scene illumination gain can blur that cue across
  scenes while leaving it intact within each image;
* optionally the class -> depth assignment is shuffled, so depth is an
  arbitrary function of hue rather than a smooth one, and inferring it
  means recognizing the class, not extrapolating along the hue circle.

Simulated sensor dropouts affect the depth channel only: dropped pixels
hold the sentinel 0.0 while the segmentation mask stays exact everywhere
(class labels are annotated on the image, not measured by the depth
sensor). All valid depths stay inside [0.5, 10]. Sample ``index`` derives
its own seed from (seed, index), so generation order never matters.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data_io import (DatasetManifest, SampleEntry, derive_seed,
                      load_manifest, write_tensor)

log = logging.getLogger(__name__)

BACKGROUND_CLASS = 0
DEPTH_NEAR = 0.9
DEPTH_FAR_OBJECT = 6.0
BACKGROUND_ROWS = (7.5, 9.5)
DEPTH_BOUNDS = (0.5, 10.0)


@dataclass(frozen=True)
class SceneSpec:
    """Distribution parameters for one synthetic world.

    ``depth_near``/``depth_far`` bound the object depth priors,
    ``radius_min``/``radius_max_frac`` the object sizes, and
    ``gain_min``/``gain_max`` a per-scene illumination multiplier. A gain
    range wider than the neutral [1, 1] makes absolute brightness an
    unreliable depth cue on its own — hue (and with it class identity)
    stays intact because all channels scale together.
    """

    height: int = 64
    width: int = 64
    num_classes: int = 12
    min_objects: int = 3
    max_objects: int = 8
    depth_jitter: float = 0.12
    invalid_min: float = 0.02
    invalid_max: float = 0.10
    noise_sigma: float = 0.02
    depth_near: float = DEPTH_NEAR
    depth_far: float = DEPTH_FAR_OBJECT
    prior_shuffle_seed: int | None = None
    radius_min: float = 4.0
    radius_max_frac: float = 1.0 / 3.0
    gain_min: float = 1.0
    gain_max: float = 1.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need a background class and at least one object class")
        if not 0 <= self.invalid_min <= self.invalid_max < 1:
            raise ValueError("invalid-pixel fractions must satisfy 0 <= min <= max < 1")
        if self.height % 8 or self.width % 8:
            raise ValueError("height and width must be multiples of 8")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("object counts must satisfy 1 <= min <= max")
        if not 0 <= self.depth_jitter < 0.15:
            raise ValueError("depth_jitter must stay below the 15% coupling bound")
        if not self.depth_near <= self.depth_far:
            raise ValueError("object depth priors need depth_near <= depth_far")
        if self.depth_near * (1 - self.depth_jitter) < DEPTH_BOUNDS[0]:
            raise ValueError(f"jittered object depth can undershoot {DEPTH_BOUNDS[0]}")
        if self.depth_far * (1 + self.depth_jitter) > BACKGROUND_ROWS[0]:
            raise ValueError("jittered object depth can reach behind the background")
        if not 2.0 <= self.radius_min <= self.radius_max_frac * min(self.height, self.width):
            raise ValueError("object radii must satisfy 2 <= min <= max_frac * extent")
        if not 0 < self.gain_min <= self.gain_max <= 1.25:
            raise ValueError("illumination gain must satisfy 0 < min <= max <= 1.25")

    def depth_priors(self) -> np.ndarray:
        """Characteristic depth per class id under this spec.

        With ``prior_shuffle_seed`` set, the object-class depths are
        permuted deterministically, decoupling depth from position on the
        hue circle: neighbouring hues no longer have neighbouring depths,
        so a predictor must resolve the class itself.
        """
        mu = class_depth_priors(self.num_classes, self.depth_near, self.depth_far)
        if self.prior_shuffle_seed is not None:
            rng = np.random.default_rng(
                derive_seed(self.prior_shuffle_seed, "prior-shuffle", self.num_classes))
            mu[1:] = rng.permutation(mu[1:])
        return mu


def benchmark_spec(num_classes: int = 24) -> SceneSpec:
    """The bundled benchmark world: a harder variant of the defaults.

    Depth labels are scarce (heavy simulated sensor dropout leaves a
    sparse scatter of valid depth pixels) while class labels stay cheap,
    dense, and informative — the data regime auxiliary training is meant
    for. Three ingredients make class identity the decisive depth cue:

    * the class -> depth assignment is shuffled, so depth is an arbitrary
      function of hue; nearby hues have unrelated depths and only telling
      the classes apart (with twice the default class count, and tight
      per-object jitter making the payoff large) pins the depth down;
    * a per-scene illumination gain removes absolute brightness as a
      standalone cue, while hue survives untouched;
    * fewer but larger objects in a narrower depth band keep most pixels
      away from depth discontinuities, which no patch-resolution
      predictor can track, so the class signal dominates the residual.

    Pixel noise is halved so the within-image shading cue stays
    dependable even on the sparse valid set of a far-objects-only scene.
    """
    return SceneSpec(num_classes=num_classes, min_objects=3, max_objects=5,
                     depth_jitter=0.05, invalid_min=0.80, invalid_max=0.92,
                     noise_sigma=0.01, depth_near=2.2, depth_far=6.0,
                     prior_shuffle_seed=11, radius_min=7.0,
                     gain_min=0.55, gain_max=1.05)


def class_depth_priors(num_classes: int, near: float = DEPTH_NEAR,
                       far: float = DEPTH_FAR_OBJECT) -> np.ndarray:
    """Characteristic depth per class id; background sits behind all objects."""
    mu = np.empty(num_classes, dtype=np.float64)
    mu[0] = 0.5 * (BACKGROUND_ROWS[0] + BACKGROUND_ROWS[1])
    mu[1:] = np.geomspace(near, far, num_classes - 1)
    return mu


def class_palette(num_classes: int) -> np.ndarray:
    """(K, 3) colors on a hue circle; every class has mean channel value 0.5."""
    k = np.arange(num_classes, dtype=np.float64)
    hue = 2.0 * np.pi * k / num_classes
    phases = np.array([0.0, -2.0 * np.pi / 3.0, 2.0 * np.pi / 3.0])
    return 0.5 + 0.45 * np.cos(hue[:, None] + phases[None, :])


def _ellipse_mask(height: int, width: int, cy: float, cx: float,
                  ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _rect_mask(height: int, width: int, cy: float, cx: float,
               ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def render_scene(spec: SceneSpec, seed: int, index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One scene: image (3, H, W) f32 in [0, 1], depth (H, W) f32, mask (H, W) u16."""
    rng = np.random.default_rng(derive_seed(seed, "scene", index))
    h, w = spec.height, spec.width
    mu = spec.depth_priors()
    palette = class_palette(spec.num_classes)

    rows = np.linspace(BACKGROUND_ROWS[0], BACKGROUND_ROWS[1], h)
    depth = np.broadcast_to(rows[:, None], (h, w)).astype(np.float64).copy()
    seg = np.full((h, w), BACKGROUND_CLASS, dtype=np.uint16)

    gain = rng.uniform(spec.gain_min, spec.gain_max)
    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    objects = []
    for _ in range(n_objects):
        cls = int(rng.integers(1, spec.num_classes))
        jitter = 1.0 + rng.uniform(-spec.depth_jitter, spec.depth_jitter)
        objects.append((cls, mu[cls] * jitter,
                        rng.uniform(0, h - 1), rng.uniform(0, w - 1),
                        rng.uniform(spec.radius_min, spec.radius_max_frac * h),
                        rng.uniform(spec.radius_min, spec.radius_max_frac * w),
                        bool(rng.integers(0, 2))))
    # painter's order: far objects first so near ones overwrite
    for cls, d, cy, cx, ry, rx, is_rect in sorted(objects, key=lambda o: -o[1]):
        mask = (_rect_mask if is_rect else _ellipse_mask)(h, w, cy, cx, ry, rx)
        depth[mask] = d
        seg[mask] = cls

    shading = 0.15 + 0.85 * (DEPTH_NEAR / depth)
    image = gain * palette[seg].transpose(2, 0, 1) * shading[None, :, :]
    image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)

    # sensor dropouts: blobs of invalid depth; the class mask stays exact
    target = rng.uniform(spec.invalid_min, spec.invalid_max)
    invalid = np.zeros((h, w), dtype=bool)
    for _ in range(256):  # generous cap; low targets break out immediately
        if invalid.mean() >= target:
            break
        invalid |= _ellipse_mask(h, w, rng.uniform(0, h - 1), rng.uniform(0, w - 1),
                                 rng.uniform(2.0, h / 6.0), rng.uniform(2.0, w / 6.0))
    depth[invalid] = 0.0

    return image.astype(np.float32), depth.astype(np.float32), seg


def brightness_depth_correlation(image: np.ndarray, depth: np.ndarray) -> float:
    """Pearson correlation between pixel brightness and inverse depth (valid pixels)."""
    valid = np.isfinite(depth) & (depth > 0)
    brightness = image.mean(axis=0)[valid].astype(np.float64)
    inv = 1.0 / depth[valid].astype(np.float64)
    bz = brightness - brightness.mean()
    iz = inv - inv.mean()
    return float((bz * iz).sum() / np.sqrt((bz ** 2).sum() * (iz ** 2).sum()))


def generate(spec: SceneSpec, n: int, seed: int, out_dir: str | Path,
             name: str = "synth") -> Path:
    """Render ``n`` scenes to disk; returns the path of the full manifest.

    Alongside the samples the scene parameters land in ``scene_spec.json``
    so a dataset directory is self-describing.
    """
    if n < 1:
        raise ValueError("generate: need at least one scene")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for index in range(n):
        image, depth, seg = render_scene(spec, seed, index)
        sid = f"scene{index:05d}"
        write_tensor(out_dir / f"{sid}.image.dten", image)
        write_tensor(out_dir / f"{sid}.depth.dten", depth)
        write_tensor(out_dir / f"{sid}.seg.dten", seg)
        entries.append(SampleEntry(id=sid, image=f"{sid}.image.dten",
                                   depth=f"{sid}.depth.dten", seg=f"{sid}.seg.dten"))
    with open(out_dir / "scene_spec.json", "w", encoding="utf-8") as fh:
        json.dump({"spec": asdict(spec), "n": n, "seed": seed, "name": name},
                  fh, indent=1, sort_keys=True)
        fh.write("\n")
    manifest = DatasetManifest(
        name=name, role="both",
        tasks=["depth", "segmentation", "mldc", "slc", "reconstruction"],
        num_classes=spec.num_classes, height=spec.height, width=spec.width,
        split="all", samples=entries, base_dir=out_dir)
    path = out_dir / "manifest_all.json"
    manifest.save(path)
    log.info("generated %d scenes under %s", n, out_dir)
    return path


def split(manifest: DatasetManifest, train_fraction: float,
          seed: int) -> tuple[DatasetManifest, DatasetManifest]:
    """Disjoint, covering train/test split by seeded permutation."""
    n = len(manifest)
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("split: train_fraction must be in (0, 1)")
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split: fraction {train_fraction} leaves one split empty for {n} samples")
    order = np.random.default_rng(derive_seed(seed, "split", n)).permutation(n)
    train_idx, test_idx = sorted(order[:n_train]), sorted(order[n_train:])
    return (manifest.replaced([manifest.samples[i] for i in train_idx], split="train"),
            manifest.replaced([manifest.samples[i] for i in test_idx], split="test"))


def generate_dataset(spec: SceneSpec, n: int, seed: int, out_dir: str | Path,
                     name: str = "synth", train_fraction: float = 0.8) -> dict[str, Path]:
    """generate + split; writes manifest_{all,train,test}.json, returns the paths."""
    out_dir = Path(out_dir)
    paths = {"all": generate(spec, n, seed, out_dir, name)}
    train, test = split(load_manifest(paths["all"]), train_fraction, seed)
    for part, manifest in (("train", train), ("test", test)):
        path = out_dir / f"manifest_{part}.json"
        manifest.save(path)
        paths[part] = path
    return paths
