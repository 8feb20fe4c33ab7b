"""Frozen feature extractor, shared decoder, and per-task prediction heads.

The encoder is a fixed random patch projection with a sinusoidal positional
table. It is never trained; its weights come from a dedicated seed and its
fingerprint is stored in checkpoints so a mismatched feature space is caught
at load time.

The decoder is three stages of pointwise affine, relu, and nearest 2x
upsampling (channel widths 64 -> 48 -> 40 -> 32), which undoes the patch
downsampling exactly. With pointwise mixing only, predictions are constant
within each input patch; that is intentional, the focus here is the
optimization scheme, not dense-prediction quality.

Every trainable parameter is initialized from a sub-seed derived from its
own name, so adding or removing heads never shifts anyone else's init.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data_io import derive_seed

ENCODER_PATCH = 8
ENCODER_DIM = 64
DECODER_WIDTHS = (48, 40, 32)

DEPTH_TASK = "depth"
AUX_TASKS = ("segmentation", "mldc", "slc", "reconstruction")

GROUP_DECODER = "decoder"
GROUP_DEPTH_HEAD = "depth_head"
GROUP_AUX_HEAD = "aux_head"


def positional_table(dim: int, rows: int, cols: int) -> np.ndarray:
    """(dim, rows, cols) sinusoidal grid encoding; half the channels per axis."""
    if dim % 4:
        raise ValueError("positional_table: dim must be a multiple of 4")
    quarter = dim // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter))
    y = np.arange(rows, dtype=np.float64)[None, :] * freqs[:, None]  # (q, rows)
    x = np.arange(cols, dtype=np.float64)[None, :] * freqs[:, None]  # (q, cols)
    table = np.empty((dim, rows, cols), dtype=np.float64)
    table[0 * quarter:1 * quarter] = np.sin(y)[:, :, None]
    table[1 * quarter:2 * quarter] = np.cos(y)[:, :, None]
    table[2 * quarter:3 * quarter] = np.sin(x)[:, None, :]
    table[3 * quarter:4 * quarter] = np.cos(x)[:, None, :]
    return table


class FrozenEncoder:
    """Seeded random patch projection; weights are constants, never updated."""

    def __init__(self, seed: int, patch: int = ENCODER_PATCH, dim: int = ENCODER_DIM):
        if dim % 4:
            raise ValueError("encoder dim must be a multiple of 4 for the positional table")
        self.seed = seed
        self.patch = patch
        self.dim = dim
        fan_in = 3 * patch * patch
        rng = np.random.default_rng(derive_seed(seed, "encoder", patch, dim))
        self.weight = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(dim, fan_in))
        self._pos_cache: dict[tuple[int, int], np.ndarray] = {}

    def encode_tokens(self, images: np.ndarray) -> np.ndarray:
        """(B, 3, H, W) in [0, 1] -> channels-last (B, H/patch, W/patch, dim)."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"encode: expected (B, 3, H, W), got {images.shape}")
        b, _, h, w = images.shape
        p = self.patch
        if h % p or w % p:
            raise ValueError(f"encode: spatial extents must be multiples of {p}, got {h}x{w}")
        hp, wp = h // p, w // p
        patches = np.ascontiguousarray(
            images.reshape(b, 3, hp, p, wp, p).transpose(0, 2, 4, 1, 3, 5)
        ).reshape(b, hp, wp, 3 * p * p)
        key = (hp, wp)
        if key not in self._pos_cache:
            self._pos_cache[key] = np.ascontiguousarray(
                positional_table(self.dim, hp, wp).transpose(1, 2, 0))
        return patches @ self.weight.T + self._pos_cache[key]

    def encode(self, images: np.ndarray) -> np.ndarray:
        """(B, 3, H, W) in [0, 1] -> (B, dim, H/patch, W/patch) float64.

        A single (3, H, W) image maps to a (dim, H/patch, W/patch) output.
        """
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            return self.encode(images[None])[0]
        return self.encode_tokens(images).transpose(0, 3, 1, 2)

    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(f"patch={self.patch};dim={self.dim};".encode())
        h.update(np.ascontiguousarray(self.weight).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class HeadSpec:
    task: str
    out_channels: int
    dataset: str | None = None  # None for dataset-independent heads

    @property
    def key(self) -> str:
        if self.dataset is None:
            return f"head/{self.task}"
        return f"head/{self.task}:{self.dataset}"


def build_head_specs(aux_task: str | None,
                     aux_datasets: dict[str, int] | None = None) -> list[HeadSpec]:
    """Depth head plus the heads one auxiliary task needs.

    Class-label tasks get one head per auxiliary dataset (class counts may
    differ across datasets); reconstruction is dataset-independent and gets
    a single shared head. ``aux_task = None`` builds the depth-only model.
    """
    specs = [HeadSpec(DEPTH_TASK, 1)]
    if aux_task is None:
        return specs
    if aux_task not in AUX_TASKS:
        raise ValueError(f"unknown auxiliary task '{aux_task}' (one of {AUX_TASKS})")
    if aux_task == "reconstruction":
        specs.append(HeadSpec("reconstruction", 3))
        return specs
    if not aux_datasets:
        raise ValueError(f"auxiliary task '{aux_task}' needs at least one labeled dataset")
    for name in sorted(aux_datasets):
        specs.append(HeadSpec(aux_task, aux_datasets[name], name))
    return specs


class Model:
    """Frozen encoder + trainable shared decoder + trainable per-task heads."""

    def __init__(self, encoder_seed: int, param_seed: int,
                 head_specs: list[HeadSpec] | None = None,
                 patch: int = ENCODER_PATCH, dim: int = ENCODER_DIM,
                 widths: tuple[int, ...] = DECODER_WIDTHS):
        self.encoder = FrozenEncoder(encoder_seed, patch, dim)
        self.widths = tuple(widths)
        if 2 ** len(self.widths) != patch:
            raise ValueError(
                f"{len(self.widths)} upsample stages undo a patch of "
                f"{2 ** len(self.widths)}, not {patch}")
        self.head_specs = list(head_specs) if head_specs is not None else build_head_specs(None)
        seen = set()
        for spec in self.head_specs:
            if spec.key in seen:
                raise ValueError(f"duplicate head {spec.key}")
            seen.add(spec.key)
        if not any(s.task == DEPTH_TASK for s in self.head_specs):
            raise ValueError("model requires a depth head")
        self.param_seed = param_seed
        self.params: dict[str, ad.Tensor] = {}
        self.groups: dict[str, str] = {}
        self._build(param_seed)

    def _add_param(self, name: str, group: str, shape: tuple[int, ...],
                   fan_in: int | None, seed: int) -> None:
        if fan_in is None:  # biases start at zero
            data = np.zeros(shape, dtype=np.float64)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            rng = np.random.default_rng(derive_seed(seed, "param", name))
            data = rng.uniform(-bound, bound, size=shape)
        self.params[name] = ad.Tensor(data, requires_grad=True)
        self.groups[name] = group

    def _build(self, seed: int) -> None:
        in_ch = self.encoder.dim
        for i, out_ch in enumerate(self.widths):
            self._add_param(f"decoder/stage{i}/weight", GROUP_DECODER,
                            (out_ch, in_ch), in_ch, seed)
            self._add_param(f"decoder/stage{i}/bias", GROUP_DECODER, (out_ch,), None, seed)
            in_ch = out_ch
        feat_ch = self.widths[-1]
        for spec in self.head_specs:
            group = GROUP_DEPTH_HEAD if spec.task == DEPTH_TASK else GROUP_AUX_HEAD
            self._add_param(f"{spec.key}/weight", group,
                            (spec.out_channels, feat_ch), feat_ch, seed)
            self._add_param(f"{spec.key}/bias", group, (spec.out_channels,), None, seed)

    # ------------------------------------------------------------------
    # forward pieces

    def features(self, images: np.ndarray) -> ad.Tensor:
        """Frozen channels-last feature tokens (B, H/patch, W/patch, dim)."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        return ad.Tensor(self.encoder.encode_tokens(images), requires_grad=False)

    def decode(self, features: ad.Tensor) -> ad.Tensor:
        """Shared trunk: (B, hp, wp, dim) -> channels-last (B, H, W, widths[-1])."""
        x = features
        for i in range(len(self.widths)):
            x = ad.channel_affine(self.params[f"decoder/stage{i}/weight"], x,
                                  self.params[f"decoder/stage{i}/bias"])
            x = ad.relu(x)
            x = ad.upsample2x(x, axes=(1, 2))
        return x

    def head(self, key: str, decoded: ad.Tensor) -> ad.Tensor:
        """Head output (B, out_channels, H, W); depth applies softplus."""
        if f"{key}/weight" not in self.params:
            raise KeyError(f"model has no head '{key}'")
        out = ad.channel_affine(self.params[f"{key}/weight"], decoded,
                                self.params[f"{key}/bias"])
        out = ad.permute(out, (0, 3, 1, 2))
        if key == f"head/{DEPTH_TASK}":
            out = ad.softplus(out)
        return out

    def predict_depth(self, images: np.ndarray) -> np.ndarray:
        """(B, H, W) positive depth, inference only."""
        with ad.no_grad():
            out = self.head("head/depth", self.decode(self.features(images)))
        return out.data[:, 0, :, :]

    def predict(self, image: np.ndarray, key: str) -> np.ndarray:
        """Task output for one (3, H, W) image: (out_channels, H, W), no grad."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3:
            raise ValueError(f"predict: expected one (3, H, W) image, got {image.shape}")
        with ad.no_grad():
            out = self.head(key, self.decode(self.features(image[None])))
        return out.data[0]

    # ------------------------------------------------------------------
    # bookkeeping

    def head_key(self, task: str, dataset: str | None = None) -> str:
        return HeadSpec(task, 0, dataset).key

    def parameters(self) -> dict[str, ad.Tensor]:
        return self.params

    def group_names(self, group: str) -> list[str]:
        return [n for n in self.params if self.groups[n] == group]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, arr in arrays.items():
            if arr.shape != self.params[name].data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {self.params[name].data.shape}")
            self.params[name].data = np.asarray(arr, dtype=np.float64).copy()

    def arch_manifest(self) -> dict:
        return {
            "patch": self.encoder.patch,
            "dim": self.encoder.dim,
            "widths": list(self.widths),
            "heads": [{"task": s.task, "dataset": s.dataset, "out_channels": s.out_channels}
                      for s in sorted(self.head_specs, key=lambda s: s.key)],
            "encoder_fingerprint": self.encoder.fingerprint(),
        }
