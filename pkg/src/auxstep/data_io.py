"""On-disk formats and dataset plumbing.

Two binary layouts live here:

* single-tensor files (".dten"): magic ``DTEN``, version byte, dtype code
  (0 = f32, 1 = f64, 2 = u16), ndim byte, little-endian u32 extents,
  row-major payload;
* multi-tensor bundles (".dbnd"): magic ``DBND``, version byte, u64 length
  of a canonical JSON header (sorted keys), the header itself, then the
  concatenated row-major payloads of every named tensor. Bundles back model
  checkpoints and full optimizer state.

Dataset manifests are JSON documents with sample paths relative to the
manifest's directory. Both formats round-trip bit-exactly.
"""
from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC_TENSOR = b"DTEN"
MAGIC_BUNDLE = b"DBND"
FORMAT_VERSION = 1
IGNORE_ID = 65535

_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint16"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class FormatError(ValueError):
    """Malformed tensor file, bundle, or manifest."""


# ---------------------------------------------------------------------------
# single-tensor files

def write_tensor(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array)  # not ascontiguousarray: that would promote 0-d to 1-d
    if array.dtype not in _DTYPE_CODES:
        raise FormatError(f"unsupported dtype {array.dtype} (want f32/f64/u16)")
    if array.dtype.kind == "f" and not np.all(np.isfinite(array)):
        raise FormatError("refusing to write non-finite values")
    header = MAGIC_TENSOR + bytes([FORMAT_VERSION, _DTYPE_CODES[array.dtype], array.ndim])
    header += b"".join(struct.pack("<I", e) for e in array.shape)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(array.tobytes())
    os.replace(tmp, path)


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC_TENSOR:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if raw[4] != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {raw[4]}")
    code, ndim = raw[5], raw[6]
    if code not in _CODE_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dtype = _CODE_DTYPES[code]
    off = 7
    if len(raw) < off + 4 * ndim:
        raise FormatError(f"{path}: truncated header")
    shape = tuple(struct.unpack("<I", raw[off + 4 * i: off + 4 * (i + 1)])[0] for i in range(ndim))
    off += 4 * ndim
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(raw) != off + nbytes:
        raise FormatError(f"{path}: payload length {len(raw) - off}, expected {nbytes}")
    return np.frombuffer(raw[off:], dtype=dtype).reshape(shape).copy()


# ---------------------------------------------------------------------------
# multi-tensor bundles

def write_bundle(path: str | Path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors plus a JSON metadata block atomically."""
    entries = []
    payloads = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype not in _DTYPE_CODES:
            raise FormatError(f"bundle tensor '{name}': unsupported dtype {arr.dtype}")
        buf = arr.tobytes()
        entries.append({"name": name, "dtype": _DTYPE_CODES[arr.dtype],
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
        payloads.append(buf)
        offset += len(buf)
    header = json.dumps({"meta": meta, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC_BUNDLE + bytes([FORMAT_VERSION]))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for buf in payloads:
            fh.write(buf)
    os.replace(tmp, path)


def read_bundle(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC_BUNDLE:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if raw[4] != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {raw[4]}")
    (hlen,) = struct.unpack("<Q", raw[5:13])
    if len(raw) < 13 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[13:13 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc
    base = 13 + hlen
    tensors = {}
    for ent in header["tensors"]:
        lo = base + ent["offset"]
        hi = lo + ent["nbytes"]
        if hi > len(raw):
            raise FormatError(f"{path}: truncated payload for '{ent['name']}'")
        dtype = _CODE_DTYPES[ent["dtype"]]
        tensors[ent["name"]] = np.frombuffer(raw[lo:hi], dtype=dtype).reshape(ent["shape"]).copy()
    return header["meta"], tensors


# ---------------------------------------------------------------------------
# manifests

@dataclass
class SampleEntry:
    id: str
    image: str
    depth: str | None = None
    seg: str | None = None

    def to_json(self) -> dict:
        out = {"id": self.id, "image": self.image}
        if self.depth is not None:
            out["depth"] = self.depth
        if self.seg is not None:
            out["seg"] = self.seg
        return out


@dataclass
class DatasetManifest:
    name: str
    role: str  # depth | auxiliary
    tasks: list[str]
    num_classes: int
    height: int
    width: int
    split: str  # train | test | all
    samples: list[SampleEntry]
    base_dir: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.samples)

    def to_json(self) -> dict:
        return {
            "name": self.name, "role": self.role, "tasks": self.tasks,
            "num_classes": self.num_classes, "height": self.height, "width": self.width,
            "split": self.split, "samples": [s.to_json() for s in self.samples],
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def replaced(self, samples: list[SampleEntry], split: str | None = None) -> "DatasetManifest":
        return DatasetManifest(self.name, self.role, list(self.tasks), self.num_classes,
                               self.height, self.width, split or self.split,
                               samples, self.base_dir)

    def resolve(self, rel: str) -> Path:
        return self.base_dir / rel


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    try:
        samples = [SampleEntry(id=s["id"], image=s["image"],
                               depth=s.get("depth"), seg=s.get("seg"))
                   for s in doc["samples"]]
        manifest = DatasetManifest(
            name=doc["name"], role=doc["role"], tasks=list(doc["tasks"]),
            num_classes=int(doc["num_classes"]), height=int(doc["height"]),
            width=int(doc["width"]), split=doc["split"], samples=samples,
            base_dir=path.parent)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: missing or malformed field ({exc})") from exc
    for s in manifest.samples:
        for rel in (s.image, s.depth, s.seg):
            if rel is not None and not manifest.resolve(rel).exists():
                raise FormatError(f"{path}: referenced file missing: {rel}")
    return manifest


@dataclass
class Sample:
    id: str
    image: np.ndarray        # (3, H, W) f32 in [0, 1]
    depth: np.ndarray | None  # (H, W) f32; invalid where <= 0 or non-finite
    seg: np.ndarray | None    # (H, W) u16; ignore where == IGNORE_ID


def valid_depth_mask(depth: np.ndarray) -> np.ndarray:
    return np.isfinite(depth) & (depth > 0)


class Dataset:
    """Sample loader over a manifest with an in-memory cache.

    Iteration order is the manifest order; loading is deterministic.
    """

    def __init__(self, manifest: DatasetManifest, cache: bool = True):
        self.manifest = manifest
        self._cache: dict[int, Sample] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.manifest)

    def load(self, index: int) -> Sample:
        if self._cache is not None and index in self._cache:
            return self._cache[index]
        entry = self.manifest.samples[index]
        image = read_tensor(self.manifest.resolve(entry.image))
        depth = read_tensor(self.manifest.resolve(entry.depth)) if entry.depth else None
        seg = read_tensor(self.manifest.resolve(entry.seg)) if entry.seg else None
        sample = Sample(entry.id, image, depth, seg)
        if self._cache is not None:
            self._cache[index] = sample
        return sample

    def __iter__(self):
        for i in range(len(self)):
            yield self.load(i)


# ---------------------------------------------------------------------------
# seeding helper shared by all deterministic components

def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary labeled parts (not Python's salted hash)."""
    import hashlib

    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


# ---------------------------------------------------------------------------
# fractional subsetting

def subset_fraction(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Seeded sample of ceil(fraction * N) entries without replacement.

    Subsets nest under a fixed seed: the k entries of a smaller fraction are
    a prefix of any larger fraction's entries. fraction == 1.0 is the
    identity (original order).
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"subset_fraction: fraction must be in (0, 1], got {fraction}")
    n = len(manifest)
    if fraction == 1.0:
        return manifest.replaced(list(manifest.samples))
    k = int(np.ceil(fraction * n))
    if k < 1:
        raise ValueError("subset_fraction: resulting subset is empty")
    order = np.random.default_rng(derive_seed(seed, "subset", n)).permutation(n)
    return manifest.replaced([manifest.samples[i] for i in order[:k]])


# ---------------------------------------------------------------------------
# segmentation-derived labels (presence vectors, dominant class)

def presence_vector(seg: np.ndarray, num_classes: int, ignore_id: int = IGNORE_ID) -> np.ndarray:
    """Binary vector: entry k is 1 iff class k appears at a non-ignored pixel."""
    flat = seg.reshape(-1)
    kept = flat[flat != ignore_id]
    if kept.size == 0:
        raise ValueError("presence_vector: all pixels ignored")
    if kept.max() >= num_classes:
        raise ValueError(f"presence_vector: class id {int(kept.max())} >= num_classes {num_classes}")
    out = np.zeros(num_classes, dtype=np.uint16)
    out[np.unique(kept)] = 1
    return out


def dominant_class(seg: np.ndarray, num_classes: int, ignore_id: int = IGNORE_ID) -> int:
    """Most frequent non-ignored class; ties break to the smallest id."""
    flat = seg.reshape(-1)
    kept = flat[flat != ignore_id]
    if kept.size == 0:
        raise ValueError("dominant_class: all pixels ignored")
    if kept.max() >= num_classes:
        raise ValueError(f"dominant_class: class id {int(kept.max())} >= num_classes {num_classes}")
    counts = np.bincount(kept.astype(np.int64), minlength=num_classes)
    return int(np.argmax(counts))  # argmax returns the first (smallest) index on ties


def mldc_export(manifest: DatasetManifest, out_dir: str | Path,
                ignore_id: int = IGNORE_ID) -> Path:
    """Write per-sample class-presence vectors and dominant-class ids.

    Samples whose mask is entirely ignored are skipped with a warning and
    listed under "excluded" in the emitted manifest. Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    excluded = []
    for entry in manifest.samples:
        if entry.seg is None:
            raise ValueError(f"mldc_export: sample '{entry.id}' has no segmentation labels")
        seg = read_tensor(manifest.resolve(entry.seg))
        try:
            presence = presence_vector(seg, manifest.num_classes, ignore_id)
            dominant = dominant_class(seg, manifest.num_classes, ignore_id)
        except ValueError:
            log.warning("mldc_export: sample '%s' is entirely ignored, skipping", entry.id)
            excluded.append(entry.id)
            continue
        rel = f"{entry.id}.presence.dten"
        write_tensor(out_dir / rel, presence)
        rows.append({"id": entry.id, "presence": rel, "dominant": dominant})
    doc = {
        "source": manifest.name,
        "num_classes": manifest.num_classes,
        "samples": rows,
        "excluded": excluded,
    }
    out_path = out_dir / "mldc_manifest.json"
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return out_path


# ---------------------------------------------------------------------------
# mixed auxiliary batch stream

class ManifestStream:
    """Deterministic sample stream over one manifest.

    Epoch ``e`` visits a permutation derived from (seed, name, e); the whole
    stream state is a single integer cursor, so runs resume exactly.
    """

    def __init__(self, manifest: DatasetManifest, seed: int, name: str = "stream"):
        if len(manifest) == 0:
            raise ValueError("ManifestStream: empty manifest")
        self.dataset = Dataset(manifest)
        self.seed = seed
        self.name = name
        self.cursor = 0

    def _index_at(self, position: int) -> int:
        n = len(self.dataset)
        epoch, offset = divmod(position, n)
        order = np.random.default_rng(derive_seed(self.seed, self.name, "epoch", epoch)).permutation(n)
        return int(order[offset])

    def next_batch(self, batch_size: int) -> list[Sample]:
        batch = []
        for _ in range(batch_size):
            batch.append(self.dataset.load(self._index_at(self.cursor)))
            self.cursor += 1
        return batch

    def state(self) -> dict:
        return {"cursor": self.cursor}

    def restore(self, state: dict) -> None:
        self.cursor = int(state["cursor"])


class MixedAuxSource:
    """Batch stream over several auxiliary manifests with dataset-id tags.

    Every batch is drawn whole from one source dataset, chosen with
    probability proportional to dataset size, so the trainer can route it to
    the matching prediction head.
    """

    def __init__(self, manifests: list[DatasetManifest], seed: int):
        if not manifests:
            raise ValueError("MixedAuxSource: need at least one manifest")
        names = [m.name for m in manifests]
        if len(set(names)) != len(names):
            raise ValueError(f"MixedAuxSource: duplicate dataset names {names}")
        self.manifests = list(manifests)
        self.seed = seed
        sizes = np.array([len(m) for m in manifests], dtype=np.float64)
        self.probs = sizes / sizes.sum()
        self.streams = {m.name: ManifestStream(m, seed, name=f"aux/{m.name}") for m in manifests}
        self.batch_index = 0

    def dataset_ids(self) -> list[str]:
        return [m.name for m in self.manifests]

    def next_batch(self, batch_size: int) -> tuple[str, list[Sample]]:
        rng = np.random.default_rng(derive_seed(self.seed, "mix", self.batch_index))
        choice = int(rng.choice(len(self.manifests), p=self.probs))
        self.batch_index += 1
        name = self.manifests[choice].name
        return name, self.streams[name].next_batch(batch_size)

    def manifest_for(self, dataset_id: str) -> DatasetManifest:
        for m in self.manifests:
            if m.name == dataset_id:
                return m
        raise KeyError(dataset_id)

    def state(self) -> dict:
        return {"batch_index": self.batch_index,
                "cursors": {name: s.state() for name, s in self.streams.items()}}

    def restore(self, state: dict) -> None:
        self.batch_index = int(state["batch_index"])
        for name, s in state["cursors"].items():
            self.streams[name].restore(s)
