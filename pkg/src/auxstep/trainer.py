"""Training loops.

A baseline run takes one depth gradient step per iteration. A joint run
takes two: a depth step, then an auxiliary step evaluated at the parameters
the depth step just produced. The shared decoder's rate is split between
the phases (alpha for depth, 1 - alpha for auxiliary); each head keeps its
own unscaled rate and is only touched in its own phase. Joint mode holds
two optimizer instances, so the decoder has independent moment estimates
per phase unless ``share_decoder_moments`` is set.

Everything a run does is a pure function of (config, seed): parameter init,
batch order, and the auxiliary dataset choice all come from named sub-seeds
of the run seed. Run artifacts (config snapshot, per-phase CSV log,
checkpoints, eval report) are therefore byte-reproducible; wall-clock time
goes to a separate timing file outside that contract.
"""
from __future__ import annotations

import dataclasses
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses
from .data_io import (Dataset, DatasetManifest, ManifestStream, MixedAuxSource,
                      derive_seed, load_manifest, read_bundle, subset_fraction,
                      write_bundle)
from .evaluate import EvalReport, evaluate_model, sequential_mean
from .model import (AUX_TASKS, GROUP_AUX_HEAD, GROUP_DECODER, GROUP_DEPTH_HEAD,
                    HeadSpec, Model, build_head_specs)
from .optim import (DEFAULT_BASE_LR, DEFAULT_WEIGHT_DECAY, AdamW, LRPlan,
                    Schedule)

MODES = ("baseline", "joint", "beta_ablation", "gamma_ablation")
CHECKPOINT_FORMAT = 1

_LR_MODE = {"baseline": "baseline", "joint": "alpha",
            "beta_ablation": "beta", "gamma_ablation": "gamma"}


@dataclass
class TrainConfig:
    mode: str = "joint"
    alpha: float | None = None  # defaults to 0.9 in joint mode
    beta: float | None = None
    gamma: float | None = None
    aux_task: str = "mldc"
    total_steps: int = 38400
    batch_size_depth: int = 4
    batch_size_aux: int = 4
    base_lr: float = DEFAULT_BASE_LR
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    warmup_fraction: float = 1.0 / 3.0
    seed: int = 0
    encoder_seed: int = 1
    depth_manifest: str = ""
    aux_manifests: tuple[str, ...] = ()
    depth_fraction: float = 1.0
    depth_loss_kind: str = "l1"
    share_decoder_moments: bool = False
    test_manifest: str = ""  # evaluated after training when set
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"TrainConfig: unknown mode '{self.mode}' (one of {MODES})")
        if self.mode == "joint" and self.alpha is None:
            self.alpha = 0.9
        allowed = {"joint": "alpha", "beta_ablation": "beta", "gamma_ablation": "gamma"}
        for name, value in (("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)):
            if value is not None and allowed.get(self.mode) != name:
                raise ValueError(f"TrainConfig: {name} is not a {self.mode} parameter")
        if self.mode == "joint" and not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"TrainConfig: alpha must be in [0, 1], got {self.alpha}")
        if self.mode == "beta_ablation" and self.beta is None:
            raise ValueError("TrainConfig: beta_ablation requires beta")
        if self.mode == "gamma_ablation" and self.gamma is None:
            raise ValueError("TrainConfig: gamma_ablation requires gamma")
        if self.is_joint:
            if self.aux_task not in AUX_TASKS:
                raise ValueError(f"TrainConfig: unknown aux_task '{self.aux_task}'")
            if not self.aux_manifests:
                raise ValueError(f"TrainConfig: {self.mode} mode needs auxiliary manifests")
        if self.total_steps < 0:
            raise ValueError("TrainConfig: total_steps must be >= 0")
        if self.batch_size_depth < 1 or self.batch_size_aux < 1:
            raise ValueError("TrainConfig: batch sizes must be >= 1")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("TrainConfig: warmup_fraction must be in (0, 1)")
        if not 0.0 < self.depth_fraction <= 1.0:
            raise ValueError("TrainConfig: depth_fraction must be in (0, 1]")
        if self.depth_loss_kind != "l1":
            raise ValueError(f"TrainConfig: unsupported depth loss '{self.depth_loss_kind}'")
        if not self.depth_manifest:
            raise ValueError("TrainConfig: depth_manifest is required")
        self.aux_manifests = tuple(self.aux_manifests)

    @property
    def is_joint(self) -> bool:
        return self.mode in ("joint", "beta_ablation")

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_fraction * self.total_steps)

    def to_json(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["aux_manifests"] = list(self.aux_manifests)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        doc["aux_manifests"] = tuple(doc.get("aux_manifests", ()))
        return cls(**doc)

    def schedule(self) -> Schedule:
        return Schedule(max(self.total_steps, 1), self.warmup_steps or None)

    def lr_plan(self) -> LRPlan:
        return LRPlan(mode=_LR_MODE[self.mode], alpha=self.alpha, beta=self.beta,
                      gamma=self.gamma, decoder_lr=self.base_lr,
                      depth_head_lr=self.base_lr, aux_head_lr=self.base_lr,
                      schedule=self.schedule())


# ---------------------------------------------------------------------------
# single steps (loss closures so tests can drive these with toy models)

def depth_lrs(plan: LRPlan, t: int) -> dict[str, float]:
    return {GROUP_DECODER: plan.effective_lr("depth", "decoder", t),
            GROUP_DEPTH_HEAD: plan.effective_lr("depth", "depth_head", t)}


def aux_lrs(plan: LRPlan, t: int) -> dict[str, float]:
    return {GROUP_DECODER: plan.effective_lr("aux", "decoder", t),
            GROUP_AUX_HEAD: plan.effective_lr("aux", "aux_head", t)}


def baseline_step(params, plan: LRPlan, opt, t: int, depth_loss_fn) -> float:
    """One depth-only step; returns the loss value."""
    loss = depth_loss_fn()
    ad.backward(loss)
    opt.step(depth_lrs(plan, t))
    ad.zero_grad(params)
    return float(loss.data)


def joint_step(params, plan: LRPlan, opt_depth, opt_aux, t: int,
               depth_loss_fn, aux_loss_fn) -> tuple[float, float]:
    """One joint global step: depth phase, then the auxiliary phase
    evaluated at the parameters the depth phase produced. The loss closures
    rebuild their graphs from the current parameter values."""
    loss_d = depth_loss_fn()
    ad.backward(loss_d)
    opt_depth.step(depth_lrs(plan, t))
    ad.zero_grad(params)

    loss_a = aux_loss_fn()
    ad.backward(loss_a)
    opt_aux.step(aux_lrs(plan, t))
    ad.zero_grad(params)
    return float(loss_d.data), float(loss_a.data)


# ---------------------------------------------------------------------------
# batch plumbing

def _stack_images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float64)


def _stack_depths(samples) -> np.ndarray:
    for s in samples:
        if s.depth is None:
            raise ValueError(f"sample '{s.id}' has no depth labels")
    return np.stack([s.depth for s in samples]).astype(np.float64)


def _stack_segs(samples) -> np.ndarray:
    for s in samples:
        if s.seg is None:
            raise ValueError(f"sample '{s.id}' has no segmentation labels")
    return np.stack([s.seg for s in samples])


def _depth_loss_fn(model: Model, images: np.ndarray, depths: np.ndarray):
    def closure():
        pred = model.head("head/depth", model.decode(model.features(images)))
        return losses.depth_loss(pred, depths)
    return closure


def _aux_loss_fn(model: Model, task: str, dataset_id: str,
                 images: np.ndarray, segs: np.ndarray | None, num_classes: int):
    key = model.head_key(task, None if task == "reconstruction" else dataset_id)

    def closure():
        decoded = model.decode(model.features(images))
        out = model.head(key, decoded)
        if task == "segmentation":
            return losses.segmentation_ce(out, segs)
        if task == "mldc":
            targets = losses.batch_presence_targets(segs, num_classes)
            return losses.mldc_loss(losses.mldc_prediction(out), targets)
        if task == "slc":
            return losses.slc_loss(out, segs)
        if task == "reconstruction":
            return losses.reconstruction_mse(out, images)
        raise ValueError(f"unknown auxiliary task '{task}'")
    return closure


# ---------------------------------------------------------------------------
# run directories

@dataclass
class RunResult:
    run_dir: Path
    config: TrainConfig
    final_checkpoint: Path
    steps_completed: int
    model: Model
    report: EvalReport | None = None


def _log_line(step: int, phase: str, loss: float, decoder_lr: float, head_lr: float) -> str:
    return f"{step},{phase},{loss!r},{decoder_lr!r},{head_lr!r}\n"


def _checkpoint_path(run_dir: Path, step: int) -> Path:
    return run_dir / f"ckpt_{step:08d}.dbnd"


def _latest_checkpoint(run_dir: Path) -> Path | None:
    candidates = sorted(run_dir.glob("ckpt_*.dbnd"))
    return candidates[-1] if candidates else None


def _save_checkpoint(path: Path, step: int, config: TrainConfig, model: Model,
                     opt_depth: AdamW, opt_aux: AdamW | None,
                     depth_stream: ManifestStream, aux_source: MixedAuxSource | None) -> None:
    meta = {
        "kind": "checkpoint",
        "format": CHECKPOINT_FORMAT,
        "step": step,
        "config": config.to_json(),
        "arch": model.arch_manifest(),
        "depth_stream": depth_stream.state(),
        "aux_stream": aux_source.state() if aux_source is not None else None,
        "opt_depth_steps": dict(opt_depth.t),
        "opt_aux_steps": dict(opt_aux.t) if opt_aux is not None else None,
    }
    tensors = {f"model/{n}": p.data for n, p in model.parameters().items()}
    for key, arr in opt_depth.state_tensors().items():
        tensors[f"opt_depth/{key}"] = arr
    if opt_aux is not None:
        for key, arr in opt_aux.state_tensors().items():
            tensors[f"opt_aux/{key}"] = arr
    write_bundle(path, meta, tensors)


def _restore_optimizer(opt: AdamW, tensors: dict, prefix: str, steps: dict) -> None:
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    opt.load_state(state, steps)


def model_from_checkpoint(path: str | Path) -> tuple[Model, dict]:
    """Rebuild the model a checkpoint was saved from and load its weights.

    Raises when the rebuilt architecture (including the frozen-encoder
    fingerprint) does not match the checkpoint's manifest.
    """
    meta, tensors = read_bundle(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path}: not a checkpoint bundle")
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')}")
    config = TrainConfig.from_json(meta["config"])
    arch = meta["arch"]
    specs = [HeadSpec(h["task"], h["out_channels"], h["dataset"]) for h in arch["heads"]]
    model = Model(config.encoder_seed, config.seed, specs,
                  patch=arch["patch"], dim=arch["dim"], widths=tuple(arch["widths"]))
    if model.arch_manifest() != arch:
        raise ValueError(f"{path}: checkpoint architecture or encoder fingerprint "
                         "does not match the stored config")
    model.load_state({n[len("model/"):]: a for n, a in tensors.items()
                      if n.startswith("model/")})
    return model, meta


# ---------------------------------------------------------------------------
# the training loop

def _build_run(config: TrainConfig):
    depth_manifest = load_manifest(config.depth_manifest)
    if len(depth_manifest) == 0:
        raise ValueError("train: empty depth manifest")
    if config.depth_fraction < 1.0:
        depth_manifest = subset_fraction(depth_manifest, config.depth_fraction,
                                         derive_seed(config.seed, "depth-subset"))
    depth_stream = ManifestStream(depth_manifest, config.seed, name="depth")

    aux_source = None
    aux_datasets = None
    if config.is_joint:
        manifests = [load_manifest(p) for p in config.aux_manifests]
        aux_source = MixedAuxSource(manifests, config.seed)
        aux_datasets = {m.name: m.num_classes for m in manifests}

    specs = build_head_specs(config.aux_task if config.is_joint else None, aux_datasets)
    model = Model(config.encoder_seed, config.seed, specs)

    depth_names = model.group_names(GROUP_DECODER) + model.group_names(GROUP_DEPTH_HEAD)
    opt_depth = AdamW({n: model.params[n] for n in depth_names}, model.groups,
                      weight_decay=config.weight_decay)
    opt_aux = None
    if config.is_joint:
        aux_names = model.group_names(GROUP_DECODER) + model.group_names(GROUP_AUX_HEAD)
        opt_aux = AdamW({n: model.params[n] for n in aux_names}, model.groups,
                        weight_decay=config.weight_decay,
                        share_state_with=opt_depth if config.share_decoder_moments else None)
    return model, opt_depth, opt_aux, depth_stream, aux_source


def _run_loop(config: TrainConfig, run_dir: Path, model: Model, opt_depth: AdamW,
              opt_aux: AdamW | None, depth_stream: ManifestStream,
              aux_source: MixedAuxSource | None, start_step: int,
              stop_after_step: int | None) -> RunResult:
    plan = config.lr_plan()
    params = list(model.parameters().values())
    end_step = config.total_steps if stop_after_step is None else min(stop_after_step, config.total_steps)
    log_path = run_dir / "log.csv"
    started = time.monotonic()

    if start_step == 0 and not log_path.exists():
        log_path.write_text("step,phase,loss,decoder_lr,head_lr\n", encoding="utf-8")

    with open(log_path, "a", encoding="utf-8") as log_fh:
        for t in range(start_step + 1, end_step + 1):
            depth_batch = depth_stream.next_batch(config.batch_size_depth)
            depth_fn = _depth_loss_fn(model, _stack_images(depth_batch), _stack_depths(depth_batch))
            d_rates = depth_lrs(plan, t)
            if config.is_joint:
                dataset_id, aux_batch = aux_source.next_batch(config.batch_size_aux)
                segs = None if config.aux_task == "reconstruction" else _stack_segs(aux_batch)
                aux_fn = _aux_loss_fn(model, config.aux_task, dataset_id,
                                      _stack_images(aux_batch), segs,
                                      aux_source.manifest_for(dataset_id).num_classes)
                a_rates = aux_lrs(plan, t)
                loss_d, loss_a = joint_step(params, plan, opt_depth, opt_aux, t, depth_fn, aux_fn)
                log_fh.write(_log_line(t, "depth", loss_d, d_rates[GROUP_DECODER], d_rates[GROUP_DEPTH_HEAD]))
                log_fh.write(_log_line(t, "aux", loss_a, a_rates[GROUP_DECODER], a_rates[GROUP_AUX_HEAD]))
            else:
                loss_d = baseline_step(params, plan, opt_depth, t, depth_fn)
                log_fh.write(_log_line(t, "depth", loss_d, d_rates[GROUP_DECODER], d_rates[GROUP_DEPTH_HEAD]))
            if (config.checkpoint_every and t % config.checkpoint_every == 0 and t != end_step) \
                    or t == end_step:
                log_fh.flush()
                _save_checkpoint(_checkpoint_path(run_dir, t), t, config, model,
                                 opt_depth, opt_aux, depth_stream, aux_source)

    final = _checkpoint_path(run_dir, end_step)
    if not final.exists():  # zero remaining steps: state is already on disk
        _save_checkpoint(final, end_step, config, model, opt_depth, opt_aux,
                         depth_stream, aux_source)

    report = None
    if config.test_manifest and end_step == config.total_steps:
        report = evaluate_model(model, Dataset(load_manifest(config.test_manifest)),
                                seed=config.seed)
        report.save_json(run_dir / "report.json")
        report.save_csv(run_dir / "report.csv")

    with open(run_dir / "timing.json", "w", encoding="utf-8") as fh:
        json.dump({"wall_seconds": time.monotonic() - started,
                   "steps": end_step - start_step}, fh)
        fh.write("\n")
    return RunResult(run_dir, config, final, end_step, model, report)


def train(config: TrainConfig, run_dir: str | Path,
          stop_after_step: int | None = None) -> RunResult:
    """Start a fresh run in ``run_dir`` (must not already hold one)."""
    run_dir = Path(run_dir)
    if (run_dir / "config.json").exists():
        raise FileExistsError(f"{run_dir} already holds a run; use resume_run or a new directory")
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config.to_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    model, opt_depth, opt_aux, depth_stream, aux_source = _build_run(config)
    return _run_loop(config, run_dir, model, opt_depth, opt_aux,
                     depth_stream, aux_source, 0, stop_after_step)


def train_baseline(config: TrainConfig, run_dir: str | Path, **kw) -> RunResult:
    if config.is_joint:
        raise ValueError(f"train_baseline: config mode is '{config.mode}'")
    return train(config, run_dir, **kw)


def train_joint(config: TrainConfig, run_dir: str | Path, **kw) -> RunResult:
    if not config.is_joint:
        raise ValueError(f"train_joint: config mode is '{config.mode}'")
    return train(config, run_dir, **kw)


def resume_run(run_dir: str | Path, stop_after_step: int | None = None) -> RunResult:
    """Continue a run from its latest checkpoint to total_steps."""
    run_dir = Path(run_dir)
    config_path = run_dir / "config.json"
    if not config_path.exists():
        raise FileNotFoundError(f"{run_dir}: no run to resume (missing config snapshot)")
    with open(config_path, encoding="utf-8") as fh:
        config = TrainConfig.from_json(json.load(fh))
    ckpt = _latest_checkpoint(run_dir)
    if ckpt is None:
        raise FileNotFoundError(f"{run_dir}: no checkpoint to resume from")

    meta, tensors = read_bundle(ckpt)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{ckpt}: unsupported checkpoint format {meta.get('format')}")
    model, opt_depth, opt_aux, depth_stream, aux_source = _build_run(config)
    if meta["arch"] != model.arch_manifest():
        raise ValueError(f"{ckpt}: checkpoint architecture does not match the run config")
    model.load_state({n[len("model/"):]: a for n, a in tensors.items()
                      if n.startswith("model/")})
    _restore_optimizer(opt_depth, tensors, "opt_depth/", meta["opt_depth_steps"])
    if opt_aux is not None:
        _restore_optimizer(opt_aux, tensors, "opt_aux/", meta["opt_aux_steps"])
    depth_stream.restore(meta["depth_stream"])
    if aux_source is not None:
        aux_source.restore(meta["aux_stream"])
    return _run_loop(config, run_dir, model, opt_depth, opt_aux,
                     depth_stream, aux_source, int(meta["step"]), stop_after_step)


# ---------------------------------------------------------------------------
# multi-seed aggregation

def mean_stderr(values: list[float]) -> tuple[float, float]:
    """Mean and standard error (sample stddev with n-1, over sqrt(n))."""
    if len(values) < 2:
        raise ValueError("mean_stderr: need at least 2 values")
    arr = np.asarray(values, dtype=np.float64)
    mean = sequential_mean(arr)
    sd = math.sqrt(float(((arr - mean) ** 2).sum()) / (len(values) - 1))
    return mean, sd / math.sqrt(len(values))


def _train_worker(config_doc: dict, run_dir: str) -> str:
    result = train(TrainConfig.from_json(config_doc), run_dir)
    return str(result.final_checkpoint)


def run_seeds(config: TrainConfig, seeds: list[int] | tuple[int, ...] = (0, 1, 2, 3),
              out_dir: str | Path = "runs", jobs: int = 1) -> dict:
    """Train one run per seed, evaluate each, and aggregate mean and
    standard error of the test score. Requires >= 2 seeds and a configured
    test manifest."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("run_seeds: need at least 2 seeds for a standard error")
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"run_seeds: duplicate seeds {seeds}")
    if not config.test_manifest:
        raise ValueError("run_seeds: config.test_manifest is required")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs_todo = []
    for seed in seeds:
        cfg = dataclasses.replace(config, seed=seed)
        jobs_todo.append((cfg, out_dir / f"seed{seed}"))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_train_worker, cfg.to_json(), str(rd))
                       for cfg, rd in jobs_todo]
            for f in futures:
                f.result()
    else:
        for cfg, rd in jobs_todo:
            train(cfg, rd)

    runs = []
    values = []
    for seed, (_, rd) in zip(seeds, jobs_todo):
        with open(rd / "report.json", encoding="utf-8") as fh:
            absrel = json.load(fh)["absrel"]
        runs.append({"seed": seed, "run_dir": str(rd), "absrel": absrel})
        values.append(absrel)
    mean, stderr = mean_stderr(values)
    aggregate = {"runs": runs, "mean_absrel": mean, "stderr_absrel": stderr,
                 "n_seeds": len(seeds)}
    with open(out_dir / "aggregate.json", "w", encoding="utf-8") as fh:
        json.dump(aggregate, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return aggregate
