"""Optimizers and learning-rate plumbing.

AdamW with decoupled weight decay, a cosine schedule with linear warmup for
the first third of the iterations, a momentum-free plain-gradient optimizer
used only by tests, and the per-phase learning-rate rules that split the
shared-decoder rate between the main and the auxiliary task.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

DEFAULT_BASE_LR = 1e-4
DEFAULT_WEIGHT_DECAY = 0.01


@dataclass
class Schedule:
    """Cosine decay with linear warmup over the first ceil(total/3) steps."""

    total_steps: int
    warmup_steps: int | None = None

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("Schedule: total_steps must be >= 1")
        if self.warmup_steps is None:
            self.warmup_steps = math.ceil(self.total_steps / 3)

    def multiplier(self, t: int) -> float:
        """s(t): linear 0 -> 1 on [0, T_w], cosine 1 -> 0 on [T_w, T]."""
        if t < 0 or t > self.total_steps:
            raise ValueError(f"Schedule: step {t} outside [0, {self.total_steps}]")
        tw = self.warmup_steps
        if t < tw:
            return t / tw
        if tw == self.total_steps:  # all-warmup horizon: the decay span is empty
            return 1.0
        return 0.5 * (1.0 + math.cos(math.pi * (t - tw) / (self.total_steps - tw)))


class AdamW:
    """AdamW with decoupled weight decay and per-parameter step counts.

    ``params`` maps names to tensors; ``groups`` maps each name to a group
    label so a step can apply different rates to e.g. decoder vs head.
    """

    def __init__(self, params: dict[str, Tensor], groups: dict[str, str],
                 weight_decay: float = DEFAULT_WEIGHT_DECAY,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 share_state_with: "AdamW | None" = None):
        self.params = dict(params)
        self.groups = dict(groups)
        for name in self.params:
            if name not in self.groups:
                raise KeyError(f"AdamW: no group for parameter '{name}'")
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        if share_state_with is None:
            self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
            self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
            self.t = {n: 0 for n in self.params}
        else:
            # moments for overlapping parameter names become one shared state
            self.m = share_state_with.m
            self.v = share_state_with.v
            self.t = share_state_with.t
            for n, p in self.params.items():
                self.m.setdefault(n, np.zeros_like(p.data))
                self.v.setdefault(n, np.zeros_like(p.data))
                self.t.setdefault(n, 0)

    def step(self, group_lrs: dict[str, float], names: list[str] | None = None) -> None:
        """Apply one update to the selected parameters (all by default).

        A parameter with no gradient is treated as g = 0. Rates must be >= 0;
        lr = 0 leaves the parameter bytes untouched while moments still update.
        """
        selected = self.params.keys() if names is None else names
        for name in selected:
            p = self.params[name]
            lr = float(group_lrs[self.groups[name]])
            if lr < 0:
                raise ValueError(f"AdamW: negative learning rate for '{name}'")
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"AdamW: non-finite gradient for parameter '{name}'")
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if lr == 0.0:
                continue
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + self.eps)) - lr * self.weight_decay * p.data

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], steps: dict[str, int]) -> None:
        for name in self.params:
            self.m[name] = np.array(tensors[f"m/{name}"], dtype=np.float64)
            self.v[name] = np.array(tensors[f"v/{name}"], dtype=np.float64)
            self.t[name] = int(steps[name])


class PlainGradient:
    """Momentum-free gradient descent (p <- p - lr * g). Testing only.

    Exists so the two-phase joint update can be checked against its closed
    form, which AdamW's running moments would obscure.
    """

    def __init__(self, params: dict[str, Tensor], groups: dict[str, str]):
        self.params = dict(params)
        self.groups = dict(groups)

    def step(self, group_lrs: dict[str, float], names: list[str] | None = None) -> None:
        selected = self.params.keys() if names is None else names
        for name in selected:
            p = self.params[name]
            lr = float(group_lrs[self.groups[name]])
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"PlainGradient: non-finite gradient for parameter '{name}'")
            p.data = p.data - lr * p.grad

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {}


@dataclass
class LRPlan:
    """Per-phase, per-component learning-rate rules.

    ``alpha`` mode splits the decoder rate between the depth phase (alpha)
    and the auxiliary phase (1 - alpha); head rates are never split.
    ``beta`` mode leaves depth steps unscaled and scales only auxiliary
    steps; ``gamma`` mode scales a plain baseline run globally.
    """

    mode: str = "alpha"  # alpha | beta | gamma | baseline
    alpha: float | None = None
    beta: float | None = None
    gamma: float | None = None
    decoder_lr: float = DEFAULT_BASE_LR
    depth_head_lr: float = DEFAULT_BASE_LR
    aux_head_lr: float = DEFAULT_BASE_LR
    schedule: Schedule = field(default_factory=lambda: Schedule(1))

    def __post_init__(self):
        scalars = {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma}
        expected = {"alpha": {"alpha"}, "beta": {"beta"}, "gamma": {"gamma"}, "baseline": set()}
        if self.mode not in expected:
            raise ValueError(f"LRPlan: unknown mode '{self.mode}'")
        present = {k for k, val in scalars.items() if val is not None}
        if present != expected[self.mode]:
            raise ValueError(
                f"LRPlan: mode '{self.mode}' expects scalars {sorted(expected[self.mode])}, got {sorted(present)}")
        if self.mode == "alpha" and not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"LRPlan: alpha must be in [0, 1], got {self.alpha}")

    def effective_lr(self, phase: str, component: str, t: int) -> float:
        """Rate for (phase in {depth, aux}, component in {decoder, depth_head, aux_head}) at step t."""
        if phase not in ("depth", "aux"):
            raise ValueError(f"LRPlan: unknown phase '{phase}'")
        s = self.schedule.multiplier(t)
        if component == "depth_head":
            if phase != "depth":
                raise ValueError("LRPlan: depth_head updates only in the depth phase")
            base = self.depth_head_lr
        elif component == "aux_head":
            if phase != "aux":
                raise ValueError("LRPlan: aux_head updates only in the aux phase")
            base = self.aux_head_lr
        elif component == "decoder":
            base = self.decoder_lr
        else:
            raise ValueError(f"LRPlan: unknown component '{component}'")

        if self.mode == "baseline":
            return base * s
        if self.mode == "gamma":
            return self.gamma * base * s
        if self.mode == "alpha":
            if component == "decoder":
                return (self.alpha if phase == "depth" else (1.0 - self.alpha)) * base * s
            return base * s
        # beta mode: depth steps unscaled, aux steps scaled by beta
        if component == "decoder" and phase == "aux":
            return self.beta * base * s
        return base * s


def schedule_lr(t: int, schedule: Schedule) -> float:
    return schedule.multiplier(t)


def effective_lr(phase: str, component: str, t: int, plan: LRPlan) -> float:
    return plan.effective_lr(phase, component, t)
