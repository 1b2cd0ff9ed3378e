"""SGD / AdamW with per-group learning rates, coordinate masks and group freezing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, ContractViolation, InputError, NumericFault
from .params import ADAPTER, BASE, HEAD, LAYERNORM, NamedParamStore, ParamGroup, group_matcher

SGD = "sgd"
ADAMW = "adamw"


@dataclass
class OptimConfig:
    mode: str = ADAMW
    lrs: dict[str, float] = field(default_factory=lambda: {BASE: 1e-3, LAYERNORM: 1e-3, HEAD: 1e-3, ADAPTER: 1e-3})
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-5

    def validate(self) -> "OptimConfig":
        problems = []
        if self.mode not in (SGD, ADAMW):
            problems.append(f"unknown mode {self.mode!r}")
        if any(lr < 0 for lr in self.lrs.values()):
            problems.append("learning rates must be >= 0")
        if not all(0 <= b < 1 for b in self.betas):
            problems.append("betas must lie in [0, 1)")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def lr_for(self, group: ParamGroup) -> float:
        if group.tag in self.lrs:  # per-language override, e.g. "adapter:en"
            return self.lrs[group.tag]
        return self.lrs[group.kind]

    def with_lrs(self, **lrs: float) -> "OptimConfig":
        return OptimConfig(self.mode, {**self.lrs, **lrs}, self.betas, self.eps, self.weight_decay)


@dataclass
class OptState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


MaskSet = Mapping[str, np.ndarray]


def configure_groups(cfg: OptimConfig, adapter_lr: float, division_factor: float,
                     head_lr: float | None = None) -> OptimConfig:
    """Adapter lr as given, base (and its layer norms) at ``adapter_lr / division_factor``."""
    if not division_factor >= 1:
        raise ConfigError(f"division factor must be >= 1, got {division_factor}")
    base_lr = adapter_lr / division_factor
    return cfg.with_lrs(**{ADAPTER: adapter_lr, BASE: base_lr, LAYERNORM: base_lr,
                           HEAD: cfg.lrs[HEAD] if head_lr is None else head_lr})


def apply_trainability_mask(store: NamedParamStore, keep, names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Boolean masks that are true exactly on ``keep``.

    ``keep`` is an iterable of ``(name, flat_index)`` pairs or a mapping of
    name to an index array.  Every parameter in ``names`` (default: the
    whole store) receives a mask, so parameters without kept coordinates
    are fully frozen.
    """
    names = store.names() if names is None else list(names)
    masks = {n: np.zeros(store[n].size, dtype=bool) for n in names}
    pairs = keep.items() if isinstance(keep, Mapping) else _group_pairs(keep)
    for name, idx in pairs:
        if name not in masks:
            raise InputError(f"unknown parameter {name!r} in trainability mask")
        idx = np.asarray(idx, dtype=np.int64).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= masks[name].size):
            raise InputError(f"coordinate out of range for {name!r}")
        masks[name][idx] = True
    out = {}
    for n, m in masks.items():
        m = m.reshape(store[n].shape)
        m.setflags(write=False)
        out[n] = m
    return out


def _group_pairs(pairs):
    grouped: dict[str, list[int]] = {}
    for name, index in pairs:
        grouped.setdefault(name, []).append(int(index))
    return grouped.items()


class Optimizer:
    """Stateful wrapper: one instance per model and training phase."""

    def __init__(self, cfg: OptimConfig, masks: MaskSet | None = None, frozen=()):
        self.cfg = cfg.validate()
        self.masks = dict(masks or {})
        self.frozen = frozen
        self.state = OptState()

    def step(self, store: NamedParamStore, grads: Mapping[str, np.ndarray]) -> OptState:
        return optimizer_step(store, grads, self.cfg, self.masks, self.frozen, self.state)


def optimizer_step(store: NamedParamStore, grads: Mapping[str, np.ndarray], cfg: OptimConfig,
                   masks: MaskSet | None = None, frozen=(), state: OptState | None = None) -> OptState:
    """Apply one update in place.

    Masked-out coordinates, frozen groups and parameters without a gradient
    are left bitwise unchanged; their moments are not touched either.
    Weight decay (AdamW only) is decoupled and applied to updated
    coordinates only.
    """
    state = OptState() if state is None else state
    masks = masks or {}
    is_frozen = group_matcher(frozen) if frozen else (lambda g: False)
    for name in grads:
        if name not in store:
            raise ContractViolation(f"gradient for unknown parameter {name!r}")
        if grads[name].shape != store[name].shape:
            raise ContractViolation(f"gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(grads[name])):
            raise NumericFault(f"non-finite gradient for {name!r}")

    state.step += 1
    t = state.step
    b1, b2 = cfg.betas
    for name in sorted(grads):
        group = store.group(name)
        if is_frozen(group):
            continue
        lr = cfg.lr_for(group)
        theta = store[name]
        g = grads[name]
        mask = masks.get(name)
        if mask is not None and not mask.any():
            continue
        if cfg.mode == SGD:
            new = theta - lr * g
        else:
            m = state.m.get(name)
            v = state.v.get(name)
            if m is None:
                m = np.zeros_like(theta)
                v = np.zeros_like(theta)
            m_new = b1 * m + (1 - b1) * g
            v_new = b2 * v + (1 - b2) * g * g
            if mask is not None:
                m_new = np.where(mask, m_new, m)
                v_new = np.where(mask, v_new, v)
            state.m[name], state.v[name] = m_new, v_new
            m_hat = m_new / (1 - b1 ** t)
            v_hat = v_new / (1 - b2 ** t)
            new = theta - lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * theta)
        if mask is not None:
            new = np.where(mask, new, theta)
        store.assign(name, new)
    return state
