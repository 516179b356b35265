"""Two-stage protection against unauthorized merging.

Stage 1 continues finetuning the released model with a per-layer L2 penalty so
that task information spreads over many small weights. Stage 2 is training
free: a binary mask selects the largest task-vector coordinates outside the
critical layers and those coordinates are pulled back toward the pretrained
weights, ``theta_hat = theta' - beta * (mask * (theta' - theta_pre))``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict, replace
from typing import Sequence

import numpy as np

from .data import Dataset
from .params import MaskSet, ParamSet, flatten, sub, unflatten
from .toymodels import ModelSpec, TrainConfig, accuracy, matches_any, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DefenseConfig:
    alpha: float = 0.01
    beta: float = 1.0
    k_prime: float = 10.0  # percent of layers treated as critical
    k: float = 0.1  # fraction of the remaining parameters perturbed
    excluded_layer_patterns: tuple[str, ...] = ()
    stage1_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=50, learning_rate=0.05))
    stage1: bool = True
    stage2: bool = True

    def __post_init__(self):
        if not 0 <= self.k_prime <= 100:
            raise ValueError("k_prime must be a percentage in [0, 100]")
        if not 0 < self.k <= 1:
            raise ValueError("k must be in (0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if isinstance(self.stage1_train, dict):
            object.__setattr__(self, "stage1_train", TrainConfig(**self.stage1_train))
        object.__setattr__(self, "excluded_layer_patterns", tuple(self.excluded_layer_patterns))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["excluded_layer_patterns"] = list(self.excluded_layer_patterns)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DefenseConfig":
        return cls(**d)


@dataclass(frozen=True)
class LayerImportance:
    """Accuracy drop per layer when that layer is reset to the pretrained weights."""

    drops: dict[str, float]
    reference_accuracy: float = float("nan")

    def ranked(self) -> list[tuple[str, float]]:
        return sorted(self.drops.items(), key=lambda kv: (-kv[1], kv[0]))


def stage1_finetune(spec: ModelSpec, theta_def: ParamSet, train_data: Dataset,
                    cfg: DefenseConfig) -> ParamSet:
    tcfg = replace(cfg.stage1_train, l2_alpha=cfg.alpha)
    out = train(spec, theta_def, train_data, tcfg)
    return out.with_meta(stage="stage1", stage1_alpha=cfg.alpha)


def probe_layer_importance(spec: ModelSpec, theta: ParamSet, theta_pre: ParamSet,
                           val: Dataset) -> LayerImportance:
    theta.check_aligned(theta_pre)
    if len(val) == 0:
        raise ValueError("probe needs a non-empty validation set")
    ref = accuracy(spec, theta, val)
    drops = {name: ref - accuracy(spec, theta.replace({name: theta_pre[name]}), val)
             for name in theta}
    return LayerImportance(drops, ref)


def critical_layers(importance: LayerImportance, names: Sequence[str], cfg: DefenseConfig) -> list[str]:
    n_crit = math.ceil(round(cfg.k_prime * len(names) / 100.0, 9))
    ranked = [name for name, _ in importance.ranked() if name in set(names)]
    crit = set(ranked[:n_crit])
    crit.update(n for n in names if matches_any(n, cfg.excluded_layer_patterns))
    return sorted(crit)


def build_mask(theta_prime: ParamSet, theta_pre: ParamSet, importance: LayerImportance,
               cfg: DefenseConfig) -> MaskSet:
    """Ones on the top-``k`` |theta' - theta_pre| coordinates of non-critical layers."""
    theta_prime.check_aligned(theta_pre)
    crit = set(critical_layers(importance, theta_prime.names(), cfg))
    tau = flatten(sub(theta_prime, theta_pre))
    eligible = np.concatenate([np.full(a.size, name not in crit) for name, a in theta_prime.items()]) \
        if len(theta_prime) else np.zeros(0, dtype=bool)
    n_pool = int(eligible.sum())
    n_ones = math.floor(round(cfg.k * n_pool, 9))
    if n_pool == 0 and theta_prime.num_params:
        log.warning("mask is all-zero: every layer is critical or excluded")
    mags = np.where(eligible, np.abs(tau), -1.0)
    order = np.argsort(-mags, kind="stable")
    m = np.zeros(tau.size)
    m[order[:n_ones]] = 1.0
    return MaskSet(unflatten(m, theta_prime)._tensors, {"critical": ",".join(sorted(crit))}, copy=False)


def stage2_negate(theta_prime: ParamSet, theta_pre: ParamSet, mask: ParamSet, beta: float) -> ParamSet:
    """``theta' - beta * (mask * (theta' - theta_pre))``.

    Masked coordinates are evaluated as ``(1 - beta) * theta' + beta * theta_pre``,
    the same value rearranged so that ``beta=1`` lands exactly on ``theta_pre``.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    theta_prime.check_aligned(theta_pre)
    theta_prime.check_aligned(mask)
    if not isinstance(mask, MaskSet):
        mask = MaskSet(mask._tensors, copy=False)
    out = {name: np.where(mask[name] == 1.0, (1.0 - beta) * a + beta * theta_pre[name], a)
           for name, a in theta_prime.items()}
    return ParamSet(out, theta_prime.meta, copy=False)


def mask_stats(mask: MaskSet) -> dict:
    per_layer = {name: float(arr.mean()) if arr.size else 0.0 for name, arr in mask.items()}
    return {"ones": mask.ones, "total": mask.num_params, "per_layer_density": per_layer}


@dataclass
class Protection:
    """A protected model together with its provenance report."""

    params: ParamSet
    report: dict


def protect(spec: ModelSpec, theta_def: ParamSet, theta_pre: ParamSet, train_data: Dataset,
            val_data: Dataset, cfg: DefenseConfig) -> Protection:
    """Stage 1 -> layer probe -> mask -> Stage 2, honouring the stage switches in ``cfg``."""
    theta_def.check_aligned(theta_pre)
    report = {"alpha": cfg.alpha, "beta": cfg.beta, "k_prime": cfg.k_prime, "k": cfg.k,
              "stage1": cfg.stage1, "stage2": cfg.stage2,
              "excluded_layer_patterns": list(cfg.excluded_layer_patterns),
              "input_fingerprint": theta_def.fingerprint()}
    theta = theta_def
    if cfg.stage1:
        theta = stage1_finetune(spec, theta, train_data, cfg)
        report["stage1_train"] = asdict(replace(cfg.stage1_train, l2_alpha=cfg.alpha))
    if cfg.stage2:
        imp = probe_layer_importance(spec, theta, theta_pre, val_data)
        mask = build_mask(theta, theta_pre, imp, cfg)
        theta = stage2_negate(theta, theta_pre, mask, cfg.beta)
        report["importance"] = [{"layer": n, "accuracy_drop": d} for n, d in imp.ranked()]
        report["reference_accuracy"] = imp.reference_accuracy
        report["critical_layers"] = critical_layers(imp, theta.names(), cfg)
        report["mask"] = mask_stats(mask)
    if not (cfg.stage1 or cfg.stage2):
        return Protection(theta_def, report)
    stages = "+".join(s for s, on in (("stage1", cfg.stage1), ("stage2", cfg.stage2)) if on)
    out = theta.with_meta(stage=stages, parent=theta_def.fingerprint(), beta=cfg.beta,
                          alpha=cfg.alpha, k=cfg.k, k_prime=cfg.k_prime)
    report["output_fingerprint"] = out.fingerprint()
    return Protection(out, report)
