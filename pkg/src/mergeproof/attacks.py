"""Adaptive free-rider attacks: Unmask and GradErase."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .data import Dataset
from .merging import MergeSpec, merge
from .params import ParamSet, axpy, flatten, sub, unflatten
from .toymodels import ModelSpec, TrainConfig, train

ESTIMATORS = ("protected_task_vector",)


@dataclass(frozen=True)
class GradEraseConfig:
    retrain_data_frac: float = 0.05
    epochs: int = 1
    lr: float = 0.05
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.retrain_data_frac <= 1:
            raise ValueError("retrain_data_frac must be in (0, 1]")


@dataclass(frozen=True)
class AttackConfig:
    unmask_lambda: float = 0.3
    graderase: GradEraseConfig = field(default_factory=GradEraseConfig)
    disturb_estimator: str = "protected_task_vector"

    def __post_init__(self):
        if isinstance(self.graderase, dict):
            object.__setattr__(self, "graderase", GradEraseConfig(**self.graderase))
        if self.disturb_estimator not in ESTIMATORS:
            raise ValueError(f"unknown disturbance estimator {self.disturb_estimator!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)


def unmask(theta_pre: ParamSet, theta_hat_def: ParamSet, theta_fr: ParamSet,
           merge_spec: MergeSpec, lam: float = 0.3, **merge_kw) -> ParamSet:
    """``Merge(pre, hat_def, fr) - lam * hat_def``, subtracting full parameters."""
    merged = merge(merge_spec, theta_pre, [theta_hat_def, theta_fr], **merge_kw)
    out = axpy(-lam, theta_hat_def, merged)
    return out.with_meta(attack="unmask", unmask_lambda=lam, merge=merge_spec.method)


def estimate_disturbance(theta_hat_def: ParamSet, theta_pre: ParamSet,
                         estimator: str = "protected_task_vector") -> ParamSet:
    """Negated protected task vector, ``-(hat_def - pre)``."""
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown disturbance estimator {estimator!r}")
    return sub(theta_pre, theta_hat_def)


def _unit(v: np.ndarray) -> np.ndarray | None:
    """``v / |v|`` computed without squaring tiny entries, or None for the zero vector."""
    s = float(np.max(np.abs(v))) if v.size else 0.0
    if s == 0.0:
        return None
    w = v / s
    return w / np.linalg.norm(w)


def _project(g: np.ndarray, u: np.ndarray | None) -> np.ndarray:
    return g if u is None else g - (g @ u) * u


def project_gradient(g: ParamSet, v: ParamSet) -> ParamSet:
    """Remove the component of ``g`` along ``v`` (``g`` unchanged when ``v`` is zero)."""
    g.check_aligned(v)
    return unflatten(_project(flatten(g), _unit(flatten(v))), g)


@dataclass
class GradEraseResult:
    params: ParamSet
    steps: int
    max_relative_residual: float


def graderase_retrain(spec: ModelSpec, theta_hat_merge: ParamSet, v_disturb: ParamSet,
                      data_subset: Dataset, cfg: GradEraseConfig) -> GradEraseResult:
    """SGD on ``data_subset`` with every whole-model gradient projected off ``v_disturb``."""
    theta_hat_merge.check_aligned(v_disturb)
    u = _unit(flatten(v_disturb))
    residuals = []

    def record(step):
        s = float(np.linalg.norm(step))
        if u is not None and s:
            residuals.append(abs(float(step @ u)) / s)

    tcfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, learning_rate=cfg.lr, seed=cfg.seed)
    out = train(spec, theta_hat_merge, data_subset, tcfg,
                grad_hook=lambda g: _project(g, u), on_step=record)
    out = out.with_meta(attack="graderase")
    return GradEraseResult(out, len(residuals), max(residuals, default=0.0))
