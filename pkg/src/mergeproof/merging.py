"""Parameter-space merging: WA, TA, TIES, DARE and layer-wise AdaMerging."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .data import Dataset
from .params import (ParamSet, TaskVector, flatten, linear_combination,
                     task_vector, unflatten)
from .toymodels import ModelSpec, entropy_and_grad

METHODS = ("wa", "ta", "ties", "dare_ties", "adamerging")


@dataclass(frozen=True)
class AdaConfig:
    steps: int = 50
    lr: float = 1e-3
    unlabeled_n: int = 256
    init: float = 0.3


@dataclass(frozen=True)
class MergeSpec:
    method: str = "ta"
    lam: float = 0.3
    ties_keep_frac: float = 0.2
    dare_drop_p: float = 0.0
    ada: AdaConfig = field(default_factory=AdaConfig)
    seed: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown merge method {self.method!r}; expected one of {METHODS}")
        if not 0 < self.ties_keep_frac <= 1:
            raise ValueError("ties_keep_frac must be in (0, 1]")
        if not 0 <= self.dare_drop_p < 1:
            raise ValueError("dare_drop_p must be in [0, 1)")
        if self.dare_drop_p > 0 and self.seed is None:
            raise ValueError("a seed is required when dare_drop_p > 0")
        if isinstance(self.ada, dict):
            object.__setattr__(self, "ada", AdaConfig(**self.ada))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MergeSpec":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.blake2b(blob, digest_size=8).hexdigest()

    @property
    def label(self) -> str:
        return self.method


def _check_all(base: ParamSet, models: Sequence[ParamSet]) -> None:
    for m in models:
        base.check_aligned(m)


def merge_wa(models: Sequence[ParamSet]) -> ParamSet:
    """Elementwise mean of the models."""
    models = list(models)
    if not models:
        raise ValueError("merge_wa needs at least one model")
    _check_all(models[0], models[1:])
    # sum in sorted order per coordinate so the result is permutation invariant
    out = {}
    for name in models[0]:
        stack = np.sort(np.stack([m[name] for m in models]), axis=0)
        out[name] = stack.sum(axis=0) / len(models)
    return ParamSet(out, {"merge": "wa"}, copy=False)


def merge_ta(base: ParamSet, models: Sequence[ParamSet], lam: float = 0.3) -> ParamSet:
    """``base + lam * sum_i (model_i - base)``."""
    models = list(models)
    _check_all(base, models)
    deltas = [task_vector(m, base).delta for m in models]
    if not deltas:
        return ParamSet(base.to_dict(), {"merge": "ta"}, copy=False)
    total = linear_combination([1.0] * len(deltas), deltas)
    return ParamSet({k: base[k] + lam * total[k] for k in base}, {"merge": "ta"}, copy=False)


def _topk_mask(values: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest |values|; equal magnitudes favour the earlier index."""
    mask = np.zeros(values.size, dtype=bool)
    if k > 0:
        order = np.argsort(-np.abs(values), kind="stable")
        mask[order[:k]] = True
    return mask


def ties_trim(tau: TaskVector, keep_frac: float) -> TaskVector:
    """Keep the ``ceil(keep_frac * P)`` globally largest-magnitude entries."""
    if not 0 < keep_frac <= 1:
        raise ValueError("keep_frac must be in (0, 1]")
    v = flatten(tau.delta)
    k = math.ceil(round(keep_frac * v.size, 9))
    kept = np.where(_topk_mask(v, k), v, 0.0)
    return TaskVector(unflatten(kept, tau.delta), tau.base_fingerprint)


def ties_elect_merge(deltas: np.ndarray) -> np.ndarray:
    """Sign election and disjoint mean over a ``(models, coords)`` array."""
    deltas = np.atleast_2d(np.asarray(deltas, dtype=np.float64))
    elected = np.sign(deltas.sum(axis=0))
    agree = (np.sign(deltas) == elected) & (deltas != 0) & (elected != 0)
    count = agree.sum(axis=0)
    total = np.where(agree, deltas, 0.0).sum(axis=0)
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def ties_merge(base: ParamSet, taus: Sequence[TaskVector]) -> ParamSet:
    taus = list(taus)
    for t in taus:
        t.delta.check_aligned(base)
    if not taus:
        return ParamSet(base.to_dict(), {"merge": "ties"}, copy=False)
    merged = ties_elect_merge(np.stack([flatten(t.delta) for t in taus]))
    return unflatten(flatten(base) + merged, base, {"merge": "ties"})


def dare(tau: TaskVector, drop_p: float, seed: int) -> TaskVector:
    """Drop each coordinate with probability ``drop_p`` and rescale survivors."""
    if not 0 <= drop_p < 1:
        raise ValueError("drop_p must be in [0, 1)")
    if drop_p == 0:
        return tau
    v = flatten(tau.delta)
    keep = np.random.default_rng(seed).random(v.size) >= drop_p
    return TaskVector(unflatten(np.where(keep, v / (1.0 - drop_p), 0.0), tau.delta),
                      tau.base_fingerprint)


def merge_ties(base: ParamSet, models: Sequence[ParamSet], keep_frac: float = 0.2,
               drop_p: float = 0.0, seed: int | None = None) -> ParamSet:
    """Full TIES pipeline, optionally with DARE applied to each task vector first."""
    taus = [task_vector(m, base) for m in models]
    if drop_p > 0:
        if seed is None:
            raise ValueError("DARE needs a seed")
        taus = [dare(t, drop_p, seed + i) for i, t in enumerate(taus)]
    return ties_merge(base, [ties_trim(t, keep_frac) for t in taus])


@dataclass
class AdaResult:
    params: ParamSet
    coefficients: dict[str, list[float]]
    entropy_history: list[float]


def _ada_params(base, deltas, coeffs, names):
    return ParamSet({n: base[n] + sum(coeffs[i, j] * d[n] for i, d in enumerate(deltas))
                     for j, n in enumerate(names)}, copy=False)


def adamerging_coefficient_grad(spec: ModelSpec, base: ParamSet, deltas: Sequence[ParamSet],
                                coeffs: np.ndarray, inputs) -> tuple[float, np.ndarray]:
    """Mean entropy of the layer-wise merge and its gradient w.r.t. ``coeffs[model, layer]``."""
    names = base.names()
    merged = _ada_params(base, deltas, coeffs, names)
    h, grad = entropy_and_grad(spec, merged, inputs)
    g = np.array([[float(np.sum(grad[n] * d[n])) for n in names] for d in deltas])
    return h, g


def merge_adamerging(base: ParamSet, models: Sequence[ParamSet], unlabeled: Dataset,
                     spec: ModelSpec, cfg: AdaConfig | None = None) -> AdaResult:
    """Learn per-(model, layer) coefficients by projected gradient descent on entropy.

    Coefficients start at ``cfg.init`` and are clamped to [0, 1] after each step.
    """
    cfg = cfg or AdaConfig()
    models = list(models)
    _check_all(base, models)
    if len(unlabeled) == 0:
        raise ValueError("AdaMerging needs a non-empty unlabeled set")
    names = base.names()
    deltas = [task_vector(m, base).delta for m in models]
    coeffs = np.full((len(models), len(names)), float(cfg.init))
    history = []
    for _ in range(cfg.steps):
        h, g = adamerging_coefficient_grad(spec, base, deltas, coeffs, unlabeled.inputs)
        history.append(h)
        coeffs = np.clip(coeffs - cfg.lr * g, 0.0, 1.0)
    merged = _ada_params(base, deltas, coeffs, names)
    history.append(entropy_and_grad(spec, merged, unlabeled.inputs)[0])
    coef_table = {n: [float(coeffs[i, j]) for i in range(len(models))] for j, n in enumerate(names)}
    return AdaResult(merged.with_meta(merge="adamerging"), coef_table, history)


def merge(ms: MergeSpec, base: ParamSet, models: Sequence[ParamSet], *,
          unlabeled: Dataset | None = None, model_spec: ModelSpec | None = None) -> ParamSet:
    """Dispatch on ``ms.method``; the result's meta records method and spec hash."""
    if ms.method == "wa":
        out = merge_wa(list(models))
    elif ms.method == "ta":
        out = merge_ta(base, models, ms.lam)
    elif ms.method == "ties":
        out = merge_ties(base, models, ms.ties_keep_frac)
    elif ms.method == "dare_ties":
        out = merge_ties(base, models, ms.ties_keep_frac, ms.dare_drop_p, ms.seed)
    else:
        if unlabeled is None or model_spec is None:
            raise ValueError("adamerging needs unlabeled data and a model spec")
        out = merge_adamerging(base, models, unlabeled, model_spec, ms.ada).params
    return out.with_meta(merge=ms.method, merge_spec=ms.spec_hash())
