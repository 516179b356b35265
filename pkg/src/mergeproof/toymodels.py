"""MLP classifier with exact backpropagation, SGD training and evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from fnmatch import fnmatchcase
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .params import AlignmentError, ParamSet, flatten, unflatten

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    num_classes: int = 2
    activation: str = "relu"
    excluded_layer_patterns: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "excluded_layer_patterns", tuple(self.excluded_layer_patterns))
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        if any(int(v) < 1 for v in dims):
            raise ValueError(f"all model dimensions must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.num_classes)

    @property
    def depth(self) -> int:
        return len(self.dims) - 1

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            shapes[f"layer{i}.weight"] = (fan_in, fan_out)
            shapes[f"layer{i}.bias"] = (fan_out,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["excluded_layer_patterns"] = list(self.excluded_layer_patterns)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.1
    l2_alpha: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.l2_alpha < 0:
            raise ValueError("l2_alpha must be >= 0")


@dataclass(frozen=True)
class EvalEntry:
    accuracy: float
    loss: float
    entropy: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def _check_layout(spec: ModelSpec, params: ParamSet) -> None:
    expected = spec.layer_shapes()
    if params.shapes() != expected:
        for name in sorted(set(expected) | set(params.shapes())):
            if params.shapes().get(name) != expected.get(name):
                raise AlignmentError(
                    f"layer {name!r}: params have {params.shapes().get(name)}, spec expects {expected.get(name)}")


def init_model(spec: ModelSpec, seed: int) -> ParamSet:
    """Gaussian weights scaled by 1/sqrt(fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for i, (fan_in, fan_out) in enumerate(zip(spec.dims[:-1], spec.dims[1:])):
        tensors[f"layer{i}.weight"] = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
        tensors[f"layer{i}.bias"] = np.zeros(fan_out)
    return ParamSet(tensors, {"arch": arch_id(spec), "seed": str(seed)}, copy=False)


def arch_id(spec: ModelSpec) -> str:
    return "mlp-" + "x".join(map(str, spec.dims)) + f"-{spec.activation}"


def _as_arrays(batch) -> tuple[np.ndarray, np.ndarray | None]:
    if isinstance(batch, Dataset):
        return batch.inputs, batch.labels
    if isinstance(batch, tuple):
        x, y = batch
        return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)
    return np.asarray(batch, dtype=np.float64), None


def _act(spec: ModelSpec, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if spec.activation == "relu" else np.tanh(z)


def _act_grad(spec: ModelSpec, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    return (z > 0).astype(np.float64) if spec.activation == "relu" else 1.0 - h * h


def _forward(spec: ModelSpec, t, x: np.ndarray):
    hs, zs = [x], []
    h = x
    for i in range(spec.depth):
        z = h @ t[f"layer{i}.weight"] + t[f"layer{i}.bias"]
        zs.append(z)
        if i < spec.depth - 1:
            h = _act(spec, z)
            hs.append(h)
    return zs[-1], hs, zs


def _backward(spec: ModelSpec, t, hs, zs, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    grads = {}
    delta = dlogits
    for i in reversed(range(spec.depth)):
        grads[f"layer{i}.weight"] = hs[i].T @ delta
        grads[f"layer{i}.bias"] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ t[f"layer{i}.weight"].T) * _act_grad(spec, zs[i - 1], hs[i])
    return grads


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward(spec: ModelSpec, params: ParamSet, batch) -> np.ndarray:
    """Logits of shape ``(N, num_classes)``; an empty batch yields an empty array."""
    _check_layout(spec, params)
    x, _ = _as_arrays(batch)
    if x.shape[0] == 0:
        return np.zeros((0, spec.num_classes))
    return _forward(spec, params, x)[0]


def _loss_and_grad_arrays(spec, t, x, y, l2_alpha):
    n = x.shape[0]
    logits, hs, zs = _forward(spec, t, x)
    logp = log_softmax(logits)
    ce = -logp[np.arange(n), y].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grads = _backward(spec, t, hs, zs, dlogits)
    l2 = 0.0
    if l2_alpha:
        for name, g in grads.items():
            l2 += float(np.sum(t[name] ** 2))
            g += 2.0 * l2_alpha * t[name]
    return ce + l2_alpha * l2, grads


def l2_penalty(params: ParamSet) -> float:
    """Sum over layers of the squared Euclidean norm of each layer."""
    return float(sum(np.sum(v ** 2) for _, v in params.items()))


def loss_and_grad(spec: ModelSpec, params: ParamSet, batch, l2_alpha: float = 0.0):
    """Mean cross-entropy plus ``l2_alpha * sum_l ||theta_l||^2`` and its exact gradient."""
    _check_layout(spec, params)
    if l2_alpha < 0:
        raise ValueError("l2_alpha must be >= 0")
    x, y = _as_arrays(batch)
    if y is None:
        raise ValueError("loss needs labels")
    if x.shape[0] == 0:
        raise ValueError("loss is undefined on an empty batch")
    loss, grads = _loss_and_grad_arrays(spec, params, x, y, l2_alpha)
    return float(loss), ParamSet(grads, copy=False)


def entropy_and_grad(spec: ModelSpec, params: ParamSet, inputs) -> tuple[float, ParamSet]:
    """Mean prediction entropy over ``inputs`` and its gradient w.r.t. params."""
    _check_layout(spec, params)
    x, _ = _as_arrays(inputs)
    n = x.shape[0]
    if n == 0:
        raise ValueError("entropy is undefined on an empty batch")
    logits, hs, zs = _forward(spec, params, x)
    logp = log_softmax(logits)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=1)
    # dH/dz_j = -p_j (log p_j + H)
    dlogits = -p * (logp + h[:, None]) / n
    return float(h.mean()), ParamSet(_backward(spec, params, hs, zs, dlogits), copy=False)


GradHook = Callable[[np.ndarray], np.ndarray]


def train(spec: ModelSpec, init: ParamSet, data: Dataset, cfg: TrainConfig,
          grad_hook: GradHook | None = None, on_step: Callable | None = None) -> ParamSet:
    """Minibatch SGD with a seeded shuffle per epoch.

    ``grad_hook`` receives each flattened minibatch gradient and returns the
    update direction actually applied (used for projected retraining).
    ``on_step(update_vector)`` is called with every applied step.
    """
    _check_layout(spec, init)
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if cfg.epochs == 0:
        return init
    rng = np.random.default_rng(cfg.seed)
    theta = flatten(init).copy()
    layout = init
    views = {}
    i = 0
    for name, arr in layout.items():
        views[name] = theta[i:i + arr.size].reshape(arr.shape)
        i += arr.size
    n = len(data)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = _loss_and_grad_arrays(spec, views, data.inputs[idx], data.labels[idx], cfg.l2_alpha)
            g = np.concatenate([grads[name].ravel() for name in views])
            if grad_hook is not None:
                g = grad_hook(g)
            step = cfg.learning_rate * g
            theta -= step
            if on_step is not None:
                on_step(step)
    return unflatten(theta.copy(), layout, dict(init.meta))


def evaluate(spec: ModelSpec, params: ParamSet, data: Dataset) -> EvalEntry:
    """Top-1 accuracy (argmax ties go to the lowest class index), mean CE, mean entropy."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = forward(spec, params, data)
    logp = log_softmax(logits)
    pred = np.argmax(logits, axis=1)
    n = len(data)
    return EvalEntry(
        accuracy=float(np.mean(pred == data.labels)),
        loss=float(-logp[np.arange(n), data.labels].mean()),
        entropy=float(-(np.exp(logp) * logp).sum(axis=1).mean()),
        n=n,
    )


def accuracy(spec: ModelSpec, params: ParamSet, data: Dataset) -> float:
    return evaluate(spec, params, data).accuracy


def matches_any(name: str, patterns: Sequence[str]) -> bool:
    return any(fnmatchcase(name, p) for p in patterns)
