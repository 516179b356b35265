"""Synthetic classification tasks and their CSV/JSON interchange.

Tasks built from one base distribution share the same class layout (fixed by
``layout_seed``) and differ only in the sample seed and a transform, so two
tasks can be related closely enough for merging to be meaningful.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .params import atomic_write_bytes

GENERATORS = ("blobs", "moons", "rings")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Transform:
    """``none``, ``rotate`` (radians, in the x0/x1 plane) or ``relabel`` (permutation)."""

    kind: str = "none"
    angle: float = 0.0
    perm: tuple[int, ...] = ()

    @classmethod
    def parse(cls, text: "str | Transform | None") -> "Transform":
        """Parse ``none``, ``rotate:0.5`` or ``relabel:1,0,2,3``."""
        if isinstance(text, Transform):
            return text
        if text is None or text == "none":
            return cls()
        kind, _, arg = str(text).partition(":")
        if kind == "rotate":
            return cls("rotate", angle=float(arg))
        if kind == "relabel":
            return cls("relabel", perm=tuple(int(t) for t in arg.split(",") if t.strip()))
        raise ValueError(f"unknown transform {text!r}")

    def __str__(self) -> str:
        if self.kind == "rotate":
            return f"rotate:{self.angle!r}"
        if self.kind == "relabel":
            return "relabel:" + ",".join(map(str, self.perm))
        return "none"


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    task_id: str = "task"
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ValueError(f"inputs {x.shape} and labels {y.shape} disagree")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("labels out of range")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.inputs.shape[1])

    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        h.update(np.ascontiguousarray(self.inputs, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        h.update(f"{self.num_classes}".encode())
        return h.hexdigest()

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes,
                       split or self.split, self.task_id, dict(self.provenance))

    def head_fraction(self, frac: float, seed: int) -> "Dataset":
        """Seeded random subset holding ``ceil(frac * N)`` samples."""
        if not 0 < frac <= 1:
            raise ValueError("frac must be in (0, 1]")
        n = max(1, math.ceil(round(frac * len(self), 9)))
        idx = np.sort(np.random.default_rng(seed).permutation(len(self))[:n])
        return self.subset(idx)


def _class_means(d: int, C: int, layout_seed: int, sep: float) -> np.ndarray:
    # Rejection-free construction: scale random directions until the minimum
    # pairwise distance reaches `sep` (in units of the unit-variance noise).
    rng = np.random.default_rng([layout_seed, d, C])
    means = rng.standard_normal((C, d))
    if C > 1:
        dists = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
        dmin = dists[~np.eye(C, dtype=bool)].min()
        means *= sep / dmin
    return means


def _sample(generator: str, d: int, C: int, n: int, rng, layout_seed: int, noise: float):
    labels = np.arange(n) % C
    rng.shuffle(labels)
    if generator == "blobs":
        means = _class_means(d, C, layout_seed, sep=6.0)
        x = means[labels] + rng.standard_normal((n, d))
    elif generator == "moons":
        if C != 2 or d < 2:
            raise ValueError("moons needs C=2 and d>=2")
        t = rng.uniform(0, math.pi, n)
        x = np.zeros((n, d))
        x[:, 0] = np.where(labels == 0, np.cos(t), 1 - np.cos(t))
        x[:, 1] = np.where(labels == 0, np.sin(t), 0.5 - np.sin(t))
        x += noise * rng.standard_normal((n, d))
    elif generator == "rings":
        if d < 2:
            raise ValueError("rings needs d>=2")
        direction = rng.standard_normal((n, d))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        x = direction * (labels + 1.0)[:, None] + noise * rng.standard_normal((n, d))
    else:
        raise ValueError(f"unknown generator {generator!r}; expected one of {GENERATORS}")
    return x, labels


def gen_dataset(generator: str, d: int, C: int, n: int, transform="none", seed: int = 0,
                *, split: str = "train", task_id: str | None = None,
                layout_seed: int = 0, noise: float = 0.1) -> Dataset:
    """Draw a deterministic synthetic dataset.

    ``layout_seed`` fixes the class geometry (blob means) shared by every task
    from the same family; ``seed`` drives sampling only.
    """
    if d < 1 or C < 1 or n < 1:
        raise ValueError("d, C and n must all be >= 1")
    tf = Transform.parse(transform)
    if tf.kind == "relabel" and sorted(tf.perm) != list(range(C)):
        raise ValueError(f"relabel needs a permutation of range({C}), got {tf.perm}")
    if tf.kind == "rotate" and d < 2:
        raise ValueError("rotate needs d >= 2")
    rng = np.random.default_rng([seed, SPLITS.index(split)])
    x, y = _sample(generator, d, C, n, rng, layout_seed, noise)
    if tf.kind == "rotate":
        c, s = math.cos(tf.angle), math.sin(tf.angle)
        x0, x1 = x[:, 0].copy(), x[:, 1].copy()
        x[:, 0], x[:, 1] = c * x0 - s * x1, s * x0 + c * x1
    elif tf.kind == "relabel":
        y = np.asarray(tf.perm)[y]
    provenance = {"generator": generator,
                  "params": {"d": d, "C": C, "n": n, "transform": str(tf),
                             "layout_seed": layout_seed, "noise": noise, "split": split},
                  "seed": seed}
    return Dataset(x, y, C, split, task_id or f"{generator}-{tf}", provenance)


def save_csv(ds: Dataset, path) -> None:
    """Write ``f0..f{d-1},label`` rows plus a ``.json`` provenance sidecar (both atomically)."""
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"f{i}" for i in range(ds.dim)] + ["label"])
    for row, label in zip(ds.inputs, ds.labels):
        w.writerow([repr(float(v)) for v in row] + [int(label)])
    sidecar = dict(ds.provenance)
    sidecar.update({"num_classes": ds.num_classes, "split": ds.split, "task_id": ds.task_id})
    atomic_write_bytes(path, buf.getvalue().encode())
    atomic_write_bytes(path.with_suffix(".json"), (json.dumps(sidecar, indent=2, sort_keys=True) + "\n").encode())


def load_csv(path, num_classes: int | None = None, split: str | None = None,
             task_id: str | None = None) -> Dataset:
    path = Path(path)
    sidecar = {}
    if path.with_suffix(".json").exists():
        sidecar = json.loads(path.with_suffix(".json").read_text())
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[-1] != "label" or header[:-1] != [f"f{i}" for i in range(len(header) - 1)]:
            raise ValueError(f"{path}: unexpected CSV header {header[:3]}...")
        rows = [r for r in reader if r]
    d = len(header) - 1
    x = np.array([[float(v) for v in r[:d]] for r in rows], dtype=np.float64).reshape(len(rows), d)
    y = np.array([int(r[d]) for r in rows], dtype=np.int64)
    C = num_classes or sidecar.get("num_classes") or (int(y.max()) + 1 if y.size else 1)
    provenance = {k: sidecar[k] for k in ("generator", "params", "seed") if k in sidecar}
    return Dataset(x, y, int(C), split or sidecar.get("split", "train"),
                   task_id or sidecar.get("task_id", path.stem), provenance)
