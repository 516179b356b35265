"""Task-vector geometry and weight-concentration diagnostics.

Also provides a quadratic-loss oracle: two tasks with known optima and SPD
Hessians, merged by linear combination, so the exact merged loss can be set
against the first-order interference estimate
``lam1 * lam2 * |tau_a| * |tau_b| * (1 - cos phi)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .params import ParamSet, TaskVector, flatten


class UndefinedAngleError(ValueError):
    pass


def _vec(x) -> np.ndarray:
    if isinstance(x, TaskVector):
        return flatten(x.delta)
    if isinstance(x, ParamSet):
        return flatten(x)
    return np.asarray(x, dtype=np.float64).ravel()


def angle(tau_a, tau_b) -> tuple[float, float]:
    """Angle (radians) and clamped cosine between two flattened task vectors."""
    a, b = _vec(tau_a), _vec(tau_b)
    if a.shape != b.shape:
        raise ValueError(f"vectors of different length: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedAngleError("angle is undefined for a zero vector")
    cos = float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
    return math.acos(cos), cos


def interference_from(lam1: float, lam2: float, norm_a: float, norm_b: float, cos_phi: float) -> float:
    return lam1 * lam2 * norm_a * norm_b * (1.0 - cos_phi)


def interference(lam1: float, lam2: float, tau_a, tau_b) -> float:
    _, cos = angle(tau_a, tau_b)
    return interference_from(lam1, lam2, float(np.linalg.norm(_vec(tau_a))),
                             float(np.linalg.norm(_vec(tau_b))), cos)


@dataclass(frozen=True)
class GeometryReport:
    angle_phi: float
    cos_phi: float
    norms: tuple[float, float]
    interference: float
    lambda_pair: tuple[float, float]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["norms"], d["lambda_pair"] = list(self.norms), list(self.lambda_pair)
        return d


def geometry(tau_a, tau_b, lam1: float = 0.3, lam2: float = 0.3) -> GeometryReport:
    phi, cos = angle(tau_a, tau_b)
    na, nb = float(np.linalg.norm(_vec(tau_a))), float(np.linalg.norm(_vec(tau_b)))
    return GeometryReport(phi, cos, (na, nb), interference_from(lam1, lam2, na, nb, cos), (lam1, lam2))


@dataclass(frozen=True)
class DensityReport:
    top_frac_mass: float
    gini: float
    nonzero_frac: float
    top_frac: float

    def to_dict(self) -> dict:
        return asdict(self)


def gini(values) -> float:
    x = np.sort(np.abs(np.asarray(values, dtype=np.float64).ravel()))
    n, total = x.size, x.sum()
    if n == 0 or total == 0:
        raise ValueError("gini is undefined for an all-zero vector")
    ranks = np.arange(1, n + 1)
    return float(np.sum((2 * ranks - n - 1) * x) / (n * total))


def density(tau, top_frac: float = 0.01) -> DensityReport:
    """Share of total |mass| held by the top ``top_frac`` entries, Gini, and sparsity."""
    v = np.abs(_vec(tau))
    total = v.sum()
    if total == 0:
        raise ValueError("density metrics are undefined for an all-zero vector")
    k = max(1, math.ceil(round(top_frac * v.size, 9)))
    top = np.sort(v)[::-1][:k].sum()
    return DensityReport(float(top / total), gini(v), float(np.count_nonzero(v) / v.size), top_frac)


def _check_spd(h: np.ndarray, name: str) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(h, h.T, atol=1e-12):
        raise ValueError(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} is not positive definite") from None
    return h


def quadratic_loss(h: np.ndarray, opt: np.ndarray, theta: np.ndarray) -> float:
    r = theta - opt
    return float(0.5 * r @ h @ r)


def rotate_toward(theta_a: np.ndarray, theta_b: np.ndarray, phi: float) -> np.ndarray:
    """Vector with ``|theta_a|`` at angle ``phi`` from ``theta_b``, in the plane of both."""
    u = theta_b / np.linalg.norm(theta_b)
    w = theta_a - (theta_a @ u) * u
    if np.linalg.norm(w) < 1e-12:
        # theta_a parallel to theta_b: pick the first basis direction not parallel to u
        for e in np.eye(u.size):
            w = e - (e @ u) * u
            if np.linalg.norm(w) > 1e-6:
                break
    w = w / np.linalg.norm(w)
    return np.linalg.norm(theta_a) * (math.cos(phi) * u + math.sin(phi) * w)


@dataclass
class QuadraticSweep:
    angles: list[float]
    exact_losses: list[float]
    estimates: list[float]
    spearman: float

    def to_dict(self) -> dict:
        return asdict(self)

    def monotone(self) -> bool:
        ex, es = np.asarray(self.exact_losses), np.asarray(self.estimates)
        return bool(np.all(np.diff(ex) >= -1e-12) and np.all(np.diff(es) >= -1e-12))


def merged_quadratic_loss(h_a, h_b, theta_a_star, theta_b_star, lam1: float, lam2: float) -> float:
    """Exact ``L_a + L_b`` at ``lam1 * theta_a* + lam2 * theta_b*`` (base at the origin)."""
    h_a, h_b = _check_spd(h_a, "H_a"), _check_spd(h_b, "H_b")
    ta, tb = np.asarray(theta_a_star, float), np.asarray(theta_b_star, float)
    merged = lam1 * ta + lam2 * tb
    return quadratic_loss(h_a, ta, merged) + quadratic_loss(h_b, tb, merged)


def quadratic_oracle(h_a, h_b, theta_a_star, theta_b_star, lam1: float, lam2: float,
                     angles: Sequence[float] = (0.0, math.pi / 6, math.pi / 3, math.pi / 2)) -> QuadraticSweep:
    """Sweep the angle between the two optima and record exact vs estimated merge loss."""
    h_a, h_b = _check_spd(h_a, "H_a"), _check_spd(h_b, "H_b")
    ta, tb = np.asarray(theta_a_star, float), np.asarray(theta_b_star, float)
    if ta.size > 20:
        raise ValueError("quadratic oracle is meant for dimension <= 20")
    exact, est = [], []
    for phi in angles:
        ra = rotate_toward(ta, tb, phi)
        exact.append(merged_quadratic_loss(h_a, h_b, ra, tb, lam1, lam2))
        _, cos = angle(ra, tb)
        est.append(interference_from(lam1, lam2, float(np.linalg.norm(ra)), float(np.linalg.norm(tb)), cos))
    rho = float(spearmanr(exact, est).statistic) if len(angles) > 1 else float("nan")
    return QuadraticSweep([float(a) for a in angles], exact, est, rho)


def stage1_noise_stats(tau_prime_list: Sequence, tau_list: Sequence) -> dict:
    """Empirical mean and per-coordinate variance of ``tau' - tau`` across runs."""
    eps = np.stack([_vec(a) - _vec(b) for a, b in zip(tau_prime_list, tau_list)])
    return {"mean_of_mean": float(eps.mean()), "mean_variance": float(eps.var(axis=0).mean()),
            "runs": int(eps.shape[0])}
