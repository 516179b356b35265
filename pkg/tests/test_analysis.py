import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from mergeproof.analysis import (UndefinedAngleError, angle, density, geometry, gini, interference,
                                 merged_quadratic_loss, quadratic_oracle, rotate_toward,
                                 stage1_noise_stats)

nonzero_vecs = hnp.arrays(np.float64, st.integers(2, 12), elements=st.floats(-100, 100, allow_nan=False)) \
    .filter(lambda v: np.linalg.norm(v) > 1e-3)


def test_angle_examples():
    a = np.array([1.0, 2.0, -1.0])
    assert angle(a, a)[0] == pytest.approx(0.0, abs=1e-7)
    assert angle(a, -a)[0] == pytest.approx(math.pi, abs=1e-7)
    assert angle([1.0, 0.0], [0.0, 1.0])[0] == pytest.approx(math.pi / 2, abs=1e-15)
    with pytest.raises(UndefinedAngleError):
        angle([0.0, 0.0], [1.0, 0.0])


@given(nonzero_vecs, st.data())
def test_angle_symmetry_and_range(a, data):
    b = data.draw(hnp.arrays(np.float64, a.shape, elements=st.floats(-100, 100, allow_nan=False))
                  .filter(lambda v: np.linalg.norm(v) > 1e-3))
    phi_ab, cos_ab = angle(a, b)
    assert phi_ab == angle(b, a)[0]
    assert -1.0 <= cos_ab <= 1.0 and 0.0 <= phi_ab <= math.pi


def test_interference_examples():
    assert interference(0.3, 0.3, [1.0, 2.0], [2.0, 4.0]) == pytest.approx(0.0, abs=1e-12)
    assert interference(1, 1, [1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0, abs=1e-15)
    a = np.array([2.0, 0.0])
    b = 3.0 * np.array([0.5, math.sqrt(3) / 2])
    assert interference(0.3, 0.3, a, b) == pytest.approx(0.27, abs=1e-12)


@settings(max_examples=50)
@given(nonzero_vecs, st.floats(0.1, 10), st.floats(0, 2 * math.pi))
def test_interference_scaling_and_rotation(a, c, theta):
    b = np.roll(a, 1) + 0.5
    if np.linalg.norm(b) < 1e-3:
        return
    base = interference(0.3, 0.4, a, b)
    assert interference(0.3, 0.4, c * a, b) == pytest.approx(c * base, rel=1e-9, abs=1e-9)
    rot = np.eye(a.size)
    cs, sn = math.cos(theta), math.sin(theta)
    rot[:2, :2] = [[cs, -sn], [sn, cs]]
    assert interference(0.3, 0.4, rot @ a, rot @ b) == pytest.approx(base, rel=1e-7, abs=1e-7)
    assert base >= 0


def test_geometry_report():
    g = geometry([1.0, 0.0], [0.0, 2.0], 0.5, 0.5)
    assert g.norms == (1.0, 2.0) and g.interference == pytest.approx(0.5)
    assert g.to_dict()["lambda_pair"] == [0.5, 0.5]


def test_density_examples():
    one_hot = np.zeros(100)
    one_hot[17] = -3.0
    assert density(one_hot).top_frac_mass == 1.0
    assert gini(np.full(10, -2.0)) == pytest.approx(0.0, abs=1e-15)
    v = np.array([4.0] + [1.0] * 9)
    assert density(v, top_frac=0.1).top_frac_mass == pytest.approx(4 / 13, abs=1e-15)
    assert density(np.array([1.0, 0.0, 0.0, 2.0])).nonzero_frac == 0.5
    with pytest.raises(ValueError):
        density(np.zeros(5))


@settings(max_examples=50)
@given(nonzero_vecs, st.floats(0.01, 100), st.randoms())
def test_density_invariances(v, c, rnd):
    d = density(v)
    perm = list(range(v.size))
    rnd.shuffle(perm)
    dp, ds = density(v[perm]), density(c * v)
    for other in (dp, ds):
        assert other.top_frac_mass == pytest.approx(d.top_frac_mass, rel=1e-9)
        assert other.gini == pytest.approx(d.gini, rel=1e-9, abs=1e-12)
    assert 0.0 <= d.top_frac_mass <= 1.0 and -1e-12 <= d.gini <= 1.0


def test_gini_matches_pairwise_definition():
    rng = np.random.default_rng(0)
    x = np.abs(rng.normal(size=30))
    pairwise = np.abs(x[:, None] - x[None, :]).sum() / (2 * x.size ** 2 * x.mean())
    assert gini(x) == pytest.approx(pairwise, rel=1e-12)


def test_quadratic_aligned_tasks_have_zero_loss():
    t = np.array([1.0, -2.0, 0.5])
    assert merged_quadratic_loss(np.eye(3), np.eye(3), t, t, 0.5, 0.5) == 0.0


def test_quadratic_orthogonal_closed_form():
    a, b = np.array([2.0, 0.0]), np.array([0.0, 3.0])
    l1, l2 = 0.3, 0.6
    # identity Hessians: L = 1/2 |m - a|^2 + 1/2 |m - b|^2 with m = (l1*2, l2*3)
    expected = 0.5 * ((2 * l1 - 2) ** 2 + (3 * l2) ** 2) + 0.5 * ((2 * l1) ** 2 + (3 * l2 - 3) ** 2)
    assert merged_quadratic_loss(np.eye(2), np.eye(2), a, b, l1, l2) == pytest.approx(expected, rel=1e-14)


def test_quadratic_rejects_non_spd():
    t = np.ones(2)
    with pytest.raises(ValueError):
        merged_quadratic_loss(np.array([[1.0, 2.0], [2.0, 1.0]]), np.eye(2), t, t, 0.3, 0.3)
    with pytest.raises(ValueError):
        merged_quadratic_loss(np.array([[1.0, 0.5], [0.0, 1.0]]), np.eye(2), t, t, 0.3, 0.3)
    with pytest.raises(ValueError):
        quadratic_oracle(np.eye(21), np.eye(21), np.ones(21), np.ones(21), 0.3, 0.3)


def test_rotate_toward_sets_angle_and_norm():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=5), rng.normal(size=5)
    for phi in (0.0, 0.4, 1.3, math.pi / 2):
        r = rotate_toward(a, b, phi)
        assert np.linalg.norm(r) == pytest.approx(np.linalg.norm(a))
        assert angle(r, b)[0] == pytest.approx(phi, abs=1e-7)
    par = rotate_toward(b * 2, b, 0.7)
    assert angle(par, b)[0] == pytest.approx(0.7, abs=1e-9)


def _spd(rng, n, cond=3.0):
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return q @ np.diag(np.linspace(1.0, cond, n)) @ q.T


@pytest.mark.parametrize("seed", range(5))
def test_rotation_sweep_rank_agreement(seed):
    rng = np.random.default_rng(seed)
    n = 6
    h = np.eye(n)
    a = rng.normal(size=n)
    b = a / np.linalg.norm(a) * 1.5 + 0.01 * rng.normal(size=n)
    sweep = quadratic_oracle(h, h, a, b, 0.3, 0.3)
    assert sweep.monotone()
    assert sweep.spearman == pytest.approx(1.0)
    hs = _spd(rng, n)
    assert quadratic_oracle(hs, hs, a, b, 0.3, 0.3).exact_losses[0] >= 0


def test_stage1_noise_stats():
    taus = [np.zeros(4), np.ones(4)]
    primes = [np.array([1.0, 1, 1, 1]), np.array([1.0, 1, 1, 1])]
    s = stage1_noise_stats(primes, taus)
    assert s == {"mean_of_mean": 0.5, "mean_variance": 0.25, "runs": 2}
