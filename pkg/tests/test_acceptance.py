"""Acceptance suite: one PASS/FAIL line per criterion, printed even under capture."""

import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from mergeproof.analysis import quadratic_oracle
from mergeproof.config import fixture_config
from mergeproof.merging import adamerging_coefficient_grad
from mergeproof.params import task_vector
from mergeproof.pipeline import run_pipeline
from mergeproof.toymodels import ModelSpec, init_model

TESTS = Path(__file__).parent

ORACLE_TESTS = [
    "test_merging.py::test_ties_matches_brute_force_oracle",
    "test_defense.py::test_stage2_examples",
    "test_defense.py::test_stage2_analytic_cases",
    "test_attacks.py::test_projection_examples",
    "test_attacks.py::test_projection_properties",
    "test_toymodels.py::test_gradient_matches_finite_differences",
    "test_defense.py::test_mask_cardinality_fifty_combos",
    "test_params.py::test_checkpoint_round_trip_bit_identical",
]


def report_line(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


def test_criterion_1_exact_oracles(capsys):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           *[str(TESTS / t) for t in ORACLE_TESTS]],
                          capture_output=True, text=True, cwd=TESTS.parent)
    elapsed = time.perf_counter() - t0
    ok = proc.returncode == 0 and elapsed < 60
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    report_line(capsys, "criterion 1 exact-oracle suite", ok, f"{tail}; {elapsed:.1f}s (limit 60s)")
    assert proc.returncode == 0, proc.stdout[-3000:]
    assert elapsed < 60


@pytest.fixture(scope="module")
def fixture_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("fixture")
    t0 = time.perf_counter()
    report = run_pipeline(fixture_config(seeds=[0, 1, 2]), out)
    return report, out, time.perf_counter() - t0


def _acc(run, role):
    return 100.0 * run["eval"][role]["T_def"]["accuracy"]


def _mean(report, role):
    return float(np.mean([_acc(r, role) for r in report["runs"]]))


def test_criterion_2_fixture_experiment(fixture_run, capsys):
    report, _, elapsed = fixture_run
    runs = report["runs"]
    checks = []

    def check(name, ok, detail):
        checks.append((name, bool(ok)))
        report_line(capsys, f"criterion 2 {name}", ok, detail)

    check("runtime", elapsed < 600, f"{elapsed:.1f}s for {len(runs)} seeds (limit 600s)")
    u_hat, u_def = _mean(report, "theta_hat_def"), _mean(report, "theta_def")
    check("utility preservation", u_hat >= u_def - 3, f"hat {u_hat:.2f} vs def {u_def:.2f} - 3")
    pre = _mean(report, "theta_pre")
    for m in ("ta", "ties"):
        merged, hat = _mean(report, f"merge_{m}"), _mean(report, f"hat_merge_{m}")
        check(f"merge degradation ({m})", hat <= merged - 20, f"protected {hat:.2f} vs merged {merged:.2f} - 20")
        check(f"undefended merge works ({m})", merged >= pre + 10, f"merged {merged:.2f} vs pre {pre:.2f} + 10")
    for r in runs:
        base = _acc(r, "merge_ta")
        drops = {s: base - _acc(r, f"{s}merge_ta") for s in ("hat_", "hat_stage1_", "hat_stage2_")}
        check(f"ablation ordering (ta, seed {r['seed']})",
              drops["hat_"] >= drops["hat_stage1_"] and drops["hat_"] >= drops["hat_stage2_"],
              f"drop both {drops['hat_']:.2f}, stage1 {drops['hat_stage1_']:.2f}, "
              f"stage2 {drops['hat_stage2_']:.2f}")
    for r in runs:
        un, p = _acc(r, "attack_unmask_ta"), _acc(r, "theta_pre")
        check(f"unmask regresses to pretrained (seed {r['seed']})", abs(un - p) <= 10,
              f"unmask {un:.2f} vs pre {p:.2f} (within 10)")
    ge, hat, merged = (_mean(report, k) for k in ("attack_graderase_ta", "hat_merge_ta", "merge_ta"))
    check("graderase partial recovery", hat < ge <= merged - 15,
          f"protected merge {hat:.2f} < graderase {ge:.2f} <= merged {merged:.2f} - 15")
    failed = [name for name, ok in checks if not ok]
    report_line(capsys, "criterion 2 fixture experiment", not failed,
                f"{len(checks) - len(failed)}/{len(checks)} checks" + (f", failing: {failed}" if failed else ""))
    assert not failed, failed


def test_criterion_3_geometry(capsys):
    rng = np.random.default_rng(0)
    n = 6
    a = rng.normal(size=n)
    b = rng.normal(size=n)
    angles = (0.0, math.pi / 6, math.pi / 3, math.pi / 2)
    sweep = quadratic_oracle(np.eye(n), np.eye(n), a, b, 0.3, 0.3, angles)
    sweep_ok = sweep.monotone() and sweep.spearman == 1.0
    report_line(capsys, "criterion 3 rotation sweep", sweep_ok,
                f"spearman {sweep.spearman}, exact {np.round(sweep.exact_losses, 4).tolist()}, "
                f"estimate {np.round(sweep.estimates, 4).tolist()}")

    spec = ModelSpec(4, (5,), 3, "tanh")
    base = init_model(spec, 0)
    models = [base.map(lambda v: v + rng.normal(scale=0.5, size=v.shape)) for _ in range(2)]
    deltas = [task_vector(m, base).delta for m in models]
    x = rng.normal(size=(32, 4))
    c = rng.uniform(0.1, 0.9, size=(2, len(base)))
    _, g = adamerging_coefficient_grad(spec, base, deltas, c, x)
    h, worst = 1e-6, 0.0
    for idx in np.ndindex(c.shape):
        e = np.zeros_like(c)
        e[idx] = h
        num = (adamerging_coefficient_grad(spec, base, deltas, c + e, x)[0]
               - adamerging_coefficient_grad(spec, base, deltas, c - e, x)[0]) / (2 * h)
        worst = max(worst, abs(g[idx] - num) / max(abs(num), abs(g[idx]), 1e-12))
    fd_ok = worst < 1e-4
    report_line(capsys, "criterion 3 adamerging coefficient gradient", fd_ok,
                f"max relative error {worst:.2e} over {c.size} coefficients (limit 1e-4)")
    report_line(capsys, "criterion 3 geometry suite", sweep_ok and fd_ok, f"sweep {sweep_ok}, gradient {fd_ok}")
    assert sweep_ok, sweep
    assert fd_ok, worst


def test_criterion_4_determinism(fixture_run, tmp_path, capsys):
    _, first_dir, _ = fixture_run
    run_pipeline(fixture_config(seeds=[0, 1, 2]), tmp_path)
    a, b = (first_dir / "report.json").read_bytes(), (tmp_path / "report.json").read_bytes()
    report_line(capsys, "criterion 4 determinism", a == b,
                f"report.json {len(a)} bytes, identical={a == b}")
    assert a == b
