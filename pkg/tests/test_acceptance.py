"""Acceptance criteria 1-13, each printing one PASS/FAIL line with its measurements."""
import math
import os
import time

import numpy as np
import pytest

from intraday_hjb.cli import main
from intraday_hjb.data import synthetic_day
from intraday_hjb.domain_bounds import build_grid, compute_bounds, fixed_bounds
from intraday_hjb.hjb_stage3 import (hamiltonian, jump_recurrences, jump_substep,
                                     regularization_sweep, solve_stage3)
from intraday_hjb.kbe_stages import solve_terminal_stages
from intraday_hjb.market_model import ModelParams
from intraday_hjb.policy_eval import pf_solve
from intraday_hjb.simulate import simulate_batch, simulate_paths

from conftest import flat_curves
from oracles import (brute_force_hamiltonian_batch, dp_value, localized_jump_quadrature,
                     zero_penalty_value)
from test_kbe_stages import frozen_setup, stage1_errors

pytestmark = pytest.mark.acceptance


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {number:2d}: {'PASS' if ok else 'FAIL'} | {detail}")
    assert ok, detail


def ratios(errs):
    return [a / b for a, b in zip(errs, errs[1:])]


# --- 1 ----------------------------------------------------------------------

def test_c01_hamiltonian_oracle(capsys):
    rng = np.random.default_rng(101)
    n = 10_000
    y, p = rng.uniform(-500, 500, n), rng.uniform(-500, 500, n)
    gamma = 10 ** rng.uniform(-3, 0, n)
    a, b = rng.uniform(-3000, 3000, (2, n))
    lo, hi = np.minimum(a, b), np.maximum(a, b) + 1e-3
    start = time.perf_counter()
    value, _ = hamiltonian(y, p, gamma, lo, hi)
    brute, step = brute_force_hamiltonian_batch(y, p, gamma, lo, hi, 100_000)
    elapsed = time.perf_counter() - start
    tol = gamma * step**2 / 2 + 1e-9
    excess = np.abs(value - brute) - tol
    ok = bool(np.all(excess <= 0)) and elapsed < 5.0
    report(capsys, 1, ok, f"{n} tuples, max |H - brute| - tol = {excess.max():.3e}, "
                          f"runtime {elapsed:.2f}s")


# --- 2 ----------------------------------------------------------------------

def test_c02_jump_recurrence_first_order(capsys):
    eta_p, eta_m = 1 / 15, 1 / 30
    start = time.perf_counter()
    errs = []
    for n in (100, 200, 400):
        y = np.linspace(0.0, 10.0, n + 1)
        dy = y[1] - y[0]
        Jp, Jm = jump_recurrences(np.sin(y), math.exp(-eta_p * dy), math.exp(-eta_m * dy))
        err = 0.0
        for j in range(1, n):
            qp, qm = localized_jump_quadrature(np.sin, y[j], 0.0, 10.0, eta_p, eta_m, 2001)
            err = max(err, abs(Jp[j] - qp), abs(Jm[j] - qm))
        errs.append(err)
    elapsed = time.perf_counter() - start
    r = ratios(errs)
    ok = min(r) >= 1.8 and elapsed < 1.0
    report(capsys, 2, ok, f"sup errors {['%.3e' % e for e in errs]}, ratios "
                          f"{['%.3f' % v for v in r]}, runtime {elapsed:.2f}s")


# --- 3 ----------------------------------------------------------------------

def test_c03_jump_step_monotone_at_cfl_limit(capsys):
    g = build_grid(ModelParams(), fixed_bounds(-200, 400, -100, 100, -10, 10), (6, 40, 8, 4, 288))
    p = ModelParams(lam=1.0 / g.dt)
    assert g.dt * p.lam == 1.0
    rng = np.random.default_rng(303)
    violations, worst = 0, 0.0
    for _ in range(100):
        lo = rng.standard_normal(g.shape) * rng.uniform(1, 1e3)
        hi = lo + rng.random(g.shape) * (rng.random(g.shape) < 0.5) * rng.uniform(1e-6, 10)
        a, b = jump_substep(lo, lo, g, p), jump_substep(hi, hi, g, p)
        violations += int(np.count_nonzero(a > b))
        worst = max(worst, float(np.max(a - b)))
    report(capsys, 3, violations == 0,
           f"100 ordered pairs at dt*lam = 1: {violations} nodewise violations "
           f"(largest {worst:.3e})")


# --- 4 ----------------------------------------------------------------------

def _wide_and_local(v, d, eta_p, eta_m, h):
    """Jump integrals at y = 0 on [-d, d] and on the three times wider domain."""
    n_loc = int(round(d / h))
    n_wide = 3 * n_loc
    wide = localized_jump_quadrature(v, 0.0, -3 * d, 3 * d, eta_p, eta_m, n_wide + 1)
    local = localized_jump_quadrature(v, 0.0, -d, d, eta_p, eta_m, n_loc + 1)
    return wide, local


def test_c04_localization_decay(capsys):
    p = ModelParams()
    eta_p, eta_m, lam = p.eta_plus, p.eta_minus, p.lam
    v = lambda y: 100.0 + np.sqrt(1.0 + y * y) + 5.0 * np.sin(y / 20.0)
    distances = np.array([60.0, 120.0, 240.0, 480.0])
    h = 0.01
    errors, bounds = [], []
    for d in distances:
        (wp, wm), (lp, lm) = _wide_and_local(v, d, eta_p, eta_m, h)
        errors.append(lam * abs(p.p_plus * (wp - lp) + p.p_minus * (wm - lm)))
        yy = np.arange(-3 * d, 3 * d + h / 2, h)
        L_v = float(np.max(np.abs(np.diff(v(yy)))) / h)
        v0 = abs(float(v(0.0)))
        e_plus = v0 * math.exp(-eta_p * d) + L_v * math.exp(-eta_p * d) * (d + 1 / eta_p)
        e_minus = v0 * math.exp(-eta_m * d) + L_v * math.exp(-eta_m * d) * (d + 1 / eta_m)
        bounds.append(lam * (p.p_plus * e_plus + p.p_minus * e_minus))
    errors, bounds = np.array(errors), np.array(bounds)
    eta = min(eta_p, eta_m)
    halving = errors[:-1] / errors[1:]
    required = np.exp(eta * (distances[1:] - distances[:-1])) / 2
    slope, icpt = np.polyfit(distances, np.log(errors), 1)
    fit = slope * distances + icpt
    resid = np.log(errors) - fit
    r2 = 1 - np.sum(resid**2) / np.sum((np.log(errors) - np.log(errors).mean()) ** 2)
    ok = (bool(np.all(errors <= bounds)) and bool(np.all(halving >= required))
          and r2 >= 0.98)
    report(capsys, 4, ok, f"d={distances.tolist()} err={['%.3e' % e for e in errors]} "
                          f"bound={['%.3e' % b for b in bounds]} halving={['%.3g' % r for r in halving]}"
                          f" need>={['%.3g' % r for r in required]} slope={slope:.4f} R2={r2:.5f}")


# --- 5 ----------------------------------------------------------------------

@pytest.mark.slow
def test_c05_zero_penalty_closed_form(capsys):
    curves = flat_curves(py=100.0)
    start = time.perf_counter()
    worst = {}
    for lam in (0.0, 0.4167):
        p = ModelParams(beta=0.0, lam=lam)
        b = compute_bounds(p, curves, n_paths=10_000, seed=0)
        g = build_grid(p, b, (50, 50, 100, 16, 300))
        V0 = np.asarray(solve_stage3(p, curves, g, np.zeros((g.N_x + 1, g.N_q + 1))).values[-1])
        exact = np.array([zero_penalty_value(y, p, curves, p.T_gc) for y in g.y[1:-1]])
        rel = np.abs(V0[1:-1, 1:-1, 1:-1] / exact[None, :, None] - 1)
        worst[lam] = float(rel.max())
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 0.02 and elapsed < 300
    report(capsys, 5, ok, f"max relative error at interior nodes: lam=0 {worst[0.0]:.4f}, "
                          f"lam=0.4167 {worst[0.4167]:.4f} (limit 0.02), runtime {elapsed:.0f}s")


# --- 6 ----------------------------------------------------------------------

def test_c06_stage1_transport_oracle(capsys):
    start = time.perf_counter()
    errs = stage1_errors(-10.0)
    elapsed = time.perf_counter() - start
    bounded = True
    for level, e in enumerate(errs):
        p, _, g = frozen_setup(level)
        bounded &= e <= p.beta * p.P_max * (g.dx + g.dm + g.dt)
    r = ratios(errs)
    ok = bounded and min(r) >= 1.8 and elapsed < 60
    report(capsys, 6, ok, f"errors {['%.3e' % e for e in errs]}, ratios "
                          f"{['%.3f' % v for v in r]}, within C(dx+dm+dt): {bounded}, "
                          f"runtime {elapsed:.1f}s")


# --- 7 ----------------------------------------------------------------------

def test_c07_pf_against_exhaustive_dp(capsys):
    day = synthetic_day(7)
    p = ModelParams(beta=130.0)
    psi = 2000.0
    g = build_grid(p, fixed_bounds(-500, 800, -psi * p.T_gc, psi * p.T_gc, -psi, psi),
                   (4, 4, 50, 4, 50))
    start = time.perf_counter()
    paths = simulate_paths(p, day.curves, g, 5, 2024)
    gaps = []
    for i in range(5):
        res = pf_solve(paths.path(i), p, g, n_q=50)
        dp = dp_value(paths.Y[i, :g.idx_Tgc], res.q_grids, res.energy, p, g.dt,
                      np.linspace(-psi, psi, 21))
        gaps.append(abs(res.value_q0 - dp) / abs(dp))
    elapsed = time.perf_counter() - start
    ok = max(gaps) <= 0.02 and elapsed < 30
    report(capsys, 7, ok, f"relative PF-DP gaps {['%.4f' % x for x in gaps]} (N_t aligned to "
                          f"{g.N_t}), runtime {elapsed:.1f}s")


# --- 8 ----------------------------------------------------------------------

def _read_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    return header, rows


@pytest.mark.slow
def test_c08_benchmark_ordering(capsys, tmp_path):
    cfg = tmp_path / "c8.ini"
    cfg.write_text("[grid]\nN_x = 50\nN_y = 50\nN_q = 200\nN_m = 16\nN_t = 300\n\n"
                   "[run]\nsnapshot = false\n")
    start = time.perf_counter()
    code = main(["benchmark", "--config", str(cfg), "--out", str(tmp_path / "o"),
                 "--days", "10", "--paths", "100", "--seed", "8"])
    elapsed = time.perf_counter() - start
    assert code == 0
    _, rows = _read_csv(tmp_path / "o" / "pnl.csv")
    pnl = {}
    for day, strat, path, *_, value in rows:
        pnl.setdefault(day, {}).setdefault(strat, {})[int(path)] = float(value)
    violations, ot_wins = 0, 0
    for day, s in pnl.items():
        for i, pf in s["PF"].items():
            violations += int(pf < s["OT"][i] - 0.01 * abs(pf))
        ot_wins += np.mean(list(s["OT"].values())) >= np.mean(list(s["TWAP"].values()))
    ok = violations == 0 and ot_wins >= 7 and elapsed < 1800
    report(capsys, 8, ok, f"{len(pnl)} days x 100 paths: PF bound violations {violations}, "
                          f"OT mean >= TWAP mean on {ot_wins}/10 days, runtime {elapsed:.0f}s")


# --- 9 ----------------------------------------------------------------------

def _tracking(params, curves, grid, compensate):
    _, summary = simulate_batch("price", 100_000, 909, params, curves, grid, compensate)
    s = summary["Y"]
    checkpoints = np.linspace(0, grid.idx_Tgc, 11).round().astype(int)[1:]
    z = (s.mean[checkpoints] - curves.price(grid.t[checkpoints])) / s.standard_error()[checkpoints]
    return z


@pytest.mark.slow
def test_c09_forecast_tracking(capsys):
    p = ModelParams()
    curves = synthetic_day(9).curves
    g = build_grid(p, fixed_bounds(-500, 800, -10, 10, T_gc=p.T_gc), (4, 4, 4, 4, 288))
    z = _tracking(p, curves, g, True)
    z_off = _tracking(p, curves, g, False)
    ok = bool(np.all(np.abs(z) <= 3)) and bool(np.any(np.abs(z_off) > 3))
    report(capsys, 9, ok, f"max |z| with compensator {np.abs(z).max():.2f} (limit 3); "
                          f"without {np.abs(z_off).max():.1f} (must exceed 3)")


# --- 10 ---------------------------------------------------------------------

def test_c10_wind_containment(capsys):
    p = ModelParams()
    curves = synthetic_day(10).curves
    g = build_grid(p, fixed_bounds(-500, 800, -10, 10, T_gc=p.T_gc), (4, 4, 4, 4, 300))
    paths, _ = simulate_batch("wind", 10_000, 1010, p, curves, g)
    bad = int(np.count_nonzero((paths.X < 0) | (paths.X > 1)))
    report(capsys, 10, bad == 0, f"{paths.X.size} samples from 10000 paths, {bad} outside [0, 1]")


# --- 11 ---------------------------------------------------------------------

@pytest.mark.slow
def test_c11_regularization_sweep(capsys):
    p = ModelParams()
    curves = synthetic_day(11).curves
    b = compute_bounds(p, curves, n_paths=10_000, seed=0)
    g = build_grid(p, b, (30, 30, 60, 16, 200))
    start = time.perf_counter()
    eps = [1e-2, 1e-3, 1e-4, 1e-5]
    diffs = regularization_sweep(p, curves, g,
                                 lambda q: solve_terminal_stages(q, curves, g).values, eps)
    elapsed = time.perf_counter() - start
    ok = all(a > b_ for a, b_ in zip(diffs, diffs[1:])) and elapsed < 1200
    report(capsys, 11, ok, f"sup |V - V_eps| at t=0 for eps {eps}: {diffs} (dx = {g.dx:.4f}), "
                           f"runtime {elapsed:.0f}s")


# --- 12 ---------------------------------------------------------------------

REDUCED = "[grid]\nN_x = 10\nN_y = 16\nN_q = 200\nN_m = 8\nN_t = 50\n\n[run]\nsnapshot = false\n"


def _sweep_medians(tmp_path, command, values):
    cfg = tmp_path / "reduced.ini"
    cfg.write_text(REDUCED)
    out = tmp_path / command
    code = main([command, "--config", str(cfg), "--out", str(out), "--days", "20",
                 "--paths", "1000", "--seed", "12", "--values", values])
    assert code == 0
    _, rows = _read_csv(out / f"{command.replace('-', '_')}_summary.csv")
    return [float(r[3]) for r in rows], [float(r[2]) for r in rows]


def _ordered_pairs(medians):
    return sum(b >= a - 0.05 * abs(a) for a, b in zip(medians, medians[1:]))


@pytest.mark.slow
def test_c12_sensitivity_directions(capsys, tmp_path):
    start = time.perf_counter()
    parts, ok = [], True
    for command, values in (("sweep-jumps", "0,0.4167,2.083"), ("sweep-delivery", "0.25,0.5,1"),
                            ("sweep-horizon", "12,18,24")):
        med, mean = _sweep_medians(tmp_path, command, values)
        good = _ordered_pairs(med)
        ok &= good >= 2
        parts.append(f"{command} medians {['%.4g' % m for m in med]} means "
                     f"{['%.4g' % m for m in mean]} ordered {good}/2")
    elapsed = time.perf_counter() - start
    report(capsys, 12, ok, "; ".join(parts) + f"; runtime {elapsed:.0f}s")


# --- 13 ---------------------------------------------------------------------

TINY = ("[grid]\nN_x = 4\nN_y = 8\nN_q = 12\nN_m = 4\nN_t = 50\n\n[bounds]\nmU_paths = 1000\n\n"
        "[benchmark]\npf_n_q = 40\n\n[run]\npaths = 5\ndays = 2\n")


def _tree(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            with open(os.path.join(d, f), "rb") as fh:
                out[os.path.relpath(os.path.join(d, f), root)] = fh.read()
    return out


def test_c13_determinism(capsys, tmp_path):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY)
    commands = [["bounds"], ["solve"], ["evaluate", "--strategies", "OT,TWAP,PF"], ["benchmark"],
                ["sweep-jumps", "--values", "0,0.4167"], ["sweep-delivery", "--values", "0.5,1"],
                ["sweep-horizon", "--values", "18,24"],
                ["sweep-regularization", "--values", "1e-2,1e-3"],
                ["simulate", "--dump"]]
    runs = []
    for attempt in range(2):
        out = tmp_path / f"out{attempt}"
        for c in commands:
            assert main(c + ["--config", str(cfg), "--out", str(out), "--seed", "13"]) == 0
        tree = _tree(out)
        # the echoed config records the output directory itself
        tree["config.ini"] = tree["config.ini"].replace(str(out).encode(), b"OUT")
        runs.append(tree)
    capsys.readouterr()
    differing = sorted(k for k in set(runs[0]) | set(runs[1]) if runs[0].get(k) != runs[1].get(k))
    report(capsys, 13, not differing and len(runs[0]) > 10,
           f"{len(runs[0])} output files over {len(commands)} commands, differing: {differing}")
