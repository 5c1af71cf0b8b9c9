"""Acceptance criteria; each test records one PASS/FAIL line for the terminal summary."""

import math

import numpy as np
import pytest

import conftest
from oracles import (
    box_qp_projected_gradient,
    central_difference,
    general_qp_dual_gradient,
    random_convex_qp,
    rhs_scalar,
)
from test_qp import independent_kkt, split_problem
from test_sqp import circle_problem, quadratic_problem
from wheelmpc.cli import COMPARE_COLUMNS, main
from wheelmpc.io import data_section, read_table
from wheelmpc.lpv import SchedulingPoint, embed_at
from wheelmpc.planner import audit
from wheelmpc.qp import QpStatus, qp_solve
from wheelmpc.sim import DisturbanceConfig, bench_horizon_sweep, logged_states, simulate
from wheelmpc.sqp import SqpStatus, sqp_solve
from wheelmpc.vehicle import Frame, VehicleParams, euler, jacobians

P = VehicleParams()
KINDS = ("nl", "lpv", "lti")
TIMING_COLUMNS = {"median_solve_ms", "mean_solve_ms"}


def record(n, ok, detail):
    conftest.ACCEPTANCE_LINES.append(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def zero_runs(ref_legs, ref_config):
    cfg = ref_config
    return {
        kind: simulate(ref_legs, kind, cfg.weights(), cfg.bounds(), DisturbanceConfig(), cfg.params, cfg.substeps)
        for kind in KINDS
    }


def test_criterion_1_jacobians(rng):
    worst = 0.0
    for i in range(1000):
        frame = Frame.FRONT if i % 2 else Frame.REAR
        x = np.concatenate([rng.uniform(-10, 10, 2), rng.uniform(-math.pi, math.pi, 1), rng.uniform(-0.4, 0.4, 1)])
        u = np.array([rng.uniform(-P.v_max, P.v_max), rng.uniform(-P.gamma_rate_max, P.gamma_rate_max)])
        jx, ju = jacobians(x, u, P, frame)
        front = frame is Frame.FRONT
        fx = central_difference(lambda z: rhs_scalar(z, u, P.l_front, P.l_rear, front), x)
        fu = central_difference(lambda w: rhs_scalar(x, w, P.l_front, P.l_rear, front), u)
        for an, fd in ((jx, fx), (ju, fu)):
            worst = max(worst, np.max(np.abs(an - fd)) / max(1.0, np.max(np.abs(fd))))
    record(1, worst < 1e-6, f"max relative Jacobian error {worst:.2e} (< 1e-6) over 1000 points")


def test_criterion_2_taylor_ratio(rng, ref_legs):
    # the amplitude sets how far third-order terms reach into the ratio; 0.01
    # is asymptotic at every sampled point, 0.05 is reported for context
    ratios = {0.01: [], 0.05: []}
    for _ in range(100):
        leg = ref_legs[int(rng.integers(0, 2))]
        k = int(rng.integers(0, len(leg)))
        x, u = leg.states[k], leg.inputs[k]
        m = embed_at(SchedulingPoint(x[2], x[3], u[0], u[1]), P, leg.ts)
        dx = rng.normal(size=4)
        du = rng.normal(size=2)

        def remainder(s):
            exact = euler(x + s * dx, u + s * du, P, leg.ts) - euler(x, u, P, leg.ts)
            return np.linalg.norm(exact - (m.a @ (s * dx) + m.b @ (s * du)))

        for amp in ratios:
            ratios[amp].append(remainder(amp) / remainder(amp / 2))
    r, wide = np.array(ratios[0.01]), np.array(ratios[0.05])
    ok = bool(np.all((r >= 3.2) & (r <= 4.8)))
    record(2, ok, f"Taylor remainder ratios in [{r.min():.3f}, {r.max():.3f}] (4 +- 20%) at 100 points, "
                  f"amplitude 0.01 (amplitude 0.05: [{wide.min():.3f}, {wide.max():.3f}])")


def test_criterion_3_qp_certification(rng):
    worst_kkt = worst_dev = 0.0
    failures = 0
    kinds = ("box", "ineq", "mixed")
    for i in range(500):
        kind = kinds[i % 3]
        n = int(rng.integers(1, 31)) if kind == "box" else int(rng.integers(2, 31))
        h, g, rows, lo, hi, eq = random_convex_qp(rng, n, kind)
        p = split_problem(h, g, rows, lo, hi, eq)
        sol = qp_solve(p)
        if sol.status is not QpStatus.OPTIMAL:
            failures += 1
            continue
        if kind == "box":
            ref = box_qp_projected_gradient(h, g, np.where(np.isinf(lo), -1e6, lo), np.where(np.isinf(hi), 1e6, hi),
                                            iters=1_000_000)
        else:
            ref = general_qp_dual_gradient(h, g, rows, lo, hi)
        worst_kkt = max(worst_kkt, independent_kkt(p, sol))
        worst_dev = max(worst_dev, float(np.max(np.abs(sol.z - ref))))
    ok = failures == 0 and worst_kkt <= 1e-6 and worst_dev <= 1e-5
    record(3, ok, f"500 QPs: {failures} non-optimal, max KKT {worst_kkt:.2e} (<= 1e-6), "
                  f"max argmin deviation {worst_dev:.2e} (<= 1e-5)")


def test_criterion_4_sqp_analytic(rng):
    circle = sqp_solve(circle_problem())
    err = float(np.max(np.abs(circle.z - np.array([1.0, 2.0]) / math.sqrt(5))))
    nlp, _ = quadratic_problem(rng)
    quad = sqp_solve(nlp)
    ok = (circle.status is SqpStatus.CONVERGED and err <= 1e-6
          and quad.status is SqpStatus.CONVERGED and quad.iterations == 1)
    record(4, ok, f"circle error {err:.2e} (<= 1e-6), quadratic problem {quad.status.value} "
                  f"in {quad.iterations} iteration(s) (== 1)")


def test_criterion_5_planner_audit(ref_legs, ref_config):
    sc = ref_config.scenario()
    ends = [(sc.loading_pose, sc.unloading_pose), (sc.unloading_pose, sc.loading_pose)]
    reps = [audit(leg, sc, a.as_array(), b.as_array()) for leg, (a, b) in zip(ref_legs, ends)]
    gamma = max(r["max_abs_gamma"] for r in reps)
    clear = min(r["min_clearance"] for r in reps)
    term = max(r["terminal_error"] for r in reps)
    replay = max(r["replay_error"] for r in reps)
    ok = gamma <= 0.40 and clear >= sc.d_safe - 1e-4 and term <= 1e-3 and replay <= 1e-8
    record(5, ok, f"max|gamma| {gamma:.6f} (<= 0.40), min clearance {clear:.6f} (>= {sc.d_safe - 1e-4:g}), "
                  f"terminal {term:.2e} (<= 1e-3), replay {replay:.2e} (<= 1e-8)")


def test_criterion_6_error_ordering(ref_runs):
    e = {k: ref_runs[k].summary()["mean_abs_err_m"] for k in KINDS}
    ok = e["nl"] <= e["lpv"] <= 1.5 * e["nl"] and e["lti"] >= 1.5 * e["lpv"]
    record(6, ok, f"mean abs error NL {e['nl']:.4f}, LPV {e['lpv']:.4f}, LTI {e['lti']:.4f} m "
                  f"(need NL <= LPV <= 1.5 NL and LTI >= 1.5 LPV)")


def test_criterion_7_zero_error_invariance(zero_runs, ref_legs, ref_config):
    nominal = np.vstack([leg.inputs[:-1] for leg in ref_legs])
    parts, ok = [], True
    for kind, run in zero_runs.items():
        commanded = np.array([r.commanded for r in run.records])
        dev = float(np.max(np.abs(commanded - nominal)))
        err = run.summary()["mean_abs_err_m"]
        ok &= dev <= 1e-9 and err < 1e-3
        parts.append(f"{kind} input deviation {dev:.2e} mean err {err:.2e}")
    # context only: the same check with the plant integrated exactly like the model
    exact = simulate(ref_legs, "lpv", ref_config.weights(), ref_config.bounds(), DisturbanceConfig(), P, substeps=1)
    parts.append(f"(lpv with 1 plant substep: mean err {exact.summary()['mean_abs_err_m']:.1e})")
    record(7, ok, f"{ref_config.substeps} plant substeps: " + "; ".join(parts))


def test_criterion_8_compute_scaling(ref_runs, ref_legs, ref_config):
    cfg = ref_config
    states = logged_states(ref_runs["lpv"], 50)
    horizons = [5, 10, 15, 20, 25]
    rows = bench_horizon_sweep(ref_legs, states, horizons, 1, cfg.weights(), cfg.bounds(), cfg.params)
    t = {(r["controller"], r["horizon"]): r for r in rows}
    nl_ratio = t["nl", 25]["mean_ms"] / t["nl", 5]["mean_ms"]
    lpv_ratio = t["lpv", 25]["mean_ms"] / t["lpv", 5]["mean_ms"]
    close = [t["lpv", n]["median_ms"] / t["lti", n]["median_ms"] for n in horizons]
    ok = nl_ratio >= 3 * lpv_ratio and all(1 / 1.5 <= c <= 1.5 for c in close)
    record(8, ok, f"N=25/N=5 time ratio NL {nl_ratio:.2f}, LPV {lpv_ratio:.2f} (need NL >= 3x LPV); "
                  f"LPV/LTI median ratios {', '.join(f'{c:.2f}' for c in close)} (within 1.5x)")


def test_criterion_9_determinism(cli_plan_dir, ref_leg_files, tmp_path):
    same = []
    plan2 = tmp_path / "plan2"
    assert main(["plan", "--out", str(plan2)]) == 0
    for name in ("leg1.csv", "leg2.csv"):
        same.append(data_section((cli_plan_dir / name).read_text()) == data_section((plan2 / name).read_text()))
    for kind in KINDS:
        outs = [tmp_path / f"{kind}{i}.csv" for i in range(2)]
        for o in outs:
            assert main(["track", *ref_leg_files, "--controller", kind, "--out", str(o)]) == 0
        same.append(data_section(outs[0].read_text()) == data_section(outs[1].read_text()))
    tables = []
    for i in range(2):
        o = tmp_path / f"cmp{i}.csv"
        assert main(["compare", *ref_leg_files, "--out", str(o)]) == 0
        tables.append([{c: r[c] for c in COMPARE_COLUMNS if c not in TIMING_COLUMNS} for r in read_table(o)])
    same.append(tables[0] == tables[1])
    record(9, all(same), f"{sum(same)}/{len(same)} repeated outputs identical (plan legs, track logs, compare table)")


def test_criterion_10_frame_switching(zero_runs, ref_legs):
    switch_steps = {(leg.leg, k) for leg in ref_legs for k in leg.switches}
    parts, ok = [], True
    for kind, run in zero_runs.items():
        at_switch = [r.status for r in run.records if (r.leg, r.k) in switch_steps]
        bad = [s for s in at_switch if s not in ("OPTIMAL", "SLACK")]
        ok &= run.frame_switches() >= 2 and len(at_switch) == len(switch_steps) and not bad
        parts.append(f"{kind} {run.frame_switches()} switches, {len(bad)} failed solves at {len(at_switch)} switch steps")
    record(10, ok, "; ".join(parts))
