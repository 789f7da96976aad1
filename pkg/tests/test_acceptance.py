"""End-to-end acceptance checks at desk scale.

Each test pins a headline behavior of the package with explicit tolerances
and a wall-clock budget: generator closed forms against Monte Carlo, scan
orthogonality, pathwise purification, martingale conservation, PDE residuals
of the closed-form values, solver convergence, policy dominance, master
equation decay, bang-bang normalization, and structural invariants.
"""

import json
import time
from itertools import product

import numpy as np

from blochbellman import cli
from blochbellman import control as ctl
from blochbellman import dynamics as dyn
from blochbellman import filtersim as fs
from blochbellman import functionals as fn
from blochbellman import hjb
from blochbellman import qstate as qs

EZ = np.array([0.0, 0.0, 1.0])


def test_generator_grid_closed_form_and_mc():
    t_start = time.monotonic()
    F = qs.purity_deficit()
    axis = np.linspace(-0.5, 0.5, 9)
    # closed form lam^2 (r^2 - 1)(1 - z^2) under e_z probing, any strength
    for lam in (1.0, 0.8):
        channels = [dyn.ChannelSpec(EZ, lam ** 2)]
        for x, y, z in product(axis, axis, axis):
            r = np.array([x, y, z])
            expected = lam ** 2 * (x * x + y * y + z * z - 1.0) * (1.0 - z * z)
            closed = fn.generator(F, r, np.zeros(3), channels).total
            assert abs(closed - expected) <= 1e-10
    # one-step Monte Carlo agrees within 3 stderr + 10 h at every node
    channels = [dyn.ChannelSpec(EZ, 1.0)]
    h = 1e-3
    for idx, (x, y, z) in enumerate(product(axis, axis, axis)):
        r = np.array([x, y, z])
        closed = fn.generator(F, r, np.zeros(3), channels).total
        est = fn.mc_generator_estimate(F, r, (np.zeros(3), channels),
                                       h=h, n_traj=20_000, seed=1000 + idx)
        assert abs(closed - est.value) <= 3.0 * est.stderr + 10.0 * h
    assert time.monotonic() - t_start <= 120.0


def test_scan_direction_orthogonality():
    t_start = time.monotonic()
    F = qs.purity_deficit()
    rng = np.random.default_rng(42)
    for _ in range(100):
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        r = (0.05 + 0.9 * rng.random()) * v
        n = fn.scan_optimal_direction(F, r)
        assert abs(float(n @ r)) <= 1e-6
    assert time.monotonic() - t_start <= 60.0


def test_pathwise_purification():
    t_start = time.monotonic()
    grid = fs.TimeGrid(0.0, 2.0, 1e-4)
    policy = ctl.make_policy("orthogonal_adaptive", lam=1.0)
    _, records = fs.simulate_ensemble(
        np.array([0.6, 0.0, 0.0]), policy, grid, 100, 97,
        [qs.purity_deficit()], return_records=True,
    )
    reference = 0.64 * np.exp(-grid.times())
    finals = []
    for rec in records:
        deficit = 1.0 - np.einsum("ij,ij->i", rec.states, rec.states)
        assert np.max(np.abs(deficit - reference)) <= 1e-3
        finals.append(deficit[-1])
    # purification is pathwise deterministic: the final spread collapses
    assert float(np.std(finals)) <= 1e-5
    assert time.monotonic() - t_start <= 120.0


def test_martingale_conservation():
    t_start = time.monotonic()
    grid = fs.TimeGrid(0.0, 2.0, 1e-3)
    policy = ctl.make_policy("fixed_axis", direction=EZ, lam=1.0)
    stats = fs.simulate_ensemble(
        np.array([0.0, 0.0, 0.3]), policy, grid, 10_000, 11, [qs.component(2)]
    )
    dev = abs(float(stats.mean[-1, 0]) - 0.3)
    assert dev <= 3.0 * float(stats.stderr()[-1, 0])
    assert time.monotonic() - t_start <= 180.0


def test_closed_form_pde_residuals_and_offset():
    t_start = time.monotonic()
    T = 0.4

    def transport(t, r):
        return 1.0 - r ** 2 * np.exp(-(T - t))

    def backward(t, r):
        return (1.0 - r ** 2) * np.exp(-(T - t))

    rep_t = hjb.verify_closed_form(transport, "radial_transport")
    rep_b = hjb.verify_closed_form(backward, "generator_backward")
    assert rep_t.max_abs <= 1e-6
    assert rep_b.max_abs <= 1e-6
    tt, rr = np.meshgrid(rep_t.t_axis, rep_t.r_axis, indexing="ij")
    offset = transport(tt, rr) - backward(tt, rr)
    np.testing.assert_allclose(offset, 1.0 - np.exp(-(T - tt)), rtol=0, atol=1e-12)
    assert time.monotonic() - t_start <= 10.0


def test_radial_value_convergence_and_policy():
    t_start = time.monotonic()
    costs = ctl.purity_deficit_costs()
    channels = [dyn.ChannelSpec(EZ, 1.0)]
    assert len(hjb.DEFAULT_ALPHAS) == 9
    sup = {}
    for dx in (0.02, 0.01, 0.005):
        vgrid = hjb.solve_measurement_hjb(
            channels, costs, hjb.GridSpec(mode="radial", horizon=1.0, dx=dx)
        )
        r_ax = vgrid.axes[0]
        gap = np.abs(vgrid.values[0] - (1.0 - r_ax ** 2) * np.exp(-1.0))
        sup[dx] = float(np.max(gap))
        if dx == 0.01:
            assert sup[dx] <= 5e-3
            # orthogonal probing wins at every interior node, boundary is off
            assert np.all(vgrid.policy[:-1, 1:-1] == 0)
            assert np.all(vgrid.policy[:, -1] == hjb.OFF)
    assert sup[0.02] / sup[0.01] >= 1.8
    assert sup[0.01] / sup[0.005] >= 1.8
    assert time.monotonic() - t_start <= 60.0


def test_policy_dominance_benchmark(tmp_path):
    t_start = time.monotonic()
    cfg = {
        "seed": 2024,
        "radii": [0.0, 0.3, 0.6, 0.9],
        "horizon": 1.0,
        "dt": 1e-3,
        "n_traj": 5000,
        "lam": 1.0,
        "grid_dx": 0.02,
    }
    report = cli.cmd_purify_benchmark(cfg, str(tmp_path))
    assert report["passed"]
    tab = np.genfromtxt(tmp_path / "purify_benchmark.csv", delimiter=",",
                        names=True, dtype=None, encoding="utf-8")
    for rad in cfg["radii"]:
        rows = tab[np.isclose(tab["r0"], rad)]
        by_name = {row["policy"]: (float(row["mean_final_deficit"]),
                                   float(row["stderr_final"])) for row in rows}
        om, ose = by_name["orthogonal_adaptive"]
        for other in ("fixed_axis_ez", "fixed_axis_ex", "no_measurement"):
            pm, pse = by_name[other]
            assert om <= pm + 3.0 * (ose + pse)
        assert abs(om - (1.0 - rad ** 2) * np.exp(-1.0)) <= 1e-3
    assert time.monotonic() - t_start <= 300.0


def test_master_equation_decay():
    t_start = time.monotonic()
    grid = fs.TimeGrid(0.0, 2.0, 1e-3)
    channels = [dyn.ChannelSpec(EZ, 1.0)]
    rec = fs.integrate_me(np.array([1.0, 0.0, 0.0]),
                          (np.zeros(3), channels), grid)
    x_final = float(rec.states[-1, 0])
    reference = float(np.exp(-1.0))
    assert abs(x_final - reference) / reference <= 1e-6
    assert time.monotonic() - t_start <= 1.0


def test_bangbang_normalization_and_gauge():
    t_start = time.monotonic()
    rng = np.random.default_rng(7)
    xy_plane = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    for trial in range(1000):
        v = rng.normal(size=3)
        q = (rng.random() * v / np.linalg.norm(v))
        p = rng.normal(size=3) * (0.5 + rng.random())
        radius = 0.2 + 1.8 * rng.random()
        subspace = xy_plane if trial % 2 else None
        constraint = ctl.ball_constraint(radius, subspace=subspace)
        lam = 1.5 * rng.random()
        value, u_opt = ctl.pontryagin_hamiltonian(q, p, None, constraint, lam)
        proj = constraint.project(np.cross(q, p))
        m = float(np.linalg.norm(proj))
        damping = -0.5 * lam ** 2 * (q[0] * p[0] + q[1] * p[1])
        if m <= 1e-9:
            np.testing.assert_allclose(u_opt, 0.0, atol=1e-12)
            continue
        np.testing.assert_allclose(u_opt, radius * proj / m, rtol=0, atol=1e-12)
        assert abs(value - (radius * m + damping)) <= 1e-12

    # the scalar part of the costate never enters the value or the control
    constraint = ctl.ball_constraint(1.0)
    for _ in range(100):
        q = rng.normal(size=3) * 0.5
        v = rng.normal(size=3)
        c0, c = rng.normal(size=2)
        base = qs.observable(c0, v)
        shifted = base + c * np.eye(2)
        v1, u1 = ctl.pontryagin_hamiltonian(q, base, None, constraint, 1.0)
        v2, u2 = ctl.pontryagin_hamiltonian(q, shifted, None, constraint, 1.0)
        assert abs(v1 - v2) <= 1e-12 * max(1.0, abs(v1))
        np.testing.assert_allclose(u1, u2, rtol=0, atol=1e-12)
    assert time.monotonic() - t_start <= 1.0


def test_structural_invariants(monkeypatch):
    t_start = time.monotonic()
    grid = fs.TimeGrid(0.0, 1.0, 1e-3)
    direction = np.array([0.36, 0.48, 0.8])
    policy = ctl.make_policy("fixed_axis", direction=direction, lam=1.1)
    _, records = fs.simulate_ensemble(
        np.array([0.2, -0.1, 0.4]), policy, grid, 8, 5,
        [qs.purity_deficit()], return_records=True,
    )
    for rec in records:
        radii = np.linalg.norm(rec.states, axis=1)
        assert np.max(radii) <= 1.0 + 1e-12
        for r in rec.states[::100]:
            rho = qs.observable(0.5, 0.5 * r)
            assert abs(np.trace(rho) - 1.0) <= 1e-15
            np.testing.assert_allclose(rho, rho.conj().T, rtol=0, atol=0)
            assert float(np.linalg.eigvalsh(rho).min()) >= -1e-12
        # record = innovation + lam <sigma_n> dt with the pre-step state
        signal = np.sqrt(1.1 ** 2) * (rec.states[:-1] @ direction)
        np.testing.assert_allclose(
            np.diff(rec.y, axis=0),
            np.diff(rec.w, axis=0) + signal[:, None] * grid.dt,
            rtol=0, atol=1e-15,
        )

    results = {}
    for workers in ("1", "4"):
        monkeypatch.setenv("BB_NUM_WORKERS", workers)
        stats = fs.simulate_ensemble(
            np.array([0.3, 0.0, 0.2]),
            ctl.make_policy("orthogonal_adaptive", lam=1.0),
            fs.TimeGrid(0.0, 0.5, 1e-3), 700, 13,
            [qs.purity_deficit(), qs.component(2)],
        )
        results[workers] = (stats.mean.copy(), stats.variance.copy())
    assert np.array_equal(results["1"][0], results["4"][0])
    assert np.array_equal(results["1"][1], results["4"][1])
    assert time.monotonic() - t_start <= 120.0
