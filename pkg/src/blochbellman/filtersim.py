"""Time integration of the qubit dynamics.

Deterministic trajectories integrate dr/dt with a classical fixed-step RK4.
Stochastic trajectories use the explicit Euler scheme

    r <- r + drift dt + sum_j l_j dW_j,   then radial projection,

driven by per-trajectory counter-based noise streams (numpy Philox keyed by
[master_seed, trajectory_index]), so ensembles are bit-reproducible for any
worker count.

Noise increments default to the symmetric two-point law +-sqrt(dt), the
standard weak-order-1 choice; it additionally makes dW^2 = dt hold exactly
per step, so pathwise identities whose continuous-time proofs rely on the
quadratic variation (for example deterministic purification under orthogonal
probing) hold at finite dt instead of only in the dt -> 0 limit. Gaussian
increments via the trigonometric Box-Muller pair transform are available with
noise="gaussian".
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import dynamics as dyn
from . import qstate as qs

CHUNK = 256
WORKER_ENV = "BB_NUM_WORKERS"


class PolicyViolation(RuntimeError):
    """A policy emitted controls outside its declared constraint."""


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    dt: float

    def __post_init__(self):
        if not (self.t0 < self.T):
            raise ValueError("TimeGrid requires t0 < T")
        if self.dt <= 0:
            raise ValueError("TimeGrid requires dt > 0")
        steps = (self.T - self.t0) / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("(T - t0)/dt must be an integer to 1e-9")

    @property
    def n_steps(self):
        return int(round((self.T - self.t0) / self.dt))

    def times(self):
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


@dataclass(frozen=True)
class TrajectoryRecord:
    """One path: states, applied controls, and measurement bookkeeping.

    y and w are cumulative per observed channel slot (shape (n_times, k));
    controls holds whatever the driving policy emitted per step (strength
    rows for measurement policies, field vectors for open-loop runs), with a
    zero row appended at the final time so all sequences share a length.
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    y: np.ndarray
    w: np.ndarray


@dataclass(frozen=True)
class EnsembleStats:
    times: np.ndarray
    functionals: tuple
    mean: np.ndarray  # (n_times, n_functionals)
    variance: np.ndarray
    n_traj: int
    master_seed: int

    def stderr(self):
        return np.sqrt(self.variance / self.n_traj)


def project_physical(r):
    """Radially rescale to the unit sphere when |r| > 1; identity otherwise."""
    r = np.asarray(r, dtype=float)
    n = np.linalg.norm(r)
    if n > 1.0:
        return r / n
    return r


def _project_batch(R):
    n = np.linalg.norm(R, axis=1)
    over = n > 1.0
    if np.any(over):
        R[over] /= n[over, None]
    return R


def integrate_me(r0, control, grid):
    """Fixed-step 4th-order integration of the deterministic master equation.

    `control` is either a (field, channels) pair or a callable t -> (field,
    channels). Aborts with a diagnostic if |r| exceeds 1.01 (step instability).
    """
    r = qs.check_bloch(np.asarray(r0, dtype=float)).copy()
    times = grid.times()
    states = np.empty((len(times), 3))
    fields = np.empty((len(times), 3))
    states[0] = r
    if callable(control):
        ctrl = control
    else:
        ctrl = lambda t: control

    for i in range(grid.n_steps):
        t = times[i]
        u, channels = ctrl(t)
        uf = dyn._as_field(u)
        fields[i] = uf

        def f(rr):
            return dyn.qubit_drift(uf, channels, rr).bloch_rate

        h = grid.dt
        k1 = f(r)
        k2 = f(r + 0.5 * h * k1)
        k3 = f(r + 0.5 * h * k2)
        k4 = f(r + h * k3)
        r = r + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if np.linalg.norm(r) > 1.01:
            raise RuntimeError(
                f"integration unstable at t={t + h:.6g}: |r|={np.linalg.norm(r):.6g} > 1.01"
            )
        states[i + 1] = r
    fields[-1] = 0.0
    empty = np.zeros((len(times), 0))
    return TrajectoryRecord(times=times, states=states, controls=fields, y=empty, w=empty)


def step_sme(r, policy_output, dt, dW):
    """One Euler step of the filtering equation with externally supplied dW.

    policy_output is (field, channels); dW holds one increment per observed
    channel, in channel order.
    """
    r = np.asarray(r, dtype=float)
    u, channels = policy_output
    observed = [ch for ch in channels if ch.kind == dyn.OBSERVED]
    dW = np.atleast_1d(np.asarray(dW, dtype=float))
    if len(dW) != len(observed):
        raise ValueError("need one dW per observed channel")
    out = r + dyn.qubit_drift(u, channels, r).bloch_rate * dt
    for ch, w in zip(observed, dW):
        out = out + dyn.qubit_fluctuation(ch, r).l * w
    return project_physical(out)


def trajectory_generator(master_seed, traj_index):
    """The counter-based stream of one trajectory: Philox keyed by (seed, index)."""
    key = np.array([master_seed, traj_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def draw_increments(gen, n_steps, n_slots, dt, noise):
    """(n_steps, n_slots) Wiener increments from an already-keyed generator."""
    n = n_steps * n_slots
    if noise == "two_point":
        u = gen.random(n)
        dW = np.where(u < 0.5, -1.0, 1.0) * np.sqrt(dt)
    elif noise == "gaussian":
        m = (n + 1) // 2
        u1 = 1.0 - gen.random(m)  # (0, 1]
        u2 = gen.random(m)
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([rad * np.cos(2.0 * np.pi * u2), rad * np.sin(2.0 * np.pi * u2)])[:n]
        dW = z * np.sqrt(dt)
    else:
        raise ValueError("noise must be 'two_point' or 'gaussian'")
    return dW.reshape(n_steps, n_slots)


def _merge_stats(a, b):
    # Chan et al. pairwise combine of (n, mean, M2); exact and order-fixed
    na, ma, Ma = a
    nb, mb, Mb = b
    n = na + nb
    delta = mb - ma
    mean = ma + delta * (nb / n)
    M2 = Ma + Mb + delta * delta * (na * nb / n)
    return (n, mean, M2)


def _chunk_stats(values):
    # values: (m, n_times, F) -> (n, mean, M2) over axis 0
    m = values.shape[0]
    mean = values.mean(axis=0)
    M2 = np.sum((values - mean) ** 2, axis=0)
    return (m, mean, M2)


def _worker_count(n_chunks):
    env = os.environ.get(WORKER_ENV)
    if env is not None:
        w = int(env)
        if w < 1:
            raise ValueError(f"{WORKER_ENV} must be >= 1")
    else:
        w = os.cpu_count() or 1
    return max(1, min(w, n_chunks))


def _simulate_chunk(
    r0, policy, grid, n_slots, traj_indices, master_seed, funcs, noise, want_records
):
    m = len(traj_indices)
    n_steps = grid.n_steps
    times = grid.times()
    R = np.tile(np.asarray(r0, dtype=float), (m, 1))
    noise_arr = np.empty((m, n_steps, n_slots))
    for i, idx in enumerate(traj_indices):
        gen = trajectory_generator(master_seed, idx)
        noise_arr[i] = draw_increments(gen, n_steps, n_slots, grid.dt, noise)

    values = np.empty((m, n_steps + 1, len(funcs)))
    for fi, f in enumerate(funcs):
        values[:, 0, fi] = f.evaluate_batch(R)

    if want_records:
        states_path = np.empty((m, n_steps + 1, 3))
        states_path[:, 0] = R
        controls_path = np.zeros((m, n_steps + 1, n_slots))
        dy_path = np.zeros((m, n_steps, n_slots))

    for step in range(n_steps):
        t = times[step]
        U, dirs, strengths = policy.batch(t, R)
        _validate_policy_output(policy, t, U, dirs, strengths)
        drift = dyn.drift_batch(U, dirs, strengths, R)
        ls = dyn.fluctuation_batch(dirs, strengths, R)
        dW = noise_arr[:, step, :]
        if want_records:
            lam_sig = np.sqrt(strengths) * np.einsum("nkc,nc->nk", dirs, R)
            dy_path[:, step, :] = dW + lam_sig * grid.dt
            controls_path[:, step, :] = strengths
        R = R + drift * grid.dt + np.einsum("nk,nkc->nc", dW, ls)
        R = _project_batch(R)
        for fi, f in enumerate(funcs):
            values[:, step + 1, fi] = f.evaluate_batch(R)
        if want_records:
            states_path[:, step + 1] = R

    stats = _chunk_stats(values)
    records = None
    if want_records:
        records = []
        for i in range(m):
            records.append(
                TrajectoryRecord(
                    times=times.copy(),
                    states=states_path[i],
                    controls=controls_path[i],
                    y=np.vstack([np.zeros((1, n_slots)), np.cumsum(dy_path[i], axis=0)]),
                    w=np.vstack(
                        [np.zeros((1, n_slots)), np.cumsum(noise_arr[i], axis=0)]
                    ),
                )
            )
    return stats, records


def _validate_policy_output(policy, t, U, dirs, strengths):
    if dirs.shape[1]:
        norms = np.linalg.norm(dirs, axis=2)
        active = strengths > 0
        bad = active & (np.abs(norms - 1.0) > 1e-9)
        if np.any(bad):
            raise PolicyViolation(f"non-unit measurement direction emitted at t={t:.6g}")
    if np.any(strengths < -1e-12):
        raise PolicyViolation(f"negative measurement strength emitted at t={t:.6g}")
    constraint = getattr(policy, "constraint", None)
    if constraint is not None and not np.all(constraint.contains_batch(strengths)):
        raise PolicyViolation(f"policy output leaves its constraint set at t={t:.6g}")


def simulate_ensemble(
    r0,
    policy,
    grid,
    n_traj,
    master_seed,
    functionals,
    noise="two_point",
    return_records=False,
):
    """Monte Carlo ensemble of filtering trajectories under a feedback policy.

    Returns EnsembleStats with per-time mean and (population) variance of each
    requested functional; with return_records=True additionally returns the
    list of TrajectoryRecord in trajectory order. Results are bit-identical
    for any BB_NUM_WORKERS >= 1: trajectories own keyed noise streams and the
    chunk reduction runs in fixed index order.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    r0 = qs.check_bloch(np.asarray(r0, dtype=float))
    funcs = tuple(functionals)
    n_slots = policy.n_slots
    chunks = [range(lo, min(lo + CHUNK, n_traj)) for lo in range(0, n_traj, CHUNK)]

    def run(idx_range):
        return _simulate_chunk(
            r0, policy, grid, n_slots, list(idx_range), master_seed, funcs, noise, return_records
        )

    n_workers = _worker_count(len(chunks))
    if n_workers == 1:
        results = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run, chunks))

    total = results[0][0]
    for st, _ in results[1:]:
        total = _merge_stats(total, st)
    n, mean, M2 = total
    stats = EnsembleStats(
        times=grid.times(),
        functionals=tuple(f.name for f in funcs),
        mean=mean,
        variance=np.maximum(M2 / n, 0.0),
        n_traj=n,
        master_seed=int(master_seed),
    )
    if return_records:
        records = [r for _, recs in results for r in recs]
        return stats, records
    return stats
