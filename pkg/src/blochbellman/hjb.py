"""Backward dynamic-programming solvers on the Bloch ball.

Two explicit sweeps share the machinery here: a deterministic one for
Hamiltonian field steering (value iteration over a finite control
dictionary with multilinear interpolation of Euler departures) and a
stochastic one for measurement-direction control (pointwise generator
minimization over a finite direction dictionary, with derivatives taken
from the previous slice by central differences). Both store per-node
argmin codes so a feedback policy can be read back off the table.

`verify_closed_form` checks closed-form value candidates against the two
radial reduced equations by finite differences. The two equations differ
by a first-order term `-(1/2r) dS/dr`; their purification solutions
differ by the state-independent function 1 - e^{-(T-t)} and share
gradients, hence policies. Both are kept so either candidate can be
checked against its own equation.

Node updates within one slice are plain vectorized array ops (trivially
parallel, worker-count independent); slices are strictly sequential.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import control as ctl
from .dynamics import OBSERVED, ChannelSpec
from .qstate import EPS_BALL, observable_parts

log = logging.getLogger(__name__)

OFF = 255  # policy code: measurement switched off at this node

_CORNERS = np.array(
    [[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1],
     [1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1]]
)

DEFAULT_ALPHAS = (0.0, 0.25, -0.25, 0.5, -0.5, 0.75, -0.75, 1.0, -1.0)


@dataclass(frozen=True)
class GridSpec:
    """Discretization request for the backward solvers.

    mode "ball": uniform Cartesian lattice on [-1,1]^3 with spacing dx
    (2/dx must be an integer); nodes with |r| <= 1 are admissible, the
    rest of the cube is a smoothly continued ghost zone. mode "radial":
    uniform lattice on r in [0,1] (1/dx integer, at least 3 nodes).

    dt=None picks the largest stable step and shrinks it to divide the
    horizon exactly; an explicit dt must divide the horizon and respect
    the stability bound or the solver raises. store_stride=None keeps
    every slice for small runs and subsamples long ones; the initial and
    terminal slices are always retained. alphas is the candidate
    dictionary of direction cosines n.rhat for the measurement sweep,
    zero first so ties resolve to the orthogonal direction.
    """

    mode: str = "radial"
    t0: float = 0.0
    horizon: float = 1.0
    dx: float = 0.02
    dt: Optional[float] = None
    store_stride: Optional[int] = None
    alphas: tuple = DEFAULT_ALPHAS

    def __post_init__(self):
        if self.mode not in ("radial", "ball"):
            raise ValueError("mode must be 'radial' or 'ball'")
        if self.dx <= 0:
            raise ValueError("dx must be positive")
        if self.horizon < self.t0:
            raise ValueError("horizon must be >= t0")
        span = 2.0 if self.mode == "ball" else 1.0
        steps = span / self.dx
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError(f"{span}/dx must be an integer node count")
        if self.mode == "radial" and round(steps) < 2:
            raise ValueError("radial mode needs at least 3 nodes (dx <= 0.5)")
        if self.store_stride is not None and self.store_stride < 1:
            raise ValueError("store_stride must be a positive integer")
        a = np.asarray(self.alphas, dtype=float)
        if a.size == 0 or np.any(np.abs(a) > 1 + 1e-12):
            raise ValueError("alphas must be nonempty direction cosines in [-1, 1]")

    def state_axis(self):
        if self.mode == "ball":
            n = round(2.0 / self.dx) + 1
            return np.linspace(-1.0, 1.0, n)
        n = round(1.0 / self.dx) + 1
        return np.linspace(0.0, 1.0, n)


@dataclass
class ValueGrid:
    """Backward value table with stored argmin policy codes.

    times is ascending and always contains the initial and terminal
    times; values[k] is the S slice at times[k] and policy[k] the argmin
    dictionary code per node (OFF = measurement off; for field grids
    code 0 is the first dictionary row, conventionally coasting). The
    terminal policy row repeats the last computed step as a
    continuation; for field grids terminal_controls additionally holds
    the bequest's terminal minimizer per node when the costs provide
    one. Cube nodes outside the ball (mask False) carry smoothly
    continued values that only serve as interpolation ghosts.
    """

    mode: str  # "field_ball" | "meas_radial" | "meas_ball"
    times: np.ndarray
    axes: tuple
    values: np.ndarray
    policy: np.ndarray
    dictionary: np.ndarray
    mask: np.ndarray
    dt: float
    n_steps: int
    channel_strength: float = 0.0
    terminal_controls: Optional[np.ndarray] = None
    clamp_count: int = 0

    def slice_index(self, t):
        """Index of the stored slice nearest to t (earlier wins ties)."""
        times = self.times
        i = int(np.searchsorted(times, t))
        if i <= 0:
            return 0
        if i >= len(times):
            return len(times) - 1
        return i - 1 if (t - times[i - 1]) <= (times[i] - t) else i


@dataclass(frozen=True)
class PDEResidualReport:
    """Finite-difference residual of a closed-form candidate."""

    name: str
    equation: str
    residual: np.ndarray  # (n_t, n_r)
    max_abs: float
    mean_abs: float
    t_axis: np.ndarray
    r_axis: np.ndarray


def _clamp_ball(R):
    """Project rows of R radially onto the closed unit ball."""
    R = np.atleast_2d(np.asarray(R, dtype=float))
    nrm = np.linalg.norm(R, axis=1)
    scale = np.where(nrm > 1.0, 1.0 / np.maximum(nrm, EPS_BALL), 1.0)
    return R * scale[:, None]


def _trilinear_parts(ax, P):
    """Flat corner indices (N, 8) and weights (N, 8) on the cube lattice."""
    n = len(ax)
    dx = ax[1] - ax[0]
    X = (np.atleast_2d(P) - ax[0]) / dx
    i0 = np.clip(np.floor(X).astype(np.int64), 0, n - 2)
    f = np.clip(X - i0, 0.0, 1.0)
    idx = i0[:, None, :] + _CORNERS[None, :, :]
    flat = (idx[..., 0] * n + idx[..., 1]) * n + idx[..., 2]
    w = np.ones((X.shape[0], 8))
    for d in range(3):
        fd = f[:, d][:, None]
        w = w * np.where(_CORNERS[None, :, d] == 1, fd, 1.0 - fd)
    return flat, w


def _cube_nodes(ax):
    g = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([c.ravel() for c in g], axis=1)


def _resolve_dt(span, bound, user_dt):
    """Step count and step honoring the stability bound over the horizon."""
    if span == 0.0:
        return 0.0, 0
    if user_dt is not None:
        if user_dt <= 0:
            raise ValueError("dt must be positive")
        if user_dt > bound * (1 + 1e-12):
            raise ValueError(
                f"explicit step dt={user_dt:.6g} violates the stability bound {bound:.6g}"
            )
        steps = span / user_dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("dt must divide the horizon")
        n = round(steps)
        return span / n, n
    if not np.isfinite(bound):
        return span, 1
    n = max(1, math.ceil(span / bound - 1e-12))
    return span / n, n


def _stored_steps(n_steps, stride, default_cap):
    if stride is None:
        stride = max(1, math.ceil((n_steps + 1) / default_cap))
    steps = sorted(set(range(0, n_steps + 1, stride)) | {n_steps})
    return {s: i for i, s in enumerate(steps)}


def _cost_parts(costs, u):
    """Running rate of a fixed control as the affine pair (c0, v) in r."""
    c0 = 0.0
    v = np.zeros(3)
    if costs.cost_scalar is not None:
        c0 += float(costs.cost_scalar(u))
    if costs.cost_observable is not None:
        obs = costs.cost_observable(u)
        if isinstance(obs, tuple):
            c, vv = obs
        else:
            c, vv = observable_parts(np.asarray(obs))
        c0 += float(c)
        v = v + np.asarray(vv, dtype=float)
    return c0, v


def _terminal_values(costs, R):
    """Bequest on a batch of states, through the closed form when present."""
    f = costs.terminal_closed
    if f is not None:
        return np.asarray(f.evaluate_batch(R), dtype=float)
    return np.array([costs.terminal_value(r) for r in R], dtype=float)


def _field_dictionary(constraint):
    """Finite control dictionary for the field sweep, coast first when free.

    Ball constraints use {0} and +-radius along each admissible axis;
    finite constraints use their vertex enumeration, which must consist
    of 3-vector field controls.
    """
    if constraint.kind == "ball":
        dirs = np.eye(3) if constraint.subspace is None else np.asarray(
            constraint.subspace, dtype=float
        )
        rows = [np.zeros(3)]
        for d in dirs:
            rows.append(constraint.radius * d)
            rows.append(-constraint.radius * d)
        return np.array(rows)
    verts = constraint.vertices()
    if verts is None:
        raise ValueError(f"no control dictionary for constraint kind {constraint.kind!r}")
    arr = np.asarray(verts, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError("field sweep needs 3-vector controls; got "
                         f"vertex shape {arr.shape}")
    return arr


def solve_deterministic_hjb(costs, constraint, grid, lam=0.0):
    """Backward value iteration for field steering with fixed e_z damping.

    Explicit sweep S(t, node) = min_u { C(node, u) dt + S(t+dt, node +
    dr(u) dt) } over the finite dictionary from `constraint`, with
    trilinear interpolation of the Euler departure points; departures
    leaving the ball are clamped radially (counted and logged). The step
    obeys dt <= 0.5 dx / vmax with vmax the largest node speed over
    admissible nodes. lam**2 is the strength of an always-on e_z damping
    channel entering the drift.
    """
    if grid.mode != "ball":
        raise ValueError("the deterministic solver runs on the ball lattice")
    ax = grid.state_axis()
    n_ax = len(ax)
    R = _cube_nodes(ax)
    rad = np.linalg.norm(R, axis=1)
    mask = (rad <= 1.0 + 1e-12).reshape(n_ax, n_ax, n_ax)

    U = _field_dictionary(constraint)
    lam2 = float(lam) ** 2
    damp = 0.5 * lam2 * np.array([1.0, 1.0, 0.0])

    rates = []
    cost_rows = []
    keep = []
    for k, u in enumerate(U):
        c0, v = _cost_parts(costs, u)
        if not np.isfinite(c0) or not np.all(np.isfinite(v)):
            log.info("dropping dictionary control %s with non-finite running cost", u)
            continue
        keep.append(k)
        rates.append(np.cross(u, R) - damp * R)
        cost_rows.append((c0, v))
    if not keep:
        raise ValueError("every dictionary control has non-finite running cost")
    U = U[keep]

    in_ball = mask.ravel()
    vmax = max(float(np.max(np.linalg.norm(rk[in_ball], axis=1))) for rk in rates)
    bound = 0.5 * grid.dx / vmax if vmax > 0 else np.inf
    dt, n_steps = _resolve_dt(grid.horizon - grid.t0, bound, grid.dt)

    S_T = _terminal_values(costs, R)
    if not np.all(np.isfinite(S_T[in_ball])):
        raise ValueError("bequest is not finite on admissible nodes")

    slots = _stored_steps(n_steps, grid.store_stride, default_cap=128)
    m = len(slots)
    shape = (n_ax, n_ax, n_ax)
    values = np.empty((m,) + shape)
    policy = np.zeros((m,) + shape, dtype=np.uint8)
    values[slots[n_steps]] = S_T.reshape(shape)

    clamp_count = 0
    gathers = []
    run_costs = []
    has_cost = any(c0 != 0.0 or np.any(v != 0.0) for c0, v in cost_rows)
    for rk, (c0, v) in zip(rates, cost_rows):
        dep = R + rk * dt
        nrm = np.linalg.norm(dep, axis=1)
        out = nrm > 1.0
        clamp_count += int(out.sum())
        dep = np.where(out[:, None], dep / np.maximum(nrm, EPS_BALL)[:, None], dep)
        flat, w = _trilinear_parts(ax, dep)
        gathers.append((flat.astype(np.int64), w))
        run_costs.append((c0 + R @ v) * dt if has_cost else None)
    if clamp_count:
        log.info("clamped %d departure points radially onto the ball", clamp_count)

    S = S_T.copy()
    term_policy = None
    for step in range(n_steps - 1, -1, -1):
        best = None
        bidx = None
        for k, (flat, w) in enumerate(gathers):
            val = (S[flat] * w).sum(axis=1)
            if run_costs[k] is not None:
                val = val + run_costs[k]
            if best is None:
                best = val
                bidx = np.zeros(val.shape, dtype=np.uint8)
            else:
                sel = val < best
                best = np.where(sel, val, best)
                bidx[sel] = k
        S = best
        if term_policy is None:
            term_policy = bidx
        if step in slots:
            values[slots[step]] = S.reshape(shape)
            policy[slots[step]] = bidx.reshape(shape)

    if term_policy is not None:
        policy[slots[n_steps]] = term_policy.reshape(shape)
    if not np.all(np.isfinite(values[0][mask])):
        raise ValueError("value table is not finite on admissible nodes")

    terminal_controls = None
    if costs.terminal_minimizer is not None:
        terminal_controls = np.asarray(
            costs.terminal_minimizer(R), dtype=float
        ).reshape(shape + (3,))

    steps_sorted = sorted(slots)
    times = grid.t0 + dt * np.array(steps_sorted) if n_steps else np.array([grid.t0])
    return ValueGrid(
        mode="field_ball",
        times=times,
        axes=(ax, ax, ax),
        values=values,
        policy=policy,
        dictionary=U,
        mask=mask,
        dt=dt,
        n_steps=n_steps,
        channel_strength=lam2,
        terminal_controls=terminal_controls,
        clamp_count=clamp_count,
    )


def _single_channel(channels):
    if isinstance(channels, ChannelSpec):
        channels = [channels]
    channels = list(channels)
    if len(channels) != 1:
        raise ValueError("the measurement sweep steers one channel; candidate "
                         "directions come from grid.alphas")
    ch = channels[0]
    if ch.kind != OBSERVED:
        raise ValueError("the steered channel must be observed")
    return ch


def _check_radial_costs(costs):
    """Radial mode needs direction-independent bequest and running cost."""
    probes = np.array([[0.73, 0.0, 0.0], [0.0, 0.73, 0.0], [0.0, 0.0, 0.73],
                       np.full(3, 0.73 / np.sqrt(3.0))])
    vals = _terminal_values(costs, probes)
    spread = float(np.max(vals) - np.min(vals))
    if spread > 1e-9 * max(1.0, float(np.max(np.abs(vals)))):
        raise ValueError("radial mode requires a rotationally invariant bequest")
    for u in (np.zeros(1), np.ones(1)):
        _, v = _cost_parts(costs, u)
        if np.linalg.norm(v) > 1e-12:
            raise ValueError("radial mode requires a direction-independent "
                             "running cost")


def _radial_derivatives(S, dx):
    """First and second radial derivatives of one slice, exact on quadratics.

    Central in the interior; symmetric even extension at r=0 (S'=0);
    second-order one-sided at r=1.
    """
    Sp = np.empty_like(S)
    Spp = np.empty_like(S)
    Sp[1:-1] = (S[2:] - S[:-2]) / (2.0 * dx)
    Spp[1:-1] = (S[2:] - 2.0 * S[1:-1] + S[:-2]) / dx**2
    Sp[0] = 0.0
    Spp[0] = 2.0 * (S[1] - S[0]) / dx**2
    Sp[-1] = (3.0 * S[-1] - 4.0 * S[-2] + S[-3]) / (2.0 * dx)
    Spp[-1] = (S[-1] - 2.0 * S[-2] + S[-3]) / dx**2
    return Sp, Spp


def _radial_candidates(r, Sp, Spp, alphas, lam2):
    """Generator values D[i, j] of a radial slice probed with n.rhat = alphas[j].

    Closed form of drift . grad + (1/2) l^T hess l for radial functions;
    the r=0 row uses the symmetric limit (1/2) lam2 S''(0), the same for
    every direction cosine.
    """
    r = np.asarray(r, dtype=float)
    a2 = np.asarray(alphas, dtype=float)[None, :] ** 2
    r2 = (r**2)[:, None]
    A2 = a2 * r2
    out = np.empty((len(r), a2.shape[1]))
    rr = r[1:, None]
    term = rr * Sp[1:, None] * (1.0 - A2[1:]) + (
        Spp[1:, None] - Sp[1:, None] / rr
    ) * A2[1:] * (1.0 - r2[1:])
    out[1:] = 0.5 * lam2 * (1.0 - r2[1:]) / r2[1:] * term
    out[0] = 0.5 * lam2 * Spp[0]
    return out


def _measurement_radial(channels, costs, grid):
    ch = _single_channel(channels)
    _check_radial_costs(costs)
    lam2 = float(ch.strength)
    r_ax = grid.state_axis()
    n_r = len(r_ax)
    dx = grid.dx
    alphas = np.asarray(grid.alphas, dtype=float)

    bound = 0.25 * dx**2 / lam2 if lam2 > 0 else np.inf
    dt, n_steps = _resolve_dt(grid.horizon - grid.t0, bound, grid.dt)

    nodes = r_ax[:, None] * np.array([1.0, 0.0, 0.0])[None, :]
    S_T = _terminal_values(costs, nodes)
    if not np.all(np.isfinite(S_T)):
        raise ValueError("bequest is not finite on the radial nodes")

    c_off0, _ = _cost_parts(costs, np.zeros(1))
    c_on0, _ = _cost_parts(costs, np.ones(1))

    slots = _stored_steps(n_steps, grid.store_stride, default_cap=2048)
    m = len(slots)
    values = np.empty((m, n_r))
    policy = np.full((m, n_r), OFF, dtype=np.uint8)
    values[slots[n_steps]] = S_T

    S = S_T.copy()
    term_policy = None
    for step in range(n_steps - 1, -1, -1):
        Sp, Spp = _radial_derivatives(S, dx)
        D = _radial_candidates(r_ax, Sp, Spp, alphas, lam2)
        aidx = np.argmin(D, axis=1)
        best = D[np.arange(n_r), aidx]
        on = c_on0 + best < c_off0
        S = S + dt * np.where(on, c_on0 + best, c_off0)
        codes = np.where(on, aidx, OFF).astype(np.uint8)
        if term_policy is None:
            term_policy = codes
        if step in slots:
            if not np.all(np.isfinite(S)):
                raise ValueError(f"non-finite stencil values at step {step}")
            values[slots[step]] = S
            policy[slots[step]] = codes
    if term_policy is not None:
        policy[slots[n_steps]] = term_policy
    if not np.all(np.isfinite(values[0])):
        raise ValueError("non-finite stencil values on the initial slice")

    steps_sorted = sorted(slots)
    times = grid.t0 + dt * np.array(steps_sorted) if n_steps else np.array([grid.t0])
    return ValueGrid(
        mode="meas_radial",
        times=times,
        axes=(r_ax,),
        values=values,
        policy=policy,
        dictionary=alphas,
        mask=np.ones(n_r, dtype=bool),
        dt=dt,
        n_steps=n_steps,
        channel_strength=lam2,
    )


def _measurement_ball(channels, costs, grid):
    ch = _single_channel(channels)
    lam2 = float(ch.strength)
    ax = grid.state_axis()
    n_ax = len(ax)
    dx = grid.dx
    alphas = np.asarray(grid.alphas, dtype=float)
    shape = (n_ax, n_ax, n_ax)

    R = _cube_nodes(ax)
    rad = np.linalg.norm(R, axis=1)
    mask = (rad <= 1.0 + 1e-12).reshape(shape)
    rhat = np.where(rad[:, None] > EPS_BALL, R / np.maximum(rad, EPS_BALL)[:, None], 0.0)
    that = ctl.orthogonal_directions(R)
    origin = rad <= EPS_BALL

    # per-candidate channel geometry, static in time
    rate_list, lsq_list = [], []
    lmax2 = 0.0
    for a in alphas:
        n_dir = a * rhat + math.sqrt(max(0.0, 1.0 - a * a)) * that
        n_dir[origin] = that[origin]
        ndr = np.einsum("ij,ij->i", n_dir, R)
        rate = -0.5 * lam2 * (R - ndr[:, None] * n_dir)
        l = math.sqrt(lam2) * (n_dir - ndr[:, None] * R)
        lmax2 = max(lmax2, float(np.max(np.einsum("ij,ij->i", l, l))))
        lsq = np.stack(
            [l[:, 0] ** 2, l[:, 1] ** 2, l[:, 2] ** 2,
             2.0 * l[:, 0] * l[:, 1], 2.0 * l[:, 0] * l[:, 2],
             2.0 * l[:, 1] * l[:, 2]],
            axis=1,
        )
        rate_list.append(rate)
        lsq_list.append(lsq)

    bound = 0.25 * dx**2 / lmax2 if lmax2 > 0 else np.inf
    dt, n_steps = _resolve_dt(grid.horizon - grid.t0, bound, grid.dt)

    S_T = _terminal_values(costs, R)
    if not np.all(np.isfinite(S_T[mask.ravel()])):
        raise ValueError("bequest is not finite on admissible nodes")

    c_off0, v_off = _cost_parts(costs, np.zeros(1))
    c_on0, v_on = _cost_parts(costs, np.ones(1))
    c_off = c_off0 + R @ v_off
    c_on = c_on0 + R @ v_on

    slots = _stored_steps(n_steps, grid.store_stride, default_cap=128)
    m = len(slots)
    values = np.empty((m,) + shape)
    policy = np.full((m,) + shape, OFF, dtype=np.uint8)
    values[slots[n_steps]] = S_T.reshape(shape)

    N = len(R)
    S = S_T.copy()
    term_policy = None
    for step in range(n_steps - 1, -1, -1):
        cube = S.reshape(shape)
        gx, gy, gz = np.gradient(cube, dx)
        hxx, hxy, hxz = np.gradient(gx, dx)
        hyx, hyy, hyz = np.gradient(gy, dx)
        hzx, hzy, hzz = np.gradient(gz, dx)
        G = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        H6 = np.stack(
            [hxx.ravel(), hyy.ravel(), hzz.ravel(),
             (0.5 * (hxy + hyx)).ravel(),
             (0.5 * (hxz + hzx)).ravel(),
             (0.5 * (hyz + hzy)).ravel()],
            axis=1,
        )
        best = None
        aidx = None
        for j in range(len(alphas)):
            D = np.einsum("ij,ij->i", rate_list[j], G) + 0.5 * np.einsum(
                "ij,ij->i", lsq_list[j], H6
            )
            if best is None:
                best = D
                aidx = np.zeros(N, dtype=np.uint8)
            else:
                sel = D < best
                best = np.where(sel, D, best)
                aidx[sel] = j
        on = c_on + best < c_off
        S = S + dt * np.where(on, c_on + best, c_off)
        codes = np.where(on, aidx, OFF).astype(np.uint8)
        if term_policy is None:
            term_policy = codes
        if step in slots:
            if not np.all(np.isfinite(S)):
                raise ValueError(f"non-finite stencil values at step {step}")
            values[slots[step]] = S.reshape(shape)
            policy[slots[step]] = codes.reshape(shape)
    if term_policy is not None:
        policy[slots[n_steps]] = term_policy.reshape(shape)
    if not np.all(np.isfinite(values[0][mask])):
        raise ValueError("non-finite stencil values on the initial slice")

    steps_sorted = sorted(slots)
    times = grid.t0 + dt * np.array(steps_sorted) if n_steps else np.array([grid.t0])
    return ValueGrid(
        mode="meas_ball",
        times=times,
        axes=(ax, ax, ax),
        values=values,
        policy=policy,
        dictionary=alphas,
        mask=mask,
        dt=dt,
        n_steps=n_steps,
        channel_strength=lam2,
    )


def solve_measurement_hjb(channels, costs, grid):
    """Backward sweep for measurement-direction control.

    Each step augments the next slice by dt times the best candidate
    drop: the running rate of "off", or the running rate of "on" plus
    the generator of the slice along a candidate direction with
    n.rhat = alpha. Gradients and Hessians come from the t+dt slice
    (fully explicit); the step obeys dt <= 0.25 dx^2 / max |l|^2.
    Radial mode (1-D) is exact on quadratic slices including the r=0
    symmetry stencil and the one-sided r=1 edge; ball mode handles
    non-rotationally-invariant bequests on the cube lattice.
    """
    if grid.mode == "radial":
        return _measurement_radial(channels, costs, grid)
    return _measurement_ball(channels, costs, grid)


_EQUATIONS = ("radial_transport", "generator_backward")


def verify_closed_form(candidate, equation, horizon=0.4, t0=0.0, n_t=200,
                       n_r=200, r_min=0.05, r_max=1.0, name=None):
    """Finite-difference residual of a closed-form candidate S(t, r).

    radial_transport: residual = -dS/dt + (r/2) dS/dr (unit-strength
    orthogonal probing, first-order reduction). generator_backward adds
    the diffusion correction -(1/2r) dS/dr produced by the generator of
    radial functions. Central differences on an evaluation grid padded
    by one step on every side, so the residual is defined at all
    n_t x n_r nodes; the candidate must broadcast over arrays.
    """
    if equation not in _EQUATIONS:
        raise ValueError(f"equation must be one of {_EQUATIONS}")
    if n_t < 2 or n_r < 2:
        raise ValueError("need at least a 2 x 2 evaluation grid")
    t_ax = np.linspace(t0, horizon, n_t)
    r_ax = np.linspace(r_min, r_max, n_r)
    dt = t_ax[1] - t_ax[0]
    dr = r_ax[1] - r_ax[0]
    t_pad = np.concatenate([[t_ax[0] - dt], t_ax, [t_ax[-1] + dt]])
    r_pad = np.concatenate([[r_ax[0] - dr], r_ax, [r_ax[-1] + dr]])
    TT, RR = np.meshgrid(t_pad, r_pad, indexing="ij")
    try:
        F = np.asarray(candidate(TT, RR), dtype=float)
        if F.shape != TT.shape:
            raise ValueError
    except Exception:
        F = np.vectorize(candidate)(TT, RR)
    S_t = (F[2:, 1:-1] - F[:-2, 1:-1]) / (2.0 * dt)
    S_r = (F[1:-1, 2:] - F[1:-1, :-2]) / (2.0 * dr)
    resid = -S_t + 0.5 * r_ax[None, :] * S_r
    if equation == "generator_backward":
        resid = resid - S_r / (2.0 * r_ax[None, :])
    return PDEResidualReport(
        name=name or getattr(candidate, "__name__", "candidate"),
        equation=equation,
        residual=resid,
        max_abs=float(np.max(np.abs(resid))),
        mean_abs=float(np.mean(np.abs(resid))),
        t_axis=t_ax,
        r_axis=r_ax,
    )


def grid_value(grid, t, R):
    """Interpolated value S(t, r) from the stored table.

    Nearest stored slice in time; linear (radial) or trilinear (ball)
    in the state, with off-ball queries clamped radially.
    """
    k = grid.slice_index(t)
    P = _clamp_ball(R)
    if grid.mode == "meas_radial":
        r_ax = grid.axes[0]
        rr = np.linalg.norm(P, axis=1)
        return np.interp(rr, r_ax, grid.values[k])
    flat, w = _trilinear_parts(grid.axes[0], P)
    return (grid.values[k].ravel()[flat] * w).sum(axis=1)


def _codes_to_measurement(codes_flat, weights, gather, alphas, lam2):
    """Blend stored on/off codes into a per-query strength and cosine.

    Strength blends linearly (off nodes contribute zero); the direction
    cosine is the strength-weighted average of the contributing nodes'
    alphas, so pure regions reproduce their stored alpha exactly.
    """
    on = codes_flat != OFF
    a_node = np.where(on, alphas[np.minimum(codes_flat, len(alphas) - 1)], 0.0)
    s_node = lam2 * on.astype(float)
    s_q = (s_node[gather] * weights).sum(axis=1)
    aw_q = ((s_node * a_node)[gather] * weights).sum(axis=1)
    alpha_q = np.where(s_q > 1e-12 * lam2, aw_q / np.maximum(s_q, 1e-300), 0.0)
    return s_q, np.clip(alpha_q, -1.0, 1.0)


def extract_policy(grid):
    """Deterministic feedback policy read off a ValueGrid.

    Nearest stored slice in time, multilinear blend of the stored
    controls in the state; off-grid queries are clamped radially onto
    the ball. Field grids return a pure field policy; at the terminal
    slice they emit the bequest's terminal minimizer when the costs
    provided one. Measurement grids return a single-slot measurement
    policy whose direction is alpha rhat + sqrt(1-alpha^2) t(rhat) with
    the blended cosine alpha and blended strength.
    """
    lam2 = grid.channel_strength

    if grid.mode == "field_ball":
        ax = grid.axes[0]

        def batch(t, R):
            P = _clamp_ball(R)
            k = grid.slice_index(t)
            if k == len(grid.times) - 1 and grid.terminal_controls is not None:
                cube = grid.terminal_controls
            else:
                cube = grid.dictionary[grid.policy[k]]
            flat, w = _trilinear_parts(ax, P)
            comp = cube.reshape(-1, 3)
            U = (comp[flat] * w[..., None]).sum(axis=1)
            empty = np.zeros((len(P), 0))
            return U, empty.reshape(len(P), 0, 3), empty

        return ctl.Policy(kind="grid_field", n_slots=0, batch_fn=batch)

    alphas = np.asarray(grid.dictionary, dtype=float)
    constraint = ctl.simplex_constraint(1) if 0 < lam2 <= 1.0 else None

    def batch(t, R):
        P = _clamp_ball(R)
        k = grid.slice_index(t)
        codes = grid.policy[k].ravel()
        if grid.mode == "meas_radial":
            r_ax = grid.axes[0]
            n_r = len(r_ax)
            rr = np.linalg.norm(P, axis=1)
            x = rr / (r_ax[1] - r_ax[0])
            i0 = np.clip(np.floor(x).astype(np.int64), 0, n_r - 2)
            f = np.clip(x - i0, 0.0, 1.0)
            gather = np.stack([i0, i0 + 1], axis=1)
            weights = np.stack([1.0 - f, f], axis=1)
        else:
            gather, weights = _trilinear_parts(grid.axes[0], P)
        s_q, alpha_q = _codes_to_measurement(codes, weights, gather, alphas, lam2)
        nrm = np.linalg.norm(P, axis=1)
        origin = nrm <= EPS_BALL
        alpha_q = np.where(origin, 0.0, alpha_q)
        rhat = np.where(nrm[:, None] > EPS_BALL,
                        P / np.maximum(nrm, EPS_BALL)[:, None], 0.0)
        that = ctl.orthogonal_directions(P)
        dirs = alpha_q[:, None] * rhat + np.sqrt(1.0 - alpha_q**2)[:, None] * that
        U = np.zeros((len(P), 3))
        return U, dirs[:, None, :], s_q[:, None]

    return ctl.Policy(kind="grid_measurement", n_slots=1, batch_fn=batch,
                      constraint=constraint)


def open_loop_control(grid, r0, n_sub=4):
    """Open-loop schedule t -> (field, channels) recorded from a field grid.

    Integrates the stored feedback law forward with Euler substeps
    (n_sub per grid step, states clamped onto the ball) and freezes the
    visited controls into a piecewise-constant schedule suitable for
    integrate_me. The damping channel of the solve, if any, is attached
    to the returned schedule.
    """
    if grid.mode != "field_ball":
        raise ValueError("open-loop extraction needs a field grid")
    if grid.n_steps == 0:
        raise ValueError("the grid has no time interval to integrate over")
    policy = extract_policy(grid)
    lam2 = grid.channel_strength
    channels = []
    if lam2 > 0:
        channels = [ChannelSpec(direction=np.array([0.0, 0.0, 1.0]), strength=lam2)]
    damp = 0.5 * lam2 * np.array([1.0, 1.0, 0.0])

    dt_sub = grid.dt / n_sub
    t0 = float(grid.times[0])
    n_total = grid.n_steps * n_sub
    r = _clamp_ball(np.asarray(r0, dtype=float))[0]
    schedule = np.empty((n_total, 3))
    for i in range(n_total):
        t = t0 + i * dt_sub
        u = policy.batch(t, r[None, :])[0][0]
        schedule[i] = u
        r = r + dt_sub * (np.cross(u, r) - damp * r)
        nrm = np.linalg.norm(r)
        if nrm > 1.0:
            r = r / nrm

    def ctrl(t):
        i = min(max(int((t - t0) / dt_sub + 1e-9), 0), n_total - 1)
        return schedule[i], channels

    return ctrl
