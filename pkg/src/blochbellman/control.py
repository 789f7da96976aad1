"""Costs, constraints, optimality rules, and the feedback policy library.

Costs pair observables with the state and add scalar parts that saturate at
+inf outside the admissible set, so hard constraints survive every min/inf
reduction. The Pontryagin Hamiltonian covers field control of a monitored
qubit; the Bellman measurement Hamiltonian covers strength control of a
channel dictionary. Policies wrap these rules in the batched protocol the
ensemble engine consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Optional

import numpy as np

from .dynamics import ChannelSpec, qubit_drift, qubit_fluctuation
from .functionals import _tangent_basis, fibonacci_directions
from .qstate import (EPS_BALL, StateFunctional, observable, observable_parts,
                     pairing, purity_deficit, radial_functional)

INF = math.inf
TIE_TOL = 1e-12


# ---------------------------------------------------------------------------
# costates


@dataclass(frozen=True)
class Costate:
    """Trace-zero part of an adjoint observable; scalar shifts are quotiented."""

    vec: np.ndarray

    @staticmethod
    def from_observable(X):
        _, v = observable_parts(np.asarray(X, dtype=complex))
        return Costate(vec=np.asarray(v, dtype=float))


def _costate_vec(p):
    if isinstance(p, Costate):
        return np.asarray(p.vec, dtype=float)
    p = np.asarray(p)
    if p.ndim == 2:
        return Costate.from_observable(p).vec
    return np.asarray(p, dtype=float)


# ---------------------------------------------------------------------------
# constraints


@dataclass(frozen=True)
class ControlConstraint:
    """Admissible control set.

    kind "ball": field vectors with |u| <= radius, optionally confined to a
    subspace given as orthonormal rows. kind "simplex": strength rows with
    u_j >= 0 and sum u_j <= 1. kind "binary": each strength in {0, 1}.
    kind "pair_sum": consecutive strength pairs with u[2k] + u[2k+1] = 1.
    """

    kind: str
    radius: float = 1.0
    n: int = 1
    subspace: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("ball", "simplex", "binary", "pair_sum"):
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "ball" and self.radius < 0:
            raise ValueError("ball radius must be nonnegative")
        if self.kind == "pair_sum" and self.n % 2:
            raise ValueError("pair_sum needs an even number of strengths")
        if self.subspace is not None:
            B = np.asarray(self.subspace, dtype=float)
            if B.ndim != 2 or B.shape[1] != 3:
                raise ValueError("subspace must be rows of 3-vectors")
            if np.max(np.abs(B @ B.T - np.eye(len(B)))) > 1e-10:
                raise ValueError("subspace rows must be orthonormal")
            object.__setattr__(self, "subspace", B)

    def project(self, u):
        if self.subspace is None:
            return np.asarray(u, dtype=float)
        B = self.subspace
        return np.asarray(u, dtype=float) @ B.T @ B

    def contains(self, u, tol=TIE_TOL):
        U = np.asarray(u, dtype=float)
        if U.ndim == 1:
            U = U[None, :]
        return bool(np.all(self.contains_batch(U, tol)))

    def contains_batch(self, U, tol=TIE_TOL):
        U = np.asarray(U, dtype=float)
        if U.ndim == 1:
            U = U[None, :]
        if self.kind == "ball":
            ok = np.linalg.norm(U, axis=1) <= self.radius + tol
            if self.subspace is not None:
                off = U - U @ self.subspace.T @ self.subspace
                ok &= np.linalg.norm(off, axis=1) <= tol
            return ok
        if self.kind == "simplex":
            return (U >= -tol).all(axis=1) & (U.sum(axis=1) <= 1.0 + tol)
        if self.kind == "binary":
            return (np.minimum(np.abs(U), np.abs(U - 1.0)) <= tol).all(axis=1)
        # pair_sum
        ok = (U >= -tol).all(axis=1)
        pair = U.reshape(len(U), -1, 2).sum(axis=2)
        return ok & (np.abs(pair - 1.0) <= tol).all(axis=1)

    def vertices(self):
        """Extreme points used for finite enumeration; None for the ball."""
        if self.kind == "ball":
            return None
        if self.kind == "simplex":
            return np.vstack([np.zeros((1, self.n)), np.eye(self.n)])
        if self.n > 16:
            raise ValueError("vertex enumeration capped at 16 strengths")
        if self.kind == "binary":
            return np.array(list(product((0.0, 1.0), repeat=self.n)))
        rows = []
        for choice in product(((1.0, 0.0), (0.0, 1.0)), repeat=self.n // 2):
            rows.append([x for pair in choice for x in pair])
        return np.array(rows)


def ball_constraint(radius=1.0, subspace=None):
    return ControlConstraint(kind="ball", radius=radius, subspace=subspace)


def simplex_constraint(n):
    return ControlConstraint(kind="simplex", n=n)


def binary_constraint(n):
    return ControlConstraint(kind="binary", n=n)


def pair_sum_constraint(n):
    return ControlConstraint(kind="pair_sum", n=n)


# ---------------------------------------------------------------------------
# costs


def _pair(r, obs):
    # observables may be 2x2 Hermitian matrices or (scalar, bloch) pairs
    if isinstance(obs, tuple):
        c, v = obs
        return float(c) + float(np.dot(np.asarray(r, dtype=float), v))
    return pairing(r, obs)


@dataclass(frozen=True)
class CostSpec:
    """Running and terminal costs for a controlled monitored qubit.

    cost_observable/bequest_observable map a control to a Hermitian matrix
    paired with the state; cost_scalar/bequest_scalar map a control to a real
    that is +inf exactly outside the admissible set. The terminal control
    ranges over terminal_set, either ("finite", controls) or ("ball", radius)
    with 3-vector controls. terminal_closed, when given, is the exact
    minimized bequest as a functional of the final state and is used as a
    fast path by the grid solvers. terminal_minimizer, when given, maps a
    final state (or a batch of states, shape-preserving) to the terminal
    control attaining terminal_value; grid solvers store it on their last
    slice.
    """

    cost_observable: Optional[Callable] = None
    cost_scalar: Optional[Callable] = None
    bequest_observable: Optional[Callable] = None
    bequest_scalar: Optional[Callable] = None
    terminal_set: Optional[tuple] = None
    terminal_closed: Optional[StateFunctional] = None
    terminal_minimizer: Optional[Callable] = None

    def running_rate(self, r, u):
        total = 0.0
        if self.cost_scalar is not None:
            c = float(self.cost_scalar(u))
            if c == INF:
                return INF
            total += c
        if self.cost_observable is not None:
            total += _pair(r, self.cost_observable(u))
        return total

    def _bequest_at(self, r, v):
        total = 0.0
        if self.bequest_scalar is not None:
            g = float(self.bequest_scalar(v))
            if g == INF:
                return INF
            total += g
        if self.bequest_observable is not None:
            total += _pair(r, self.bequest_observable(v))
        return total

    def terminal_value(self, r):
        """Bequest minimized over the terminal control set."""
        if self.terminal_closed is not None:
            return float(self.terminal_closed(r))
        if self.bequest_observable is None and self.bequest_scalar is None:
            return 0.0
        if self.terminal_set is None:
            return self._bequest_at(r, None)
        kind, payload = self.terminal_set
        if kind == "finite":
            vals = [self._bequest_at(r, v) for v in payload]
            if not vals:
                raise ValueError("empty terminal control set")
            return float(min(vals))
        if kind == "ball":
            return _ball_minimize(lambda v: self._bequest_at(r, v), float(payload))[0]
        raise ValueError(f"unknown terminal set kind {kind!r}")


GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def _golden_min(f, lo, hi, iters=50):
    # golden-section minimum of a unimodal scalar function on [lo, hi]
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return f(x), x


def _ball_minimize(phi, radius, n_scan=10_000):
    """Deterministic infimum of phi over the radius-ball in R^3.

    Fibonacci-direction x radius scan locates the basin; a tangent-plane
    pattern search over directions, with a golden-section radial line search
    per direction, refines it. Moves stay on the direction sphere, so
    boundary minima converge in O(log) steps. Returns (value, argmin).
    """
    best_v = np.zeros(3)
    best = phi(best_v)
    dirs = fibonacci_directions(max(n_scan // 5, 64))
    for frac in (0.25, 0.5, 0.75, 0.9, 1.0):
        V = dirs * (frac * radius)
        for v in V:
            val = phi(v)
            if val < best:
                best, best_v = val, v.copy()

    def radial_min(d):
        val, s = _golden_min(lambda s: phi(s * d), 0.0, radius)
        return val, s * d

    m = np.linalg.norm(best_v)
    d = best_v / m if m > 1e-12 else np.array([0.0, 0.0, 1.0])
    val, v = radial_min(d)
    if val < best:
        best, best_v = val, v
    step = 0.1
    while step > 1e-6:
        moved = False
        t1, t2 = _tangent_basis(d)
        for t in (t1, -t1, t2, -t2):
            cand = d + step * t
            cand /= np.linalg.norm(cand)
            val, v = radial_min(cand)
            if val < best - 1e-15:
                best, best_v, d, moved = val, v, cand, True
                break
        if not moved:
            step *= 0.5
    return float(best), best_v


def target_miss_costs(target):
    """Bequest <rho, I - P_T>: miss probability against a pure target state."""
    target = np.asarray(target, dtype=float)
    G = observable(0.5, -0.5 * target)

    def closed_eval(r):
        return 0.5 * (1.0 - np.dot(np.asarray(r, dtype=float), target))

    closed = StateFunctional(
        name="target_miss",
        eval=closed_eval,
        grad=lambda r: -0.5 * target,
        hess=lambda r: np.zeros((3, 3)),
        eval_vec=lambda R: 0.5 * (1.0 - np.asarray(R, dtype=float) @ target),
    )
    return CostSpec(bequest_observable=lambda v: G, terminal_closed=closed)


def purity_deficit_costs(closed=True):
    """Inf-affine purity bequest: min over |v|<=1 of <rho, (1+v^2)I - 2 sigma_v>.

    The minimizer is v = r and the minimum is the purity deficit 1 - r^2;
    closed=False drops the fast path so the ball scan is exercised.
    """

    def G(v):
        v = np.asarray(v, dtype=float)
        return (1.0 + float(v @ v), -2.0 * v)

    return CostSpec(
        bequest_observable=G,
        terminal_set=("ball", 1.0),
        terminal_closed=purity_deficit() if closed else None,
        terminal_minimizer=lambda r: np.array(r, dtype=float),
    )


def radius_costs(closed=True):
    """Bequest min over |v|<=1 of <rho, sigma_v> = -|r| (expectation design)."""

    def G(v):
        return (0.0, np.asarray(v, dtype=float))

    def minimizer(r):
        r = np.asarray(r, dtype=float)
        single = r.ndim == 1
        r = np.atleast_2d(r)
        nrm = np.linalg.norm(r, axis=1, keepdims=True)
        v = np.where(nrm > EPS_BALL, -r / np.maximum(nrm, EPS_BALL), [[0.0, 0.0, -1.0]])
        return v[0] if single else v

    closed_f = radial_functional("neg_radius", lambda s: (-s, -1.0, 0.0))
    return CostSpec(
        bequest_observable=G,
        terminal_set=("ball", 1.0),
        terminal_closed=closed_f if closed else None,
        terminal_minimizer=minimizer,
    )


def evaluate_cost_functional(traj, costs):
    """Accumulated cost of one trajectory.

    Left-endpoint quadrature of the running rate over each step interval,
    plus the bequest minimized over the terminal control. Returns +inf as
    soon as any visited control is inadmissible.
    """
    times = np.asarray(traj.times, dtype=float)
    states = np.asarray(traj.states, dtype=float)
    total = 0.0
    if costs.cost_observable is not None or costs.cost_scalar is not None:
        for k in range(len(times) - 1):
            rate = costs.running_rate(states[k], np.asarray(traj.controls[k]))
            if rate == INF:
                return INF
            total += rate * (times[k + 1] - times[k])
    return total + costs.terminal_value(states[-1])


# ---------------------------------------------------------------------------
# optimality rules


def pontryagin_hamiltonian(q, p, costs, constraint, lam):
    """Supremum of the control Hamiltonian for magnetic-field steering.

    q is the negated Bloch vector, p a costate (vector, Costate, or Hermitian
    matrix; scalar parts are quotiented out). For a ball constraint with
    indicator cost the supremum is closed-form: u° is the (subspace-projected)
    direction of q x p at full radius and the value is
    radius.|proj(q x p)| - (lam^2/2)(q_x p_x + q_y p_y), the last term being
    the damping of a strength-lam^2 z-axis channel. Finite constraint kinds
    are enumerated over their vertices; scalar running costs are honored.
    Returns (value, u°); vanishing cross product ties break to zero control.
    """
    q = np.asarray(q, dtype=float)
    pv = _costate_vec(p)
    lam2 = float(lam) ** 2
    damping = -0.5 * lam2 * (q[0] * pv[0] + q[1] * pv[1])
    cross = np.cross(q, pv)
    cost_of = costs.cost_scalar if (costs is not None and costs.cost_scalar is not None) else (lambda u: 0.0)

    if constraint.kind == "ball" and (costs is None or costs.cost_scalar is None):
        proj = constraint.project(cross)
        m = float(np.linalg.norm(proj))
        if m <= TIE_TOL:
            return damping, np.zeros(3)
        u_opt = (constraint.radius / m) * proj
        return constraint.radius * m + damping, u_opt

    if constraint.kind == "ball":
        # scanned supremum of u.cross - c(u) over the (sub)ball
        def neg(v):
            v = constraint.project(v)
            return float(cost_of(v)) - float(np.dot(v, cross))

        best, u_opt = _ball_minimize(neg, constraint.radius)
        return -best + damping, constraint.project(u_opt)

    verts = constraint.vertices()
    if verts is None or len(verts) == 0:
        raise ValueError("empty admissible set")
    if verts.shape[1] != 3:
        raise ValueError("finite constraint does not describe 3-vector fields")
    vals = verts @ cross - np.array([float(cost_of(v)) for v in verts])
    best = float(np.max(vals))
    zero_rows = np.where(~verts.any(axis=1))[0]
    if len(zero_rows) and vals[zero_rows[0]] >= best - TIE_TOL:
        return best + damping, verts[zero_rows[0]]
    return best + damping, verts[int(np.argmax(vals))]


def _unit_channel(ch):
    if ch.strength == 1.0:
        return ch
    return ChannelSpec(direction=ch.direction, strength=1.0, phase=ch.phase,
                       kind=ch.kind)


def channel_score(r, grad_S, hess_S, channel):
    """Per-channel Bellman score at the channel's own strength.

    score = <upsilon, grad S> - (1/2) l^T hess_S l with upsilon the negated
    drift rate of the channel alone; positive score means switching the
    channel on lowers the value along the dynamics.
    """
    r = np.asarray(r, dtype=float)
    rate = qubit_drift(None, [channel], r).bloch_rate
    l = qubit_fluctuation(channel, r).l
    return float(-np.dot(rate, grad_S) - 0.5 * (l @ hess_S @ l))


def bellman_measurement_hamiltonian(r, grad_S, hess_S, channels, constraint=None):
    """Supremum of the measurement Hamiltonian over simplex strengths.

    Scores every channel at unit strength; if the best score is positive the
    supremum puts full strength on that channel (lowest index wins ties),
    otherwise no measurement is optimal and the value is 0.
    Returns (value, strengths).
    """
    if constraint is not None and constraint.kind != "simplex":
        raise ValueError("measurement Hamiltonian expects a simplex constraint")
    k = len(channels)
    scores = np.array(
        [channel_score(r, grad_S, hess_S, _unit_channel(ch)) for ch in channels])
    u = np.zeros(k)
    if k == 0:
        return 0.0, u
    j = int(np.argmax(scores))
    if scores[j] > 0.0:
        u[j] = 1.0
        return float(scores[j]), u
    return 0.0, u


def switching_rule(r, grad_S, hess_S, channel):
    """Two-valued strategy: 1 iff the channel's score is positive.

    Scores at the channel's actual strength; exact ties (|score| <= 1e-12)
    switch off, measurement being the costlier arm of an equal pair.
    """
    score = channel_score(r, grad_S, hess_S, channel)
    return 1 if score > TIE_TOL else 0


def min_hessian_rule(r, hess_S, channels):
    """Index of the channel with the smallest Ito quadratic form.

    Under pair-sum constraints the optimal arm is the one minimizing
    l^T hess_S l; the lowest index wins ties.
    """
    if not channels:
        raise ValueError("empty channel list")
    r = np.asarray(r, dtype=float)
    terms = np.array(
        [float(qubit_fluctuation(ch, r).l @ hess_S @ qubit_fluctuation(ch, r).l)
         for ch in channels])
    return int(np.argmin(terms))


# ---------------------------------------------------------------------------
# policies


@dataclass(frozen=True)
class Policy:
    """Immutable step controller in the batched ensemble protocol.

    batch(t, R) maps an (N, 3) state block to (fields (N, 3), directions
    (N, k, 3), strengths (N, k)); outputs always satisfy `constraint` when
    one is declared.
    """

    kind: str
    n_slots: int
    batch_fn: Callable = field(repr=False)
    constraint: Optional[ControlConstraint] = None

    def batch(self, t, R):
        return self.batch_fn(t, np.asarray(R, dtype=float))


def _empty_measurement(n):
    return np.zeros((n, 0, 3)), np.zeros((n, 0))


def orthogonal_directions(R):
    """Batched unit directions orthogonal to each row of R.

    Rotates each rhat toward its smallest-magnitude Cartesian component
    (the same deterministic tie-break as local_optimal_direction); rows at
    the origin get e_z.
    """
    R = np.asarray(R, dtype=float)
    rr = np.linalg.norm(R, axis=1)
    safe = rr > EPS_BALL
    rhat = np.zeros_like(R)
    rhat[safe] = R[safe] / rr[safe, None]
    k = np.argmin(np.abs(rhat), axis=1)
    E = np.eye(3)[k]
    n = E - np.sum(E * rhat, axis=1)[:, None] * rhat
    n[~safe] = (0.0, 0.0, 1.0)
    return n / np.linalg.norm(n, axis=1)[:, None]


def make_policy(kind, **params):
    """Policy factory.

    Kinds: no_measurement; fixed_axis(direction, lam); orthogonal_adaptive
    (lam); bang_bang_field(costate, radius, subspace); switching(channel,
    surface); grid_policy(grid).
    """
    if kind == "no_measurement":
        def batch(t, R):
            return np.zeros((len(R), 3)), *_empty_measurement(len(R))

        return Policy(kind=kind, n_slots=0, batch_fn=batch)

    if kind == "fixed_axis":
        direction = np.asarray(params["direction"], dtype=float)
        direction = direction / np.linalg.norm(direction)
        strength = float(params["lam"]) ** 2

        def batch(t, R):
            n = len(R)
            dirs = np.broadcast_to(direction, (n, 1, 3)).copy()
            return np.zeros((n, 3)), dirs, np.full((n, 1), strength)

        return Policy(kind=kind, n_slots=1, batch_fn=batch,
                      constraint=simplex_constraint(1) if strength <= 1.0 else None)

    if kind == "orthogonal_adaptive":
        strength = float(params["lam"]) ** 2

        def batch(t, R):
            n = len(R)
            dirs = orthogonal_directions(R)[:, None, :]
            return np.zeros((n, 3)), dirs, np.full((n, 1), strength)

        return Policy(kind=kind, n_slots=1, batch_fn=batch)

    if kind == "bang_bang_field":
        costate = params["costate"]
        radius = float(params.get("radius", 1.0))
        constraint = ball_constraint(radius, params.get("subspace"))

        def batch(t, R):
            n = len(R)
            if callable(costate):
                P = np.asarray(costate(t, R), dtype=float)
            else:
                P = np.broadcast_to(np.asarray(costate, dtype=float), (n, 3))
            cross = np.cross(-R, P)
            proj = constraint.project(cross)
            m = np.linalg.norm(proj, axis=1)
            U = np.zeros((n, 3))
            act = m > TIE_TOL
            U[act] = proj[act] * (radius / m[act, None])
            return U, *_empty_measurement(n)

        return Policy(kind=kind, n_slots=0, batch_fn=batch, constraint=constraint)

    if kind == "switching":
        channel = params["channel"]
        surface = params["surface"]

        def batch(t, R):
            n = len(R)
            dirs = np.broadcast_to(channel.direction, (n, 1, 3)).copy()
            strengths = np.zeros((n, 1))
            for i in range(n):
                g = surface.gradient(R[i])
                H = surface.hessian(R[i])
                strengths[i, 0] = channel.strength * switching_rule(
                    R[i], g, H, channel)
            return np.zeros((n, 3)), dirs, strengths

        return Policy(kind=kind, n_slots=1, batch_fn=batch)

    if kind == "grid_policy":
        g = params["grid"]
        if isinstance(g, Policy):
            return g
        if hasattr(g, "policy_batch"):
            return Policy(kind=kind, n_slots=getattr(g, "n_slots", 0),
                          batch_fn=g.policy_batch,
                          constraint=getattr(g, "constraint", None))
        from . import hjb  # wiring for raw value tables

        return hjb.extract_policy(g)

    raise ValueError(f"unknown policy kind {kind!r}")
