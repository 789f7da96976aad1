"""Qubit state algebra on the Bloch ball.

States are real Bloch 3-vectors r with |r| <= 1; the associated density matrix
is (I + r.sigma)/2 in the standard trace-1 convention. The normalized-trace
pairing used throughout the library lives in `pairing` and nowhere else, so for
a qubit observable X = c I + sigma_v it evaluates to c + r.v.

Also provides finite-difference gradients and Hessians of scalar functionals of
the state, with one-sided stencils at the ball boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

EPS_BALL = 1e-9

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
IDENTITY2 = np.eye(2, dtype=complex)
PAULI = np.stack([SIGMA_X, SIGMA_Y, SIGMA_Z])

GRAD_STEP = 1e-5
HESS_STEP = 1e-4


def sigma_dot(v):
    """sigma_v = v . (sigma_x, sigma_y, sigma_z) for a real 3-vector v."""
    v = np.asarray(v, dtype=float)
    return v[0] * SIGMA_X + v[1] * SIGMA_Y + v[2] * SIGMA_Z


def observable(c, v):
    """Hermitian 2x2 matrix c I + sigma_v."""
    return c * IDENTITY2 + sigma_dot(v)


def observable_parts(X):
    """Split a Hermitian 2x2 matrix into (c, v) with X = c I + sigma_v."""
    X = np.asarray(X, dtype=complex)
    c = 0.5 * np.real(np.trace(X))
    v = np.array([0.5 * np.real(np.trace(X @ p)) for p in PAULI])
    return c, v


def check_bloch(r):
    """Validate |r| <= 1 + EPS_BALL and return r as a float array."""
    r = np.asarray(r, dtype=float)
    if r.shape != (3,):
        raise ValueError("Bloch vector must be a real 3-vector")
    if not np.all(np.isfinite(r)):
        raise ValueError("Bloch vector must be finite")
    n = float(np.linalg.norm(r))
    if n > 1.0 + EPS_BALL:
        raise ValueError(f"Bloch vector norm {n} exceeds 1 + {EPS_BALL}")
    return r


def bloch_to_density(r):
    """Density matrix (I + r.sigma)/2; rejects |r| > 1 + EPS_BALL."""
    r = check_bloch(r)
    return 0.5 * (IDENTITY2 + sigma_dot(r))


def density_to_bloch(rho):
    """Bloch vector of a qubit density matrix: r_k = Tr(rho sigma_k)."""
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (2, 2):
        raise ValueError("density_to_bloch expects a 2x2 matrix")
    return np.array([np.real(np.trace(rho @ p)) for p in PAULI])


def check_density(rho, dim=None):
    """Validate Hermiticity (1e-12), positivity (-1e-10) and unit trace (1e-12)."""
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError("density matrix must be square")
    if dim is not None and rho.shape[0] != dim:
        raise ValueError("density matrix has wrong dimension")
    if np.max(np.abs(rho - rho.conj().T)) > 1e-12:
        raise ValueError("density matrix is not Hermitian to 1e-12")
    if abs(np.trace(rho).real - 1.0) > 1e-12:
        raise ValueError("density matrix trace differs from 1 by more than 1e-12")
    w = np.linalg.eigvalsh(rho)
    if w.min() < -1e-10:
        raise ValueError("density matrix has eigenvalue below -1e-10")
    return rho


def pairing(state, obs):
    """Normalized-trace pairing <rho, X>.

    With states held in the standard trace-1 convention this equals
    Tr(rho X); for a qubit X = c I + sigma_v and Bloch vector r it is c + r.v.
    Accepts a Bloch 3-vector or a density matrix of matching dimension.
    """
    obs = np.asarray(obs, dtype=complex)
    if obs.ndim != 2 or obs.shape[0] != obs.shape[1]:
        raise ValueError("observable must be a square matrix")
    if np.max(np.abs(obs - obs.conj().T)) > 1e-12:
        raise ValueError("observable is not Hermitian to 1e-12")
    state = np.asarray(state)
    if state.ndim == 1:
        if obs.shape != (2, 2):
            raise ValueError("Bloch-vector state requires a 2x2 observable")
        c, v = observable_parts(obs)
        return float(c + np.dot(check_bloch(state), v))
    if state.shape != obs.shape:
        raise ValueError("state and observable dimensions differ")
    return float(np.real(np.trace(np.asarray(state, dtype=complex) @ obs)))


@dataclass(frozen=True)
class StateFunctional:
    """Scalar functional of a Bloch state, with optional closed forms.

    eval_vec, if given, must accept an (N, 3) array and return (N,); it is the
    hot path used by ensemble statistics. grad/hess, if given, must agree with
    the finite-difference versions.
    """

    name: str
    eval: Callable[[np.ndarray], float]
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hess: Optional[Callable[[np.ndarray], np.ndarray]] = None
    eval_vec: Optional[Callable[[np.ndarray], np.ndarray]] = None
    # for functionals of |r| only: radial(r) -> (f, f', f'')
    radial: Optional[Callable[[float], tuple]] = None

    def __call__(self, r):
        return float(self.eval(np.asarray(r, dtype=float)))

    def evaluate_batch(self, R):
        R = np.asarray(R, dtype=float)
        if self.eval_vec is not None:
            return np.asarray(self.eval_vec(R), dtype=float)
        return np.array([self.eval(r) for r in R], dtype=float)

    def gradient(self, r, h=GRAD_STEP):
        r = np.asarray(r, dtype=float)
        if self.grad is not None:
            return np.asarray(self.grad(r), dtype=float)
        return grad_fd(self, r, h)

    def hessian(self, r, h=HESS_STEP):
        r = np.asarray(r, dtype=float)
        if self.hess is not None:
            return np.asarray(self.hess(r), dtype=float)
        return hessian_fd(self, r, h)


def _step_points(r, i, h):
    # central step along axis i, flipped one-sided inward when it would exit the ball
    e = np.zeros(3)
    e[i] = h
    rp, rm = r + e, r - e
    if np.linalg.norm(rp) > 1.0:
        rp = r
    if np.linalg.norm(rm) > 1.0:
        rm = r
    return rp, rm


def grad_fd(F, r, h=GRAD_STEP):
    """Finite-difference gradient of F along the three Bloch axes.

    Central differences in the interior; one-sided pointing inward when a
    stencil point would leave the ball. h must lie in [1e-7, 1e-3].
    """
    if not (1e-7 <= h <= 1e-3):
        raise ValueError("gradient step h must be in [1e-7, 1e-3]")
    r = check_bloch(r)
    g = np.zeros(3)
    for i in range(3):
        rp, rm = _step_points(r, i, h)
        span = rp[i] - rm[i]
        if span == 0.0:
            g[i] = 0.0
        else:
            g[i] = (F.eval(rp) - F.eval(rm)) / span
    return g


def hessian_fd(F, r, h=HESS_STEP):
    """Symmetrized finite-difference Hessian of F.

    Second-order central stencils in the interior; near the boundary the
    stencil shrinks inward (one-sided), trading order for well-posedness.
    """
    if not (1e-7 <= h <= 1e-3):
        raise ValueError("Hessian step h must be in [1e-7, 1e-3]")
    r = check_bloch(r)
    H = np.zeros((3, 3))
    f0 = F.eval(r)
    interior = np.linalg.norm(r) + 2.0 * h <= 1.0
    for i in range(3):
        ei = np.zeros(3)
        ei[i] = h
        if interior:
            H[i, i] = (F.eval(r + ei) - 2.0 * f0 + F.eval(r - ei)) / h**2
        else:
            # pull the stencil inward along -rhat so all points stay in the ball
            rin = r * (1.0 - 2.0 * h / max(np.linalg.norm(r), 1e-300))
            H[i, i] = (F.eval(rin + ei) - 2.0 * F.eval(rin) + F.eval(rin - ei)) / h**2
    for i in range(3):
        for j in range(i + 1, 3):
            ei = np.zeros(3)
            ej = np.zeros(3)
            ei[i] = h
            ej[j] = h
            base = r if interior else r * (1.0 - 2.0 * h / max(np.linalg.norm(r), 1e-300))
            H[i, j] = H[j, i] = (
                F.eval(base + ei + ej)
                - F.eval(base + ei - ej)
                - F.eval(base - ei + ej)
                + F.eval(base - ei - ej)
            ) / (4.0 * h**2)
    return 0.5 * (H + H.T)


def radial_functional(name, g):
    """StateFunctional f(r) = g(|r|) with analytic gradient and Hessian.

    g maps a radius to (value, first derivative, second derivative). The
    Hessian uses the radial decomposition (g'/r)(I - rhat rhat^T) + g'' rhat
    rhat^T; at r = 0 it degenerates to g''(0) I.
    """

    def ev(r):
        return g(float(np.linalg.norm(r)))[0]

    def ev_vec(R):
        s = np.linalg.norm(np.asarray(R, dtype=float), axis=-1)
        return np.array([g(float(x))[0] for x in s]) if s.ndim else g(float(s))[0]

    def gr(r):
        rr = float(np.linalg.norm(r))
        if rr < 1e-12:
            return np.zeros(3)
        _, g1, _ = g(rr)
        return g1 * np.asarray(r) / rr

    def he(r):
        rr = float(np.linalg.norm(r))
        _, g1, g2 = g(rr)
        if rr < 1e-12:
            return g2 * np.eye(3)
        rhat = np.asarray(r) / rr
        P = np.outer(rhat, rhat)
        return (g1 / rr) * (np.eye(3) - P) + g2 * P

    def rad(rr):
        return g(float(rr))

    return StateFunctional(name=name, eval=ev, grad=gr, hess=he, eval_vec=ev_vec, radial=rad)


def purity_deficit():
    """f(r) = 1 - |r|^2, the purity deficit; zero exactly on pure states."""

    def ev(r):
        r = np.asarray(r, dtype=float)
        return 1.0 - float(np.dot(r, r))

    def ev_vec(R):
        R = np.asarray(R, dtype=float)
        return 1.0 - np.sum(R * R, axis=-1)

    def gr(r):
        return -2.0 * np.asarray(r, dtype=float)

    def he(r):
        return -2.0 * np.eye(3)

    def rad(rr):
        return (1.0 - rr * rr, -2.0 * rr, -2.0)

    return StateFunctional(
        name="purity_deficit", eval=ev, grad=gr, hess=he, eval_vec=ev_vec, radial=rad
    )


def component(axis):
    """Linear functional r -> r[axis]."""
    axis = int(axis)
    name = "xyz"[axis]
    e = np.zeros(3)
    e[axis] = 1.0

    return StateFunctional(
        name=name,
        eval=lambda r: float(np.asarray(r, dtype=float)[axis]),
        grad=lambda r: e.copy(),
        hess=lambda r: np.zeros((3, 3)),
        eval_vec=lambda R: np.asarray(R, dtype=float)[..., axis],
    )


def expectation_functional(X):
    """Linear functional r -> <rho, X> for a fixed qubit observable X."""
    c, v = observable_parts(X)

    return StateFunctional(
        name="expectation",
        eval=lambda r: float(c + np.dot(np.asarray(r, dtype=float), v)),
        grad=lambda r: v.copy(),
        hess=lambda r: np.zeros((3, 3)),
        eval_vec=lambda R: c + np.asarray(R, dtype=float) @ v,
    )


FUNCTIONAL_PRESETS = {
    "purity_deficit": purity_deficit,
    "r2": lambda: radial_functional("r2", lambda s: (s * s, 2.0 * s, 2.0)),
    "x": lambda: component(0),
    "y": lambda: component(1),
    "z": lambda: component(2),
}


def functional_by_name(name):
    if name not in FUNCTIONAL_PRESETS:
        raise ValueError(f"unknown functional preset {name!r}")
    return FUNCTIONAL_PRESETS[name]()
