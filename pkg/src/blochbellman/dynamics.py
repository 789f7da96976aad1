"""Drift and fluctuation coefficients of the controlled filtering dynamics.

All operations return dr/dt (or drho/dt) rates. For a qubit driven by a
magnetic field u and monitored along unit directions n_j with strengths
lambda_j^2 the Bloch rate is

    dr/dt = u x r - sum_j (lambda_j^2 / 2) [r - (n_j.r) n_j]

and each observed channel contributes the fluctuation vector
l_j = lambda_j [n_j - (n_j.r) r] multiplying its innovation increment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import qstate as qs

OBSERVED = "observed"
UNOBSERVED = "unobserved"


@dataclass(frozen=True)
class ChannelSpec:
    """One coupling channel L = lambda R.

    For the qubit path R = sigma_n / 2 with a unit direction n; `strength` is
    lambda^2 >= 0 and `phase` is arg(lambda) (used by the generic matrix path
    only). Unobserved channels damp the state but carry no innovation.
    """

    direction: np.ndarray = None
    strength: float = 1.0
    phase: float = 0.0
    kind: str = OBSERVED
    operator: np.ndarray = None  # generic d x d coupling, overrides direction

    def __post_init__(self):
        if self.kind not in (OBSERVED, UNOBSERVED):
            raise ValueError(f"channel kind must be observed|unobserved, got {self.kind!r}")
        if float(self.strength) < 0.0:
            raise ValueError("channel strength must be >= 0")
        object.__setattr__(self, "strength", float(self.strength))
        object.__setattr__(self, "phase", float(self.phase))
        if self.operator is not None:
            object.__setattr__(self, "operator", np.asarray(self.operator, dtype=complex))
            return
        d = np.asarray(self.direction, dtype=float)
        if d.shape != (3,):
            raise ValueError("channel direction must be a 3-vector")
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError("channel direction must be unit length to 1e-12")
        object.__setattr__(self, "direction", d)

    @property
    def lam(self):
        return float(np.sqrt(self.strength))

    def coupling_matrix(self):
        """L = lambda e^{i phase} R as a 2x2 (or generic) matrix."""
        lam = self.lam * np.exp(1j * self.phase)
        if self.operator is not None:
            return lam * self.operator
        return lam * 0.5 * qs.sigma_dot(self.direction)


@dataclass(frozen=True)
class HamiltonianSpec:
    """Magnetic-field control H(u) = sigma_u / 2 restricted to a subspace.

    `subspace` is a tuple of orthonormal basis rows; the field is projected
    onto their span (projection is idempotent by construction).
    """

    field: np.ndarray = field(default_factory=lambda: np.zeros(3))
    subspace: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def __post_init__(self):
        B = np.asarray(self.subspace, dtype=float)
        if B.ndim != 2 or B.shape[1] != 3 or B.shape[0] > 3:
            raise ValueError("subspace must be given as <= 3 basis rows of length 3")
        if np.max(np.abs(B @ B.T - np.eye(B.shape[0]))) > 1e-10:
            raise ValueError("subspace basis rows must be orthonormal")
        u = np.asarray(self.field, dtype=float)
        if u.shape != (3,):
            raise ValueError("field must be a 3-vector")
        object.__setattr__(self, "field", B.T @ (B @ u))
        object.__setattr__(self, "subspace", tuple(map(tuple, B)))

    def project(self, v):
        B = np.asarray(self.subspace, dtype=float)
        return B.T @ (B @ np.asarray(v, dtype=float))

    def matrix(self):
        return 0.5 * qs.sigma_dot(self.field)


@dataclass(frozen=True)
class DriftResult:
    bloch_rate: np.ndarray


@dataclass(frozen=True)
class FluctuationResult:
    l: np.ndarray


def _as_field(u):
    if u is None:
        return np.zeros(3)
    if isinstance(u, HamiltonianSpec):
        return u.field
    return np.asarray(u, dtype=float)


def qubit_drift(u, channels, r):
    """Bloch rate dr/dt = u x r - sum_j (strength_j/2)[r - (n_j.r) n_j].

    Every channel contributes damping transverse to its axis; observed and
    unobserved channels enter the drift identically.
    """
    r = np.asarray(r, dtype=float)
    uf = _as_field(u)
    rate = np.cross(uf, r)
    for ch in channels:
        if ch.direction is None:
            raise ValueError("qubit_drift requires direction-parametrized channels")
        n = ch.direction
        rate = rate - 0.5 * ch.strength * (r - np.dot(n, r) * n)
    return DriftResult(bloch_rate=rate)


def qubit_fluctuation(channel, r):
    """Fluctuation vector l = lambda [n - (n.r) r] of an observed channel."""
    if channel.kind != OBSERVED:
        raise ValueError("unobserved channels carry no innovation")
    if channel.direction is None:
        raise ValueError("qubit_fluctuation requires a direction-parametrized channel")
    r = np.asarray(r, dtype=float)
    n = channel.direction
    return FluctuationResult(l=channel.lam * (n - np.dot(n, r) * r))


def innovation_increment(channel, r, dy, dt):
    """dw = dy - lambda (n.r) dt, the unpredictable part of the record."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    r = np.asarray(r, dtype=float)
    return float(dy - channel.lam * np.dot(channel.direction, r) * dt)


def generic_drift(H, channels, rho):
    """Matrix rate drho/dt = -i[H, rho] + sum_j (L rho L+ - {L+L, rho}/2).

    Works in any dimension; the qubit Bloch path agrees with this through
    conversion to 1e-10.
    """
    rho = np.asarray(rho, dtype=complex)
    d = rho.shape[0]
    if rho.shape != (d, d):
        raise ValueError("rho must be square")
    if H is None:
        H = np.zeros((d, d), dtype=complex)
    H = np.asarray(H, dtype=complex)
    if H.shape != (d, d):
        raise ValueError("Hamiltonian dimension mismatch")
    if np.max(np.abs(H - H.conj().T)) > 1e-12:
        raise ValueError("Hamiltonian must be Hermitian")
    rate = -1j * (H @ rho - rho @ H)
    for ch in channels:
        L = ch.coupling_matrix()
        if L.shape != (d, d):
            raise ValueError("channel operator dimension mismatch")
        LdL = L.conj().T @ L
        rate = rate + L @ rho @ L.conj().T - 0.5 * (LdL @ rho + rho @ LdL)
    return rate


def drift_batch(U, dirs, strengths, R):
    """Vectorized qubit_drift over N states.

    U: (N, 3) fields; dirs: (N, k, 3) unit directions; strengths: (N, k);
    R: (N, 3). Returns (N, 3) rates.
    """
    rate = np.cross(U, R)
    if dirs.shape[1]:
        ndr = np.einsum("nkc,nc->nk", dirs, R)
        rate = rate - 0.5 * np.einsum(
            "nk,nkc->nc", strengths, R[:, None, :] - ndr[:, :, None] * dirs
        )
    return rate


def fluctuation_batch(dirs, strengths, R):
    """Vectorized qubit_fluctuation: (N, k, 3) vectors l_j at each state."""
    if not dirs.shape[1]:
        return np.zeros_like(dirs)
    ndr = np.einsum("nkc,nc->nk", dirs, R)
    return np.sqrt(strengths)[:, :, None] * (dirs - ndr[:, :, None] * R[:, None, :])
