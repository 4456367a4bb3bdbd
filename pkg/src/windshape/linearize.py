"""State-space models, Jacobian linearization and realization algebra.

Sign convention for feedback is positive: ``u = r + K y``, so a controller
enters the plant input as computed, matching ``u = u0 + K (y - y0)``.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as la

from . import model
from .errors import AlgebraicLoopError, ResonanceError


@dataclass(frozen=True, eq=False)
class StateSpaceModel:
    """Realization ``(A, B, C, D)``; ``dt`` is None for continuous time."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    dt: Optional[float] = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        n = 0 if A.size == 0 else A.shape[0]
        p, m = D.shape
        A = A.reshape(n, n)
        B = np.asarray(self.B, dtype=float).reshape(n, m)
        C = np.asarray(self.C, dtype=float).reshape(p, n)
        for name, value in zip("ABCD", (A, B, C, D)):
            if not np.all(np.isfinite(value)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, value)
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive or None")

    @property
    def nstates(self):
        return self.A.shape[0]

    @property
    def ninputs(self):
        return self.D.shape[1]

    @property
    def noutputs(self):
        return self.D.shape[0]

    @property
    def is_continuous(self):
        return self.dt is None

    def poles(self):
        return np.linalg.eigvals(self.A) if self.nstates else np.empty(0, complex)

    def transform(self, T, Ti=None):
        """Similarity transform with ``x = T z``."""
        Ti = np.linalg.inv(T) if Ti is None else Ti
        return StateSpaceModel(Ti @ self.A @ T, Ti @ self.B, self.C @ T, self.D, self.dt)

    def __repr__(self):
        kind = "continuous" if self.dt is None else f"dt={self.dt}"
        return (f"StateSpaceModel(n={self.nstates}, m={self.ninputs}, "
                f"p={self.noutputs}, {kind})")


def static_gain(D, dt=None):
    D = np.atleast_2d(np.asarray(D, dtype=float))
    return StateSpaceModel(np.zeros((0, 0)), np.zeros((0, D.shape[1])),
                           np.zeros((D.shape[0], 0)), D, dt)


def identity(n, dt=None):
    return static_gain(np.eye(n), dt)


# ---------------------------------------------------------------------------
# linearization

def linearize_at(params, op):
    """Analytic Jacobians of the turbine model at an operating point.

    Returns a continuous model with 3 states, inputs ``[theta, mg]`` and
    outputs ``[omega, lambda, p, xt]``.
    """
    omega, theta, mg, v = op.x0.omega, op.u0.theta, op.u0.mg, op.v0
    k_lam = params.speed_ratio / v
    lam = k_lam * omega
    cp, cp_l, cp_t = model.cp_partials(params, lam, theta)
    _, ct_l, ct_t = model.ct_partials(params, lam, theta)
    half_rho_a = 0.5 * params.rho * params.area
    ng2_jt = params.ng ** 2 / params.jt
    aero = ng2_jt * half_rho_a * v ** 3

    A = np.zeros((3, 3))
    A[0, 0] = aero * (-cp / omega ** 2 + cp_l * k_lam / omega)
    A[1, 2] = 1.0
    A[2, 0] = half_rho_a * v ** 2 * ct_l * k_lam / params.mt
    A[2, 1] = -params.kt / params.mt
    A[2, 2] = -params.dt / params.mt

    B = np.zeros((3, 2))
    B[0, 0] = aero * cp_t / omega
    B[0, 1] = -ng2_jt
    B[2, 0] = half_rho_a * v ** 2 * ct_t / params.mt

    C = np.zeros((4, 3))
    C[0, 0] = 1.0
    C[1, 0] = k_lam
    C[2, 0] = params.eta * mg
    C[3, 1] = 1.0

    D = np.zeros((4, 2))
    D[2, 1] = params.eta * omega
    return StateSpaceModel(A, B, C, D)


def wind_jacobian(params, op):
    """Partials of the state derivative and outputs with respect to wind."""
    omega, theta, v = op.x0.omega, op.u0.theta, op.v0
    lam = params.speed_ratio * omega / v
    cp, cp_l, _ = model.cp_partials(params, lam, theta)
    ct, ct_l, _ = model.ct_partials(params, lam, theta)
    half_rho_a = 0.5 * params.rho * params.area
    dlam_dv = -lam / v
    e = np.zeros(3)
    e[0] = params.ng ** 2 / params.jt * half_rho_a / omega * (
        3 * v ** 2 * cp + v ** 3 * cp_l * dlam_dv)
    e[2] = half_rho_a / params.mt * (2 * v * ct + v ** 2 * ct_l * dlam_dv)
    f = np.array([0.0, dlam_dv, 0.0, 0.0])
    return e, f


# ---------------------------------------------------------------------------
# frequency response

def freq_response(G, omega):
    """Evaluate ``C (jw I - A)^-1 B + D`` (or at ``z = e^{jw dt}``)."""
    s = 1j * omega if G.dt is None else np.exp(1j * omega * G.dt)
    return evalfr(G, s)


def evalfr(G, s):
    """Transfer matrix at the complex point ``s``.

    ``A`` is diagonally balanced first so that realizations mixing very
    different units are not mistaken for resonances.
    """
    if G.nstates == 0:
        return G.D.astype(complex)
    Ab, (scale, _) = la.matrix_balance(G.A, permute=False, separate=True)
    M = s * np.eye(G.nstates) - Ab
    try:
        lu, piv = la.lu_factor(M, check_finite=False)
    except la.LinAlgError as exc:
        raise ResonanceError(f"(sI - A) singular at s={s}") from exc
    if np.min(np.abs(np.diag(lu))) <= 1e-14 * max(1.0, np.max(np.abs(np.diag(lu)))):
        raise ResonanceError(f"(sI - A) singular at s={s}")
    Bb = (G.B / scale[:, None]).astype(complex)
    return (G.C * scale) @ la.lu_solve((lu, piv), Bb) + G.D


def freq_response_grid(G, omegas):
    return np.array([freq_response(G, w) for w in np.atleast_1d(omegas)])


# ---------------------------------------------------------------------------
# realization algebra

def _dt_of(*systems):
    dts = {G.dt for G in systems}
    if len(dts) > 1:
        raise ValueError("cannot combine systems with different sample times")
    return dts.pop()


def series(G1, G2):
    """Cascade: input -> G1 -> G2 -> output (transfer ``G2 G1``)."""
    if G1.noutputs != G2.ninputs:
        raise ValueError(f"series: {G1.noutputs} outputs feed {G2.ninputs} inputs")
    n1, n2 = G1.nstates, G2.nstates
    A = np.block([[G1.A, np.zeros((n1, n2))],
                  [G2.B @ G1.C, G2.A]])
    B = np.vstack([G1.B, G2.B @ G1.D])
    C = np.hstack([G2.D @ G1.C, G2.C])
    D = G2.D @ G1.D
    return StateSpaceModel(A, B, C, D, _dt_of(G1, G2))


def parallel(G1, G2, sign=1.0):
    """``G1 + sign * G2``."""
    if (G1.ninputs, G1.noutputs) != (G2.ninputs, G2.noutputs):
        raise ValueError("parallel: dimension mismatch")
    A = la.block_diag(G1.A, G2.A)
    B = np.vstack([G1.B, G2.B])
    C = np.hstack([G1.C, sign * G2.C])
    return StateSpaceModel(A, B, C, G1.D + sign * G2.D, _dt_of(G1, G2))


def append(*systems):
    """Block-diagonal stacking of independent channels."""
    A = la.block_diag(*[G.A for G in systems])
    B = la.block_diag(*[G.B for G in systems])
    C = la.block_diag(*[G.C for G in systems])
    D = la.block_diag(*[G.D for G in systems])
    return StateSpaceModel(A, B, C, D, _dt_of(*systems))


def hstack(G1, G2):
    """``[G1 G2]`` sharing the output."""
    if G1.noutputs != G2.noutputs:
        raise ValueError("hstack: output mismatch")
    A = la.block_diag(G1.A, G2.A)
    B = la.block_diag(G1.B, G2.B)
    C = np.hstack([G1.C, G2.C])
    D = np.hstack([G1.D, G2.D])
    return StateSpaceModel(A, B, C, D, _dt_of(G1, G2))


def vstack(G1, G2):
    """``[G1; G2]`` sharing the input."""
    if G1.ninputs != G2.ninputs:
        raise ValueError("vstack: input mismatch")
    A = la.block_diag(G1.A, G2.A)
    B = np.vstack([G1.B, G2.B])
    C = la.block_diag(G1.C, G2.C)
    D = np.vstack([G1.D, G2.D])
    return StateSpaceModel(A, B, C, D, _dt_of(G1, G2))


def inverse(G):
    """Realization of ``G^-1`` for square G with invertible D."""
    Di = np.linalg.inv(G.D)
    return StateSpaceModel(G.A - G.B @ Di @ G.C, G.B @ Di, -Di @ G.C, Di, G.dt)


def feedback(G, K, sign=1.0):
    """Closed loop ``y = G u``, ``u = r + sign * K y``; returns r -> y.

    With the default positive sign this is ``G (I - K G)^-1``.

    Raises
    ------
    AlgebraicLoopError
        If ``I - sign * D_K D_G`` is singular.
    """
    if G.noutputs != K.ninputs or K.noutputs != G.ninputs:
        raise ValueError("feedback: dimension mismatch")
    m = G.ninputs
    F = np.eye(m) - sign * K.D @ G.D
    if np.linalg.cond(F) > 1e12:
        raise AlgebraicLoopError("I - D_K D_G is singular")
    Fi = np.linalg.inv(F)
    # u = Fi (r + sign (K.C xk + K.D G.C xg))
    ux = Fi @ np.hstack([sign * K.D @ G.C, sign * K.C])
    A = np.block([[G.A, np.zeros((G.nstates, K.nstates))],
                  [K.B @ G.C, K.A]])
    A = A + np.vstack([G.B, K.B @ G.D]) @ ux
    B = np.vstack([G.B, K.B @ G.D]) @ Fi
    C = np.hstack([G.C, np.zeros((G.noutputs, K.nstates))]) + G.D @ ux
    D = G.D @ Fi
    return StateSpaceModel(A, B, C, D, _dt_of(G, K))


def closed_loop_matrix(G, K, sign=1.0):
    """State matrix of the interconnection of ``G`` and ``K``."""
    return feedback(G, K, sign).A


def tf_to_ss(num, den, dt=None):
    """SISO transfer function (descending powers) to controllable form."""
    num = np.trim_zeros(np.atleast_1d(np.asarray(num, dtype=float)), "f")
    den = np.trim_zeros(np.atleast_1d(np.asarray(den, dtype=float)), "f")
    if den.size == 0:
        raise ValueError("denominator is zero")
    if num.size == 0:
        num = np.zeros(1)
    if num.size > den.size:
        raise ValueError("improper transfer function")
    num, den = num / den[0], den / den[0]
    n = den.size - 1
    num = np.concatenate([np.zeros(den.size - num.size), num])
    d = num[0]
    if n == 0:
        return static_gain([[d]], dt)
    rem = num[1:] - d * den[1:]
    A = np.zeros((n, n))
    A[0, :] = -den[1:]
    A[1:, :-1] = np.eye(n - 1)
    B = np.zeros((n, 1))
    B[0, 0] = 1.0
    C = rem.reshape(1, n)
    return StateSpaceModel(A, B, C, [[d]], dt)
