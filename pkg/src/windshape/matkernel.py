"""Dense control-equation solvers: Schur, CARE, Lyapunov, H-infinity norm.

All residuals are reported relative to the magnitude of the terms in the
equation, so tolerances mean "correct digits" independent of units.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .errors import (DomainError, NoStabilizingSolutionError, NumericError,
                     UnboundedNormError)

STABILITY_TOL = 1e-9


@dataclass(frozen=True)
class CareSolution:
    X: np.ndarray
    residual_norm: float
    closed_loop_spectrum: np.ndarray


def real_schur(A, ordered=False):
    """Real Schur form ``A = Q T Q^T``.

    With ``ordered=True`` eigenvalues in the open left half plane lead the
    diagonal; the number of them is returned as a third element.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DomainError("real_schur needs a square matrix")
    try:
        if ordered:
            T, Q, sdim = la.schur(A, output="real", sort="lhp")
            return Q, T, sdim
        T, Q = la.schur(A, output="real")
    except (la.LinAlgError, ValueError) as exc:
        raise NumericError(f"Schur decomposition failed: {exc}") from exc
    return Q, T


def eigvals(A):
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return np.empty(0, dtype=complex)
    _, T = real_schur(A)
    n = T.shape[0]
    out = np.empty(n, dtype=complex)
    k = 0
    while k < n:
        if k + 1 < n and T[k + 1, k] != 0.0:
            a, b, c, d = T[k, k], T[k, k + 1], T[k + 1, k], T[k + 1, k + 1]
            mid = 0.5 * (a + d)
            disc = np.sqrt(complex(0.25 * (a - d) ** 2 + b * c))
            out[k], out[k + 1] = mid + disc, mid - disc
            k += 2
        else:
            out[k] = T[k, k]
            k += 1
    return out


def spectral_abscissa(A):
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return -np.inf
    return float(np.max(eigvals(A).real))


def is_hurwitz(A, tol=STABILITY_TOL):
    """All eigenvalues satisfy ``Re < -tol * max(1, |lambda|)``."""
    lam = eigvals(A)
    if lam.size == 0:
        return True
    return bool(np.all(lam.real < -tol * np.maximum(1.0, np.abs(lam))))


# ---------------------------------------------------------------------------
# Riccati and Lyapunov

def care_residual(A, B, Q, R, X):
    """Relative residual of ``A'X + XA - X B R^-1 B' X + Q``."""
    G = B @ np.linalg.solve(R, B.T)
    terms = (A.T @ X, X @ A, X @ G @ X, Q)
    res = terms[0] + terms[1] - terms[2] + terms[3]
    scale = sum(np.linalg.norm(t, 1) for t in terms)
    return float(np.linalg.norm(res, 1) / max(scale, np.finfo(float).tiny))


def solve_care(A, B, Q, R, refine_tol=1e-8):
    """Stabilizing solution of ``A'X + XA - X B R^-1 B' X + Q = 0``.

    The stable invariant subspace of the balanced Hamiltonian is obtained
    from an ordered real Schur form; a Newton-Kleinman pass polishes the
    result when the relative residual exceeds ``refine_tol``.
    """
    A, B, Q, R = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, Q, R))
    n = A.shape[0]
    Q = 0.5 * (Q + Q.T)
    R = 0.5 * (R + R.T)
    G = B @ np.linalg.solve(R, B.T)
    H = np.block([[A, -G], [-Q, -A.T]])
    Hb, (scale, _) = la.matrix_balance(H, permute=False, separate=True)
    lam = la.eigvals(Hb)
    if np.any(np.abs(lam.real) < 1e-10 * np.maximum(1.0, np.abs(lam))) \
            or np.sum(lam.real < 0) != n:
        raise NoStabilizingSolutionError("Hamiltonian has eigenvalues on the imaginary axis")
    Qs, _, sdim = real_schur(Hb, ordered=True)
    if sdim != n:
        raise NoStabilizingSolutionError(f"stable subspace has dimension {sdim}, need {n}")
    V = scale[:, None] * Qs[:, :n]
    U1, U2 = V[:n], V[n:]
    if np.linalg.cond(U1) > 1.0 / np.finfo(float).eps:
        raise NoStabilizingSolutionError("stable subspace is not a graph (U1 singular)")
    X = np.linalg.solve(U1.T, U2.T).T
    X = 0.5 * (X + X.T)
    resid = care_residual(A, B, Q, R, X)
    if resid > refine_tol:
        X = care_newton(A, B, Q, R, X, tol=1e-14, maxiter=20)
        resid = care_residual(A, B, Q, R, X)
    K = np.linalg.solve(R, B.T @ X)
    spectrum = eigvals(A - B @ K)
    if spectrum.size and np.max(spectrum.real) >= 0:
        raise NoStabilizingSolutionError("closed-loop spectrum not in open left half plane")
    return CareSolution(X=X, residual_norm=resid, closed_loop_spectrum=spectrum)


def care_newton(A, B, Q, R, X0, tol=1e-13, maxiter=50):
    """Newton-Kleinman iteration from a stabilizing initial guess ``X0``."""
    X = np.array(X0, dtype=float)
    Ri = np.linalg.inv(R)
    for _ in range(maxiter):
        K = Ri @ B.T @ X
        Acl = A - B @ K
        Xn = solve_lyapunov(Acl, Q + K.T @ R @ K, check=False)
        Xn = 0.5 * (Xn + Xn.T)
        step = np.linalg.norm(Xn - X, 1) / max(np.linalg.norm(Xn, 1), 1e-300)
        X = Xn
        if step < tol:
            break
    return X


def bass_gain(A, B, R=None, shift=None):
    """Stabilizing state-feedback gain by Bass's shifted-Lyapunov method."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n = A.shape[0]
    R = np.eye(B.shape[1]) if R is None else R
    if shift is None:
        shift = np.linalg.norm(A, 2) + 1.0
    As = A + shift * np.eye(n)
    P = la.solve_continuous_lyapunov(As, 2.0 * B @ np.linalg.solve(R, B.T))
    return np.linalg.solve(R, B.T) @ np.linalg.inv(P)


def solve_lyapunov(A, Q, check=True):
    """Solve ``A'X + XA + Q = 0`` for Hurwitz ``A``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if check and not is_hurwitz(A, tol=0.0):
        raise DomainError("Lyapunov equation needs a Hurwitz matrix")
    X = la.solve_continuous_lyapunov(A.T, -Q)
    return 0.5 * (X + X.T)


def lyapunov_residual(A, Q, X):
    terms = (A.T @ X, X @ A, Q)
    res = terms[0] + terms[1] + terms[2]
    scale = sum(np.linalg.norm(t, 1) for t in terms)
    return float(np.linalg.norm(res, 1) / max(scale, np.finfo(float).tiny))


def gramians(G):
    """Controllability and observability gramians of a stable model."""
    Wc = solve_lyapunov(G.A.T, G.B @ G.B.T)
    Wo = solve_lyapunov(G.A, G.C.T @ G.C)
    return Wc, Wo


def hankel_singular_values(G):
    Wc, Wo = gramians(G)
    return np.sqrt(np.maximum(np.sort(np.linalg.eigvals(Wc @ Wo).real)[::-1], 0.0))


# ---------------------------------------------------------------------------
# H-infinity norm

def _sigma_max(G, w):
    from .linearize import freq_response
    return float(np.linalg.norm(freq_response(G, w), 2))


def _sample_grid(G, points=200):
    lam = np.abs(eigvals(G.A)) if G.nstates else np.array([1.0])
    lam = lam[lam > 0]
    lo = np.min(lam) / 100.0 if lam.size else 1e-3
    hi = np.max(lam) * 100.0 if lam.size else 1e3
    return np.logspace(np.log10(lo), np.log10(hi), points)


def sampled_peak(G, omegas=None):
    """Largest singular value over a frequency grid (plus DC)."""
    omegas = _sample_grid(G) if omegas is None else omegas
    values = [_sigma_max(G, w) for w in omegas]
    k = int(np.argmax(values))
    peak, where = values[k], omegas[k]
    dc = _sigma_max(G, 0.0)
    if dc >= peak:
        peak, where = dc, 0.0
    return peak, where


def hinf_norm(G, tol=1e-6):
    """H-infinity norm by bisection on the Hamiltonian imaginary-axis test.

    Raises
    ------
    UnboundedNormError
        If ``G`` is not asymptotically stable.
    """
    if G.dt is not None:
        raise DomainError("hinf_norm supports continuous-time models only")
    sigma_d = float(np.linalg.norm(G.D, 2)) if G.D.size else 0.0
    if G.nstates == 0:
        return sigma_d
    if not is_hurwitz(G.A, tol=0.0):
        raise UnboundedNormError("system is not asymptotically stable")
    lower, _ = sampled_peak(G)
    lower = max(lower, sigma_d)
    if lower == 0.0:
        return 0.0
    upper = 2.0 * lower
    while _crosses(G, upper) is not None:
        lower = upper
        upper *= 2.0
        if upper > 1e300:
            raise NumericError("H-infinity norm bisection diverged")
    while (upper - lower) > tol * lower:
        gamma = 0.5 * (lower + upper)
        hit = _crosses(G, gamma)
        if hit is None:
            upper = gamma
        else:
            lower = max(gamma, hit)
    return 0.5 * (lower + upper)


def _crosses(G, gamma):
    """Return a peak value >= gamma if the level crosses, else None.

    The Hamiltonian associated with ``gamma`` has imaginary-axis eigenvalues
    exactly when ``gamma`` is at most the norm; candidate eigenvalues are
    confirmed by evaluating the singular value at their frequency.
    """
    A, B, C, D = G.A, G.B, G.C, G.D
    m = D.shape[1]
    R = gamma ** 2 * np.eye(m) - D.T @ D
    try:
        Ri = np.linalg.inv(R)
    except np.linalg.LinAlgError:
        return gamma
    Ah = A + B @ Ri @ D.T @ C
    H = np.block([
        [Ah, B @ Ri @ B.T],
        [-C.T @ (np.eye(D.shape[0]) + D @ Ri @ D.T) @ C, -Ah.T],
    ])
    with np.errstate(invalid="ignore"):
        # scipy casts an unused permutation vector that can hold NaN
        Hb = la.matrix_balance(H, permute=False)[0]
    lam = la.eigvals(Hb)
    near = lam[np.abs(lam.real) < 1e-5 * np.maximum(1.0, np.abs(lam))]
    if near.size == 0:
        return None
    ws = np.unique(np.abs(near.imag))
    probes = np.concatenate([ws, 0.5 * (ws[1:] + ws[:-1])])
    values = [_sigma_max(G, float(w)) for w in probes]
    best = max(values)
    return best if best >= gamma else None
