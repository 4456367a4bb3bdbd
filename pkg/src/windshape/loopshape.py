"""H-infinity loop-shaping design (McFarlane-Glover) for the turbine plant.

Controllers use the positive-feedback convention ``u = K y`` throughout, so
the robust-stabilization objective is
``|| [K; I] (I - G K)^-1 M^-1 ||_inf``.
"""

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as la

from . import equilibrium as eq
from . import matkernel as mk
from .errors import (ConfigurationError, EnvelopeError,
                     InfeasibleReferenceError, NumericError, SynthesisError)
from .linearize import (StateSpaceModel, append, feedback, freq_response,
                        linearize_at, parallel, series, tf_to_ss)

log = logging.getLogger(__name__)

HSV_TOL = 1e-8
# The weights place closed-loop poles near the origin, where dropping a state
# with a tiny Hankel singular value, or an ill-conditioned balancing
# transform alone, can move them across the axis.  Plant and controller are
# therefore reduced by orthogonal projections by default.
STAIRCASE_TOL = 1e-10
DEFAULT_GAMMA_FACTOR = 1.05

# Compensators of the original design, per channel (num, den) in descending powers of s.
BASE_W2_PRE = (((5.2,), (1.0, 2.0)), ((1579.0,), (1.0, 50.0)))
BASE_W2_POST = (((7.6e-5,), (1.0,)),
                 ((0.5, 0.25), (0.01, 1.0, 0.0)),
                 ((2.9e-12,), (100.0, 1.0)),
                 ((0.01,), (10.0, 1.0)))
BASE_W3_PRE = (((10.4,), (1.0, 2.0)), ((6.315,), (1.0, 2.0)))
BASE_W3_POST = (((6.1, 0.76), (1e3, 0.0)),
                 ((5e-11,), (1.0,)),
                 ((1.18, 2.37), (2e5, 0.0)),
                 ((1e-4,), (100.0, 1.0)))


@dataclass(frozen=True)
class WeightSpec:
    """Diagonal pre- and post-compensators with per-channel gains.

    ``pre`` holds one ``(num, den)`` pair per plant input and ``post`` one per
    plant output.  The gains multiply each element and let the original
    compensator shapes be reused on a turbine with different constants.
    """

    pre: tuple
    post: tuple
    pre_gain: tuple = None
    post_gain: tuple = None

    def __post_init__(self):
        pre = tuple(_element(e, f"pre[{i}]") for i, e in enumerate(self.pre))
        post = tuple(_element(e, f"post[{i}]") for i, e in enumerate(self.post))
        object.__setattr__(self, "pre", pre)
        object.__setattr__(self, "post", post)
        for name, elems in (("pre_gain", pre), ("post_gain", post)):
            gains = getattr(self, name)
            gains = (1.0,) * len(elems) if gains is None else tuple(float(g) for g in gains)
            if len(gains) != len(elems):
                raise ConfigurationError(f"{name} needs {len(elems)} entries")
            if not all(np.isfinite(g) and g > 0 for g in gains):
                raise ConfigurationError(f"{name} entries must be positive")
            object.__setattr__(self, name, gains)

    @property
    def w_pre(self):
        return _diag(self.pre, self.pre_gain)

    @property
    def w_post(self):
        return _diag(self.post, self.post_gain)

    def to_dict(self):
        def elems(items):
            return [{"num": list(n), "den": list(d)} for n, d in items]
        return {"pre": elems(self.pre), "post": elems(self.post),
                "pre_gain": list(self.pre_gain), "post_gain": list(self.post_gain)}

    @classmethod
    def from_dict(cls, data, where="weights"):
        try:
            pre = [(e["num"], e["den"]) for e in data["pre"]]
            post = [(e["num"], e["den"]) for e in data["post"]]
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"{where}: missing or malformed key {exc}") from exc
        try:
            return cls(pre=pre, post=post, pre_gain=data.get("pre_gain"),
                       post_gain=data.get("post_gain"))
        except ConfigurationError as exc:
            raise ConfigurationError(f"{where}: {exc}") from exc


def _element(item, where):
    try:
        num, den = item
        num = tuple(float(c) for c in num)
        den = tuple(float(c) for c in den)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: expected (num, den) coefficient lists") from exc
    num_t = np.trim_zeros(np.array(num), "f")
    den_t = np.trim_zeros(np.array(den), "f")
    if den_t.size == 0:
        raise ConfigurationError(f"{where}: zero denominator")
    if num_t.size > den_t.size:
        raise ConfigurationError(f"{where}: improper element (deg num > deg den)")
    roots = np.roots(den_t) if den_t.size > 1 else np.empty(0)
    for r in roots:
        on_origin = abs(r) <= 1e-12 * max(1.0, np.max(np.abs(roots)))
        if not on_origin and r.real >= 0:
            raise ConfigurationError(
                f"{where}: pole {r:.4g} is neither stable nor an integrator")
    return num, den


def _diag(elements, gains):
    blocks = []
    for (num, den), g in zip(elements, gains):
        blocks.append(tf_to_ss(np.asarray(num) * g, den))
    return append(*blocks)


def default_weights(region):
    """Compensators for ``region`` with gains rescaled to the default turbine."""
    if region == 2:
        return WeightSpec(BASE_W2_PRE, BASE_W2_POST,
                          pre_gain=DEFAULT_GAINS[2][0], post_gain=DEFAULT_GAINS[2][1])
    if region == 3:
        return WeightSpec(BASE_W3_PRE, BASE_W3_POST,
                          pre_gain=DEFAULT_GAINS[3][0], post_gain=DEFAULT_GAINS[3][1])
    raise ConfigurationError(f"no default weights for region {region}")


DEFAULT_GAINS = {
    2: ((0.01, 1.0), (1.0, 1.0, 1.0, 1.0)),
    3: ((1.0, 1.0), (1.0, 1.0, 1.0, 1.0)),
}


# ---------------------------------------------------------------------------
# realizations

def minimal_realization(G, tol=HSV_TOL):
    """Balanced truncation of (nearly) uncontrollable/unobservable states.

    Gramians are taken of the shifted model ``A - sigma I`` so integrators and
    unstable poles are admissible; the shift does not change which states
    are controllable or observable.  States whose Hankel singular value is
    below ``tol`` times the largest are discarded.
    """
    n = G.nstates
    if n == 0:
        return G
    sigma = max(0.0, mk.spectral_abscissa(G.A)) + 1.0
    As = G.A - sigma * np.eye(n)
    Wc = la.solve_continuous_lyapunov(As, -G.B @ G.B.T)
    Wo = la.solve_continuous_lyapunov(As.T, -G.C.T @ G.C)
    Lc = _psd_factor(Wc)
    Lo = _psd_factor(Wo)
    U, s, Vt = np.linalg.svd(Lo.T @ Lc)
    if s.size == 0 or s[0] == 0.0:
        return StateSpaceModel(np.zeros((0, 0)), np.zeros((0, G.ninputs)),
                               np.zeros((G.noutputs, 0)), G.D, G.dt)
    r = int(np.sum(s > tol * s[0]))
    root = 1.0 / np.sqrt(s[:r])
    T = Lc @ Vt[:r].T * root
    Ti = (root[:, None] * U[:, :r].T) @ Lo.T
    return StateSpaceModel(Ti @ G.A @ T, Ti @ G.B, G.C @ T, G.D, G.dt)


def _psd_factor(W):
    W = 0.5 * (W + W.T)
    w, V = np.linalg.eigh(W)
    w = np.clip(w, 0.0, None)
    return V * np.sqrt(w)


def shape_plant(Gn, weights, method="staircase", tol=None):
    """Shaped plant ``W_post Gn W_pre`` as a minimal realization.

    ``method="staircase"`` removes uncontrollable and unobservable states by
    orthogonal projection (default); ``method="balanced"`` applies
    :func:`minimal_realization` with its Hankel-singular-value cutoff.
    """
    w_pre, w_post = weights.w_pre, weights.w_post
    if w_pre.noutputs != Gn.ninputs or w_post.ninputs != Gn.noutputs:
        raise ConfigurationError(
            f"weights are {w_pre.noutputs}x{w_post.ninputs}, plant is "
            f"{Gn.ninputs} in / {Gn.noutputs} out")
    G = series(series(w_pre, Gn), w_post)
    if method == "staircase":
        return staircase_reduction(G, STAIRCASE_TOL if tol is None else tol)
    if method == "balanced":
        return minimal_realization(G, HSV_TOL if tol is None else tol)
    raise ConfigurationError(f"unknown reduction method {method!r}")


def krylov_basis(A, B, tol=STAIRCASE_TOL):
    """Orthonormal basis of the controllable subspace of ``(A, B)``.

    Block Arnoldi with re-orthogonalization; directions whose new component
    is below ``tol`` relative to the matrix scale are dropped.
    """
    n = A.shape[0]
    scale = max(np.linalg.norm(A, 2), np.linalg.norm(B, 2), np.finfo(float).tiny)
    basis = np.zeros((n, 0))
    block = B
    while basis.shape[1] < n and block.size:
        for _ in range(2):
            block = block - basis @ (basis.T @ block)
        U, s, _ = np.linalg.svd(block, full_matrices=False)
        keep = s > tol * scale
        if not np.any(keep):
            break
        new = U[:, keep]
        basis = np.hstack([basis, new])
        block = A @ new
    return basis


def staircase_reduction(G, tol=STAIRCASE_TOL):
    """Remove uncontrollable and unobservable states by orthogonal projection."""
    if G.nstates == 0:
        return G
    V = krylov_basis(G.A, G.B, tol)
    G = StateSpaceModel(V.T @ G.A @ V, V.T @ G.B, G.C @ V, G.D, G.dt)
    if G.nstates == 0:
        return G
    W = krylov_basis(G.A.T, G.C.T, tol)
    return StateSpaceModel(W.T @ G.A @ W, W.T @ G.B, G.C @ W, G.D, G.dt)


def deaugment(K_aug, weights, tol=STAIRCASE_TOL):
    """Controller for the unweighted plant, ``W_pre K_aug W_post``.

    With ``tol=None`` the full series realization is returned.
    """
    K = series(series(weights.w_post, K_aug), weights.w_pre)
    if tol is None:
        return K
    return staircase_reduction(K, tol)


# ---------------------------------------------------------------------------
# coprime factors and synthesis

@dataclass(frozen=True, eq=False)
class CoprimeFactors:
    """Normalized left coprime factors ``G = M^-1 N``.

    ``NM`` is the joint realization of ``[N M]``; ``X`` and ``Z`` are the
    control and filter Riccati solutions of the underlying plant ``G``.
    """

    NM: StateSpaceModel
    N: StateSpaceModel
    M: StateSpaceModel
    X: np.ndarray
    Z: np.ndarray
    G: StateSpaceModel
    H: np.ndarray


@dataclass(frozen=True, eq=False)
class SynthesisResult:
    G_shaped: StateSpaceModel
    factors: CoprimeFactors
    gamma_min: float
    gamma_sub: float
    K_aug: StateSpaceModel
    achieved_cost: float
    K: Optional[StateSpaceModel] = None
    K_discrete: Optional[StateSpaceModel] = None
    weights: Optional[WeightSpec] = None

    @property
    def margin(self):
        return 1.0 / self.gamma_sub


def nlcf(Ga):
    """Normalized left coprime factorization from the filter Riccati equation."""
    A, B, C, D = Ga.A, Ga.B, Ga.C, Ga.D
    m, p = Ga.ninputs, Ga.noutputs
    Rm = np.eye(m) + D.T @ D
    Sp = np.eye(p) + D @ D.T
    A0 = A - B @ np.linalg.solve(Rm, D.T @ C)
    try:
        Z = mk.solve_care(A0.T, C.T, B @ np.linalg.solve(Rm, B.T), Sp).X
        X = mk.solve_care(A0, B, C.T @ np.linalg.solve(Sp, C), Rm).X
    except NumericError as exc:
        raise SynthesisError(f"coprime factorization failed: {exc}", step="a") from exc
    Sp_isqrt = _inv_sqrtm(Sp)
    H = -(B @ D.T + Z @ C.T) @ np.linalg.inv(Sp)
    An = A + H @ C
    Cn = Sp_isqrt @ C
    NM = StateSpaceModel(An, np.hstack([B + H @ D, H]), Cn,
                         Sp_isqrt @ np.hstack([D, np.eye(p)]))
    N = StateSpaceModel(An, B + H @ D, Cn, Sp_isqrt @ D)
    M = StateSpaceModel(An, H, Cn, Sp_isqrt)
    if not mk.is_hurwitz(An, tol=0.0):
        raise SynthesisError("coprime factors are not stable", step="a")
    return CoprimeFactors(NM=NM, N=N, M=M, X=X, Z=Z, G=Ga, H=H)


def _inv_sqrtm(S):
    w, V = np.linalg.eigh(S)
    return (V / np.sqrt(w)) @ V.T


def normalization_error(factors, omegas):
    """Largest ``|| N N* + M M* - I ||_2`` over the given frequencies."""
    worst = 0.0
    p = factors.NM.noutputs
    for w in omegas:
        F = freq_response(factors.NM, w)
        worst = max(worst, float(np.linalg.norm(F @ F.conj().T - np.eye(p), 2)))
    return worst


def gamma_min(factors):
    """Optimal robust-stabilization cost ``sqrt(1 + lambda_max(X Z))``."""
    lam = np.linalg.eigvals(factors.X @ factors.Z).real
    return float(np.sqrt(1.0 + max(float(np.max(lam)), 0.0)))


def central_controller(factors, gamma):
    """Suboptimal central controller at level ``gamma`` (positive feedback)."""
    G, X, Z = factors.G, factors.X, factors.Z
    A, B, C, D = G.A, G.B, G.C, G.D
    n, m = G.nstates, G.ninputs
    Rm = np.eye(m) + D.T @ D
    F = -np.linalg.solve(Rm, D.T @ C + B.T @ X)
    L = (1.0 - gamma ** 2) * np.eye(n) + X @ Z
    if np.linalg.cond(L) > 1e14:
        raise SynthesisError(f"gamma={gamma:.6g} too close to gamma_min", step="c")
    LtZ = np.linalg.solve(L.T, Z @ C.T)
    Ak = A + B @ F + gamma ** 2 * LtZ @ (C + D @ F)
    Bk = gamma ** 2 * LtZ
    Ck = B.T @ X
    Dk = -D.T
    return StateSpaceModel(Ak, Bk, Ck, Dk)


def cost_system(factors, K):
    """Realization of ``[K; I] (I - G K)^-1 M^-1`` (the robust-stabilization cost).

    The plant and the factor inverse share one state vector, so the
    realization is stable exactly when the loop is internally stable.
    """
    G, H = factors.G, factors.H
    p = G.noutputs
    S_half = la.sqrtm(np.eye(p) + G.D @ G.D.T).real
    # plant with inputs [w, u] and output e = M^-1 w + G u
    P = StateSpaceModel(G.A, np.hstack([-H @ S_half, G.B]), G.C,
                        np.hstack([S_half, G.D]))
    # close u = K e, output [u; e]
    n, nk = P.nstates, K.nstates
    Fi = np.linalg.inv(np.eye(p) - G.D @ K.D)
    Bw, Bu = P.B[:, :p], P.B[:, p:]
    # e = Fi (C x + D Ck xk + S w)
    e_x = Fi @ np.hstack([G.C, G.D @ K.C])
    e_w = Fi @ S_half
    u_x = np.hstack([np.zeros((K.noutputs, n)), K.C]) + K.D @ e_x
    u_w = K.D @ e_w
    A = np.block([[G.A, np.zeros((n, nk))], [np.zeros((nk, n)), K.A]])
    A = A + np.vstack([Bu, np.zeros((nk, K.noutputs))]) @ u_x
    A = A + np.vstack([np.zeros((n, p)), K.B]) @ e_x
    Bc = np.vstack([Bw + Bu @ u_w, K.B @ e_w])
    Cc = np.vstack([u_x, e_x])
    Dc = np.vstack([u_w, e_w])
    return StateSpaceModel(A, Bc, Cc, Dc)


def synthesize(Ga, gamma_factor=DEFAULT_GAMMA_FACTOR, weights=None, dt=None):
    """Loop-shaping controller for the shaped plant ``Ga``.

    With ``weights`` the controller is de-augmented to the unweighted plant;
    with ``dt`` its bilinear discretization is attached as well.

    Raises
    ------
    SynthesisError
        Naming the failing step: (a) factorization, (b) optimal cost,
        (c) controller formulas, (d) de-augmentation, (e) stability.
    """
    if not gamma_factor > 1:
        raise SynthesisError("gamma_factor must exceed 1", step="c")
    factors = nlcf(Ga)
    g_min = gamma_min(factors)
    if not np.isfinite(g_min) or g_min < 1.0:
        raise SynthesisError(f"degenerate optimal cost {g_min}", step="b")
    g_sub = gamma_factor * g_min
    K_aug = central_controller(factors, g_sub)
    cl = feedback(Ga, K_aug)
    if not mk.is_hurwitz(cl.A, tol=0.0):
        raise SynthesisError("closed loop with K_aug is not stable", step="e")
    try:
        cost = mk.hinf_norm(cost_system(factors, K_aug))
    except NumericError as exc:
        raise SynthesisError(f"cost evaluation failed: {exc}", step="e") from exc
    K = K_d = None
    if weights is not None:
        try:
            K = deaugment(K_aug, weights)
        except (NumericError, ValueError) as exc:
            raise SynthesisError(f"de-augmentation failed: {exc}", step="d") from exc
        if dt is not None:
            from .switching import discretize
            K_d = discretize(K, dt)
    return SynthesisResult(G_shaped=Ga, factors=factors, gamma_min=g_min,
                           gamma_sub=g_sub, K_aug=K_aug, achieved_cost=cost,
                           K=K, K_discrete=K_d, weights=weights)


# ---------------------------------------------------------------------------
# robustness

def coprime_margin(nominal, perturbed_plant):
    """``|| [N_p - N, M_p - M] ||_inf`` for an already shaped perturbed plant.

    Returns ``inf`` if the factor difference cannot be formed as a stable
    system.
    """
    try:
        other = nlcf(perturbed_plant)
        diff = parallel(other.NM, nominal.NM, sign=-1.0)
        return mk.hinf_norm(diff)
    except (SynthesisError, NumericError):
        return float("inf")


@dataclass(frozen=True, eq=False)
class RegionDesign:
    """A synthesized controller together with where and how it was designed."""

    region: int
    op: "eq.OperatingPoint"
    weights: WeightSpec
    plant: StateSpaceModel
    result: SynthesisResult


def design_region(params, op, weights, gamma_factor=DEFAULT_GAMMA_FACTOR, dt=None):
    Gn = linearize_at(params, op)
    Ga = shape_plant(Gn, weights)
    result = synthesize(Ga, gamma_factor, weights=weights, dt=dt)
    return RegionDesign(region=op.region, op=op, weights=weights, plant=Gn, result=result)


def loop_is_stable(plant, K):
    """Independent verdict: eigenvalues of the (plant, K) interconnection."""
    return mk.is_hurwitz(feedback(plant, K).A, tol=0.0)


def operating_point(params, v, p, rel_tol=1e-9):
    """Equilibrium delivering ``p`` at wind ``v``; None when infeasible."""
    try:
        p_avail = eq.equilibrium_region2(params, v).y0.p
    except EnvelopeError:
        p_avail = None
    if p_avail is not None and abs(p - p_avail) <= rel_tol * p_avail:
        return eq.equilibrium_region2(params, v)
    if p_avail is not None and p > p_avail:
        return None
    try:
        return eq.equilibrium_region3(params, v, p)
    except (InfeasibleReferenceError, EnvelopeError):
        return None


@dataclass
class SweepPoint:
    v: float
    p: float
    feasible: bool
    margins: dict = field(default_factory=dict)
    stable: dict = field(default_factory=dict)
    stable_aug: dict = field(default_factory=dict)

    def certified(self, region, gamma_sub):
        return self.feasible and self.margins[region] < 1.0 / gamma_sub


def evaluate_point(params, designs, v, p):
    op = operating_point(params, v, p)
    point = SweepPoint(v=float(v), p=float(p), feasible=op is not None)
    if op is None:
        return point
    Gn = linearize_at(params, op)
    for d in designs:
        Ga = shape_plant(Gn, d.weights)
        point.margins[d.region] = coprime_margin(d.result.factors, Ga)
        point.stable[d.region] = loop_is_stable(Gn, d.result.K)
        point.stable_aug[d.region] = loop_is_stable(Ga, d.result.K_aug)
    return point


def robustness_sweep(params, designs, v_grid, p_grid, threads=None):
    """Margin and stability map over a (wind, power) grid.

    Points above the available-power curve or without a feasible pitch are
    returned with ``feasible=False``.  Grid points are independent and are
    evaluated concurrently; the result order follows ``v`` then ``p``.
    """
    jobs = [(float(v), float(p)) for v in v_grid for p in p_grid]
    threads = threads or _thread_count()
    if threads <= 1:
        return [evaluate_point(params, designs, v, p) for v, p in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda vp: evaluate_point(params, designs, *vp), jobs))


def _thread_count():
    try:
        return max(1, int(os.environ.get("WINDSHAPE_THREADS", "1")))
    except ValueError:
        return 1


SWEEP_HEADER = ("V", "P", "margin_K2", "stable_K2", "margin_K3", "stable_K3", "feasible")


def write_sweep_csv(path, points):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for pt in points:
            row = [repr(pt.v), repr(pt.p)]
            for region in (2, 3):
                if pt.feasible and region in pt.margins:
                    row += [repr(float(pt.margins[region])), int(pt.stable[region])]
                else:
                    row += ["inf", 0]
            row.append(int(pt.feasible))
            writer.writerow(row)


def read_sweep_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SWEEP_HEADER:
            raise ValueError(f"unexpected sweep header {reader.fieldnames}")
        for rec in reader:
            rows.append({
                "V": float(rec["V"]), "P": float(rec["P"]),
                "margin_K2": float(rec["margin_K2"]), "stable_K2": bool(int(rec["stable_K2"])),
                "margin_K3": float(rec["margin_K3"]), "stable_K3": bool(int(rec["stable_K3"])),
                "feasible": bool(int(rec["feasible"])),
            })
    return rows
