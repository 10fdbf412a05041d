"""Tensor network renormalization of the 2D classical Ising model.

Spins live on an ``L x L`` torus.  One Boltzmann tensor sits on every second
plaquette, so the network is a square lattice of ``L^2 / 2`` tensors rotated
by 45 degrees, with torus periods ``(L/2, L/2)`` and ``(L/2, -L/2)`` in its own
coordinates.  Legs are ordered ``A[l, u, r, d]``.

One coarse-graining step acts on 2x2 blocks ``a b / c e`` (``a`` top left,
``e`` bottom right):

* The top pair ``T = a b`` has legs ``(xL, au, bu, xR, mL, mR)``; the projector
  ``P = V V^T`` acts on ``(xL, mL, mR, xR)`` with
  ``V = u[mL, mR, pL, pR] vL[xL, pL, aL] vR[pR, xR, aR]``.
* ``vL, vR, u`` minimize ``|block - P block|`` where the bottom pair
  ``Q = c e`` enters through ``N = sum Q Q`` on ``(mL, mR)``.
* ``B = V^T T`` is split by a truncated SVD into ``yL[au, bu, k]`` and
  ``yR[k, aL, aR]``.
* ``D = (V yR) Q yL'`` with ``yL'`` from the block below, compressed on the
  horizontal leg pairs by the isometry ``w``: ``A_out = w^T D w``.

Each step maps four tensors to one.  After ``k - 1`` steps on ``L = 2^k``
two tensors remain, closed as ``sum A[i, j, k, m] A[k, m, i, j]``.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import logsumexp

from .autodiff import Tape
from .stiefel import MethodSchedule, MomentumState, ev_from_adjoint, mixed_select, momentum_step
from .tensor import NumericalFailure, contract, eigh_sym, norm, svd

BETA_C = 0.5 * math.log(1.0 + math.sqrt(2.0))
METHODS = ("ev", "mixed", "svd", "qr", "cayley", "cayley_smw", "cayley_iter")


def build_boltzmann_tensor(beta: float) -> np.ndarray:
    """``A[i,j,k,l] = exp(beta (s_i s_j + s_j s_k + s_k s_l + s_l s_i))``, index 0 is spin up."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    s = np.array([1.0, -1.0])
    i, j, k, l = np.meshgrid(s, s, s, s, indexing="ij")
    return np.exp(beta * (i * j + j * k + k * l + l * i))


# projector pieces

def top_pair(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``T[xL, au, bu, xR, mL, mR]``."""
    return contract("xakm,kbyn->xabymn", a, b)


def bottom_pair(c: np.ndarray, e: np.ndarray) -> np.ndarray:
    """``Q[cl, mL, mR, cd, ed, er]``."""
    return contract("pmqs,qnrt->pmnstr", c, e)


def bottom_norm(c: np.ndarray, e: np.ndarray) -> np.ndarray:
    """``N[mL, mR, mL', mR'] = sum Q Q`` over every leg but the middle pair."""
    nc = contract("pmqs,pMQs->mMqQ", c, c)
    ne = contract("qnrt,QNrt->nNqQ", e, e)
    return contract("mMqQ,nNqQ->mnMN", nc, ne)


def projector_isometry(vl, vr, u) -> np.ndarray:
    """``V[xL, mL, mR, xR, aL, aR]``."""
    return contract("mnpP,xpA,PyG->xmnyAG", u, vl, vr)


def vl_matrix(vl: np.ndarray) -> np.ndarray:
    return vl.reshape(-1, vl.shape[2])


def u_matrix(u: np.ndarray) -> np.ndarray:
    return u.reshape(u.shape[0] * u.shape[1], -1)


def init_projectors(a: np.ndarray, chi: int):
    """Isometries from truncated SVDs of the top pair, identity disentangler."""
    t = top_pair(a, a)
    x, v = a.shape[0], a.shape[3]
    dl = min(chi, x * v)
    # rows (xL, mL) and (mR, xR)
    left = np.transpose(t, (0, 4, 1, 2, 3, 5)).reshape(x * v, -1)
    right = np.transpose(t, (5, 3, 0, 1, 2, 4)).reshape(v * x, -1)
    vl = svd(left, dl)[0].reshape(x, v, dl)
    vr = svd(right, dl)[0].reshape(v, x, dl)
    u = np.eye(v * v).reshape(v, v, v, v)
    return vl, vr, u


@dataclass
class ProjectorProblem:
    """Constant pieces of the truncation error for one tensor ``A``."""

    t: np.ndarray
    n: np.ndarray
    tn: np.ndarray
    bb: float

    @classmethod
    def from_tensor(cls, a: np.ndarray) -> "ProjectorProblem":
        t = top_pair(a, a)
        n = bottom_norm(a, a)
        tn = contract("xabyMN,MNmn->xabymn", t, n)
        return cls(t, n, tn, float(np.sum(tn * t)))


def error_graph(problem: ProjectorProblem, vl, vr, u):
    """Tape with the normalized squared error ``|b - P b|^2 / |b|^2 - 1``.

    Returns ``(tape, loss, cross, (vl, vr, u) nodes, pt)`` where ``cross`` is
    the overlap ``<b, P b> / |b|^2`` and ``pt`` the projected top pair ``P T``.
    """
    tape = Tape()
    nv = tape.variable(vl, "vL")
    nr = tape.variable(vr, "vR")
    nu = tape.variable(u, "u")
    t = tape.constant(problem.t, "T")
    tn = tape.constant(problem.tn, "TN")
    n = tape.constant(problem.n, "N")
    b = tape.contract("xabymn,mnpP,xpA,PyG->abAG", t, nu, nv, nr)
    ytn = tape.contract("xabymn,mnpP,xpA,PyG->abAG", tn, nu, nv, nr)
    cross = tape.inner(ytn, b)
    vb = tape.contract("abAG,mnpP,xpA,PyG->xabymn", b, nu, nv, nr)
    vbn = tape.contract("xabyMN,MNmn->xabymn", vb, n)
    pp = tape.inner(vbn, vb)
    diff = tape.add(tape.scale(cross, -2.0), pp)
    loss = tape.scale(diff, 1.0 / problem.bb)
    return tape, loss, tape.scale(cross, 1.0 / problem.bb), (nv, nr, nu), vb


def residual_delta(problem: ProjectorProblem, pt: np.ndarray) -> float:
    """``delta`` from the residual ``T - P T``.

    Same value as ``sqrt(1 + loss)`` without the cancellation that floors the
    expanded form near ``sqrt(eps)``.
    """
    r = problem.t - pt
    rn = contract("xabyMN,MNmn->xabymn", r, problem.n)
    return math.sqrt(max(float(np.sum(rn * r)), 0.0) / problem.bb)


def truncation_error(a: np.ndarray, vl, vr, u) -> float:
    """``|block - P block| / |block|`` for the 2x2 block of ``a``."""
    problem = ProjectorProblem.from_tensor(a)
    return residual_delta(problem, error_graph(problem, vl, vr, u)[4].value)


def optimize_projectors(a: np.ndarray, chi: int, iters: int, method: str = "svd",
                        seed: int = 0, eta: float = 1.0, cadence: int = 5,
                        start=None):
    """Minimize the truncation error over ``vL, vR, u``.

    Returns ``(vl, vr, u, deltas)`` where ``deltas`` holds the normalized error
    before every update and after the last one.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if iters < 0:
        raise ValueError("iters must be >= 0")
    vl, vr, u = init_projectors(a, chi) if start is None else start
    problem = ProjectorProblem.from_tensor(a)
    mom = MomentumState(eta=eta)
    schedule = MethodSchedule(cadence=cadence, rng=np.random.default_rng([seed, 2]))
    deltas = []
    params = [vl, vr, u]
    views = [vl_matrix, vl_matrix, u_matrix]
    for it in range(1, iters + 1):
        tape, loss, cross, nodes, pt = error_graph(problem, *params)
        deltas.append(residual_delta(problem, pt.value))
        step = mixed_select(schedule, it) if method == "mixed" else method
        if step == "ev":
            # EV maximizes the overlap <b, P b>; the quadratic term does not
            # reduce to it here (P and N share the middle legs), so a
            # candidate that raises the error is rejected
            adj = tape.backward(cross)
            new = [ev_from_adjoint(-adj[node].reshape(view(p).shape)).reshape(p.shape)
                   for p, node, view in zip(params, nodes, views)]
            trial = float(error_graph(problem, *new)[1].value)
            if trial > float(loss.value):
                new = params
        else:
            adj = tape.backward(loss)
            new = []
            for k, (p, node, view) in enumerate(zip(params, nodes, views)):
                x = view(p)
                x, m, _ = momentum_step(x, adj[node].reshape(x.shape), mom.momenta.get(k),
                                        mom.eta, mom.beta_m, mom.alpha, mom.eps, step)
                mom.momenta[k] = m
                new.append(x.reshape(p.shape))
        mom.tick()
        params = new
    deltas.append(residual_delta(problem, error_graph(problem, *params)[4].value))
    return params[0], params[1], params[2], deltas


def split_B(b: np.ndarray, chi: int):
    """Truncated SVD of ``B[au, bu, aL, aR]`` across ``(au bu) | (aL aR)``."""
    au, bu, al, ar = b.shape
    uu, s, v = svd(b.reshape(au * bu, al * ar), chi)
    root = np.sqrt(s)
    yl = (uu * root).reshape(au, bu, -1)
    yr = (v * root).T.reshape(-1, al, ar)
    return yl, yr


def compute_w(m: np.ndarray, chi: int, tol: float = 1e-8) -> np.ndarray:
    """Top-``chi`` eigenvectors of the symmetric matrix ``m``."""
    scale = max(float(np.max(np.abs(m))), 1e-300)
    if np.max(np.abs(m - m.T)) > tol * scale:
        raise NumericalFailure("w sub-network is not symmetric", m)
    return eigh_sym(m, tol=tol)[1][:, :chi]


def coarse_tensor(a: np.ndarray, vl, vr, u, yl, yr) -> np.ndarray:
    """``D[ku, kd, xL, cl, xR, er]`` before the horizontal compression."""
    v = projector_isometry(vl, vr, u)
    q = bottom_pair(a, a)
    top = contract("KAG,xmnyAG->Kxmny", yr, v)
    return contract("Kxmny,pmnstr,stL->KLxpyr", top, q, yl)


@dataclass
class TnrLayer:
    vl: np.ndarray
    vr: np.ndarray
    u: np.ndarray
    w: np.ndarray
    yl: np.ndarray
    yr: np.ndarray
    a_norm: float
    delta: float
    deltas: list = field(default_factory=list)
    wall_ms: float | None = None


def coarse_grain_step(a: np.ndarray, chi: int, iters: int, method: str = "svd",
                      seed: int = 0, eta: float = 1.0):
    """One RG step; returns ``(A_out / |A_out|, |A_out|, layer)``."""
    t0 = time.perf_counter()
    vl, vr, u, deltas = optimize_projectors(a, chi, iters, method, seed, eta)
    t = top_pair(a, a)
    b = contract("xabymn,mnpP,xpA,PyG->abAG", t, u, vl, vr)
    yl, yr = split_B(b, chi)
    d = coarse_tensor(a, vl, vr, u, yl, yr)
    k, l, x, p, y, r = d.shape
    m_left = contract("KLxpyr,KLXPyr->xpXP", d, d).reshape(x * p, -1)
    m_right = contract("KLxpyr,KLxpYR->yrYR", d, d).reshape(y * r, -1)
    w = compute_w(m_left + m_right, min(chi, x * p)).reshape(x, p, -1)
    a_out = contract("xpl,KLxpyr,yrR->lKRL", w, d, w)
    a_norm = norm(a_out)
    if not a_norm > 0:
        raise NumericalFailure("coarse-grained tensor vanished")
    layer = TnrLayer(vl, vr, u, w, yl, yr, a_norm, deltas[-1], deltas,
                     (time.perf_counter() - t0) * 1e3)
    return a_out / a_norm, a_norm, layer


def torus_closure(a: np.ndarray) -> float:
    """Two tensors on the smallest tilted torus."""
    return float(contract("ijkm,kmij->", a, a))


@dataclass
class TnrRunRecord:
    beta: float
    L: int
    chi: int
    layers: list
    norms: list  # A_norm of the input tensor and of every layer
    lnZ: float
    lnZ_per_site: float
    a_top: np.ndarray


def run_rg(beta: float, L: int, chi: int, iters: int = 200, method: str = "svd",
           seed: int = 0, eta: float = 1.0, callback=None) -> TnrRunRecord:
    """ln Z of the ``L x L`` periodic Ising model by ``log2(L) - 1`` TNR steps."""
    k = int(round(math.log2(L))) if L > 0 else 0
    if L != 2**k or k < 2:
        raise ValueError(f"L must be a power of two >= 4, got {L}")
    a = build_boltzmann_tensor(beta)
    n0 = norm(a)
    a = a / n0
    count = L * L // 2
    lnz = count * math.log(n0)
    norms, layers = [n0], []
    for step in range(1, k):
        a, a_norm, layer = coarse_grain_step(a, chi, iters, method, seed + step, eta)
        count //= 4
        lnz += count * math.log(a_norm)
        norms.append(a_norm)
        layers.append(layer)
        if callback is not None:
            callback(step, layer)
    z_top = torus_closure(a)
    if not z_top > 0:
        raise NumericalFailure(f"final closure is not positive ({z_top})")
    lnz += math.log(z_top)
    return TnrRunRecord(beta, L, chi, layers, norms, lnz, lnz / (L * L), a)


def internal_energy(beta: float, dbeta: float, L: int, chi: int, iters: int = 200,
                    method: str = "svd", seed: int = 0) -> float:
    """Energy per site, ``-d lnZ / d beta`` by central differences.

    ln Z is even in beta on the bipartite torus (flip one sublattice), so a
    lower point below zero is evaluated at ``|beta - dbeta|``.
    """
    if dbeta <= 0:
        raise ValueError("dbeta must be positive")
    hi = run_rg(beta + dbeta, L, chi, iters, method, seed).lnZ_per_site
    lo = run_rg(abs(beta - dbeta), L, chi, iters, method, seed).lnZ_per_site
    return -(hi - lo) / (2 * dbeta)


# oracles

def onsager_lnz(beta: float) -> float:
    """Per-site ln Z of the infinite lattice."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    if beta == 0:
        return math.log(2.0)
    k = 1.0 / math.sinh(2 * beta) ** 2
    c2 = math.cosh(2 * beta) ** 2

    def f(x):
        return math.log(c2 + math.sqrt(1 + k * k - 2 * k * math.cos(2 * x)) / k)

    val = integrate.quad(f, 0.0, math.pi, epsabs=1e-12, epsrel=1e-12, limit=400,
                         points=[math.pi / 2])[0]
    return 0.5 * math.log(2.0) + val / (2 * math.pi)


def onsager_energy(beta: float, dbeta: float = 1e-4) -> float:
    return -(onsager_lnz(beta + dbeta) - onsager_lnz(beta - dbeta)) / (2 * dbeta)


def _row_transfer(L: int, beta: float) -> np.ndarray:
    configs = np.array(list(itertools.product((1.0, -1.0), repeat=L)))
    inner = np.sum(configs * np.roll(configs, -1, axis=1), axis=1)
    between = configs @ configs.T
    half = np.exp(0.5 * beta * inner)
    return half[:, None] * np.exp(beta * between) * half[None, :]


def exact_enumeration_lnz(L: int, beta: float, method: str | None = None) -> float:
    """Exact per-site ln Z of the ``L x L`` periodic model.

    Enumerates all configurations up to 4x4 and uses the dense row transfer
    matrix up to 6x6.
    """
    if L < 1 or L * L > 36:
        raise ValueError(f"exact enumeration limited to L*L <= 36, got L={L}")
    if method is None:
        method = "enumerate" if L * L <= 16 else "transfer"
    if method == "enumerate":
        if L * L > 16:
            raise ValueError("configuration enumeration limited to 4x4")
        configs = np.array(list(itertools.product((1.0, -1.0), repeat=L * L)))
        s = configs.reshape(-1, L, L)
        e = np.sum(s * np.roll(s, 1, axis=1), axis=(1, 2)) + np.sum(s * np.roll(s, 1, axis=2), axis=(1, 2))
        return float(logsumexp(beta * e)) / (L * L)
    if method == "transfer":
        vals = np.linalg.eigvalsh(_row_transfer(L, beta))
        # trace of T^L, computed stably from the spectrum
        lam_max = np.max(np.abs(vals))
        total = np.sum((vals / lam_max) ** L)
        return float((L * math.log(lam_max) + math.log(total)) / (L * L))
    raise ValueError(f"unknown method {method!r}")


def kaufman_lnz(L: int, beta: float) -> float:
    """Exact per-site ln Z of the ``L x L`` periodic model for any ``L``."""
    if beta <= 0:
        return math.log(2.0)
    K = beta
    n = m = L
    c = math.cosh(2 * K) / math.tanh(2 * K)

    def gamma(k):
        if k == 0:
            return 2 * K + math.log(math.tanh(K))
        return math.acosh(c - math.cos(math.pi * k / n))

    odd = np.array([gamma(2 * r + 1) for r in range(n)])
    even = np.array([gamma(2 * r) for r in range(n)])

    def log_prod(gs, kind):
        x = 0.5 * m * gs
        if kind == "cosh":
            vals = np.logaddexp(x, -x)  # log 2cosh
            return float(np.sum(vals)), 1.0
        sign = float(np.prod(np.sign(x)))
        if sign == 0:
            return -np.inf, 0.0
        ax = np.abs(x)
        vals = ax + np.log1p(-np.exp(-2 * ax))  # log |2 sinh|
        return float(np.sum(vals)), sign

    terms = [log_prod(odd, "cosh"), log_prod(odd, "sinh"),
             log_prod(even, "cosh"), log_prod(even, "sinh")]
    logs = np.array([t[0] for t in terms])
    signs = np.array([t[1] for t in terms])
    top = float(np.max(logs[signs != 0]))
    acc = float(np.sum(signs[signs != 0] * np.exp(logs[signs != 0] - top)))
    if not acc > 0:
        raise NumericalFailure("Kaufman sum is not positive")
    total = top + math.log(acc)
    lnz = -math.log(2) + 0.5 * m * n * math.log(2 * math.sinh(2 * K)) + total
    return float(lnz) / (m * n)


def _ring_matvec(a_top: np.ndarray, n_w: int):
    chi_h, chi_v = a_top.shape[0], a_top.shape[1]

    def apply(v: np.ndarray) -> np.ndarray:
        # v[d1..dn] -> sum A[x1,u1,x2,d1] ... A[xn,un,x1,dn] v[d1..dn]
        t = v.reshape((1,) + (chi_v,) * n_w)
        t = np.broadcast_to(np.eye(chi_h).reshape(chi_h, chi_h, *([1] * n_w)),
                            (chi_h, chi_h) + (chi_v,) * n_w) * t
        # t[x1, x_i, (u1..u_{i-1}), (d_i..d_n)]
        for i in range(n_w):
            t = np.tensordot(t, a_top, axes=([1, 2 + i], [0, 3]))
            # t[x1, (u..), (d..), u_i, x_{i+1}] -> move x_{i+1} to axis 1, u_i to position 2+i
            t = np.moveaxis(t, -1, 1)
            t = np.moveaxis(t, -1, 2 + i)
        return np.trace(t, axis1=0, axis2=1).ravel()

    return apply, chi_v**n_w


def transfer_matrix_scaling_dims(a_top: np.ndarray, n_w: int = 2, count: int = 4) -> list[float]:
    """``(n_w / 2 pi) ln(lambda_0 / |lambda_a|)`` from a ring of ``n_w`` tensors.

    The row transfer matrix maps the lower vertical legs of the ring to the
    upper ones, with the horizontal legs traced around the ring.
    """
    if n_w < 1:
        raise ValueError("n_w must be >= 1")
    apply, dim = _ring_matvec(a_top, n_w)
    if dim <= 2048:
        tm = np.stack([apply(col) for col in np.eye(dim)], axis=1)
        vals = np.linalg.eigvals(tm)
    else:
        from scipy.sparse.linalg import LinearOperator, eigs
        op = LinearOperator((dim, dim), matvec=apply, dtype=np.float64)
        vals = eigs(op, k=min(count + 2, dim - 2), which="LM", tol=1e-10,
                    v0=np.ones(dim))[0]
    vals = vals[np.argsort(-np.abs(vals), kind="stable")]
    lam0 = vals[0]
    if not (abs(lam0.imag) <= 1e-12 * abs(lam0) and lam0.real > 0):
        raise NumericalFailure(f"leading transfer-matrix eigenvalue {lam0} is not positive")
    mags = np.abs(vals[:count])
    return [float(n_w / (2 * math.pi) * math.log(lam0.real / mg)) for mg in mags]
