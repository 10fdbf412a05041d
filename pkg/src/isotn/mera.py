"""Ternary, translation- and scale-invariant MERA for critical spin chains.

Two spins are blocked into one MERA site (local dimension 4), so the bottom
layer coarse-grains six spins into one coarse site per isometry.  Tensor
conventions:

* ``w[a, b, c, k]``: fine legs ``a, b, c`` (left to right), coarse leg ``k``;
  matrix view ``(abc) x k`` is an isometry.
* ``u[f1, f2, o1, o2]``: fine legs ``f`` (towards the chain) and legs ``o``
  attached to two neighbouring isometries; square orthogonal matrix view.
* two-site operators and density matrices ``x[k1, k2, l1, l2]`` with
  ``(k1 k2)`` the row (ket) index; ``trace(o rho) = sum o[x; y] rho[y; x]``.

Layer ``1`` touches the chain; layers ``1..n`` are transitional and layer
``n + 1`` is scale invariant.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate

from .autodiff import EAGER, Tape, value_of
from .stiefel import (
    EuclideanOptimizer,
    MethodSchedule,
    MomentumState,
    SoftConstraintState,
    constraint_deviation,
    ev_from_adjoint,
    mixed_select,
    momentum_step,
    tune_lambda,
)
from .tensor import NumericalFailure, contract, qr, random_isometry

SX = np.array([[0.0, 1.0], [1.0, 0.0]])
SZ = np.array([[1.0, 0.0], [0.0, -1.0]])
# sigma_y sigma_y is real: (i)(i) * [[0,-1],[1,0]] (x) [[0,-1],[1,0]] -> minus the real part
_SYSY = -np.kron(np.array([[0.0, -1.0], [1.0, 0.0]]), np.array([[0.0, -1.0], [1.0, 0.0]]))
I2 = np.eye(2)

MODELS = ("tfi", "xy", "xxz")
SITES_PER_BLOCK = 2
LOCAL_DIM = 2**SITES_PER_BLOCK

# operand order for descend: u, w, w, rho, u, w, w
_DESCEND = {
    "C": "rsAB,abAK,BcdL,KLMN,pqEF,abEM,FcdN->rspq",
    "L": "zrAB,abAK,BsdL,KLMN,zpEF,abEM,FqdN->rspq",
    "R": "szAB,arAK,BcdL,KLMN,qzEF,apEM,FcdN->rspq",
}
# operand order for ascend: o, u, w, w, u, w, w
_ASCEND = {
    "C": "pqrs,rsAB,abAK,BcdL,pqEF,abEM,FcdN->MNKL",
    "L": "pqrs,zrAB,abAK,BsdL,zpEF,abEM,FqdN->MNKL",
    "R": "pqrs,szAB,arAK,BcdL,qzEF,apEM,FcdN->MNKL",
}


@dataclass
class TwoSiteHamiltonian:
    h: np.ndarray
    shift: float
    model: str
    lam: float
    sites: int = 1  # chain sites per tensor-network site

    @property
    def dim(self) -> int:
        return self.h.shape[0]

    def matrix(self) -> np.ndarray:
        d = self.dim
        return self.h.reshape(d * d, d * d)

    def shifted(self) -> np.ndarray:
        d = self.dim
        return self.h - self.shift * np.eye(d * d).reshape(d, d, d, d)


def build_hamiltonian(model: str, lam: float) -> TwoSiteHamiltonian:
    """Two-site term on spin-1/2 sites, fields split half-half."""
    model = model.lower()
    if model == "tfi":
        m = -np.kron(SX, SX) - 0.5 * lam * (np.kron(SZ, I2) + np.kron(I2, SZ))
    elif model == "xy":
        m = np.kron(SX, SX) + lam * _SYSY
    elif model == "xxz":
        m = np.kron(SX, SX) + _SYSY + lam * np.kron(SZ, SZ)
    else:
        raise ValueError(f"unknown model {model!r}; expected one of {MODELS}")
    shift = float(np.linalg.eigvalsh(m)[-1])
    return TwoSiteHamiltonian(m.reshape(2, 2, 2, 2), shift, model, float(lam))


def block_hamiltonian(ham: TwoSiteHamiltonian) -> TwoSiteHamiltonian:
    """Two-site term between neighbouring blocks of two spins.

    Bonds inside a block are shared half-half between the two block pairs
    containing that block.
    """
    if ham.sites != 1 or ham.dim != 2:
        raise ValueError("block_hamiltonian expects an unblocked spin-1/2 term")
    h = ham.matrix()
    big = (0.5 * np.kron(np.kron(h, I2), I2) + np.kron(np.kron(I2, h), I2)
           + 0.5 * np.kron(I2, np.kron(I2, h)))
    shift = float(np.linalg.eigvalsh(big)[-1])
    d = LOCAL_DIM
    return TwoSiteHamiltonian(big.reshape(d, d, d, d), shift, ham.model, ham.lam,
                              SITES_PER_BLOCK)


def exact_energy(model: str, lam: float) -> float | None:
    """Ground-state energy per site of the infinite chain, if known in closed form."""
    model = model.lower()
    if model == "tfi":
        f = lambda k: np.sqrt(1.0 + lam * lam - 2.0 * lam * np.cos(k))
        return -integrate.quad(f, 0.0, np.pi, epsabs=1e-13, epsrel=1e-13)[0] / np.pi
    if model == "xy":
        f = lambda k: np.sqrt(1.0 + lam * lam + 2.0 * lam * np.cos(2 * k))
        return -integrate.quad(f, 0.0, np.pi, epsabs=1e-13, epsrel=1e-13, limit=200)[0] / np.pi
    if model == "xxz":
        if abs(lam - 1.0) < 1e-14:
            return 1.0 - 4.0 * np.log(2.0)
        if -1.0 < lam < 1.0:
            # Bethe ansatz, anisotropy cos(gamma) = lam, in Pauli units
            g = np.arccos(lam)
            # e/J = lam/4 - sin(g) int_0^inf sinh((pi-g)x) / (sinh(pi x) cosh(g x)) dx
            # in spin-1/2 units; integrand rewritten without overflow
            def f(x):
                if x == 0:
                    return (np.pi - g) / (2 * np.pi)
                num = -np.exp(-2 * g * x) * np.expm1(-2 * (np.pi - g) * x)
                den = -np.expm1(-2 * np.pi * x) * (1 + np.exp(-2 * g * x))
                return num / den
            val = integrate.quad(f, 0.0, np.inf, epsabs=1e-13, limit=400)[0]
            return 4.0 * (lam / 4.0 - 2.0 * np.sin(g) * val)
        return None
    raise ValueError(f"unknown model {model!r}")


# state

@dataclass
class MeraState:
    ws: list[np.ndarray]
    us: list[np.ndarray]
    chi: int
    d: int = LOCAL_DIM

    @property
    def n(self) -> int:
        return len(self.ws) - 1

    def dims(self) -> list[tuple[int, int]]:
        return [(w.shape[0], w.shape[3]) for w in self.ws]

    def copy(self) -> "MeraState":
        return MeraState([w.copy() for w in self.ws], [u.copy() for u in self.us],
                         self.chi, self.d)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, u) in enumerate(zip(self.ws, self.us), start=1):
            out[f"w{i}"] = w
            out[f"u{i}"] = u
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "MeraState":
        n = len([k for k in tensors if k.startswith("w")])
        ws = [np.asarray(tensors[f"w{i}"]) for i in range(1, n + 1)]
        us = [np.asarray(tensors[f"u{i}"]) for i in range(1, n + 1)]
        return cls(ws, us, ws[-1].shape[3], ws[0].shape[0])

    def constraint_error(self) -> float:
        errs = []
        for w, u in zip(self.ws, self.us):
            x = w_matrix(w)
            errs.append(np.max(np.abs(x.T @ x - np.eye(x.shape[1]))))
            y = u_matrix(u)
            errs.append(np.max(np.abs(y.T @ y - np.eye(y.shape[1]))))
        return float(max(errs))


def w_matrix(w: np.ndarray) -> np.ndarray:
    return w.reshape(-1, w.shape[3])


def u_matrix(u: np.ndarray) -> np.ndarray:
    return u.reshape(u.shape[0] * u.shape[1], -1)


def layer_dims(chi: int, n: int, d: int = LOCAL_DIM) -> list[tuple[int, int]]:
    """``(in, out)`` bond dimensions per layer, chain side first."""
    dims, cin = [], d
    for _ in range(n + 1):
        cout = min(chi, cin**3)
        dims.append((cin, cout))
        cin = cout
    if dims[-1][0] != dims[-1][1]:
        raise ValueError(
            f"scale-invariant layer would map {dims[-1][0]} -> {dims[-1][1]}; "
            f"chi={chi} needs a different number of transitional layers than n={n}")
    return dims


# Z2 parity.  Every model conserves prod(sigma_z); at finite chi an unconstrained
# optimizer at criticality tends to break it, which removes the spin field from
# the scaling spectrum.  Symmetric tensors are stored dense with zeroed sectors.

def site_parity(d: int = LOCAL_DIM) -> np.ndarray:
    """Parity of the blocked sigma_z basis states."""
    p = np.ones(1)
    for _ in range(int(round(np.log2(d)))):
        p = np.kron(p, [1.0, -1.0])
    return p


def bond_parity(chi: int) -> np.ndarray:
    """Alternating labels, so zero-padding a bond keeps the existing ones."""
    return np.where(np.arange(chi) % 2 == 0, 1.0, -1.0)


def leg_parities(dims: list[tuple[int, int]], d: int = LOCAL_DIM):
    """``(fine, coarse)`` parity vectors for every layer."""
    return [(site_parity(d) if i == 0 else bond_parity(cin), bond_parity(cout))
            for i, (cin, cout) in enumerate(dims)]


def _outer(*ps) -> np.ndarray:
    m = np.ones(())
    for p in ps:
        m = np.multiply.outer(m, p)
    return m


def sector_polar(x: np.ndarray, prow: np.ndarray, pcol: np.ndarray) -> np.ndarray:
    """Closest parity-conserving isometry: polar factor of each sector block."""
    out = np.zeros_like(x)
    for s in (1.0, -1.0):
        r, c = np.flatnonzero(prow == s), np.flatnonzero(pcol == s)
        if not len(c):
            continue
        if len(r) < len(c):
            raise ValueError(f"parity sector {s:+.0f} has {len(r)} rows for {len(c)} columns")
        u, _, vt = np.linalg.svd(x[np.ix_(r, c)], full_matrices=False)
        out[np.ix_(r, c)] = u @ vt
    return out


def enforce_z2(mera: MeraState, isometric: bool = True) -> MeraState:
    """Project every tensor onto its even sector, in place.

    With ``isometric`` each sector is re-orthonormalized; otherwise the odd
    entries are only zeroed (soft-constraint mode).
    """
    for i, (fine, coarse) in enumerate(leg_parities(mera.dims(), mera.d)):
        w, u = mera.ws[i], mera.us[i]
        if isometric:
            w = sector_polar(w_matrix(w), _outer(fine, fine, fine).ravel(), coarse).reshape(w.shape)
            pu = _outer(fine, fine).ravel()
            u = sector_polar(u_matrix(u), pu, pu).reshape(u.shape)
        else:
            w = w * (_outer(fine, fine, fine, coarse) > 0)
            u = u * (_outer(fine, fine, fine, fine) > 0)
        mera.ws[i], mera.us[i] = w, u
    return mera


def init_mera(rng: np.random.Generator, chi: int, n: int, d: int = LOCAL_DIM,
              z2: bool = False) -> MeraState:
    """Random isometric tensors from QR of Gaussian matrices.

    With ``z2`` the tensors are projected onto their parity-even sectors and
    re-orthonormalized sector by sector.
    """
    if chi < 1 or n < 0:
        raise ValueError("need chi >= 1 and n >= 0")
    ws, us = [], []
    for cin, cout in layer_dims(chi, n, d):
        ws.append(random_isometry(rng, cin**3, cout).reshape(cin, cin, cin, cout))
        us.append(random_isometry(rng, cin**2, cin**2).reshape(cin, cin, cin, cin))
    state = MeraState(ws, us, chi, d)
    return enforce_z2(state) if z2 else state


def identity_mera(chi: int, n: int, d: int = LOCAL_DIM) -> MeraState:
    """Isometries that pass the middle leg straight through; identity disentanglers."""
    ws, us = [], []
    for cin, cout in layer_dims(chi, n, d):
        w = np.zeros((cin, cin, cin, cout))
        for k in range(cout):
            a, b, c = np.unravel_index(k * cin, (cin, cin, cin)) if k >= cin else (0, k, 0)
            w[a, b, c, k] = 1.0
        ws.append(w)
        us.append(np.eye(cin * cin).reshape(cin, cin, cin, cin))
    return MeraState(ws, us, chi, d)


# superoperators

def descend(rho, w, u, ops=EAGER, variants=("L", "C", "R")):
    """Average descending superoperator (works on arrays or tape nodes)."""
    terms = [ops.contract(_DESCEND[v], u, w, w, rho, u, w, w) for v in variants]
    return ops.scale(ops.add(*terms), 1.0 / len(terms))


def ascend(o, w, u, ops=EAGER, variants=("L", "C", "R")):
    """Average ascending superoperator, the adjoint of :func:`descend`."""
    terms = [ops.contract(_ASCEND[v], o, u, w, w, u, w, w) for v in variants]
    return ops.scale(ops.add(*terms), 1.0 / len(terms))


def two_site_trace(o: np.ndarray, rho: np.ndarray) -> float:
    return float(contract("abcd,cdab->", o, rho))


def maximally_mixed(chi: int) -> np.ndarray:
    return np.eye(chi * chi).reshape(chi, chi, chi, chi) / (chi * chi)


@dataclass
class FixedPoint:
    rho: np.ndarray
    residual: float
    iterations: int
    converged: bool


def fixed_point_density(w: np.ndarray, u: np.ndarray, tol: float = 1e-10,
                        max_iters: int = 200, start: np.ndarray | None = None,
                        strict: bool = False) -> FixedPoint:
    """Power iteration for the fixed point of the scale-invariant descend map."""
    chi = w.shape[3]
    rho = maximally_mixed(chi) if start is None else np.array(start, dtype=np.float64)
    n2 = chi * chi
    residual, it = np.inf, 0
    for it in range(1, max_iters + 1):
        new = descend(rho, w, u)
        m = new.reshape(n2, n2)
        m = 0.5 * (m + m.T)
        m /= np.trace(m)
        new = m.reshape(rho.shape)
        residual = float(np.linalg.norm(new - rho))
        rho = new
        if residual <= tol:
            break
    converged = residual <= tol
    if strict and not converged:
        raise NumericalFailure(
            f"power method stopped after {it} iterations with residual {residual:.3e}")
    return FixedPoint(rho, residual, it, converged)


def superoperator_matrix(fn, shape) -> np.ndarray:
    """Matrix of a linear map on tensors by feeding basis tensors."""
    size = int(np.prod(shape))
    cols = []
    for i in range(size):
        e = np.zeros(size)
        e[i] = 1.0
        cols.append(np.asarray(fn(e.reshape(shape))).ravel())
    return np.stack(cols, axis=1)


def one_site_ascend(phi: np.ndarray, w: np.ndarray) -> np.ndarray:
    """One-site operator on the middle leg of ``w`` lifted one layer."""
    return contract("axck,xy,aycl->kl", w, phi, w)


def scaling_superoperator(w: np.ndarray) -> np.ndarray:
    """``chi^2 x chi^2`` matrix of :func:`one_site_ascend` (direct contraction)."""
    chi = w.shape[3]
    return contract("axck,aycl->klxy", w, w).reshape(chi * chi, -1)


def scaling_dimensions(mera: MeraState, count: int = 3, sites: int = 1) -> list[float]:
    """``-log_3 |lambda|`` of the leading eigenvalues of the scaling map.

    ``sites=1`` lifts an operator on the middle leg of ``w``.  That leg covers
    every third site only, and at small chi the map picks up levels with no
    two-site counterpart; ``sites=2`` uses the full two-site ascending map.
    """
    w, u = mera.ws[-1], mera.us[-1]
    if sites == 1:
        mat = scaling_superoperator(w)
    elif sites == 2:
        mat = superoperator_matrix(lambda o: ascend(o, w, u), (w.shape[3],) * 4)
    else:
        raise ValueError(f"sites must be 1 or 2, got {sites}")
    vals = np.linalg.eigvals(mat)
    mags = np.sort(np.abs(vals))[::-1][:count]
    with np.errstate(divide="ignore"):
        deltas = -np.log(mags) / np.log(3.0)
    return sorted(float(x) for x in deltas)


# energy graph

@dataclass
class EnergyGraph:
    tape: Tape
    loss: object  # node: (trace((H - shift) rho0) / sites); shift added on report
    w_nodes: list
    u_nodes: list
    rho_nodes: list  # rho at each layer boundary, top first
    energy: float
    norm_node: object = None


def energy_graph(mera: MeraState, ham: TwoSiteHamiltonian, rho_top: np.ndarray,
                 n_scale_invariant: int = 4, normalize: bool = False) -> EnergyGraph:
    """Record the full energy computation on a fresh tape.

    ``rho_top`` enters as a constant.  It is pushed ``n_scale_invariant``
    times through the scale-invariant layer and then through every
    transitional layer down to the chain.
    """
    if ham.dim != mera.d:
        raise ValueError(f"Hamiltonian acts on dimension {ham.dim}, MERA sites have {mera.d}")
    tape = Tape()
    wn = [tape.variable(w, f"w{i}") for i, w in enumerate(mera.ws, start=1)]
    un = [tape.variable(u, f"u{i}") for i, u in enumerate(mera.us, start=1)]
    rho = tape.constant(rho_top, "rho_top")
    rhos = [rho]
    for _ in range(n_scale_invariant):
        rho = descend(rho, wn[-1], un[-1], tape)
        rhos.append(rho)
    for tau in range(mera.n - 1, -1, -1):
        rho = descend(rho, wn[tau], un[tau], tape)
        rhos.append(rho)
    hs = tape.constant(np.transpose(ham.shifted(), (2, 3, 0, 1)), "H")
    loss = tape.scale(tape.inner(hs, rho), 1.0 / ham.sites)
    norm_node = None
    e = float(loss.value)
    if normalize:
        eye = tape.constant(np.eye(mera.d**2).reshape((mera.d,) * 4), "I")
        norm_node = tape.inner(eye, rho)
        e = e / float(norm_node.value)
    energy = e + ham.shift / ham.sites
    return EnergyGraph(tape, loss, wn, un, rhos, energy, norm_node)


def energy(mera: MeraState, ham: TwoSiteHamiltonian, rho_top: np.ndarray | None = None,
           n_scale_invariant: int = 4) -> float:
    """Per-site energy of the chain."""
    if rho_top is None:
        rho_top = fixed_point_density(mera.ws[-1], mera.us[-1]).rho
    return energy_graph(mera, ham, rho_top, n_scale_invariant).energy


def gradients(graph: EnergyGraph):
    """Adjoints of every w and u for the reported energy."""
    adj = graph.tape.backward(graph.loss)
    gw = [adj[n] for n in graph.w_nodes]
    gu = [adj[n] for n in graph.u_nodes]
    if graph.norm_node is not None:
        # quotient rule for E = N / D
        adj_d = graph.tape.backward(graph.norm_node)
        num, den = float(graph.loss.value), float(graph.norm_node.value)
        gw = [(a - num / den * adj_d[n]) / den for a, n in zip(gw, graph.w_nodes)]
        gu = [(a - num / den * adj_d[n]) / den for a, n in zip(gu, graph.u_nodes)]
    return gw, gu


def lift_bond_dimension(mera: MeraState, chi_new: int, z2: bool = False) -> MeraState:
    """Zero-pad every tensor to the larger bond dimension and re-orthonormalize."""
    if chi_new < mera.chi:
        raise ValueError(f"cannot lift chi from {mera.chi} down to {chi_new}")
    if chi_new == mera.chi:
        return mera.copy()
    ws, us = [], []
    for (cin, cout), w, u in zip(layer_dims(chi_new, mera.n, mera.d), mera.ws, mera.us):
        wp = np.zeros((cin, cin, cin, cout))
        a, _, _, k = w.shape
        wp[:a, :a, :a, :k] = w
        ws.append(qr(wp.reshape(cin**3, cout))[0].reshape(wp.shape))
        up = np.zeros((cin,) * 4)
        up[:a, :a, :a, :a] = u
        us.append(qr(up.reshape(cin * cin, -1))[0].reshape(up.shape))
    state = MeraState(ws, us, chi_new, mera.d)
    return enforce_z2(state) if z2 else state


# optimization

PAPER_CHI_SCHEDULE = ((0, 4), (200, 6), (700, 7), (2700, 8), (5700, 9), (8700, 10),
                      (11700, 12), (15700, 12))
GRADIENT_METHODS = ("svd", "qr", "cayley", "cayley_smw", "cayley_iter")
METHODS = ("ev", "mixed", "soft") + GRADIENT_METHODS


@dataclass
class MeraConfig:
    model: str = "tfi"
    lam: float = 1.0
    chi: int = 6
    n: int = 2
    method: str = "mixed"
    iters: int = 1000
    seed: int = 0
    chi_schedule: tuple = ((0, 4), (200, 6))
    n_scale_invariant: int = 4
    z2: bool = True
    power_tol: float = 1e-10
    power_max_iters: int = 200
    power_warm_iters: int = 20
    eta: float = 1.0
    beta_m: float = 0.9
    alpha: float = 4.0
    eps: float = 1e-8
    decay_period: int = 10
    decay_factor: float = 0.999
    cadence: int = 5
    reset_iter: int = 700
    reset_threshold: float = 1.5e-3
    max_resets: int = 10
    # soft-constraint mode
    soft_rule: str = "rmsprop"
    soft_eta: float = 1e-2
    soft_eta_final: float = 1e-4  # geometric decay over the run
    beta_v: float = 0.99
    lam_min: float = 1.0
    lam_max: float = 100.0
    lam_small: float = 1e-2
    lam_threshold: float = 1e-2
    lam_warmup: int = 20
    timing: bool = False

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.chi < 1 or self.n < 0 or self.iters < 0:
            raise ValueError("chi >= 1, n >= 0 and iters >= 0 required")
        if not (self.soft_eta > 0 and self.soft_eta_final > 0):
            raise ValueError("soft_eta and soft_eta_final must be positive")
        if self.n_scale_invariant < 1:
            raise ValueError("n_scale_invariant must be >= 1")
        chis = [c for _, c in self.chi_schedule]
        if any(b < a for a, b in zip(chis, chis[1:])):
            raise ValueError("chi schedule must be nondecreasing")
        for c in {min(c, self.chi) for c in chis} | {self.chi_at(0)}:
            layer_dims(c, self.n)

    def chi_at(self, it: int) -> int:
        """Bond dimension in force at local iteration ``it`` (0-based)."""
        chi = None
        for start, c in sorted(self.chi_schedule):
            if it >= start:
                chi = c
        if chi is None:
            chi = sorted(self.chi_schedule)[0][1] if self.chi_schedule else self.chi
        return min(chi, self.chi)


@dataclass
class MeraRecord:
    iter: int
    chi: int
    method: str
    energy: float
    energy_error: float
    n_resets: int
    wall_ms: float | None = None
    t_err: float | None = None


@dataclass
class MeraResult:
    state: MeraState
    log: list[MeraRecord] = field(default_factory=list)
    n_resets: int = 0
    aborted: bool = False
    rho_top: np.ndarray | None = None

    @property
    def final_error(self) -> float:
        return self.log[-1].energy_error if self.log else float("nan")


class _Run:
    """Mutable state for one optimization attempt (reset discards it)."""

    def __init__(self, cfg: MeraConfig, rng: np.random.Generator):
        self.cfg = cfg
        chi0 = cfg.chi_at(0)
        self.mera = init_mera(rng, chi0, cfg.n, z2=cfg.z2)
        self.mom = MomentumState(cfg.eta, cfg.beta_m, cfg.alpha, cfg.eps,
                                 cfg.decay_period, cfg.decay_factor)
        self.soft = EuclideanOptimizer(cfg.soft_rule, cfg.soft_eta, cfg.beta_m, cfg.beta_v)
        self.lam = SoftConstraintState(lam=cfg.lam_small, threshold=cfg.lam_threshold,
                                       lam_min=cfg.lam_min, lam_max=cfg.lam_max,
                                       lam_small=cfg.lam_small, warmup=cfg.lam_warmup)
        self.rho = None
        self.local = 0


def _update_hard(run: _Run, gw, gu, method: str) -> None:
    mera = run.mera
    for i, (w, g) in enumerate(zip(mera.ws, gw)):
        x, xb = w_matrix(w), g.reshape(-1, w.shape[3])
        if method == "ev":
            x = ev_from_adjoint(xb)
        else:
            x, m, _ = momentum_step(x, xb, run.mom.momenta.get(("w", i)), run.mom.eta,
                                    run.mom.beta_m, run.mom.alpha, run.mom.eps, method)
            run.mom.momenta[("w", i)] = m
        mera.ws[i] = x.reshape(w.shape)
    for i, (u, g) in enumerate(zip(mera.us, gu)):
        x, xb = u_matrix(u), g.reshape(u_matrix(u).shape)
        if method == "ev":
            x = ev_from_adjoint(xb)
        else:
            x, m, _ = momentum_step(x, xb, run.mom.momenta.get(("u", i)), run.mom.eta,
                                    run.mom.beta_m, run.mom.alpha, run.mom.eps, method)
            run.mom.momenta[("u", i)] = m
        mera.us[i] = x.reshape(u.shape)


def _update_soft(run: _Run, gw, gu) -> float:
    mera = run.mera
    wm = [w_matrix(w) for w in mera.ws]
    um = [u_matrix(u) for u in mera.us]
    t_err, cw, cu = constraint_deviation(wm, um)
    lam = run.lam.lam
    for i, w in enumerate(mera.ws):
        g = gw[i].reshape(wm[i].shape) + lam * cw[i]
        mera.ws[i] = run.soft.update(("w", i), wm[i], g).reshape(w.shape)
    for i, u in enumerate(mera.us):
        g = gu[i].reshape(um[i].shape) + lam * cu[i]
        mera.us[i] = run.soft.update(("u", i), um[i], g).reshape(u.shape)
    tune_lambda(run.lam, t_err)
    return t_err


def optimize(cfg: MeraConfig, callback=None) -> MeraResult:
    """Train a MERA for ``cfg.iters`` iterations with resets and bond lifting."""
    cfg.validate()
    ham = block_hamiltonian(build_hamiltonian(cfg.model, cfg.lam))
    e_exact = exact_energy(cfg.model, cfg.lam)
    rng = np.random.default_rng(cfg.seed)
    schedule = MethodSchedule(cadence=cfg.cadence, rng=np.random.default_rng([cfg.seed, 1]))
    run = _Run(cfg, rng)
    result = MeraResult(run.mera)
    soft = cfg.method == "soft"

    for it in range(1, cfg.iters + 1):
        t0 = time.perf_counter()
        chi = cfg.chi_at(run.local)
        if chi != run.mera.chi:
            run.mera = lift_bond_dimension(run.mera, chi, cfg.z2)
            run.mom.momenta.clear()
            run.soft.buffers.clear()
            run.rho = None
        run.local += 1
        w_top, u_top = run.mera.ws[-1], run.mera.us[-1]
        if run.rho is None or run.rho.shape[0] != w_top.shape[3]:
            fp = fixed_point_density(w_top, u_top, cfg.power_tol, cfg.power_max_iters)
        else:
            fp = fixed_point_density(w_top, u_top, cfg.power_tol, cfg.power_warm_iters,
                                     start=run.rho)
        run.rho = fp.rho
        graph = energy_graph(run.mera, ham, run.rho, cfg.n_scale_invariant, normalize=soft)
        e = graph.energy
        if not np.isfinite(e):
            raise NumericalFailure(f"energy is not finite at iteration {it}")
        err = e - e_exact if e_exact is not None else float("nan")
        gw, gu = gradients(graph)

        if soft:
            method = "soft"
        elif cfg.method == "mixed":
            method = mixed_select(schedule, it)
        else:
            method = cfg.method
        t_err = None
        try:
            if soft:
                run.soft.eta = cfg.soft_eta * (cfg.soft_eta_final / cfg.soft_eta) ** (
                    (it - 1) / max(cfg.iters, 1))
                t_err = _update_soft(run, gw, gu)
            else:
                _update_hard(run, gw, gu, method)
        except NumericalFailure as exc:
            raise NumericalFailure(f"iteration {it}: {exc}", exc.matrix) from exc
        if cfg.z2:
            enforce_z2(run.mera, isometric=not soft)
        run.mom.tick()

        wall = (time.perf_counter() - t0) * 1e3 if cfg.timing else None
        rec = MeraRecord(it, run.mera.chi, method, e, err, result.n_resets, wall, t_err)
        result.log.append(rec)
        if callback is not None:
            callback(rec)

        if (run.local == cfg.reset_iter and e_exact is not None
                and abs(err) > cfg.reset_threshold):
            result.n_resets += 1
            if result.n_resets > cfg.max_resets:
                result.aborted = True
                break
            run = _Run(cfg, rng)

    result.state = run.mera
    result.rho_top = run.rho
    return result


def default_config(**overrides) -> MeraConfig:
    return replace(MeraConfig(), **overrides)
