"""Updates for parameters constrained to the Stiefel manifold.

Every constrained tensor is handled through its matrix view ``X`` (``n x p``,
``n >= p``, ``X.T @ X = I``).  The adjoint ``Xbar`` is the Euclidean
derivative of the loss in the same view.

Hard-constraint updates:

* Riemannian gradient (canonical metric) with momentum and an adaptive step,
  followed by a QR, SVD or Cayley retraction.
* Evenbly-Vidal replacement ``X <- -V U^T`` from the SVD of the environment.
* A scheduler interleaving the two ("random mixed").

The soft-constraint mode drops the manifold and penalises the average
constraint violation with a self-tuning multiplier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import MatricizationSplit, NumericalFailure, matricize, qr, svd, unmatricize

SCHEMES = ("qr", "svd", "cayley", "cayley_smw", "cayley_iter")


@dataclass
class IsometricParam:
    value: np.ndarray
    split: MatricizationSplit

    def matrix(self) -> np.ndarray:
        return matricize(self.value, self.split)

    def with_matrix(self, m: np.ndarray) -> "IsometricParam":
        return IsometricParam(unmatricize(m, self.split, self.value.shape), self.split)

    def constraint_error(self) -> float:
        x = self.matrix()
        return float(np.max(np.abs(x.T @ x - np.eye(x.shape[1]))))


def constraint_error(x: np.ndarray) -> float:
    return float(np.max(np.abs(x.T @ x - np.eye(x.shape[1]))))


def skew_generator(x: np.ndarray, d: np.ndarray) -> np.ndarray:
    """``A = D X^T - X D^T + 1/2 X (D^T X - X^T D) X^T``."""
    xtd = x.T @ d
    return d @ x.T - x @ d.T + 0.5 * x @ (xtd.T - xtd) @ x.T


def project_tangent(x: np.ndarray, xbar: np.ndarray, tol: float = 1e-8):
    """Riemannian gradient ``G = A X`` under the canonical metric.

    Returns ``(G, A)``.
    """
    if constraint_error(x) > tol:
        raise ValueError(
            f"X is not isometric (max |X^T X - I| = {constraint_error(x):.2e})")
    g = xbar - 0.5 * (x @ (x.T @ xbar) + x @ (xbar.T @ x))
    return g, skew_generator(x, xbar)


def retract(x: np.ndarray, direction: np.ndarray | None, eta: float,
            scheme: str = "svd", *, generator: np.ndarray | None = None,
            inner_steps: int = 2) -> np.ndarray:
    """Move from ``x`` against ``direction`` by ``eta`` and land on the manifold.

    ``direction`` is any ambient matrix (adjoint or momentum); it is projected
    first.  For the Cayley schemes the skew generator may be given directly.
    """
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    if generator is None:
        if direction is None:
            raise ValueError("need a direction or a generator")
        a = skew_generator(x, direction)
        g = direction - 0.5 * (x @ (x.T @ direction) + x @ (direction.T @ x))
    else:
        a = generator
        g = a @ x
    if scheme == "qr":
        return qr(x - 0.5 * eta * g)[0]
    if scheme == "svd":
        u, _, v = svd(x - eta * g)
        return u @ v.T
    if scheme == "cayley":
        n = x.shape[0]
        lhs = np.eye(n) + 0.5 * eta * a
        try:
            return np.linalg.solve(lhs, x - 0.5 * eta * (a @ x))
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure(
                f"I + eta/2 A is singular at eta={eta}; reduce the learning rate",
                lhs) from exc
    if scheme == "cayley_smw":
        if direction is None:
            raise ValueError("cayley_smw needs the direction matrix")
        pd = direction - 0.5 * x @ (x.T @ direction)
        uu = np.hstack([pd, x])
        vv = np.hstack([x, -pd])
        small = np.eye(uu.shape[1]) + 0.5 * eta * (vv.T @ uu)
        try:
            return x - eta * uu @ np.linalg.solve(small, vv.T @ x)
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure(
                f"2p x 2p Cayley system singular at eta={eta}; reduce the learning rate",
                small) from exc
    if scheme == "cayley_iter":
        y = x - eta * g
        ax = a @ x
        for _ in range(inner_steps):
            y = x - 0.5 * eta * (ax + a @ y)
        return qr(y)[0]
    raise ValueError(f"unknown retraction {scheme!r}")


@dataclass
class MomentumState:
    """Hyperparameters and per-parameter momenta for manifold gradient steps."""

    eta: float = 1.0
    beta_m: float = 0.9
    alpha: float = 4.0
    eps: float = 1e-8
    decay_period: int = 10
    decay_factor: float = 0.999
    iteration: int = 0
    momenta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.beta_m <= 1:
            raise ValueError("beta_m must lie in [0, 1]")
        if self.eta <= 0:
            raise ValueError("eta must be positive")

    def tick(self) -> None:
        self.iteration += 1
        if self.decay_period > 0 and self.iteration % self.decay_period == 0:
            self.eta *= self.decay_factor


def momentum_step(x: np.ndarray, xbar: np.ndarray, m: np.ndarray | None,
                  eta: float, beta_m: float, alpha: float, eps: float = 1e-8,
                  scheme: str = "svd"):
    """One manifold momentum step; returns ``(x_new, m_new, eta_used)``."""
    m = xbar if m is None else beta_m * m + xbar
    g = m - 0.5 * (x @ (x.T @ m) + x @ (m.T @ x))
    m = g
    a = skew_generator(x, g)
    eta_adapt = min(eta, alpha / (np.sqrt(np.sum(a * a)) + eps))
    return retract(x, g, eta_adapt, scheme), m, eta_adapt


def step(param: IsometricParam, xbar: np.ndarray, state: MomentumState,
         scheme: str = "svd", key=None) -> IsometricParam:
    """Momentum/adaptive-rate update of one parameter (state kept in ``state``).

    ``xbar`` is the adjoint tensor in the parameter's own shape.  Call
    :meth:`MomentumState.tick` once per optimizer iteration.
    """
    key = id(param) if key is None else key
    x = param.matrix()
    xb = matricize(xbar, param.split)
    x_new, m_new, _ = momentum_step(x, xb, state.momenta.get(key), state.eta,
                                    state.beta_m, state.alpha, state.eps, scheme)
    state.momenta[key] = m_new
    return param.with_matrix(x_new)


def ev_update(y: np.ndarray) -> np.ndarray:
    """Evenbly-Vidal replacement from an environment ``y`` (``p x n``).

    ``y`` is laid out so that the linearized loss is ``trace(X @ y)``; the
    result ``-V U^T`` minimises it over all isometries.
    """
    u, _, v = svd(y)
    return -v @ u.T


def ev_from_adjoint(xbar: np.ndarray) -> np.ndarray:
    """EV update given the adjoint in the parameter's ``n x p`` view."""
    return ev_update(xbar.T)


@dataclass
class MethodSchedule:
    """Evenbly-Vidal base iterations with periodic gradient interleaves."""

    cadence: int = 5
    choices: tuple[str, ...] = ("svd", "cayley")
    seed: int = 0
    rng: np.random.Generator | None = None

    def __post_init__(self):
        if self.cadence < 1:
            raise ValueError("cadence must be >= 1")
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)


def mixed_select(schedule: MethodSchedule, iteration: int) -> str:
    """Method for 1-based ``iteration``: ``"ev"`` or a retraction scheme."""
    if iteration >= schedule.cadence and iteration % schedule.cadence == 0:
        return schedule.choices[int(schedule.rng.integers(len(schedule.choices)))]
    return "ev"


# soft-constraint mode

def _avg_abs_dev(r: np.ndarray) -> float:
    return float(np.mean(np.abs(r)))


def constraint_deviation(ws: list[np.ndarray], us: list[np.ndarray]):
    """Average constraint violation and its gradients.

    ``ws`` are ``n x p`` isometry views, ``us`` square disentangler views.
    Returns ``(t_err, grads_w, grads_u)``.
    """
    def term(mats, left):
        vals, grads = [], []
        for x in mats:
            gram = x @ x.T if left else x.T @ x
            r = np.eye(gram.shape[0]) - gram
            s = np.sign(r)
            vals.append(_avg_abs_dev(r))
            # d/dX mean|I - X^T X| = -2 X S / size ; left Gram gives -2 S X / size
            g = (-2.0 * s @ x if left else -2.0 * x @ s) / r.size
            grads.append(g / len(mats))
        return float(np.mean(vals)) if vals else 0.0, grads

    tw, gw = term(ws, False)
    tu1, gu1 = term(us, False)
    tu2, gu2 = term(us, True)
    n_terms = 3 if us else 1
    t_err = (tw + tu1 + tu2) / n_terms
    grads_w = [g / n_terms for g in gw]
    grads_u = [(a + b) / n_terms for a, b in zip(gu1, gu2)]
    return t_err, grads_w, grads_u


def soft_loss(energy: float, ws: list[np.ndarray], us: list[np.ndarray],
              lam: float) -> float:
    return energy + lam * constraint_deviation(ws, us)[0]


@dataclass
class SoftConstraintState:
    """Control loop for the constraint multiplier."""

    lam: float = 1.0
    threshold: float = 1e-3
    lam_min: float = 1.0
    lam_max: float = 1e3
    lam_small: float = 1e-2
    warmup: int = 20
    growth: float = 1.05
    decay: float = 0.98
    threshold_decay: float = 0.98
    threshold_min: float = 1e-6
    iteration: int = 0

    def __post_init__(self):
        if not self.lam_min <= self.lam_max:
            raise ValueError("lam_min must not exceed lam_max")


def tune_lambda(state: SoftConstraintState, t_err: float) -> SoftConstraintState:
    """Advance the multiplier by one iteration of the three-rule loop."""
    state.iteration += 1
    if state.iteration < state.warmup:
        state.lam = state.lam_small
        return state
    if state.iteration == state.warmup:
        state.lam = state.lam_max
        return state
    if t_err < state.threshold:
        state.lam = max(state.lam * state.decay, state.lam_min)
        state.threshold = max(state.threshold * state.threshold_decay, state.threshold_min)
    elif t_err > state.threshold:
        state.lam = min(state.lam * state.growth, state.lam_max)
    return state


@dataclass
class EuclideanOptimizer:
    """Unconstrained momentum (``rule="momentum"``) or RMSprop updates."""

    rule: str = "rmsprop"
    eta: float = 1e-3
    beta_m: float = 0.9
    beta_v: float = 0.99
    eps: float = 1e-10
    buffers: dict = field(default_factory=dict)

    def update(self, key, x: np.ndarray, xbar: np.ndarray) -> np.ndarray:
        if self.rule == "momentum":
            m = self.beta_m * self.buffers.get(key, 0.0) + self.eta * xbar
            self.buffers[key] = m
            return x - m
        if self.rule == "rmsprop":
            # mean-square accumulator; step divides by its root
            s = self.beta_v * self.buffers.get(key, 0.0) + (1 - self.beta_v) * xbar**2
            self.buffers[key] = s
            return x - self.eta * xbar / (np.sqrt(s) + self.eps)
        raise ValueError(f"unknown rule {self.rule!r}")
