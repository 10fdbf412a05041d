"""Dense real tensors: contraction, matricization and decompositions.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Contractions
are written as einsum-style label strings (``"ij,jk->ik"``); a label shared
by two operands is summed, every output label must appear exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np


class ContractionError(ValueError):
    """Invalid contraction labels or mismatched dimensions."""


class NumericalFailure(RuntimeError):
    """A decomposition or fixed-point iteration did not succeed."""

    def __init__(self, message: str, matrix: np.ndarray | None = None):
        super().__init__(message)
        self.matrix = matrix


@dataclass(frozen=True)
class ContractionSpec:
    inputs: tuple[str, ...]
    output: str

    @classmethod
    def parse(cls, subscripts: str) -> "ContractionSpec":
        if "->" not in subscripts:
            raise ContractionError(f"missing '->' in {subscripts!r}")
        lhs, out = subscripts.replace(" ", "").split("->")
        return cls(tuple(lhs.split(",")), out)

    def __str__(self) -> str:
        return ",".join(self.inputs) + "->" + self.output

    def validate(self, shapes: Sequence[tuple[int, ...]]) -> None:
        if len(shapes) != len(self.inputs):
            raise ContractionError(
                f"{len(shapes)} operands for {len(self.inputs)} label groups")
        counts: dict[str, int] = {}
        dims: dict[str, int] = {}
        for labels, shape in zip(self.inputs, shapes):
            if len(labels) != len(shape):
                raise ContractionError(
                    f"labels {labels!r} do not match rank {len(shape)}")
            if len(set(labels)) != len(labels):
                raise ContractionError(f"repeated label within {labels!r}")
            for lab, d in zip(labels, shape):
                counts[lab] = counts.get(lab, 0) + 1
                if dims.setdefault(lab, d) != d:
                    raise ContractionError(
                        f"label {lab!r} has dimensions {dims[lab]} and {d}")
        if len(set(self.output)) != len(self.output):
            raise ContractionError(f"repeated output label in {self.output!r}")
        for lab in self.output:
            if counts.get(lab, 0) != 1:
                raise ContractionError(
                    f"output label {lab!r} must appear in exactly one operand")
        for lab, c in counts.items():
            if lab not in self.output and c != 2:
                raise ContractionError(
                    f"summed label {lab!r} appears {c} times (expected 2)")


@lru_cache(maxsize=4096)
def _path(subscripts: str, shapes: tuple[tuple[int, ...], ...]):
    # pairwise order from numpy's planner, cached per (labels, shapes); the
    # default planner caps intermediates at the largest operand, which can
    # leave a many-operand final step, so the cap is lifted
    dummies = [np.empty(s, dtype=np.float64) for s in shapes]
    return np.einsum_path(subscripts, *dummies, optimize=("greedy", 2**40))[0]


@lru_cache(maxsize=4096)
def _checked_spec(subscripts: str, shapes: tuple[tuple[int, ...], ...]):
    spec = ContractionSpec.parse(subscripts)
    spec.validate(shapes)
    return spec


def pairwise_plan(subscripts: str, shapes: tuple[tuple[int, ...], ...]):
    """Split a many-operand contraction into a sequence of pairwise steps.

    Returns a list of ``(i, j, step_subscripts)``: operands ``i`` and ``j`` of
    the current operand list are removed and their contraction appended.
    """
    return _pairwise_plan(str(subscripts), tuple(tuple(s) for s in shapes))


@lru_cache(maxsize=4096)
def _pairwise_plan(subscripts: str, shapes):
    spec = _checked_spec(subscripts, shapes)
    labels = list(spec.inputs)
    steps = []
    for pair in _path(subscripts, shapes)[1:]:
        i, j = sorted(pair)
        rest = [lab for k, lab in enumerate(labels) if k not in (i, j)]
        keep = set(spec.output).union(*rest) if rest else set(spec.output)
        seen = []
        for ch in labels[i] + labels[j]:
            if ch in keep and ch not in seen:
                seen.append(ch)
        out = "".join(seen) if rest else spec.output
        steps.append((i, j, f"{labels[i]},{labels[j]}->{out}"))
        labels = rest + [out]
    return steps


def contract(subscripts: str | ContractionSpec, *operands: np.ndarray) -> np.ndarray:
    """Contract ``operands`` according to einsum-style ``subscripts``."""
    key = str(subscripts)
    shapes = tuple(np.shape(op) for op in operands)
    _checked_spec(key, shapes)
    if len(operands) == 2:
        return _pair(key, *operands)
    if len(operands) == 1:
        return np.asarray(np.einsum(key, *operands), dtype=np.float64)
    return np.asarray(
        np.einsum(key, *operands, optimize=_path(key, shapes)), dtype=np.float64)


@lru_cache(maxsize=4096)
def _pair_axes(subscripts: str):
    spec = ContractionSpec.parse(subscripts)
    la, lb = spec.inputs
    # labels private to one operand and absent from the output are traced
    # out by einsum first
    if any(ch not in lb and ch not in spec.output for ch in la) or any(
            ch not in la and ch not in spec.output for ch in lb):
        return None
    summed = [ch for ch in la if ch in lb and ch not in spec.output]
    if any(ch in la and ch in lb and ch in spec.output for ch in la):
        return None  # batch labels: leave to einsum
    ax_a = tuple(la.index(ch) for ch in summed)
    ax_b = tuple(lb.index(ch) for ch in summed)
    free = [ch for ch in la if ch not in summed] + [ch for ch in lb if ch not in summed]
    perm = tuple(free.index(ch) for ch in spec.output)
    return ax_a, ax_b, perm


def _pair(subscripts: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    axes = _pair_axes(subscripts)
    if axes is None:
        return np.asarray(np.einsum(subscripts, a, b), dtype=np.float64)
    ax_a, ax_b, perm = axes
    out = np.tensordot(a, b, axes=(ax_a, ax_b))
    if perm != tuple(range(len(perm))):
        out = np.ascontiguousarray(np.transpose(out, perm))
    return out


def norm(t: np.ndarray) -> float:
    """Frobenius (L2) norm over all entries."""
    t = np.asarray(t, dtype=np.float64)
    return float(np.sqrt(np.sum(t * t)))


@dataclass(frozen=True)
class MatricizationSplit:
    row_axes: tuple[int, ...]
    col_axes: tuple[int, ...]

    def check(self, rank: int) -> None:
        axes = sorted(self.row_axes + self.col_axes)
        if axes != list(range(rank)):
            raise ValueError(
                f"split {self.row_axes}|{self.col_axes} is not a partition of {rank} axes")

    @classmethod
    def leading(cls, rank: int, n_rows: int) -> "MatricizationSplit":
        return cls(tuple(range(n_rows)), tuple(range(n_rows, rank)))


def matricize(t: np.ndarray, split: MatricizationSplit) -> np.ndarray:
    split.check(t.ndim)
    perm = split.row_axes + split.col_axes
    n = int(np.prod([t.shape[a] for a in split.row_axes], dtype=int))
    return np.transpose(t, perm).reshape(n, -1)


def unmatricize(m: np.ndarray, split: MatricizationSplit,
                shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`matricize` for a tensor of the given ``shape``."""
    perm = split.row_axes + split.col_axes
    t = m.reshape([shape[a] for a in perm])
    return np.transpose(t, np.argsort(perm))


def _fix_signs(u: np.ndarray, *partners: np.ndarray):
    # largest-|entry| of each column of u made nonnegative
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return (u * signs,) + tuple(p * signs for p in partners)


def svd(m: np.ndarray, chi: int | None = None):
    """Thin SVD ``m = U @ diag(s) @ V.T`` with deterministic signs.

    With ``chi`` set, only the ``chi`` largest singular values are kept
    (ties resolved towards the lower index).
    """
    m = np.asarray(m, dtype=np.float64)
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD did not converge: {exc}", m) from exc
    u, v = _fix_signs(u, vt.T)
    if chi is not None:
        u, s, v = u[:, :chi], s[:chi], v[:, :chi]
    return u, s, v


def qr(m: np.ndarray):
    """Reduced QR with a nonnegative diagonal of R."""
    m = np.asarray(m, dtype=np.float64)
    q, r = np.linalg.qr(m)
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d, r * d[:, None]


def eigh_sym(m: np.ndarray, tol: float = 1e-10):
    """Eigenpairs of a symmetric matrix, eigenvalues descending."""
    m = np.asarray(m, dtype=np.float64)
    scale = max(np.max(np.abs(m)), 1e-300)
    if np.max(np.abs(m - m.T)) > tol * scale:
        raise ValueError("eigh_sym requires a symmetric matrix")
    try:
        vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"eigh did not converge: {exc}", m) from exc
    order = np.argsort(-vals, kind="stable")
    (vecs,) = _fix_signs(vecs[:, order])
    return vals[order], vecs


def decompose(t: np.ndarray, split: MatricizationSplit, kind: str,
              chi: int | None = None):
    """Matricize ``t`` by ``split`` and factor it.

    ``kind`` is one of ``svd``, ``svd_truncated`` (needs ``chi``), ``qr`` or
    ``eigh_sym``.
    """
    m = matricize(t, split)
    if kind == "svd":
        return svd(m)
    if kind == "svd_truncated":
        if chi is None:
            raise ValueError("svd_truncated needs chi")
        return svd(m, chi)
    if kind == "qr":
        return qr(m)
    if kind == "eigh_sym":
        return eigh_sym(m)
    raise ValueError(f"unknown decomposition {kind!r}")


def random_isometry(rng: np.random.Generator, n: int, p: int) -> np.ndarray:
    """``n x p`` matrix with orthonormal columns from QR of a Gaussian."""
    if p > n:
        raise ValueError(f"isometry needs n >= p, got {n}x{p}")
    return qr(rng.standard_normal((n, p)))[0]
