"""Dense complex linear algebra on tensor-product Hilbert spaces.

Subsystem ordering is fixed as (system, pseudomode 1, ..., pseudomode M).
Besides the textbook helpers (kron, embed, partial trace/transpose) this
module provides :class:`ProductOp` and :class:`OpSum`, which apply
Kronecker-structured operators to state arrays without materializing the
full matrix.  Joint dimensions of a few hundred make this the difference
between milliseconds and hundreds of milliseconds per generator call.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

Array = np.ndarray

DEFAULT_COND_BOUND = 1e8
ENTROPY_ZERO = 1e-14
ENTROPY_GUARD_REL = 1e-12  # eigenvalues below this fraction of the largest are not guarded


class DefectiveMatrixError(np.linalg.LinAlgError):
    """Raised when an eigendecomposition is too ill-conditioned to trust."""


@dataclass(frozen=True)
class HilbertLayout:
    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims:
            raise ValueError("layout needs at least one subsystem")
        if any(d < 1 for d in dims):
            raise ValueError(f"subsystem dimensions must be >= 1, got {dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def total(self) -> int:
        return int(np.prod(self.dims))

    def __len__(self) -> int:
        return len(self.dims)

    def check_site(self, site: int) -> int:
        if not 0 <= site < len(self.dims):
            raise IndexError(f"site {site} out of range for layout {self.dims}")
        return site


def _as_layout(layout) -> HilbertLayout:
    return layout if isinstance(layout, HilbertLayout) else HilbertLayout(tuple(layout))


def destroy(dim: int) -> Array:
    """Truncated bosonic lowering operator with sqrt(k) at (k-1, k)."""
    if dim < 1:
        raise ValueError("dimension must be >= 1")
    return np.diag(np.sqrt(np.arange(1, dim, dtype=float)), 1).astype(complex)


def kron(factors: Sequence[Array]) -> Array:
    if len(factors) == 0:
        raise ValueError("kron needs at least one factor")
    return reduce(np.kron, [np.asarray(f, dtype=complex) for f in factors])


def embed(op: Array, site: int, layout) -> Array:
    layout = _as_layout(layout)
    layout.check_site(site)
    op = np.asarray(op, dtype=complex)
    if op.shape != (layout.dims[site],) * 2:
        raise ValueError(
            f"operator of shape {op.shape} does not fit site {site} of dimension {layout.dims[site]}"
        )
    return kron([op if k == site else np.eye(d) for k, d in enumerate(layout.dims)])


def partial_trace(rho: Array, layout, keep: Iterable[int]) -> Array:
    """Trace out every subsystem not listed in ``keep``."""
    layout = _as_layout(layout)
    keep = sorted(set(int(k) for k in keep))
    for k in keep:
        layout.check_site(k)
    rho = np.asarray(rho)
    n = len(layout)
    if rho.shape != (layout.total, layout.total):
        raise ValueError("state dimension does not match layout")
    t = rho.reshape(layout.dims + layout.dims)
    drop = [k for k in range(n) if k not in keep]
    # contract ket and bra indices of dropped sites one at a time, highest first
    for k in sorted(drop, reverse=True):
        m = t.ndim // 2
        t = np.trace(t, axis1=k, axis2=k + m)
    d = int(np.prod([layout.dims[k] for k in keep])) if keep else 1
    return t.reshape(d, d)


def partial_transpose(rho: Array, layout, subsystem: int) -> Array:
    layout = _as_layout(layout)
    layout.check_site(subsystem)
    n = len(layout)
    t = np.asarray(rho).reshape(layout.dims + layout.dims)
    axes = list(range(2 * n))
    axes[subsystem], axes[subsystem + n] = axes[subsystem + n], axes[subsystem]
    return t.transpose(axes).reshape(layout.total, layout.total)


def trace_norm(op: Array) -> float:
    op = np.asarray(op)
    if op.size == 0:
        return 0.0
    return float(np.sum(np.linalg.svd(op, compute_uv=False)))


def eig_checked(op: Array, cond_bound: float = DEFAULT_COND_BOUND) -> tuple[Array, Array, float]:
    """Eigendecomposition with a guard against near-defective matrices."""
    w, v = np.linalg.eig(np.asarray(op, dtype=complex))
    cond = float(np.linalg.cond(v))
    if not np.isfinite(cond) or cond > cond_bound:
        raise DefectiveMatrixError(
            f"eigenvector matrix condition number {cond:.3e} exceeds bound {cond_bound:.1e}"
        )
    return w, v, cond


def matrix_function(op: Array, f: Callable[[Array], Array], cond_bound: float = DEFAULT_COND_BOUND) -> Array:
    """V f(D) V^-1 from the eigendecomposition of ``op``."""
    w, v, _ = eig_checked(op, cond_bound)
    return (v * f(w)) @ np.linalg.inv(v)


def xlogx(w: Array) -> Array:
    """Principal-branch w log w with the 0 log 0 = 0 convention."""
    w = np.asarray(w, dtype=complex)
    out = np.zeros_like(w)
    nz = np.abs(w) >= ENTROPY_ZERO
    out[nz] = w[nz] * np.log(w[nz])
    return out


def entropy(op: Array, cond_bound: float = DEFAULT_COND_BOUND) -> complex:
    """-tr[A log A] for a diagonalizable, possibly non-Hermitian A.

    The trace needs only eigenvalues.  The condition guard covers the
    eigenvectors of eigenvalues above ENTROPY_GUARD_REL times the largest;
    the numerically null cluster of a low-rank state has arbitrary
    eigenvectors and contributes nothing.
    """
    w, v = np.linalg.eig(np.asarray(op, dtype=complex))
    a = np.abs(w)
    sel = a > ENTROPY_GUARD_REL * a.max() if a.size and a.max() > 0 else np.zeros(a.shape, bool)
    cond = float(np.linalg.cond(v[:, sel])) if sel.any() else 1.0
    if not np.isfinite(cond) or cond > cond_bound:
        raise DefectiveMatrixError(
            f"eigenvector condition number {cond:.3e} on the significant spectrum exceeds bound {cond_bound:.1e}"
        )
    return complex(-np.sum(xlogx(w)))


# --------------------------------------------------------------------------
# Structured operators


def _is_diagonal(a: Array) -> bool:
    return not np.any(a - np.diag(np.diag(a)))


@dataclass(frozen=True)
class ProductOp:
    """coeff * (tensor product of local factors); identity on unlisted sites."""

    layout: HilbertLayout
    factors: Mapping[int, Array]
    coeff: complex = 1.0

    def __post_init__(self):
        fac = {}
        for site, op in self.factors.items():
            self.layout.check_site(site)
            op = np.asarray(op, dtype=complex)
            if op.shape != (self.layout.dims[site],) * 2:
                raise ValueError(f"factor shape {op.shape} does not fit site {site}")
            fac[int(site)] = op
        object.__setattr__(self, "factors", dict(sorted(fac.items())))
        object.__setattr__(self, "coeff", complex(self.coeff))

    @property
    def is_diagonal(self) -> bool:
        return all(_is_diagonal(op) for op in self.factors.values())

    def diagonal(self) -> Array:
        diags = [np.diag(self.factors[k]) if k in self.factors else np.ones(d)
                 for k, d in enumerate(self.layout.dims)]
        return self.coeff * reduce(np.kron, diags)

    def dense(self) -> Array:
        return self.coeff * kron([self.factors.get(k, np.eye(d)) for k, d in enumerate(self.layout.dims)])

    def scaled(self, c: complex) -> "ProductOp":
        return ProductOp(self.layout, self.factors, self.coeff * c)

    def transpose(self) -> "ProductOp":
        return ProductOp(self.layout, {k: v.T for k, v in self.factors.items()}, self.coeff)

    def conj(self) -> "ProductOp":
        return ProductOp(self.layout, {k: v.conj() for k, v in self.factors.items()}, np.conj(self.coeff))

    def adjoint(self) -> "ProductOp":
        return ProductOp(self.layout, {k: v.conj().T for k, v in self.factors.items()}, np.conj(self.coeff))

    def __matmul__(self, other: "ProductOp") -> "ProductOp":
        fac = dict(self.factors)
        for k, v in other.factors.items():
            fac[k] = fac[k] @ v if k in fac else v
        return ProductOp(self.layout, fac, self.coeff * other.coeff)

    def apply(self, x: Array) -> Array:
        """Left-multiply ``x`` of shape (D, K) (or (D,)) by this operator."""
        dims = self.layout.dims
        shape = x.shape
        k_tail = int(np.prod(shape[1:])) if x.ndim > 1 else 1
        y = x
        for site, op in self.factors.items():
            pre = int(np.prod(dims[:site]))
            post = int(np.prod(dims[site + 1:])) * k_tail
            y = np.matmul(op, y.reshape(pre, dims[site], post))
        y = y.reshape(shape)
        return y * self.coeff if self.coeff != 1 else (y if y is not x else y.copy())


class OpSum:
    """Sum of :class:`ProductOp` terms with all fully diagonal terms merged.

    Small operators are applied through a cached dense matrix, larger ones
    term by term.  ``diag`` holds the merged diagonal part and ``offdiag``
    the remaining product terms, which is the split used by the
    integrating-factor integrator.
    """

    dense_limit = 160

    def __init__(self, layout: HilbertLayout, terms: Iterable[ProductOp] = ()):
        self.layout = layout
        self.diag = np.zeros(layout.total, dtype=complex)
        self.offdiag: list[ProductOp] = []
        for t in terms:
            self.add(t)
        self._dense = None

    def add(self, term: ProductOp) -> "OpSum":
        if term.coeff == 0:
            return self
        if term.is_diagonal:
            self.diag = self.diag + term.diagonal()
        else:
            self.offdiag.append(term)
        self._dense = None
        return self

    def copy(self) -> "OpSum":
        out = OpSum(self.layout)
        out.diag = self.diag.copy()
        out.offdiag = list(self.offdiag)
        return out

    def __add__(self, other: "OpSum") -> "OpSum":
        out = self.copy()
        out.diag = out.diag + other.diag
        out.offdiag.extend(other.offdiag)
        return out

    def scaled(self, c: complex) -> "OpSum":
        out = OpSum(self.layout)
        out.diag = self.diag * c
        out.offdiag = [t.scaled(c) for t in self.offdiag]
        return out

    def transpose(self) -> "OpSum":
        out = OpSum(self.layout)
        out.diag = self.diag.copy()
        out.offdiag = [t.transpose() for t in self.offdiag]
        return out

    def conj(self) -> "OpSum":
        out = OpSum(self.layout)
        out.diag = self.diag.conj()
        out.offdiag = [t.conj() for t in self.offdiag]
        return out

    def adjoint(self) -> "OpSum":
        return self.conj().transpose()

    def dense(self, include_diag: bool = True) -> Array:
        m = np.diag(self.diag) if include_diag else np.zeros((self.layout.total,) * 2, dtype=complex)
        for t in self.offdiag:
            m = m + t.dense()
        return m

    def dense_offdiag(self) -> Array:
        if self._dense is None:
            self._dense = self.dense(include_diag=False)
        return self._dense

    def apply_offdiag(self, x: Array) -> Array:
        if not self.offdiag:
            return np.zeros_like(x)
        if self.layout.total <= self.dense_limit:
            return self.dense_offdiag() @ x
        out = self.offdiag[0].apply(x)
        for t in self.offdiag[1:]:
            out += t.apply(x)
        return out

    def apply(self, x: Array) -> Array:
        d = self.diag if x.ndim == 1 else self.diag.reshape((-1,) + (1,) * (x.ndim - 1))
        return d * x + self.apply_offdiag(x)


def identity_op(layout: HilbertLayout) -> ProductOp:
    return ProductOp(layout, {})
