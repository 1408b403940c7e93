"""Complex operator arithmetic on tensor-product Hilbert spaces.

Basis convention: lattice sites are enumerated row-major by coordinate and
site 0 is the most significant tensor factor.  For local dimension ``d`` a
configuration ``(s_0, ..., s_{N-1})`` has basis index
``sum_k s_k * d**(N - 1 - k)``.

Operators are held either as a dense ``ndarray``, a ``scipy.sparse`` CSR
matrix, or as a list of charge-sector blocks (or both).  Anything above
``DENSE_CAP`` must stay blocked or sparse.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    ConvergenceFailure,
    DimensionMismatch,
    DimensionOverflow,
    NotCharged,
    SupportOutOfLattice,
)

DEFAULT_DIM_CAP = 2**16
DENSE_CAP = 2**13
EXACT_NORM_CAP = 4096
LANCZOS_MIN = 64

ALGEBRA_TOL = 1e-12
EIGEN_TOL = 1e-10


def _as_site(site) -> tuple[int, ...]:
    if np.isscalar(site):
        return (int(site),)
    return tuple(int(c) for c in site)


@dataclass(frozen=True)
class LocalOperator:
    """A matrix acting on an ordered list of lattice sites.

    ``support[0]`` is the most significant factor of ``matrix``.
    """

    support: tuple
    matrix: np.ndarray
    local_dim: int = 2
    hermitian: bool = False

    def __post_init__(self):
        support = tuple(_as_site(s) for s in self.support)
        matrix = np.array(self.matrix, dtype=complex)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "matrix", matrix)
        if self.local_dim < 2:
            raise ValueError("local_dim must be >= 2")
        size = self.local_dim ** len(support)
        if matrix.shape != (size, size):
            raise DimensionMismatch(
                f"matrix shape {matrix.shape} does not match local_dim^|support| = {size}"
            )
        if len(set(support)) != len(support):
            raise ValueError(f"support sites must be distinct: {support}")
        if self.hermitian:
            dev = np.abs(matrix - matrix.conj().T).max()
            if dev >= ALGEBRA_TOL:
                raise ValueError(f"operator flagged hermitian but deviates by {dev:.3e}")

    @property
    def n_sites(self) -> int:
        return len(self.support)


@dataclass(frozen=True)
class SectorBlock:
    charge: float
    indices: np.ndarray
    block: np.ndarray

    @property
    def size(self) -> int:
        return len(self.indices)


class OperatorMatrix:
    """Operator on the full lattice Hilbert space.

    ``matrix`` may be an ndarray or a sparse matrix; ``sector_blocks``, when
    present, is a block-diagonal representation in charge sectors.  At least
    one of the two must be given.  Instances are treated as immutable.
    """

    __slots__ = ("dim", "_matrix", "sector_blocks")

    def __init__(self, matrix=None, sector_blocks: Sequence[SectorBlock] | None = None, dim: int | None = None):
        if matrix is None and sector_blocks is None:
            raise ValueError("need a matrix or sector blocks")
        if matrix is not None:
            if sp.issparse(matrix):
                matrix = sp.csr_matrix(matrix, dtype=complex)
            else:
                matrix = np.asarray(matrix, dtype=complex)
            if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
                raise DimensionMismatch(f"operator must be square, got {matrix.shape}")
            dim = matrix.shape[0]
        elif dim is None:
            dim = int(sum(b.size for b in sector_blocks))
        self.dim = int(dim)
        self._matrix = matrix
        self.sector_blocks = tuple(sector_blocks) if sector_blocks is not None else None
        if self.sector_blocks is not None:
            covered = sum(b.size for b in self.sector_blocks)
            if covered != self.dim:
                raise DimensionMismatch(f"sector blocks cover {covered} of {self.dim} basis states")

    def __repr__(self):
        kind = "blocked" if self.is_blocked else ("sparse" if self.is_sparse else "dense")
        return f"OperatorMatrix(dim={self.dim}, {kind})"

    @property
    def is_blocked(self) -> bool:
        return self.sector_blocks is not None

    @property
    def is_sparse(self) -> bool:
        return self._matrix is not None and sp.issparse(self._matrix)

    @property
    def matrix(self):
        """The stored matrix (dense or sparse), assembling from blocks if needed."""
        if self._matrix is None:
            return self.dense()
        return self._matrix

    def dense(self) -> np.ndarray:
        if self._matrix is not None:
            return self._matrix.toarray() if sp.issparse(self._matrix) else self._matrix
        if self.dim > DENSE_CAP:
            raise DimensionOverflow(f"dense assembly of dim {self.dim} exceeds cap {DENSE_CAP}")
        out = np.zeros((self.dim, self.dim), dtype=complex)
        for b in self.sector_blocks:
            out[np.ix_(b.indices, b.indices)] = b.block
        return out

    def sparse(self) -> sp.csr_matrix:
        if self._matrix is not None:
            return sp.csr_matrix(self._matrix)
        rows, cols, data = [], [], []
        for b in self.sector_blocks:
            r, c = np.nonzero(b.block)
            rows.append(b.indices[r])
            cols.append(b.indices[c])
            data.append(b.block[r, c])
        return sp.csr_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.dim, self.dim),
        )

    def partition(self) -> tuple[np.ndarray, ...]:
        return tuple(b.indices for b in self.sector_blocks)

    def dag(self) -> "OperatorMatrix":
        blocks = None
        if self.is_blocked:
            blocks = [SectorBlock(b.charge, b.indices, b.block.conj().T) for b in self.sector_blocks]
        matrix = None if self._matrix is None else self._matrix.conj().T
        return OperatorMatrix(matrix, sector_blocks=blocks, dim=self.dim)

    def max_abs(self) -> float:
        """Max-entry norm."""
        if self._matrix is None:
            return max((float(np.abs(b.block).max()) if b.size else 0.0) for b in self.sector_blocks)
        if sp.issparse(self._matrix):
            return float(abs(self._matrix).max()) if self._matrix.nnz else 0.0
        return float(np.abs(self._matrix).max())

    def _combine(self, other: "OperatorMatrix", op) -> "OperatorMatrix":
        if not isinstance(other, OperatorMatrix):
            return NotImplemented
        if self.dim != other.dim:
            raise DimensionMismatch(f"dims {self.dim} and {other.dim} differ")
        if self.is_blocked and other.is_blocked and same_partition(self, other):
            blocks = [
                SectorBlock(a.charge, a.indices, op(a.block, b.block))
                for a, b in zip(self.sector_blocks, other.sector_blocks)
            ]
            return OperatorMatrix(sector_blocks=blocks, dim=self.dim)
        if self.is_blocked != other.is_blocked:
            blocked, plain = (self, other) if self.is_blocked else (other, self)
            try:
                parts = restrict_to_sectors(plain, blocked.partition())
            except NotCharged:
                parts = None
            if parts is not None:
                parts = [p.toarray() if sp.issparse(p) else p for p in parts]
                blocks = [
                    SectorBlock(b.charge, b.indices, op(b.block, p) if blocked is self else op(p, b.block))
                    for b, p in zip(blocked.sector_blocks, parts)
                ]
                return OperatorMatrix(sector_blocks=blocks, dim=self.dim)
        a, b = self.matrix, other.matrix
        if sp.issparse(a) and sp.issparse(b):
            return OperatorMatrix(sp.csr_matrix(op(a, b)))
        a = a.toarray() if sp.issparse(a) else a
        b = b.toarray() if sp.issparse(b) else b
        return OperatorMatrix(np.asarray(op(a, b)))

    def __add__(self, other):
        return self._combine(other, lambda a, b: a + b)

    def __sub__(self, other):
        return self._combine(other, lambda a, b: a - b)

    def __matmul__(self, other):
        return self._combine(other, lambda a, b: a @ b)

    def __mul__(self, scalar):
        if not np.isscalar(scalar):
            return NotImplemented
        blocks = None
        if self.is_blocked:
            blocks = [SectorBlock(b.charge, b.indices, scalar * b.block) for b in self.sector_blocks]
        matrix = None if self._matrix is None else scalar * self._matrix
        return OperatorMatrix(matrix, sector_blocks=blocks, dim=self.dim)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0


def same_partition(a: OperatorMatrix, b: OperatorMatrix) -> bool:
    if len(a.sector_blocks) != len(b.sector_blocks):
        return False
    return all(
        x.size == y.size and np.array_equal(x.indices, y.indices)
        for x, y in zip(a.sector_blocks, b.sector_blocks)
    )


def identity(dim: int) -> OperatorMatrix:
    return OperatorMatrix(sp.identity(dim, dtype=complex, format="csr"))


def max_entry_distance(a: OperatorMatrix, b: OperatorMatrix) -> float:
    return (a - b).max_abs()


def _digits(count: int, width: int, base: int) -> np.ndarray:
    """Base-``base`` digits of 0..count-1, most significant first, shape (count, width)."""
    idx = np.arange(count)
    powers = base ** np.arange(width - 1, -1, -1)
    return (idx[:, None] // powers[None, :]) % base


def embed(op: LocalOperator, lattice, *, dim_cap: int | None = None) -> OperatorMatrix:
    """Return ``op`` tensored with the identity on every other lattice site (sparse)."""
    d = op.local_dim
    n = lattice.n_sites
    cap = dim_cap if dim_cap is not None else getattr(lattice, "dim_cap", DEFAULT_DIM_CAP)
    dim = d**n
    if dim > cap:
        raise DimensionOverflow(f"{n} sites of local dim {d} give dim {dim} > cap {cap}")
    for site in op.support:
        if not lattice.contains(site):
            raise SupportOutOfLattice(f"site {site} is not in the lattice {lattice.sides}")
    pos = np.array([lattice.index(s) for s in op.support], dtype=np.int64)
    k = len(pos)
    place = d ** (n - 1 - pos)
    offsets = _digits(d**k, k, d) @ place
    rest = np.array([i for i in range(n) if i not in set(pos.tolist())], dtype=np.int64)
    base = _digits(d ** (n - k), n - k, d) @ (d ** (n - 1 - rest)) if len(rest) else np.zeros(1, np.int64)

    local = sp.coo_matrix(op.matrix)
    rows = (base[:, None] + offsets[local.row][None, :]).ravel()
    cols = (base[:, None] + offsets[local.col][None, :]).ravel()
    data = np.tile(local.data, len(base))
    return OperatorMatrix(sp.csr_matrix((data, (rows, cols)), shape=(dim, dim)))


def commutator(a: OperatorMatrix, b: OperatorMatrix) -> OperatorMatrix:
    """``AB - BA``."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"dims {a.dim} and {b.dim} differ")
    return a @ b - b @ a


def hermitian_norm(m: np.ndarray) -> float:
    """Largest |eigenvalue| of a Hermitian matrix; Lanczos on big blocks, eigvalsh otherwise."""
    if m.size == 0 or not np.any(m):
        return 0.0
    if m.shape[0] > LANCZOS_MIN:
        try:
            v0 = np.random.default_rng(0).standard_normal(m.shape[0]).astype(m.dtype)
            top = spla.eigsh(m, k=1, which="LM", v0=v0, tol=1e-13, return_eigenvectors=False)
            return float(np.abs(top).max())
        except (spla.ArpackNoConvergence, spla.ArpackError):
            pass
    return float(np.abs(np.linalg.eigvalsh(m)).max())


def _exact_norm(m: np.ndarray) -> float:
    if m.size == 0:
        return 0.0
    scale = np.abs(m).max()
    if scale == 0.0:
        return 0.0
    if np.abs(m - m.conj().T).max() <= 1e-14 * scale:
        return hermitian_norm(m)
    if np.abs(m + m.conj().T).max() <= 1e-14 * scale:
        return hermitian_norm(1j * m)
    top = np.linalg.eigvalsh(m.conj().T @ m)[-1]
    return float(np.sqrt(max(top, 0.0)))


def _power_norm(m, tol: float, max_iter: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(m.shape[1]) + 1j * rng.standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    mh = m.conj().T
    sigma2 = 0.0
    for _ in range(max_iter):
        w = mh @ (m @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        if abs(nw - sigma2) <= tol * nw:
            return float(np.sqrt(nw))
        sigma2 = nw
        v = w / nw
    raise ConvergenceFailure(f"power iteration did not converge in {max_iter} steps")


def spectral_norm(
    a: OperatorMatrix,
    *,
    exact_cap: int = EXACT_NORM_CAP,
    tol: float = 1e-10,
    max_iter: int = 10_000,
    seed: int = 0,
) -> float:
    """Largest singular value.

    Matrices up to ``exact_cap`` are eigensolved exactly (Hermitian and
    anti-Hermitian inputs directly, others through ``A^dagger A``); larger
    ones go through power iteration on ``A^dagger A``.  Blocked operators are
    handled block by block.
    """
    if a.is_blocked:
        mats = [b.block for b in a.sector_blocks]
    else:
        mats = [a.matrix]
    best = 0.0
    for m in mats:
        if m.shape[0] <= exact_cap:
            dense = m.toarray() if sp.issparse(m) else m
            best = max(best, _exact_norm(dense))
        else:
            best = max(best, _power_norm(m, tol, max_iter, seed))
    return best


def diagonal_charges(n: OperatorMatrix) -> np.ndarray:
    """Real diagonal of a charge operator; raises if it is not diagonal."""
    m = n.sparse()
    diag = m.diagonal()
    off = m - sp.diags(diag)
    if off.nnz and abs(off).max() > ALGEBRA_TOL:
        raise ValueError("charge operator must be diagonal in the computational basis")
    if np.abs(diag.imag).max(initial=0.0) > ALGEBRA_TOL:
        raise ValueError("charge operator must have a real diagonal")
    return diag.real.copy()


def charge_sectors(charges: np.ndarray, decimals: int = 9) -> list[tuple[float, np.ndarray]]:
    """Group basis indices by charge value, ascending in charge."""
    rounded = np.round(np.asarray(charges, dtype=float), decimals)
    values, labels = np.unique(rounded, return_inverse=True)
    return [(float(q), np.flatnonzero(labels == i)) for i, q in enumerate(values)]


def _sector_labels(partition: Sequence[np.ndarray], dim: int) -> np.ndarray:
    labels = np.empty(dim, dtype=np.int64)
    for i, idx in enumerate(partition):
        labels[idx] = i
    return labels


def restrict_to_sectors(a: OperatorMatrix, partition: Sequence[np.ndarray], *, tol: float = ALGEBRA_TOL):
    """Diagonal blocks of ``a`` on ``partition``; raises NotCharged on off-block weight.

    Sparse inputs give sparse CSR blocks, everything else dense blocks.
    """
    if a.is_blocked and len(a.sector_blocks) == len(partition) and all(
        np.array_equal(b.indices, idx) for b, idx in zip(a.sector_blocks, partition)
    ):
        return [b.block for b in a.sector_blocks]
    labels = _sector_labels(partition, a.dim)
    m = a.matrix
    if sp.issparse(m):
        coo = m.tocoo()
        off = labels[coo.row] != labels[coo.col]
        if off.any() and np.abs(coo.data[off]).max() > tol:
            raise NotCharged("operator couples different charge sectors")
        csr = sp.csr_matrix(m)
        return [csr[idx][:, idx] for idx in partition]
    off = labels[:, None] != labels[None, :]
    if off.any() and np.abs(m[off]).max(initial=0.0) > tol:
        raise NotCharged("operator couples different charge sectors")
    return [m[np.ix_(idx, idx)] for idx in partition]


def sector_decompose(a: OperatorMatrix, n: OperatorMatrix, *, tol: float = EIGEN_TOL) -> OperatorMatrix:
    """Block-diagonalize ``a`` in the eigenspaces of the diagonal charge ``n``."""
    if a.dim != n.dim:
        raise DimensionMismatch(f"dims {a.dim} and {n.dim} differ")
    charges = diagonal_charges(n)
    m = a.matrix
    if sp.issparse(m):
        coo = m.tocoo()
        viol = np.abs(coo.data * (charges[coo.row] - charges[coo.col])).max(initial=0.0)
    else:
        viol = np.abs(m * (charges[:, None] - charges[None, :])).max(initial=0.0)
    if viol > tol:
        raise NotCharged(f"[A, N] has max entry {viol:.3e} > {tol:.1e}")
    sectors = charge_sectors(charges)
    blocks = restrict_to_sectors(a, [idx for _, idx in sectors], tol=np.inf)
    blocks = [
        SectorBlock(q, idx, b.toarray() if sp.issparse(b) else np.array(b))
        for (q, idx), b in zip(sectors, blocks)
    ]
    return OperatorMatrix(a._matrix, sector_blocks=blocks, dim=a.dim)


def trace_product(x: OperatorMatrix, a: OperatorMatrix) -> complex:
    """``tr(X A)`` without forming the product."""
    if x.dim != a.dim:
        raise DimensionMismatch(f"dims {x.dim} and {a.dim} differ")
    if x.is_blocked:
        parts = restrict_to_sectors(a, x.partition(), tol=np.inf)
        return complex(sum(_trace_pair(b.block, p) for b, p in zip(x.sector_blocks, parts)))
    return _trace_pair(x.matrix, a.matrix)


def _trace_pair(x, a) -> complex:
    if sp.issparse(a):
        coo = a.tocoo()
        xd = x.toarray() if sp.issparse(x) else x
        return complex(np.sum(coo.data * xd[coo.col, coo.row]))
    if sp.issparse(x):
        return _trace_pair(a, x)
    return complex(np.einsum("ij,ji->", x, a))
