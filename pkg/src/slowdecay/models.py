"""Lattices and the two model families: XXZ spin-1/2 and spinless t-V fermions.

Local basis (both families): index 0 is spin up / occupied, index 1 is spin
down / empty.  Fermions are realized through the Jordan-Wigner map along
the site order, which keeps nearest-neighbour bonds on an open chain local.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    DimensionOverflow,
    NonAdjacentBond,
    PeriodicFermionUnsupported,
    UnknownFamily,
    UnsupportedLattice,
)
from .operators import (
    DEFAULT_DIM_CAP,
    EIGEN_TOL,
    LocalOperator,
    OperatorMatrix,
    _digits,
    embed,
)

S1 = np.array([[0, 0.5], [0.5, 0]], dtype=complex)
S2 = np.array([[0, -0.5j], [0.5j, 0]], dtype=complex)
S3 = np.array([[0.5, 0], [0, -0.5]], dtype=complex)
ID2 = np.eye(2, dtype=complex)
# annihilation takes occupied (index 0) to empty (index 1)
ANNIHILATE = np.array([[0, 0], [1, 0]], dtype=complex)
NUMBER = np.array([[1, 0], [0, 0]], dtype=complex)
PARITY = np.array([[-1, 0], [0, 1]], dtype=complex)

FAMILIES = ("xxz", "tv_fermion")
Site = tuple


@dataclass(frozen=True)
class LatticeSpec:
    """A d-dimensional box of sites with open or periodic boundary per axis.

    Sites are coordinate tuples with entries ``0..L_i-1``.  Chart coordinates
    on periodic axes are the representatives in ``(-L/2, L/2]``; open axes use
    the raw index.
    """

    sides: tuple
    boundary: tuple | str = "periodic"
    dim_cap: int = DEFAULT_DIM_CAP
    local_dim: int = 2

    def __post_init__(self):
        sides = tuple(int(s) for s in np.atleast_1d(self.sides))
        if not sides or any(s < 1 for s in sides):
            raise ValueError(f"side lengths must be positive, got {sides}")
        boundary = self.boundary
        if isinstance(boundary, str):
            boundary = (boundary,) * len(sides)
        boundary = tuple(boundary)
        if len(boundary) != len(sides) or any(b not in ("open", "periodic") for b in boundary):
            raise ValueError(f"boundary must be 'open'/'periodic' per axis, got {self.boundary}")
        object.__setattr__(self, "sides", sides)
        object.__setattr__(self, "boundary", boundary)
        if self.local_dim ** self.n_sites > self.dim_cap:
            raise DimensionOverflow(
                f"{self.n_sites} sites give dim {self.local_dim ** self.n_sites} > cap {self.dim_cap}"
            )

    @classmethod
    def chain(cls, length: int, periodic: bool = True, **kwargs) -> "LatticeSpec":
        return cls((length,), "periodic" if periodic else "open", **kwargs)

    @property
    def d(self) -> int:
        return len(self.sides)

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.sides))

    @property
    def dim(self) -> int:
        return self.local_dim**self.n_sites

    @property
    def is_ring(self) -> bool:
        """Periodic along the first axis (the current direction)."""
        return self.boundary[0] == "periodic"

    def is_periodic(self, axis: int) -> bool:
        return self.boundary[axis] == "periodic"

    @property
    def sites(self) -> list[Site]:
        return [tuple(int(c) for c in s) for s in itertools.product(*(range(L) for L in self.sides))]

    def contains(self, site) -> bool:
        site = tuple(np.atleast_1d(site))
        return len(site) == self.d and all(0 <= c < L for c, L in zip(site, self.sides))

    def index(self, site) -> int:
        site = tuple(np.atleast_1d(site))
        return int(np.ravel_multi_index(site, self.sides))

    def site(self, index: int) -> Site:
        return tuple(int(c) for c in np.unravel_index(index, self.sides))

    def chart(self, site) -> tuple[int, ...]:
        out = []
        for c, L, b in zip(np.atleast_1d(site), self.sides, self.boundary):
            c = int(c)
            out.append(c - L if (b == "periodic" and c > L / 2) else c)
        return tuple(out)

    def wrap(self, coords) -> Site | None:
        """Site for (possibly out-of-range) integer coordinates; None off an open edge."""
        out = []
        for c, L, b in zip(np.atleast_1d(coords), self.sides, self.boundary):
            c = int(c)
            if b == "periodic":
                c %= L
            elif not 0 <= c < L:
                return None
            out.append(c)
        return tuple(out)

    def neighbor(self, site, axis: int, step: int = 1) -> Site | None:
        coords = list(np.atleast_1d(site))
        coords[axis] = int(coords[axis]) + step
        nb = self.wrap(coords)
        if nb is None or nb == tuple(np.atleast_1d(site)):
            return None
        return nb

    def bond_axis(self, x, y) -> int | None:
        for axis in range(self.d):
            if self.neighbor(x, axis) == tuple(np.atleast_1d(y)):
                return axis
        return None

    def is_wrap_bond(self, x, axis: int) -> bool:
        return self.is_periodic(axis) and int(np.atleast_1d(x)[axis]) == self.sides[axis] - 1

    def bonds(self, axis: int, region: Iterable[Site] | None = None) -> list[tuple[Site, Site]]:
        """Bonds ``(x, x + e_axis)`` in site order, optionally inside ``region``."""
        keep = None if region is None else {tuple(np.atleast_1d(s)) for s in region}
        out = []
        for x in self.sites:
            y = self.neighbor(x, axis)
            if y is None:
                continue
            if keep is not None and (x not in keep or y not in keep):
                continue
            out.append((x, y))
        return out

    def displacements(self, radius: int | None = None) -> list[tuple[int, ...]]:
        """Chart displacements from the origin, in site order; ``radius`` is a max-norm cut."""
        out = [self.chart(s) for s in self.sites]
        if radius is not None:
            out = [z for z in out if max(abs(c) for c in z) <= radius]
        return out

    def translation_permutation(self, axis: int = 0, step: int = 1) -> np.ndarray:
        """``perm`` with ``T|i> = |perm[i]>`` for the shift x -> x + step*e_axis."""
        digits = _digits(self.dim, self.n_sites, self.local_dim)
        target = np.empty(self.n_sites, dtype=np.int64)
        for i, s in enumerate(self.sites):
            coords = list(s)
            coords[axis] += step
            nb = self.wrap(coords)
            if nb is None:
                raise UnsupportedLattice(f"axis {axis} is open; translation is not a symmetry")
            target[i] = self.index(nb)
        new_digits = np.empty_like(digits)
        new_digits[:, target] = digits
        return new_digits @ (self.local_dim ** np.arange(self.n_sites - 1, -1, -1))


@dataclass(frozen=True)
class ModelSpec:
    """``xxz``: h = S1 S1 + S2 S2 + lam S3 S3, n = S3.
    ``tv_fermion``: h = -T (c+_y c_x + c+_x c_y) + V n_x n_y, n = c+ c."""

    family: str
    lam: float = 1.0
    T: float = 1.0
    V: float = 0.0
    local_dim: int = field(default=2, init=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise UnknownFamily(f"unknown model family {self.family!r}; expected one of {FAMILIES}")

    @classmethod
    def xxz(cls, lam: float = 1.0) -> "ModelSpec":
        return cls("xxz", lam=float(lam))

    @classmethod
    def tv_fermion(cls, T: float = 1.0, V: float = 0.0) -> "ModelSpec":
        return cls("tv_fermion", T=float(T), V=float(V))

    @property
    def charge_matrix(self) -> np.ndarray:
        return S3 if self.family == "xxz" else NUMBER

    @property
    def charge_values(self) -> np.ndarray:
        """Charge eigenvalue of each local basis state."""
        return self.charge_matrix.diagonal().real

    def bond_matrix(self) -> np.ndarray:
        if self.family == "xxz":
            return np.kron(S1, S1) + np.kron(S2, S2) + self.lam * np.kron(S3, S3)
        c0 = np.kron(ANNIHILATE, ID2)
        c1 = np.kron(PARITY, ANNIHILATE)
        n0 = c0.conj().T @ c0
        n1 = c1.conj().T @ c1
        hop = c1.conj().T @ c0 + c0.conj().T @ c1
        return -self.T * hop + self.V * n0 @ n1

    def describe(self) -> dict:
        if self.family == "xxz":
            return {"family": "xxz", "lambda": self.lam}
        return {"family": "tv_fermion", "T": self.T, "V": self.V}


def build_charge(model: ModelSpec, site) -> LocalOperator:
    return LocalOperator((site,), model.charge_matrix, hermitian=True)


def _check_bond(model: ModelSpec, lattice: LatticeSpec, bond) -> int:
    x, y = (tuple(np.atleast_1d(s)) for s in bond)
    axis = lattice.bond_axis(x, y)
    if axis is None:
        raise NonAdjacentBond(f"{x} -> {y} is not a forward nearest-neighbour bond")
    if model.family == "tv_fermion":
        if lattice.d != 1:
            raise UnsupportedLattice("t-V fermions are only built on chains")
        if lattice.is_wrap_bond(x, axis):
            raise PeriodicFermionUnsupported(
                "the Jordan-Wigner wrap bond carries a parity string; use an open chain or an xxz ring"
            )
    return axis


def build_bond_term(model: ModelSpec, bond, lattice: LatticeSpec) -> LocalOperator:
    _check_bond(model, lattice, bond)
    return LocalOperator(bond, model.bond_matrix(), hermitian=True)


def build_current(model: ModelSpec, bond, lattice: LatticeSpec) -> LocalOperator:
    """``j(x, y) = i [n(x), h(x, y)]`` on the two bond sites."""
    _check_bond(model, lattice, bond)
    h = model.bond_matrix()
    nx = np.kron(model.charge_matrix, ID2)
    j = 1j * (nx @ h - h @ nx)
    return LocalOperator(bond, j, hermitian=True)


def _sum_embedded(ops: Sequence[LocalOperator], lattice: LatticeSpec) -> OperatorMatrix:
    total = sp.csr_matrix((lattice.dim, lattice.dim), dtype=complex)
    for op in ops:
        total = total + embed(op, lattice).matrix
    return OperatorMatrix(total)


def assemble_hamiltonian(model: ModelSpec, lattice: LatticeSpec, region=None) -> OperatorMatrix:
    """Sum of bond terms over every bond (wrap bonds included on periodic axes)."""
    terms = [
        build_bond_term(model, bond, lattice)
        for axis in range(lattice.d)
        for bond in lattice.bonds(axis, region)
    ]
    return _sum_embedded(terms, lattice)


def total_current(model: ModelSpec, lattice: LatticeSpec, axis: int = 0, region=None) -> OperatorMatrix:
    """Sum of bond currents along ``axis``."""
    return _sum_embedded([build_current(model, b, lattice) for b in lattice.bonds(axis, region)], lattice)


def site_charges(model: ModelSpec, lattice: LatticeSpec) -> np.ndarray:
    """``(dim, n_sites)`` array: value of n(x) on each basis state."""
    digits = _digits(lattice.dim, lattice.n_sites, lattice.local_dim)
    return model.charge_values[digits]


def total_charge(model: ModelSpec, lattice: LatticeSpec, region=None) -> OperatorMatrix:
    values = site_charges(model, lattice)
    if region is not None:
        cols = [lattice.index(s) for s in region]
        values = values[:, cols]
    return OperatorMatrix(sp.diags(values.sum(axis=1).astype(complex), format="csr"))


def dipole_operator(model: ModelSpec, lattice: LatticeSpec, axis: int = 0, region=None) -> OperatorMatrix:
    """``sum_x x_axis n(x)`` with chart coordinates."""
    sites = lattice.sites if region is None else [tuple(np.atleast_1d(s)) for s in region]
    weights = np.zeros(lattice.n_sites)
    for s in sites:
        weights[lattice.index(s)] = lattice.chart(s)[axis]
    diag = site_charges(model, lattice) @ weights
    return OperatorMatrix(sp.diags(diag.astype(complex), format="csr"))


def bond_norm(model: ModelSpec) -> float:
    """Operator norm of the bond term."""
    return float(np.abs(np.linalg.eigvalsh(model.bond_matrix())).max())


def max_coupling(model: ModelSpec) -> float:
    """Largest coupling constant: ``max(1, |lam|)`` for xxz, ``max(|T|, |V|)`` for t-V."""
    if model.family == "xxz":
        return max(1.0, abs(model.lam))
    return max(abs(model.T), abs(model.V))


# --- Jordan-Wigner validation ------------------------------------------------


def fock_hamiltonian(length: int, T: float, V: float) -> np.ndarray:
    """t-V chain built directly in the occupation basis with fermionic signs."""
    dim = 2**length
    h = np.zeros((dim, dim))
    for state in range(dim):
        occ = [(state >> (length - 1 - i)) & 1 for i in range(length)]
        h[state, state] += V * sum(occ[i] * occ[i + 1] for i in range(length - 1))
        for i in range(length - 1):
            for dst, src in ((i + 1, i), (i, i + 1)):
                if not occ[src] or occ[dst]:
                    continue
                sign = (-1) ** sum(occ[:src])
                mid = list(occ)
                mid[src] = 0
                sign *= (-1) ** sum(mid[:dst])
                mid[dst] = 1
                new = sum(b << (length - 1 - k) for k, b in enumerate(mid))
                h[new, state] += -T * sign
    return h


def mapped_spin_hamiltonian(length: int, T: float, V: float) -> np.ndarray:
    """-2T (S1 S1 + S2 S2) + V (S3 + 1/2)(S3 + 1/2) on an open chain, by direct Kronecker products."""
    dim = 2**length
    h = np.zeros((dim, dim), dtype=complex)
    occ = S3 + 0.5 * ID2
    for i in range(length - 1):
        left, right = np.eye(2**i), np.eye(2 ** (length - i - 2))
        bond = -2 * T * (np.kron(S1, S1) + np.kron(S2, S2)) + V * np.kron(occ, occ)
        h += np.kron(np.kron(left, bond), right)
    return h


def free_fermion_spectrum(length: int, T: float) -> np.ndarray:
    """Many-body spectrum from single-particle hopping eigenvalues (all subset sums)."""
    hop = -T * (np.eye(length, k=1) + np.eye(length, k=-1))
    eps = np.linalg.eigvalsh(hop)
    occupations = _digits(2**length, length, 2)
    return np.sort(occupations @ eps)


@dataclass
class JordanWignerReport:
    length: int
    T: float
    V: float
    fermion_spectrum: np.ndarray
    spin_spectrum: np.ndarray
    model_spectrum: np.ndarray
    free_spectrum: np.ndarray | None
    deviations: dict
    tol: float

    @property
    def passed(self) -> bool:
        return all(v < self.tol for v in self.deviations.values())


def jordan_wigner_check(lattice: LatticeSpec, T: float = 1.0, V: float = 0.0, tol: float = EIGEN_TOL) -> JordanWignerReport:
    """Compare fermionic, mapped-spin and assembled-model spectra on an open chain."""
    if lattice.d != 1 or lattice.is_ring:
        raise UnsupportedLattice("Jordan-Wigner check needs an open chain")
    length = lattice.n_sites
    fermion = np.linalg.eigvalsh(fock_hamiltonian(length, T, V))
    spin = np.linalg.eigvalsh(mapped_spin_hamiltonian(length, T, V))
    model = np.linalg.eigvalsh(assemble_hamiltonian(ModelSpec.tv_fermion(T, V), lattice).dense())
    deviations = {
        "fermion_vs_spin": float(np.abs(fermion - spin).max()),
        "fermion_vs_model": float(np.abs(fermion - model).max()),
    }
    free = None
    if V == 0.0:
        free = free_fermion_spectrum(length, T)
        deviations["fermion_vs_single_particle"] = float(np.abs(fermion - free).max())
    return JordanWignerReport(length, T, V, fermion, spin, model, free, deviations, tol)
