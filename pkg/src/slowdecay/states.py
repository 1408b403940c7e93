"""Translation-invariant states carrying a current, and checks on them.

States are frozen at t = 0; all time dependence lives in the operators.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .dynamics import Propagator, heisenberg_evolve
from .errors import BondVarianceExceeded, NotARing, NotCharged
from .models import LatticeSpec, ModelSpec, build_current, site_charges
from .operators import (
    ALGEBRA_TOL,
    EIGEN_TOL,
    OperatorMatrix,
    SectorBlock,
    embed,
    restrict_to_sectors,
    trace_product,
)

DEGENERACY_GAP = 1e-10
INVARIANCE_TOL = 1e-9


@dataclass
class QuantumState:
    """Pure vector or density operator (possibly charge-blocked)."""

    kind: str
    data: np.ndarray | OperatorMatrix
    recipe: dict = field(default_factory=dict)
    invariance_deviation: float | None = None
    current_expectation: float | None = None

    def __post_init__(self):
        if self.kind not in ("pure", "mixed"):
            raise ValueError(f"state kind must be 'pure' or 'mixed', got {self.kind!r}")
        if self.kind == "pure":
            self.data = np.asarray(self.data, dtype=complex)
        elif not isinstance(self.data, OperatorMatrix):
            self.data = OperatorMatrix(self.data)

    @property
    def dim(self) -> int:
        return len(self.data) if self.kind == "pure" else self.data.dim

    def expectation(self, a: OperatorMatrix) -> complex:
        if self.kind == "pure":
            psi = self.data
            return complex(np.vdot(psi, a.matrix @ psi))
        return trace_product(self.data, a)

    def density(self, partition=None) -> OperatorMatrix:
        """Density operator, blocked on ``partition`` when given.

        Raises NotCharged if the state mixes sectors of ``partition``.
        """
        if self.kind == "mixed":
            if partition is None:
                return self.data
            blocks = restrict_to_sectors(self.data, partition)
            return OperatorMatrix(
                sector_blocks=[
                    SectorBlock(float("nan"), idx, b.toarray() if sp.issparse(b) else b)
                    for idx, b in zip(partition, blocks)
                ],
                dim=self.dim,
            )
        psi = self.data
        if partition is None:
            return OperatorMatrix(np.outer(psi, psi.conj()))
        weights = [np.linalg.norm(psi[idx]) for idx in partition]
        if sum(w > ALGEBRA_TOL for w in weights) > 1:
            raise NotCharged("pure state spans several charge sectors")
        return OperatorMatrix(
            sector_blocks=[
                SectorBlock(float("nan"), idx, np.outer(psi[idx], psi[idx].conj())) for idx in partition
            ],
            dim=self.dim,
        )

    def invariant_errors(self) -> dict:
        """Normalization / hermiticity / positivity / trace deviations."""
        if self.kind == "pure":
            return {"norm": abs(np.linalg.norm(self.data) - 1.0)}
        rho = self.data
        mats = [b.block for b in rho.sector_blocks] if rho.is_blocked else [rho.dense()]
        herm = max(float(np.abs(m - m.conj().T).max(initial=0.0)) for m in mats)
        lowest = min(float(np.linalg.eigvalsh(0.5 * (m + m.conj().T))[0]) for m in mats if m.size)
        trace = sum(np.trace(m) for m in mats)
        return {"hermiticity": herm, "negativity": max(0.0, -lowest), "trace": abs(trace - 1.0)}


def gibbs_state(h: OperatorMatrix, beta: float, propagator: Propagator | None = None) -> QuantumState:
    """``exp(-beta H) / Z`` via the eigendecomposition, shifted by the ground energy."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    p = propagator or Propagator.from_hamiltonian(h)
    e0 = min(b.energies.min() for b in p.blocks if len(b.energies))
    weights = [np.exp(-beta * (b.energies - e0)) for b in p.blocks]
    z = sum(w.sum() for w in weights)
    blocks = []
    for b, w in zip(p.blocks, weights):
        if beta == 0:
            blocks.append(np.eye(len(w), dtype=complex) / z)
        else:
            blocks.append((b.vectors * (w / z)) @ b.vectors.conj().T)
    return QuantumState("mixed", p.wrap_blocks(blocks), {"kind": "gibbs", "beta": float(beta)})


def _boost_phases(lattice: LatticeSpec, model: ModelSpec, k: int, axis: int) -> np.ndarray:
    weights = np.array([lattice.chart(s)[axis] for s in lattice.sites], dtype=float)
    angle = 2 * np.pi * k / lattice.sides[axis]
    return np.exp(1j * angle * (site_charges(model, lattice) @ weights))


def boost_state(state: QuantumState, k: int, lattice: LatticeSpec, model: ModelSpec, axis: int = 0) -> QuantumState:
    """Conjugate by ``exp(i 2 pi k / L sum_x x n(x))`` (chart coordinates)."""
    if not lattice.is_periodic(axis):
        raise NotARing("boosts need a periodic axis")
    if float(k) != int(k):
        raise ValueError(f"boost quantum must be an integer, got {k}")
    k = int(k)
    phases = _boost_phases(lattice, model, k, axis)
    recipe = {**state.recipe, "boost_k": k}
    if state.kind == "pure":
        return QuantumState("pure", phases * state.data, recipe)
    rho = state.data
    if rho.is_blocked:
        blocks = [
            SectorBlock(b.charge, b.indices, phases[b.indices][:, None] * b.block * phases[b.indices].conj()[None, :])
            for b in rho.sector_blocks
        ]
        return QuantumState("mixed", OperatorMatrix(sector_blocks=blocks, dim=rho.dim), recipe)
    m = rho.dense()
    return QuantumState("mixed", OperatorMatrix(phases[:, None] * m * phases.conj()[None, :]), recipe)


def current_tilted_ground_state(h: OperatorMatrix, j_total: OperatorMatrix, tilt: float) -> QuantumState:
    """Ground state of ``H - tilt * J``; uniform mixture over a degenerate ground space."""
    if h.is_blocked:
        try:
            parts = restrict_to_sectors(j_total, h.partition())
            blocks = [
                SectorBlock(b.charge, b.indices, b.block - tilt * (p.toarray() if sp.issparse(p) else p))
                for b, p in zip(h.sector_blocks, parts)
            ]
            k = OperatorMatrix(sector_blocks=blocks, dim=h.dim)
        except NotCharged:
            k = OperatorMatrix(h.matrix) - tilt * j_total
    else:
        k = h - tilt * j_total
    p = Propagator.from_hamiltonian(k)
    e0 = min(b.energies.min() for b in p.blocks if len(b.energies))
    chosen = [(b, np.flatnonzero(b.energies - e0 < DEGENERACY_GAP)) for b in p.blocks]
    degeneracy = sum(len(sel) for _, sel in chosen)
    recipe = {"kind": "tilted_ground", "tilt": float(tilt), "degeneracy": int(degeneracy)}
    if degeneracy == 1:
        b, sel = next((b, sel) for b, sel in chosen if len(sel))
        psi = np.zeros(h.dim, dtype=complex)
        psi[b.indices] = b.vectors[:, sel[0]]
        return QuantumState("pure", psi, recipe)
    blocks = [(b.vectors[:, sel] @ b.vectors[:, sel].conj().T) / degeneracy for b, sel in chosen]
    return QuantumState("mixed", p.wrap_blocks(blocks), recipe)


def momentum_eigenstate(lattice: LatticeSpec, k: int) -> QuantumState:
    """One particle (one up spin) in the plane wave of momentum 2 pi k / L on a ring."""
    if lattice.d != 1 or not lattice.is_ring:
        raise NotARing("momentum eigenstates are built on d=1 rings")
    length = lattice.n_sites
    psi = np.zeros(lattice.dim, dtype=complex)
    full = lattice.dim - 1
    for x in range(length):
        psi[full - 2 ** (length - 1 - x)] = np.exp(2j * np.pi * k * x / length) / np.sqrt(length)
    return QuantumState("pure", psi, {"kind": "momentum_eigenstate", "momentum_k": int(k)})


def product_state(lattice: LatticeSpec, config) -> QuantumState:
    """Computational basis state with local state ``config[i]`` on site ``i``."""
    config = np.asarray(config, dtype=np.int64)
    index = int(config @ (lattice.local_dim ** np.arange(lattice.n_sites - 1, -1, -1)))
    psi = np.zeros(lattice.dim, dtype=complex)
    psi[index] = 1.0
    return QuantumState("pure", psi, {"kind": "product", "config": config.tolist()})


def _permuted_deviation(state: QuantumState, perm: np.ndarray) -> float:
    if state.kind == "pure":
        psi = state.data
        shifted = np.empty_like(psi)
        shifted[perm] = psi
        return abs(1.0 - abs(np.vdot(psi, shifted)))
    rho = state.data
    if rho.is_blocked:
        dev = 0.0
        for b in rho.sector_blocks:
            pos = np.searchsorted(b.indices, perm[b.indices])
            if not np.array_equal(b.indices[pos], perm[b.indices]):
                # translation leaves the charge invariant, so this only trips on foreign blocks
                return _permuted_deviation(QuantumState("mixed", OperatorMatrix(rho.dense())), perm)
            shifted = np.empty_like(b.block)
            shifted[np.ix_(pos, pos)] = b.block
            dev = max(dev, float(np.abs(shifted - b.block).max(initial=0.0)))
        return dev
    m = rho.dense()
    shifted = np.empty_like(m)
    shifted[np.ix_(perm, perm)] = m
    return float(np.abs(shifted - m).max())


def verify_translation_invariance(state: QuantumState, lattice: LatticeSpec) -> float:
    """Max over periodic axes of ``||[rho, T]||_max`` (or ``1 - |<psi|T|psi>|``)."""
    if not lattice.is_ring:
        raise NotARing("translation invariance is checked on a periodic first axis")
    axes = [a for a in range(lattice.d) if lattice.is_periodic(a)]
    dev = max(_permuted_deviation(state, lattice.translation_permutation(a)) for a in axes)
    state.invariance_deviation = dev
    return dev


def bond_current_expectations(state: QuantumState, model: ModelSpec, lattice: LatticeSpec, axis: int = 0) -> dict:
    """``<j(x, x+e_axis)>`` for every buildable bond (fermion wrap bonds are skipped)."""
    out = {}
    for x, y in lattice.bonds(axis):
        if model.family == "tv_fermion" and lattice.is_wrap_bond(x, axis):
            continue
        value = state.expectation(embed(build_current(model, (x, y), lattice), lattice))
        if abs(value.imag) > EIGEN_TOL:
            raise ValueError(f"current expectation has imaginary part {value.imag:.3e}")
        out[x] = value.real
    return out


def measure_current(
    state: QuantumState,
    model: ModelSpec,
    lattice: LatticeSpec,
    axis: int = 0,
    tol: float = INVARIANCE_TOL,
    check_uniform: bool = True,
) -> float:
    """``<j(0, e_axis)>``; on periodic axes also checks that every bond agrees."""
    origin = tuple([0] * lattice.d)
    if check_uniform and lattice.is_periodic(axis):
        values = bond_current_expectations(state, model, lattice, axis)
        j0 = values[origin]
        spread = max(abs(v - j0) for v in values.values())
        if spread > tol:
            raise BondVarianceExceeded(f"bond currents differ by {spread:.3e} > {tol:.1e}")
    else:
        bond = (origin, lattice.neighbor(origin, axis))
        value = state.expectation(embed(build_current(model, bond, lattice), lattice))
        j0 = value.real
    state.current_expectation = float(j0)
    return float(j0)


def stationarity_drift(state: QuantumState, a: OperatorMatrix, propagator: Propagator, times) -> float:
    """``max_t |<alpha_t(A)> - <A>|`` (diagnostic)."""
    ref = state.expectation(a)
    return max(abs(state.expectation(heisenberg_evolve(a, propagator, t)) - ref) for t in times)
