"""Heisenberg-picture evolution through a cached eigendecomposition (hbar = 1)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, DimensionOverflow, HorizonNonpositive, NotCharged
from .operators import DENSE_CAP, OperatorMatrix, SectorBlock, restrict_to_sectors

DEFAULT_MARGIN = 2
DEFAULT_T_COUNT = 13
VELOCITY_FACTOR = 4.0


@dataclass(frozen=True)
class EigenBlock:
    charge: float
    indices: np.ndarray
    energies: np.ndarray
    vectors: np.ndarray


def _eigh(m) -> tuple[np.ndarray, np.ndarray]:
    m = m.toarray() if sp.issparse(m) else np.asarray(m)
    if np.iscomplexobj(m) and np.abs(m.imag).max(initial=0.0) == 0.0:
        m = m.real
    return np.linalg.eigh(m)


@dataclass(frozen=True)
class Propagator:
    """Eigendecomposition of a Hamiltonian, blocked by charge sector when possible."""

    blocks: tuple
    dim: int
    label: str = ""

    @classmethod
    def from_hamiltonian(cls, h: OperatorMatrix, *, blocked: bool = True, label: str = "") -> "Propagator":
        if blocked and h.is_blocked:
            blocks = []
            for b in h.sector_blocks:
                energies, vectors = _eigh(b.block)
                blocks.append(EigenBlock(b.charge, b.indices, energies, vectors))
            return cls(tuple(blocks), h.dim, label)
        if h.dim > DENSE_CAP:
            raise DimensionOverflow(f"dense eigendecomposition of dim {h.dim} exceeds cap {DENSE_CAP}")
        energies, vectors = _eigh(h.matrix)
        return cls((EigenBlock(float("nan"), np.arange(h.dim), energies, vectors),), h.dim, label)

    @property
    def is_blocked(self) -> bool:
        return len(self.blocks) > 1

    def partition(self) -> tuple[np.ndarray, ...]:
        return tuple(b.indices for b in self.blocks)

    @property
    def energies(self) -> np.ndarray:
        return np.sort(np.concatenate([b.energies for b in self.blocks]))

    def reconstruction_error(self, h: OperatorMatrix) -> float:
        parts = restrict_to_sectors(h, self.partition(), tol=np.inf)
        err = 0.0
        for b, part in zip(self.blocks, parts):
            part = part.toarray() if sp.issparse(part) else part
            rebuilt = (b.vectors * b.energies) @ b.vectors.conj().T
            err = max(err, float(np.abs(rebuilt - part).max(initial=0.0)))
        return err

    def unitarity_error(self) -> float:
        return max(
            float(np.abs(b.vectors.conj().T @ b.vectors - np.eye(len(b.energies))).max(initial=0.0))
            for b in self.blocks
        )

    def to_energy_basis(self, a: OperatorMatrix) -> list[np.ndarray]:
        """``U^dagger A U`` block by block; ``a`` must conserve the charge."""
        parts = restrict_to_sectors(a, self.partition())
        return [b.vectors.conj().T @ (part @ b.vectors) for b, part in zip(self.blocks, parts)]

    def evolve_energy_blocks(self, energy_blocks: list[np.ndarray], t: float) -> list[np.ndarray]:
        """Back to the computational basis after the phases ``exp(i(E_i - E_j) t)``."""
        out = []
        for b, a in zip(self.blocks, energy_blocks):
            phase = np.exp(1j * b.energies * t)
            out.append(b.vectors @ ((phase[:, None] * a * phase.conj()[None, :]) @ b.vectors.conj().T))
        return out

    def wrap_blocks(self, blocks: list[np.ndarray]) -> OperatorMatrix:
        if not self.is_blocked:
            return OperatorMatrix(blocks[0])
        return OperatorMatrix(
            sector_blocks=[SectorBlock(b.charge, b.indices, m) for b, m in zip(self.blocks, blocks)],
            dim=self.dim,
        )


def _evolve_general(a: OperatorMatrix, p: Propagator, t: float) -> OperatorMatrix:
    """Pairwise block evolution for operators that change the charge."""
    m = a.matrix
    out = np.zeros((p.dim, p.dim), dtype=complex)
    for b in p.blocks:
        left = b.vectors * np.exp(1j * b.energies * t)[None, :]
        for c in p.blocks:
            sub = m[b.indices][:, c.indices]
            if sp.issparse(sub):
                if sub.nnz == 0:
                    continue
                sub = sub.toarray()
            elif not sub.any():
                continue
            right = c.vectors @ (np.exp(-1j * c.energies * t)[:, None] * c.vectors.conj().T)
            out[np.ix_(b.indices, c.indices)] = left @ (b.vectors.conj().T @ sub @ right)
    return OperatorMatrix(out)


def heisenberg_evolve(a: OperatorMatrix, p: Propagator, t: float) -> OperatorMatrix:
    """``exp(iHt) A exp(-iHt)``; charge-conserving operators stay blocked."""
    if a.dim != p.dim:
        raise DimensionMismatch(f"operator dim {a.dim} vs propagator dim {p.dim}")
    if t == 0:
        return a
    try:
        energy = p.to_energy_basis(a)
    except NotCharged:
        return _evolve_general(a, p, t)
    return p.wrap_blocks(p.evolve_energy_blocks(energy, t))


def evolve_group_property_check(a: OperatorMatrix, p: Propagator, t: float, s: float) -> float:
    """Max-entry distance between alpha_{t+s}(A) and alpha_t(alpha_s(A))."""
    direct = heisenberg_evolve(a, p, t + s)
    nested = heisenberg_evolve(heisenberg_evolve(a, p, s), p, t)
    return (direct - nested).max_abs()


def default_velocity(bond_norm: float) -> float:
    """Fallback Lieb-Robinson velocity: four times the largest coupling constant."""
    return VELOCITY_FACTOR * bond_norm


def lr_horizon(v_est: float, length: int, support_radius: int = 1, margin: int = DEFAULT_MARGIN) -> float:
    """Largest |t| before the light cone of a local observable reaches the far side of a ring."""
    if not v_est > 0:
        raise ValueError(f"velocity estimate must be positive, got {v_est}")
    reach = length / 2 - support_radius - margin
    if reach <= 0:
        raise HorizonNonpositive(
            f"L={length} leaves no room for evolution (support {support_radius}, margin {margin})"
        )
    return reach / v_est


def time_grid(t_max: float, count: int = DEFAULT_T_COUNT) -> np.ndarray:
    return np.linspace(0.0, t_max, count)
