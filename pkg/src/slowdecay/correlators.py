"""Charge/bond-energy commutator correlators, the current sum rule and the decay bound.

The central object is ``C_r(z, t) = <[n(0), alpha_t(h(z, z + e_r))]>``.  Grids
are evaluated in the dual picture: ``rho n(0)`` and ``rho`` are evolved
backwards once per time and traced against every bond term, which costs one
pair of basis changes per time instead of one per (z, r, t).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .dynamics import Propagator, heisenberg_evolve
from .errors import HorizonExceeded, IncompleteGrid, InsufficientData, TailTooHeavy
from .models import LatticeSpec, ModelSpec, build_bond_term, build_charge, bond_norm, site_charges
from .operators import OperatorMatrix, commutator, embed, hermitian_norm, restrict_to_sectors

SUM_RULE_TOL = 1e-6
SUM_RULE_TOL_T0 = 1e-9
BOUND_TOL = 1e-8
EPS_FRACTION = 0.1
FIT_THRESHOLD = 1e-8
MIN_FIT_POINTS = 6


def _origin(lattice: LatticeSpec) -> tuple:
    return tuple([0] * lattice.d)


def bond_at(lattice: LatticeSpec, z, r: int) -> tuple:
    """Bond ``(z, z + e_r)`` for a chart displacement ``z`` and 1-based axis ``r``."""
    x = lattice.wrap(z)
    y = None if x is None else lattice.neighbor(x, r - 1)
    if y is None:
        raise ValueError(f"no bond at displacement {z} along axis {r}")
    return x, y


def _check_horizon(t: float, t_max: float | None) -> None:
    if t_max is not None and abs(t) > t_max * (1 + 1e-12):
        raise HorizonExceeded(f"|t| = {abs(t)} exceeds the light-cone horizon {t_max}")


# --- point evaluations (reference path) -------------------------------------


def commutator_correlation(state, model: ModelSpec, lattice: LatticeSpec, propagator: Propagator, z, r: int, t: float, t_max: float | None = None) -> complex:
    """``<[n(0), alpha_t(h(z, z + e_r))]>`` evaluated from its definition."""
    _check_horizon(t, t_max)
    n0 = embed(build_charge(model, _origin(lattice)), lattice)
    h = embed(build_bond_term(model, bond_at(lattice, z, r), lattice), lattice)
    return state.expectation(commutator(n0, heisenberg_evolve(h, propagator, t)))


def truncated_correlation(state, model: ModelSpec, lattice: LatticeSpec, propagator: Propagator, z, r: int, t: float, t_max: float | None = None) -> complex:
    """``<n(0) alpha_t(h)> - <n(0)><alpha_t(h)>``."""
    _check_horizon(t, t_max)
    n0 = embed(build_charge(model, _origin(lattice)), lattice)
    ht = heisenberg_evolve(embed(build_bond_term(model, bond_at(lattice, z, r), lattice), lattice), propagator, t)
    return state.expectation(n0 @ ht) - state.expectation(n0) * state.expectation(ht)


# --- grids ------------------------------------------------------------------


@dataclass
class CorrelationGrid:
    """``C``, ``CT`` and ``comm_norm`` sampled on ``times x displacements x axes``.

    Arrays have shape ``(len(times), len(displacements), len(axes))``;
    ``comm_norm`` is NaN where it was not computed.
    """

    times: np.ndarray
    displacements: list
    axes: tuple
    C: np.ndarray
    CT: np.ndarray
    comm_norm: np.ndarray
    n_chart: int | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return len(self.displacements[0])

    @property
    def complete(self) -> bool:
        axes_ok = tuple(sorted(self.axes)) == tuple(range(1, self.d + 1))
        return axes_ok and (self.n_chart is None or len(self.displacements) == self.n_chart)

    def require_complete(self) -> None:
        if not self.complete:
            raise IncompleteGrid(
                f"grid has {len(self.displacements)} of {self.n_chart} displacements and axes {self.axes}"
            )

    def to_csv(self, path) -> None:
        header = ["t", *[f"z{i + 1}" for i in range(self.d)], "r", "re_C", "im_C", "re_CT", "im_CT", "comm_norm"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for ti, t in enumerate(self.times):
                for zi, z in enumerate(self.displacements):
                    for ri, r in enumerate(self.axes):
                        c, ct = self.C[ti, zi, ri], self.CT[ti, zi, ri]
                        writer.writerow(
                            [_fmt(t), *z, r, _fmt(c.real), _fmt(c.imag), _fmt(ct.real), _fmt(ct.imag),
                             _fmt(self.comm_norm[ti, zi, ri])]
                        )

    @classmethod
    def from_csv(cls, path, n_chart: int | None = None) -> "CorrelationGrid":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        d = sum(1 for h in header if h.startswith("z"))
        times = sorted({float(r[0]) for r in body})
        disps = list(dict.fromkeys(tuple(int(c) for c in r[1 : 1 + d]) for r in body))
        axes = tuple(sorted({int(r[1 + d]) for r in body}))
        shape = (len(times), len(disps), len(axes))
        C = np.zeros(shape, complex)
        CT = np.zeros(shape, complex)
        norm = np.full(shape, np.nan)
        t_pos = {t: i for i, t in enumerate(times)}
        z_pos = {z: i for i, z in enumerate(disps)}
        r_pos = {r: i for i, r in enumerate(axes)}
        for r in body:
            idx = (t_pos[float(r[0])], z_pos[tuple(int(c) for c in r[1 : 1 + d])], r_pos[int(r[1 + d])])
            vals = [float(v) for v in r[2 + d :]]
            C[idx] = complex(vals[0], vals[1])
            CT[idx] = complex(vals[2], vals[3])
            norm[idx] = vals[4]
        return cls(np.array(times), disps, axes, C, CT, norm, n_chart=n_chart)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


class _DualEvaluator:
    """Backward-evolved ``rho n(0)``, ``rho`` and ``n(0)`` in the propagator's sectors."""

    def __init__(self, model: ModelSpec, lattice: LatticeSpec, propagator: Propagator, state=None):
        self.p = propagator
        partition = propagator.partition()
        n0 = site_charges(model, lattice)[:, lattice.index(_origin(lattice))]
        self.n0_blocks = [n0[idx] for idx in partition]
        self._energy = {}
        if state is None:
            return
        rho = state.density(partition if propagator.is_blocked else None)
        rho_blocks = [b.block for b in rho.sector_blocks] if rho.is_blocked else [rho.dense()]
        self.rho_n0 = [r * n[None, :] for r, n in zip(rho_blocks, self.n0_blocks)]
        self.rho = rho_blocks
        self.n0_mean = float(sum(np.einsum("ii,i->", r, n).real for r, n in zip(rho_blocks, self.n0_blocks)))

    def _energy_blocks(self, key: str, blocks):
        if key not in self._energy:
            self._energy[key] = [
                b.vectors.conj().T @ (m @ b.vectors) for b, m in zip(self.p.blocks, blocks)
            ]
        return self._energy[key]

    def backward(self, key: str, t: float):
        """Blocks of ``alpha_{-t}`` applied to the named operator."""
        if key == "n0":
            if t == 0:
                return [np.diag(n).astype(complex) for n in self.n0_blocks]
            return self.p.evolve_energy_blocks(
                self._energy_blocks("n0", [np.diag(n) for n in self.n0_blocks]), -t
            )
        base = getattr(self, key)
        if t == 0:
            return base
        return self.p.evolve_energy_blocks(self._energy_blocks(key, base), -t)


def _bond_blocks(model, lattice, propagator, z, r):
    h = embed(build_bond_term(model, bond_at(lattice, z, r), lattice), lattice)
    return [sp.csr_matrix(b) for b in restrict_to_sectors(h, propagator.partition())]


def _trace(blocks, bond_blocks) -> complex:
    total = 0j
    for x, h in zip(blocks, bond_blocks):
        coo = h.tocoo()
        total += np.sum(coo.data * x[coo.col, coo.row])
    return total


def _commutator_norm(a_blocks, bond_blocks) -> float:
    """``||[A, h]||`` for Hermitian ``A`` and ``h``: ``i[A, h]`` is Hermitian, so no check is needed."""
    best = 0.0
    for a, h in zip(a_blocks, bond_blocks):
        if h.nnz == 0:
            continue
        ah = (h.T @ a.T).T
        best = max(best, hermitian_norm(1j * np.asarray(ah - h @ a)))
    return best


def compute_grid(
    state,
    model: ModelSpec,
    lattice: LatticeSpec,
    propagator: Propagator,
    times,
    displacements=None,
    axes=None,
    with_norms: bool = True,
    t_max: float | None = None,
    metadata: dict | None = None,
) -> CorrelationGrid:
    """Evaluate ``C``, ``CT`` and (optionally) ``||[n(0), alpha_t(h)]||`` on a grid."""
    times = np.asarray(times, dtype=float)
    for t in times:
        _check_horizon(t, t_max)
    disps = list(displacements) if displacements is not None else lattice.displacements()
    axes = tuple(axes) if axes is not None else tuple(range(1, lattice.d + 1))
    ev = _DualEvaluator(model, lattice, propagator, state)
    bonds = [[_bond_blocks(model, lattice, propagator, z, r) for r in axes] for z in disps]

    shape = (len(times), len(disps), len(axes))
    C = np.zeros(shape, complex)
    CT = np.zeros(shape, complex)
    norms = np.full(shape, np.nan)
    for ti, t in enumerate(times):
        x1 = ev.backward("rho_n0", t)
        x2 = ev.backward("rho", t)
        a0 = ev.backward("n0", t) if with_norms else None
        for zi in range(len(disps)):
            for ri in range(len(axes)):
                hb = bonds[zi][ri]
                forward = _trace(x1, hb)
                C[ti, zi, ri] = forward - np.conj(forward)
                CT[ti, zi, ri] = forward - ev.n0_mean * _trace(x2, hb)
                if with_norms:
                    norms[ti, zi, ri] = _commutator_norm(a0, hb)
    meta = {"model": model.describe(), "lattice": {"sides": list(lattice.sides), "boundary": list(lattice.boundary)},
            "state": dict(state.recipe), "t_max": t_max}
    meta.update(metadata or {})
    return CorrelationGrid(times, disps, axes, C, CT, norms, n_chart=lattice.n_sites, metadata=meta)


def grid_invariants(grid: CorrelationGrid, tol: float = 1e-10) -> dict:
    """Deviations of the algebraic grid invariants (all should be <= 0 / ~0)."""
    C, CT = grid.C, grid.CT
    out = {
        "real_part": float(np.abs(C.real).max()),
        "truncated_identity": float(np.abs(C - (CT - np.conj(CT))).max()),
        "two_truncated_bound": float((np.abs(C) - 2 * np.abs(CT)).max()),
    }
    known = ~np.isnan(grid.comm_norm)
    out["norm_dominates"] = float((np.abs(C) - grid.comm_norm)[known].max()) if known.any() else -np.inf
    t0 = np.flatnonzero(grid.times == 0.0)
    if len(t0):
        far = []
        for zi, z in enumerate(grid.displacements):
            for ri, r in enumerate(grid.axes):
                touches = all(c == 0 for c in z) or (
                    z[r - 1] == -1 and all(c == 0 for k, c in enumerate(z) if k != r - 1)
                )
                if not touches:
                    far.append(abs(C[t0[0], zi, ri]))
        out["t0_noncontact"] = float(max(far, default=0.0))
    return out


# --- sum rule and decay bound ------------------------------------------------


def weighted_sum_rule(grid: CorrelationGrid) -> np.ndarray:
    """``S(t) = i sum_z [(z1 + 1/2) C_1(z, t) + sum_{r>=2} z1 C_r(z, t)]``."""
    grid.require_complete()
    z1 = np.array([z[0] for z in grid.displacements], dtype=float)
    weights = np.array([[z + 0.5 if r == 1 else z for r in grid.axes] for z in z1])
    return 1j * np.einsum("tzr,zr->t", grid.C, weights)


def absolute_sum(grid: CorrelationGrid) -> np.ndarray:
    """``W(t) = sum_{z, r} |C_r(z, t)|``."""
    grid.require_complete()
    return np.abs(grid.C).sum(axis=(1, 2))


def _radii(grid: CorrelationGrid) -> np.ndarray:
    return np.array([math.sqrt(sum(c * c for c in z)) for z in grid.displacements])


def tail_mass(grid: CorrelationGrid, v_lr: float, cutoff: int) -> np.ndarray:
    """Per-time ``sum_{|z| > v t + N} (|z1| + 1/2) sum_r |C_r(z, t)|``."""
    radii = _radii(grid)
    z1 = np.abs(np.array([z[0] for z in grid.displacements], dtype=float))
    mass = (z1 + 0.5)[None, :] * np.abs(grid.C).sum(axis=2)
    out = np.empty(len(grid.times))
    for ti, t in enumerate(grid.times):
        outside = radii > v_lr * abs(t) + cutoff
        out[ti] = mass[ti, outside].sum()
    return out


def choose_tail_cutoff(grid: CorrelationGrid, current: float, v_lr: float, fraction: float = EPS_FRACTION) -> tuple[int, float, np.ndarray]:
    """Smallest ``N >= 1`` with tail mass below ``fraction * |j|`` at every sampled time.

    The cutoff sphere must stay inside the chart at the last time, otherwise
    the tail is not actually being measured.
    """
    radius = float(_radii(grid).max())
    t_last = float(np.abs(grid.times).max())
    n_max = max(1, int(math.floor(radius - v_lr * t_last)))
    if abs(current) == 0.0:
        eps = tail_mass(grid, v_lr, 1)
        return 1, float(eps.max()), eps
    for cutoff in range(1, n_max + 1):
        eps = tail_mass(grid, v_lr, cutoff)
        if eps.max() < fraction * abs(current):
            return cutoff, float(eps.max()), eps
    raise TailTooHeavy(
        f"no cutoff N <= {n_max} brings the tail below {fraction} |j| = {fraction * abs(current):.3e}"
    )


@dataclass
class DecayReport:
    times: np.ndarray
    S: np.ndarray
    W: np.ndarray
    bound_rhs: np.ndarray
    margin: np.ndarray
    current: float
    eps: float
    N: int
    v_lr: float
    c_lr: float | None = None
    eps_per_t: np.ndarray | None = None
    tol: float = BOUND_TOL

    @property
    def passed(self) -> bool:
        return bool((self.margin >= -self.tol).all())

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "S_re": self.S.real.tolist(),
            "S_im": self.S.imag.tolist(),
            "W": self.W.tolist(),
            "bound_rhs": self.bound_rhs.tolist(),
            "margin": self.margin.tolist(),
            "current": self.current,
            "eps": self.eps,
            "eps_per_t": None if self.eps_per_t is None else self.eps_per_t.tolist(),
            "N": self.N,
            "V_lr": self.v_lr,
            "C_lr": self.c_lr,
            "tol": self.tol,
            "passed": self.passed,
        }


def decay_bound_check(times, W, current: float, eps: float, cutoff: int, v_lr: float, S=None, tol: float = BOUND_TOL) -> DecayReport:
    """``margin(t) = W(t) - max(|j| - eps, 0) / (v |t| + N + 1/2)``."""
    times = np.asarray(times, dtype=float)
    W = np.asarray(W, dtype=float)
    rhs = max(abs(current) - eps, 0.0) / (v_lr * np.abs(times) + cutoff + 0.5)
    S = np.full(len(times), np.nan + 0j) if S is None else np.asarray(S)
    return DecayReport(times, S, W, rhs, W - rhs, float(current), float(eps), int(cutoff), float(v_lr), tol=tol)


def decay_report(grid: CorrelationGrid, current: float, v_lr: float, c_lr: float | None = None,
                 fraction: float = EPS_FRACTION, tol: float = BOUND_TOL) -> DecayReport:
    """Tail cutoff, sums and bound margins in one pass over a complete grid."""
    cutoff, eps, eps_t = choose_tail_cutoff(grid, current, v_lr, fraction)
    report = decay_bound_check(grid.times, absolute_sum(grid), current, eps, cutoff, v_lr,
                               S=weighted_sum_rule(grid), tol=tol)
    report.c_lr = c_lr
    report.eps_per_t = eps_t
    return report


# --- Lieb-Robinson envelope ------------------------------------------------


@dataclass
class LRFit:
    c_lr: float
    v_lr: float
    intercept: float
    residuals: np.ndarray
    displacements: list
    times: np.ndarray
    profile: np.ndarray  # (len(times), len(displacements))
    norm_n: float
    norm_h: float

    def envelope(self, radius, t):
        return self.c_lr * self.norm_n * self.norm_h * np.exp(-np.asarray(radius) + self.v_lr * np.abs(t))

    def dominance_gap(self) -> float:
        """Max of ``profile - envelope`` over all points (<= 0 when the bound holds)."""
        radii = np.array([math.sqrt(sum(c * c for c in z)) for z in self.displacements])
        env = self.envelope(radii[None, :], self.times[:, None])
        return float((self.profile - env).max())

    def to_dict(self) -> dict:
        return {"C_lr": self.c_lr, "V_lr": self.v_lr, "intercept": self.intercept,
                "residuals": self.residuals.tolist(), "times": self.times.tolist(),
                "displacements": [list(z) for z in self.displacements],
                "profile": self.profile.tolist()}


def commutator_norm_profile(model: ModelSpec, lattice: LatticeSpec, propagator: Propagator, displacements, times, r: int = 1) -> np.ndarray:
    """``||[n(0), alpha_t(h(z, z + e_r))]||`` as an array ``(len(times), len(displacements))``."""
    ev = _DualEvaluator(model, lattice, propagator)
    bonds = [_bond_blocks(model, lattice, propagator, z, r) for z in displacements]
    out = np.zeros((len(times), len(displacements)))
    for ti, t in enumerate(times):
        a0 = ev.backward("n0", float(t))
        for zi, hb in enumerate(bonds):
            out[ti, zi] = _commutator_norm(a0, hb)
    return out


def lr_norm_profile_and_fit(model: ModelSpec, lattice: LatticeSpec, propagator: Propagator, displacements, times,
                            threshold: float = FIT_THRESHOLD) -> LRFit:
    """Least-squares fit of ``log||[n, alpha_t(h_z)]|| = log(C ||n|| ||h||) - |z| + V t``.

    The intercept is then raised by the largest residual so that the
    envelope dominates every computed point.
    """
    times = np.asarray(times, dtype=float)
    displacements = list(displacements)
    profile = commutator_norm_profile(model, lattice, propagator, displacements, times)
    norm_n = float(np.abs(model.charge_values).max())
    norm_h = bond_norm(model)
    radii = np.array([math.sqrt(sum(c * c for c in z)) for z in displacements])
    tt, rr = np.meshgrid(times, radii, indexing="ij")
    keep = profile > threshold
    if keep.sum() < MIN_FIT_POINTS:
        raise InsufficientData(f"only {int(keep.sum())} profile points above {threshold}")
    y = np.log(profile[keep] / (norm_n * norm_h)) + rr[keep]
    design = np.column_stack([np.ones(keep.sum()), np.abs(tt[keep])])
    (intercept, v_lr), *_ = np.linalg.lstsq(design, y, rcond=None)
    residuals = y - design @ np.array([intercept, v_lr])
    c_lr = float(np.exp(intercept + residuals.max()))
    return LRFit(c_lr, float(v_lr), float(intercept), residuals, displacements, times, profile, norm_n, norm_h)
