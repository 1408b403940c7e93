import numpy as np
import pytest
import scipy.linalg as sla

from oracles import SX, SZ, site_op, xxz_chain
from slowdecay.dynamics import (
    Propagator,
    default_velocity,
    evolve_group_property_check,
    heisenberg_evolve,
    lr_horizon,
    time_grid,
)
from slowdecay.errors import DimensionMismatch, DimensionOverflow, HorizonNonpositive
from slowdecay.models import LatticeSpec, ModelSpec, assemble_hamiltonian, bond_norm, max_coupling, total_charge
from slowdecay.operators import OperatorMatrix, sector_decompose


@pytest.fixture(scope="module")
def chain6():
    lat = LatticeSpec.chain(6)
    model = ModelSpec.xxz(0.7)
    h = assemble_hamiltonian(model, lat)
    hb = sector_decompose(h, total_charge(model, lat))
    return h, hb, Propagator.from_hamiltonian(hb), Propagator.from_hamiltonian(h)


def test_propagator_invariants(chain6):
    h, hb, blocked, dense = chain6
    assert blocked.is_blocked and not dense.is_blocked
    for p in (blocked, dense):
        assert p.reconstruction_error(h) < 1e-10
        assert p.unitarity_error() < 1e-10
    assert np.abs(blocked.energies - np.linalg.eigvalsh(xxz_chain(6, 0.7, True))).max() < 1e-10


@pytest.mark.parametrize("t", [0.0, 0.37, -1.2, 3.0])
def test_evolution_matches_matrix_exponential(chain6, t):
    _, hb, blocked, dense = chain6
    u = sla.expm(-1j * t * xxz_chain(6, 0.7, True))
    for op in (site_op(SZ, 2, 6), site_op(SX, 0, 6)):  # charge-conserving and charge-changing
        oracle = u.conj().T @ op @ u
        for p in (blocked, dense):
            got = heisenberg_evolve(OperatorMatrix(op), p, t).dense()
            assert np.abs(got - oracle).max() < 1e-12


def test_group_property(chain6):
    _, _, blocked, _ = chain6
    a = OperatorMatrix(site_op(SZ, 0, 6) @ site_op(SZ, 1, 6))
    assert evolve_group_property_check(a, blocked, 0.4, 0.9) < 1e-12


def test_evolution_guards(chain6):
    _, _, blocked, _ = chain6
    with pytest.raises(DimensionMismatch):
        heisenberg_evolve(OperatorMatrix(np.eye(4)), blocked, 1.0)
    big = assemble_hamiltonian(ModelSpec.xxz(0.0), LatticeSpec.chain(14))
    with pytest.raises(DimensionOverflow):
        Propagator.from_hamiltonian(big, blocked=False)


def test_light_cone_horizon():
    assert lr_horizon(2.0, 12) == pytest.approx((6 - 1 - 2) / 2.0)
    assert lr_horizon(1.0, 12, support_radius=1, margin=0) == pytest.approx(5.0)
    with pytest.raises(HorizonNonpositive):
        lr_horizon(1.0, 6)
    with pytest.raises(ValueError):
        lr_horizon(0.0, 12)
    grid = time_grid(1.5)
    assert len(grid) == 13 and grid[0] == 0.0 and grid[-1] == 1.5


def test_default_velocity_is_four_times_the_largest_coupling():
    # XX bond S1S1 + S2S2 has eigenvalues {-1/2, 0, 0, 1/2}
    assert bond_norm(ModelSpec.xxz(0.0)) == pytest.approx(0.5)
    assert default_velocity(max_coupling(ModelSpec.xxz(0.0))) == pytest.approx(4.0)
    assert default_velocity(max_coupling(ModelSpec.xxz(-2.5))) == pytest.approx(10.0)
    assert default_velocity(max_coupling(ModelSpec.tv_fermion(1.0, 3.0))) == pytest.approx(12.0)
