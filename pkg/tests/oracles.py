"""Independent reference constructions used as test oracles.

Everything here is built from explicit Kronecker products of 2x2 matrices
and never touches the package's embedding or blocking code.
"""
from functools import reduce

import numpy as np

SX = np.array([[0, 1], [1, 0]], dtype=complex) / 2
SY = np.array([[0, -1j], [1j, 0]], dtype=complex) / 2
SZ = np.array([[1, 0], [0, -1]], dtype=complex) / 2
I2 = np.eye(2, dtype=complex)
A = np.array([[0, 0], [1, 0]], dtype=complex)  # annihilates the occupied state (index 0)
Z = np.array([[-1, 0], [0, 1]], dtype=complex)  # (-1)^n


def site_op(op, site, n):
    """``op`` on ``site`` of an ``n``-site chain, site 0 most significant."""
    return reduce(np.kron, [op if k == site else I2 for k in range(n)])


def two_site(op1, i, op2, j, n):
    return site_op(op1, i, n) @ site_op(op2, j, n)


def xxz_chain(n, lam, periodic):
    pairs = [(i, i + 1) for i in range(n - 1)] + ([(n - 1, 0)] if periodic and n > 2 else [])
    h = np.zeros((2**n, 2**n), dtype=complex)
    for i, j in pairs:
        h += two_site(SX, i, SX, j, n) + two_site(SY, i, SY, j, n) + lam * two_site(SZ, i, SZ, j, n)
    return h


def xxz_current(i, j, n):
    """``S1_i S2_j - S2_i S1_j``."""
    return two_site(SX, i, SY, j, n) - two_site(SY, i, SX, j, n)


def jw_annihilators(n):
    """Fermion operators via an explicit string: c_k = Z^{(k)} a_k."""
    out = []
    for k in range(n):
        out.append(reduce(np.kron, [Z] * k + [A] + [I2] * (n - k - 1)))
    return out


def fermion_chain(n, T, V):
    c = jw_annihilators(n)
    num = [ck.conj().T @ ck for ck in c]
    h = np.zeros((2**n, 2**n), dtype=complex)
    for x in range(n - 1):
        h += -T * (c[x].conj().T @ c[x + 1] + c[x + 1].conj().T @ c[x]) + V * num[x] @ num[x + 1]
    return h


def hopping_matrix(n, T, periodic=False):
    m = np.zeros((n, n))
    for x in range(n - 1):
        m[x, x + 1] = m[x + 1, x] = -T
    if periodic and n > 2:
        m[0, n - 1] = m[n - 1, 0] = -T
    return m


def all_subset_sums(eps):
    sums = np.zeros(1)
    for e in eps:
        sums = np.concatenate([sums, sums + e])
    return np.sort(sums)


def shift_permutation(n):
    """perm with (T psi)[perm[i]] = psi[i] for the cyclic shift x -> x+1 of an n-site ring."""
    idx = np.arange(2**n)
    bits = (idx[:, None] >> np.arange(n - 1, -1, -1)) & 1
    shifted = np.roll(bits, 1, axis=1)
    return shifted @ (1 << np.arange(n - 1, -1, -1))
