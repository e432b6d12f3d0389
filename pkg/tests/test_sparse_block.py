import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgopt import sparse_block as sb
from fgopt.sparse_block import (
    BlockLayout,
    BlockSparseMatrix,
    DimensionMismatch,
    NotPositiveDefinite,
    Permutation,
)


def random_spd_system(rng, n_blocks, dim_lo=1, dim_hi=6, density=0.4):
    """Random SPD block system built as A^T A + eps I over a sparse pattern."""
    dims = [int(rng.integers(dim_lo, dim_hi + 1)) for _ in range(n_blocks)]
    layout = BlockLayout(dims)
    n = layout.total_dim
    A = np.zeros((n, n))
    for i in range(n_blocks):
        si = layout.slice_of(i)
        A[si, si] = rng.normal(size=(dims[i], dims[i]))
        for j in range(i):
            if rng.random() < density:
                sj = layout.slice_of(j)
                A[si, sj] = rng.normal(size=(dims[i], dims[j]))
    dense = A.T @ A + 0.5 * np.eye(n)
    H = BlockSparseMatrix(layout)
    for i in range(n_blocks):
        si = layout.slice_of(i)
        for j in range(i + 1):
            sj = layout.slice_of(j)
            M = dense[si, sj]
            if i == j or np.any(M != 0.0):
                H.accumulate_block(i, j, M)
    return H, dense


# -- layout / accumulation ------------------------------------------------------


def test_layout_offsets():
    lo = BlockLayout([3, 1, 2])
    assert lo.offsets == [0, 3, 4, 6]
    assert lo.total_dim == 6
    assert lo.slice_of(1) == slice(3, 4)


def test_accumulate_identity_twice():
    H = BlockSparseMatrix(BlockLayout([2, 2]))
    H.accumulate_block(0, 0, np.eye(2))
    H.accumulate_block(0, 0, np.eye(2))
    assert np.array_equal(H.block(0, 0), 2 * np.eye(2))


def test_accumulate_upper_is_stored_transposed():
    H = BlockSparseMatrix(BlockLayout([2, 3]))
    M = np.arange(6.0).reshape(2, 3)
    H.accumulate_block(0, 1, M)
    assert (1, 0) in H.blocks
    assert np.array_equal(H.blocks[(1, 0)], M.T)
    assert np.array_equal(H.block(0, 1), M)


def test_accumulate_dimension_mismatch():
    H = BlockSparseMatrix(BlockLayout([2, 3]))
    with pytest.raises(DimensionMismatch):
        H.accumulate_block(0, 0, np.eye(3))


def test_random_accumulation_matches_dense_oracle():
    rng = np.random.default_rng(0)
    dims = [2, 3, 1, 4]
    layout = BlockLayout(dims)
    H = BlockSparseMatrix(layout)
    dense = np.zeros((layout.total_dim, layout.total_dim))
    for _ in range(100):
        i = int(rng.integers(0, 4))
        j = int(rng.integers(0, 4))
        M = rng.normal(size=(dims[i], dims[j]))
        if i == j:
            M = M + M.T  # keep the dense oracle symmetric
        H.accumulate_block(i, j, M)
        si, sj = layout.slice_of(i), layout.slice_of(j)
        dense[si, sj] += M
        if i != j:
            dense[sj, si] += M.T
    assert np.allclose(H.to_dense(), dense, atol=1e-12)


# -- ordering ---------------------------------------------------------------------


def symbolic_fill(adjacency, order):
    """Independent oracle: count fill edges created by elimination in `order`."""
    adj = {k: set(v) for k, v in adjacency.items()}
    alive = set(adj)
    fill = 0
    for v in order:
        nbrs = sorted(adj[v] & alive)
        for a_i, a in enumerate(nbrs):
            for b in nbrs[a_i + 1 :]:
                if b not in adj[a]:
                    adj[a].add(b)
                    adj[b].add(a)
                    fill += 1
        alive.discard(v)
    return fill


def chain_adjacency(n):
    return {i: {j for j in (i - 1, i + 1) if 0 <= j < n} for i in range(n)}


def grid_adjacency(rows, cols):
    adj = {}
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            nbrs = set()
            if r > 0:
                nbrs.add(i - cols)
            if r < rows - 1:
                nbrs.add(i + cols)
            if c > 0:
                nbrs.add(i - 1)
            if c < cols - 1:
                nbrs.add(i + 1)
            adj[i] = nbrs
    return adj


def test_chain_has_zero_fill():
    adj = chain_adjacency(12)
    perm = sb.fill_reducing_ordering(adj, 12)
    assert symbolic_fill(adj, perm.order) == 0


def test_star_defers_hub_elimination():
    # hub is index 0, so natural order eliminates it first and fills the
    # leaf clique; min-degree keeps it until its degree has collapsed
    # (lowest-index tie-breaking may slot it one before the final leaf)
    n = 9
    adj = {0: set(range(1, n))}
    for i in range(1, n):
        adj[i] = {0}
    perm = sb.fill_reducing_ordering(adj, n)
    assert list(perm.order).index(0) >= n - 2
    assert symbolic_fill(adj, perm.order) == 0
    assert symbolic_fill(adj, range(n)) > 0


def test_grid_fill_not_worse_than_natural():
    adj = grid_adjacency(10, 10)
    perm = sb.fill_reducing_ordering(adj, 100)
    fill_amd = symbolic_fill(adj, perm.order)
    fill_nat = symbolic_fill(adj, range(100))
    assert fill_amd <= fill_nat
    dense_worst = 100 * 99 // 2
    assert fill_amd < dense_worst


def test_ordering_is_deterministic_permutation():
    adj = grid_adjacency(5, 7)
    p1 = sb.fill_reducing_ordering(adj, 35)
    p2 = sb.fill_reducing_ordering(adj, 35)
    assert np.array_equal(p1.order, p2.order)
    assert np.array_equal(p1.order[p1.inverse], np.arange(35))


def test_permutation_validation():
    with pytest.raises(ValueError):
        Permutation([0, 0, 1])


# -- cholesky ---------------------------------------------------------------------


def test_cholesky_2x2_closed_form():
    H = BlockSparseMatrix(BlockLayout([1, 1]))
    H.accumulate_block(0, 0, [[4.0]])
    H.accumulate_block(1, 0, [[2.0]])
    H.accumulate_block(1, 1, [[3.0]])
    L = sb.block_cholesky(H, Permutation.identity(2))
    assert abs(L.block(0, 0)[0, 0] - 2.0) < 1e-15
    assert abs(L.block(1, 0)[0, 0] - 1.0) < 1e-15
    assert abs(L.block(1, 1)[0, 0] - np.sqrt(2.0)) < 1e-15


def test_cholesky_identity():
    H = BlockSparseMatrix(BlockLayout([2, 3]))
    H.accumulate_block(0, 0, np.eye(2))
    H.accumulate_block(1, 1, np.eye(3))
    L = sb.block_cholesky(H, Permutation.identity(2))
    assert np.allclose(L.to_dense(), np.eye(5))


def test_cholesky_matches_dense_oracle():
    rng = np.random.default_rng(1)
    H, dense = random_spd_system(rng, 4, dim_lo=3, dim_hi=3)
    perm = sb.ordering_for(H)
    L = sb.block_cholesky(H, perm)
    Ld = L.to_dense()
    P = np.zeros_like(dense)
    lo = H.layout
    plo = L.layout
    for k, o in enumerate(perm.order):
        P[plo.slice_of(k), lo.slice_of(o)] = np.eye(lo.dims[o])
    assert np.max(np.abs(Ld @ Ld.T - P @ dense @ P.T)) < 1e-10 * np.max(np.abs(dense))


def test_not_positive_definite_reports_block():
    H = BlockSparseMatrix(BlockLayout([2, 2]))
    H.accumulate_block(0, 0, np.eye(2))
    H.accumulate_block(1, 1, -np.eye(2))
    with pytest.raises(NotPositiveDefinite) as exc:
        sb.block_cholesky(H, Permutation.identity(2))
    assert exc.value.block == 1


def test_singular_matrix_raises():
    H = BlockSparseMatrix(BlockLayout([2]))
    H.accumulate_block(0, 0, np.ones((2, 2)))  # rank 1
    with pytest.raises(NotPositiveDefinite):
        sb.block_cholesky(H, Permutation.identity(1))


# -- solve -----------------------------------------------------------------------


def test_solve_identity():
    H = BlockSparseMatrix(BlockLayout([3]))
    H.accumulate_block(0, 0, np.eye(3))
    b = np.array([1.0, -2.0, 3.0])
    assert np.allclose(sb.solve(H, b, Permutation.identity(1)), b)


def test_solve_scalar():
    H = BlockSparseMatrix(BlockLayout([1]))
    H.accumulate_block(0, 0, [[2.0]])
    x = sb.solve(H, np.array([4.0]), Permutation.identity(1))
    assert np.allclose(x, [2.0])


def test_solve_matches_dense_oracle():
    rng = np.random.default_rng(2)
    for trial in range(30):
        H, dense = random_spd_system(rng, int(rng.integers(2, 9)))
        b = rng.normal(size=dense.shape[0])
        x = sb.solve(H, b, sb.ordering_for(H))
        x_ref = np.linalg.solve(dense, b)
        assert np.max(np.abs(x - x_ref)) < 1e-9 * max(1.0, np.max(np.abs(x_ref)))


def test_solve_residual_bound_many_random_systems():
    rng = np.random.default_rng(3)
    for trial in range(200):
        H, dense = random_spd_system(rng, int(rng.integers(1, 12)))
        b = rng.normal(size=dense.shape[0])
        x = sb.solve(H, b, sb.ordering_for(H))
        r = np.max(np.abs(dense @ x - b))
        hinf = np.max(np.abs(dense))
        bound = 1e-8 * (hinf * np.max(np.abs(x)) + np.max(np.abs(b)))
        assert r < bound


# -- marginal covariance ------------------------------------------------------------


def test_marginal_scalar():
    H = BlockSparseMatrix(BlockLayout([1]))
    H.accumulate_block(0, 0, [[4.0]])
    (S,) = sb.marginal_covariance(H, Permutation.identity(1), [0])
    assert abs(S[0, 0] - 0.25) < 1e-14


def test_marginal_identity():
    H = BlockSparseMatrix(BlockLayout([2, 3]))
    H.accumulate_block(0, 0, np.eye(2))
    H.accumulate_block(1, 1, np.eye(3))
    blocks = sb.marginal_covariance(H, Permutation.identity(2), [0, 1])
    assert np.allclose(blocks[0], np.eye(2))
    assert np.allclose(blocks[1], np.eye(3))


def test_marginal_matches_dense_inverse():
    rng = np.random.default_rng(4)
    for _ in range(20):
        H, dense = random_spd_system(rng, 6, dim_lo=2, dim_hi=4)
        inv = np.linalg.inv(dense)
        blocks = sb.marginal_covariance(H, sb.ordering_for(H), list(range(6)))
        for i, S in enumerate(blocks):
            sl = H.layout.slice_of(i)
            assert np.max(np.abs(S - inv[sl, sl])) < 1e-8 * max(1.0, np.max(np.abs(inv)))


# -- reconstruction property ----------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_reconstruction_property(n_blocks, seed):
    rng = np.random.default_rng(seed)
    H, dense = random_spd_system(rng, n_blocks)
    perm = sb.ordering_for(H)
    L = sb.block_cholesky(H, perm).to_dense()
    P = np.zeros_like(dense)
    for k, o in enumerate(perm.order):
        P[
            sb.BlockLayout([H.layout.dims[oo] for oo in perm.order]).slice_of(k),
            H.layout.slice_of(o),
        ] = np.eye(H.layout.dims[o])
    err = np.max(np.abs(L @ L.T - P @ dense @ P.T))
    assert err < 1e-9 * max(1.0, np.max(np.abs(dense)))


# -- export ----------------------------------------------------------------------------


def test_matrix_market_export():
    H = BlockSparseMatrix(BlockLayout([1, 2]))
    H.accumulate_block(0, 0, [[2.0]])
    H.accumulate_block(1, 0, [[0.5], [0.0]])
    H.accumulate_block(1, 1, np.eye(2))
    buf = io.StringIO()
    sb.export_matrix_market(H, buf)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0] == "%%MatrixMarket matrix coordinate real symmetric"
    n, m, nnz = (int(v) for v in lines[1].split())
    assert (n, m) == (3, 3)
    assert nnz == len(lines) - 2
    entries = {tuple(l.split()[:2]): float(l.split()[2]) for l in lines[2:]}
    assert entries[("1", "1")] == 2.0
    assert entries[("2", "1")] == 0.5
