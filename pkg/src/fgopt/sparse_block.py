"""Symmetric block-sparse systems: accumulation, ordering, Cholesky, solve.

The system matrix H is stored by blocks, lower triangle only: a block at
(row i, col j) is kept iff j <= i, and accumulating into (i, j) with j > i
transparently lands at (j, i) transposed.  A fill-reducing permutation of
the block indices is computed with a greedy minimum-degree pass over the
block adjacency graph (ties broken by lowest index, so orderings are
deterministic), after which PHP^T = LL^T is factorized block-wise.

NotPositiveDefinite is a first-class error: it is what a user sees when a
problem has unconstrained gauge freedom (no fixed variable), so it carries
the offending block index instead of crashing deep inside a LAPACK call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionMismatch(ValueError):
    pass


class NotPositiveDefinite(ArithmeticError):
    """Cholesky hit a non-positive pivot; `block` is the original block index."""

    def __init__(self, block, message=None):
        self.block = block
        super().__init__(message or f"matrix not positive definite at block {block}")


_PIVOT_REL_TOL = 1e-12


@dataclass(frozen=True)
class BlockLayout:
    """Per-block dimensions plus their prefix-sum offsets."""

    dims: tuple

    def __init__(self, dims):
        object.__setattr__(self, "dims", tuple(int(d) for d in dims))
        if any(d <= 0 for d in self.dims):
            raise ValueError("block dims must be positive")

    @property
    def n_blocks(self):
        return len(self.dims)

    @property
    def offsets(self):
        off = [0]
        for d in self.dims:
            off.append(off[-1] + d)
        return off

    @property
    def total_dim(self):
        return sum(self.dims)

    def slice_of(self, i):
        off = self.offsets
        return slice(off[i], off[i + 1])

    def permuted(self, order):
        return BlockLayout([self.dims[o] for o in order])


@dataclass
class Permutation:
    """Bijection on block indices; order[k] = original index eliminated k-th."""

    order: np.ndarray

    def __init__(self, order):
        order = np.asarray(order, dtype=int)
        n = order.size
        if sorted(order.tolist()) != list(range(n)):
            raise ValueError("not a permutation")
        self.order = order

    @staticmethod
    def identity(n):
        return Permutation(np.arange(n))

    @property
    def inverse(self):
        inv = np.empty_like(self.order)
        inv[self.order] = np.arange(self.order.size)
        return inv


class BlockSparseMatrix:
    """Symmetric block matrix, lower-triangular block storage.

    `symmetric=False` turns off the implied upper triangle, which is how the
    Cholesky factor L is represented.
    """

    def __init__(self, layout: BlockLayout, symmetric=True):
        self.layout = layout
        self.symmetric = symmetric
        self._blocks = {}

    @property
    def blocks(self):
        return self._blocks

    def set_zero(self):
        self._blocks.clear()

    def accumulate_block(self, i, j, M):
        """Add M into block (i, j); (i, j) with j > i is stored transposed at (j, i)."""
        M = np.asarray(M, dtype=float)
        if j > i:
            i, j, M = j, i, M.T
        dims = self.layout.dims
        if M.shape != (dims[i], dims[j]):
            raise DimensionMismatch(
                f"block ({i},{j}) expects shape {(dims[i], dims[j])}, got {M.shape}"
            )
        cur = self._blocks.get((i, j))
        if cur is None:
            self._blocks[(i, j)] = M.copy()
        else:
            cur += M

    def block(self, i, j):
        """Stored value at (i, j), resolving symmetry; None when structurally zero."""
        if j > i:
            if not self.symmetric:
                return None
            M = self._blocks.get((j, i))
            return None if M is None else M.T
        return self._blocks.get((i, j))

    def block_adjacency(self):
        """Off-diagonal structure as an adjacency dict over block indices."""
        adj = {i: set() for i in range(self.layout.n_blocks)}
        for (i, j) in self._blocks:
            if i != j:
                adj[i].add(j)
                adj[j].add(i)
        return adj

    def to_dense(self):
        n = self.layout.total_dim
        A = np.zeros((n, n))
        for (i, j), M in self._blocks.items():
            si, sj = self.layout.slice_of(i), self.layout.slice_of(j)
            A[si, sj] = M
            if i != j and self.symmetric:
                A[sj, si] = M.T
        return A

    def max_abs_diagonal(self):
        m = 0.0
        for i in range(self.layout.n_blocks):
            B = self._blocks.get((i, i))
            if B is not None:
                m = max(m, float(np.max(np.abs(np.diag(B)))))
        return m

    def add_scaled_diagonal(self, lam, scaled: bool):
        """Return a copy with lam*diag(H) (scaled) or lam*I added to the diagonal."""
        out = BlockSparseMatrix(self.layout)
        for (i, j), M in self._blocks.items():
            out._blocks[(i, j)] = M.copy()
        for i in range(self.layout.n_blocks):
            d = self.layout.dims[i]
            B = out._blocks.setdefault((i, i), np.zeros((d, d)))
            if scaled:
                B[np.diag_indices(d)] += lam * np.diag(B).copy()
            else:
                B[np.diag_indices(d)] += lam
        return out


def natural_ordering(n_blocks) -> Permutation:
    return Permutation.identity(n_blocks)


def fill_reducing_ordering(adjacency, n_blocks) -> Permutation:
    """Greedy minimum-degree ordering over the block adjacency graph.

    At each step the alive vertex of minimum degree (lowest index on ties)
    is eliminated and its alive neighbours are joined into a clique, which
    mirrors what Cholesky does symbolically.
    """
    adj = {i: set(adjacency.get(i, ())) - {i} for i in range(n_blocks)}
    alive = set(range(n_blocks))
    order = []
    while alive:
        v = min(alive, key=lambda x: (len(adj[x]), x))
        order.append(v)
        alive.discard(v)
        nbrs = adj.pop(v)
        for u in nbrs:
            adj[u].discard(v)
        nbrs_list = sorted(nbrs)
        for a_i, u in enumerate(nbrs_list):
            for w in nbrs_list[a_i + 1 :]:
                adj[u].add(w)
                adj[w].add(u)
    return Permutation(order)


def ordering_for(H: BlockSparseMatrix, method: str = "amd") -> Permutation:
    if method == "natural":
        return natural_ordering(H.layout.n_blocks)
    if method == "amd":
        return fill_reducing_ordering(H.block_adjacency(), H.layout.n_blocks)
    raise ValueError(f"unknown ordering method {method!r}")


class CholeskyFactor:
    """Block Cholesky factor of PHP^T with triangular solves."""

    def __init__(self, layout, perm: Permutation, diag, cols):
        self.layout = layout  # original layout
        self.perm = perm
        self._diag = diag  # k -> lower-triangular diagonal block (permuted space)
        self._cols = cols  # j -> {i: block} strictly-below-diagonal (permuted space)
        order = perm.order
        self._pdims = [layout.dims[o] for o in order]
        off = [0]
        for d in self._pdims:
            off.append(off[-1] + d)
        self._poff = off
        rows = {i: [] for i in range(len(order))}
        for j, col in cols.items():
            for i in col:
                rows[i].append(j)
        self._rows = {i: sorted(js) for i, js in rows.items()}

    def lower_matrix(self) -> BlockSparseMatrix:
        """The factor L as a block matrix over the permuted layout."""
        L = BlockSparseMatrix(BlockLayout(self._pdims), symmetric=False)
        for j, D in self._diag.items():
            L._blocks[(j, j)] = D.copy()
        for j, col in self._cols.items():
            for i, M in col.items():
                L._blocks[(i, j)] = M.copy()
        return L

    def solve(self, b):
        """Solve H x = b for vector or matrix right-hand sides."""
        b = np.asarray(b, dtype=float)
        n = len(self._pdims)
        order = self.perm.order
        lo = self.layout.offsets

        def orig_slice(k):
            o = order[k]
            return slice(lo[o], lo[o] + self.layout.dims[o])

        y = [None] * n
        for j in range(n):
            r = b[orig_slice(j)].copy()
            for k in self._rows.get(j, ()):
                r -= self._cols[k][j] @ y[k]
            y[j] = np.linalg.solve(self._diag[j], r)
        x = [None] * n
        for j in range(n - 1, -1, -1):
            r = y[j]
            for i, M in self._cols.get(j, {}).items():
                r = r - M.T @ x[i]
            x[j] = np.linalg.solve(self._diag[j].T, r)
        out = np.zeros_like(b)
        for k in range(n):
            out[orig_slice(k)] = x[k]
        return out


def factorize(H: BlockSparseMatrix, P: Permutation) -> CholeskyFactor:
    """Block Cholesky PHP^T = LL^T (right-looking, fill created on the fly)."""
    n = H.layout.n_blocks
    order = P.order
    pos = P.inverse
    pivot_floor = _PIVOT_REL_TOL * max(H.max_abs_diagonal(), np.finfo(float).tiny)

    A = {}
    for (bi, bj), M in H._blocks.items():
        i, j = int(pos[bi]), int(pos[bj])
        if i >= j:
            A[(i, j)] = M.copy()
        else:
            A[(j, i)] = M.T.copy()

    diag = {}
    cols = {}
    for j in range(n):
        D = A.pop((j, j), None)
        if D is None:
            raise NotPositiveDefinite(int(order[j]), "structurally zero diagonal block")
        try:
            Ljj = np.linalg.cholesky(D)
        except np.linalg.LinAlgError:
            raise NotPositiveDefinite(int(order[j])) from None
        if float(np.min(np.diag(Ljj)) ** 2) <= pivot_floor:
            raise NotPositiveDefinite(int(order[j]), "pivot below tolerance (singular H?)")
        diag[j] = Ljj
        col = {}
        for i in range(j + 1, n):
            M = A.pop((i, j), None)
            if M is not None:
                # L[i,j] = A[i,j] Ljj^{-T}
                col[i] = np.linalg.solve(Ljj, M.T).T
        cols[j] = col
        idx = sorted(col)
        for a_k, ii in enumerate(idx):
            Li = col[ii]
            for jj in idx[: a_k + 1]:
                key = (ii, jj)
                upd = Li @ col[jj].T
                cur = A.get(key)
                if cur is None:
                    A[key] = -upd
                else:
                    cur -= upd
    return CholeskyFactor(H.layout, P, diag, cols)


def block_cholesky(H: BlockSparseMatrix, P: Permutation) -> BlockSparseMatrix:
    """Lower factor L of PHP^T = LL^T, over the permuted layout."""
    return factorize(H, P).lower_matrix()


def solve(H: BlockSparseMatrix, b, P: Permutation):
    """Solve H x = b through the permuted block Cholesky factorization."""
    return factorize(H, P).solve(b)


def marginal_covariance(H: BlockSparseMatrix, P: Permutation, targets):
    """Diagonal blocks of H^{-1} for the requested block indices.

    Each block is recovered by solving against the unit columns spanning it.
    """
    fac = factorize(H, P)
    out = []
    total = H.layout.total_dim
    for t in targets:
        sl = H.layout.slice_of(t)
        d = H.layout.dims[t]
        rhs = np.zeros((total, d))
        rhs[sl, :] = np.eye(d)
        X = fac.solve(rhs)
        out.append(X[sl, :].copy())
    return out


def export_matrix_market(H: BlockSparseMatrix, f):
    """Dump the scalar expansion (lower triangle) in MatrixMarket format.

    Useful for plotting sparsity/fill patterns with external tools.
    """

    def write(fh):
        entries = []
        for (i, j), M in sorted(H._blocks.items()):
            oi = H.layout.offsets[i]
            oj = H.layout.offsets[j]
            rows, colz = M.shape
            for r in range(rows):
                for c in range(colz):
                    gr, gc = oi + r, oj + c
                    if gc <= gr:
                        entries.append((gr + 1, gc + 1, M[r, c]))
        n = H.layout.total_dim
        fh.write("%%MatrixMarket matrix coordinate real symmetric\n")
        fh.write(f"{n} {n} {len(entries)}\n")
        for r, c, v in sorted(entries):
            fh.write(f"{r} {c} {float(v)!r}\n")

    if hasattr(f, "write"):
        write(f)
    else:
        with open(f, "w") as fh:
            write(fh)
