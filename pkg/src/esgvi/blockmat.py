"""Block-sparse symmetric matrices, block LDL^T factorization and selected inversion.

Storage is column-stacked: block column ``k`` of a pattern owns one dense
array of shape ``(d_k + n_k, d_k)`` whose top ``d_k`` rows hold the diagonal
block and whose remaining rows hold the strictly-lower blocks ``(j, k)`` for
the pattern rows ``j > k`` in increasing order. All columns live in one flat
vector so that factorization, solves and the Takahashi recursion can work a
whole block column at a time with precomputed gather/scatter index maps.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.io
import scipy.sparse as sps


class BlockMatError(Exception):
    pass


class NotPositiveDefinite(BlockMatError):
    def __init__(self, block, message=None):
        self.block = block
        super().__init__(message or f"diagonal block {block} is not positive definite")


class DimensionMismatch(BlockMatError, ValueError):
    pass


class PatternViolation(BlockMatError):
    pass


@dataclass(frozen=True)
class BlockLayout:
    block_dims: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.block_dims)
        if not dims or any(d <= 0 for d in dims):
            raise ValueError("block dimensions must be positive integers")
        object.__setattr__(self, "block_dims", dims)

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.block_dims)[:-1])).astype(np.intp)

    @property
    def total_dim(self) -> int:
        return int(self.offsets[-1] + self.block_dims[-1])

    @property
    def n_blocks(self) -> int:
        return len(self.block_dims)

    def slice(self, i: int) -> slice:
        o = int(self.offsets[i])
        return slice(o, o + self.block_dims[i])

    def indices(self, blocks: Iterable[int]) -> np.ndarray:
        """Scalar indices of the concatenation of ``blocks``."""
        parts = [np.arange(self.offsets[b], self.offsets[b] + self.block_dims[b]) for b in blocks]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.intp)

    def block_of_scalar(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_blocks), self.block_dims)


@dataclass(frozen=True)
class PrecisionPattern:
    """Lower-triangular block sparsity pattern (diagonal always present)."""

    layout: BlockLayout
    lower_blocks: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        n = self.layout.n_blocks
        pairs = set()
        for i, j in self.lower_blocks:
            i, j = int(i), int(j)
            if i < j:
                i, j = j, i
            if j < 0 or i >= n:
                raise ValueError(f"block pair {(i, j)} outside layout with {n} blocks")
            pairs.add((i, j))
        pairs.update((i, i) for i in range(n))
        object.__setattr__(self, "lower_blocks", frozenset(pairs))

    @classmethod
    def from_pairs(cls, layout, pairs):
        return cls(layout, frozenset(pairs))

    def __contains__(self, pair) -> bool:
        i, j = pair
        return ((i, j) if i >= j else (j, i)) in self.lower_blocks

    @cached_property
    def column_rows(self) -> tuple:
        """For each block column, the sorted strictly-lower row blocks."""
        rows = [[] for _ in range(self.layout.n_blocks)]
        for i, j in self.lower_blocks:
            if i != j:
                rows[j].append(i)
        return tuple(tuple(sorted(r)) for r in rows)

    def scalar_nnz(self) -> int:
        """Scalar nonzeros of the full symmetric matrix (both triangles)."""
        d = self.layout.block_dims
        return sum(d[i] * d[j] * (1 if i == j else 2) for i, j in self.lower_blocks)

    def scalar_nnz_lower(self, strict: bool = True) -> int:
        """Scalar nonzeros in the lower triangle (of e.g. the factor L)."""
        d = self.layout.block_dims
        total = 0
        for i, j in self.lower_blocks:
            if i != j:
                total += d[i] * d[j]
            else:
                total += d[i] * (d[i] - 1) // 2 if strict else d[i] * (d[i] + 1) // 2
        return total

    @cached_property
    def storage(self) -> "_Storage":
        return _Storage(self)

    def to_dense_mask(self) -> np.ndarray:
        lay = self.layout
        mask = np.zeros((lay.total_dim, lay.total_dim), dtype=bool)
        for i, j in self.lower_blocks:
            mask[lay.slice(i), lay.slice(j)] = True
            mask[lay.slice(j), lay.slice(i)] = True
        return mask


def symbolic_fill(pattern: PrecisionPattern) -> PrecisionPattern:
    """Close ``pattern`` under the four-corners rule of LDL^T elimination.

    If column ``i`` holds rows ``k`` and ``j`` (j > k > i) then ``(j, k)``
    must be present as well. Processing columns left to right gives the
    minimal closed superset regardless of how the input set was built.
    """
    n = pattern.layout.n_blocks
    rows = [set(r) for r in pattern.column_rows]
    for i in range(n):
        below = sorted(rows[i])
        for a, k in enumerate(below):
            rows[k].update(below[a + 1:])
    pairs = {(j, i) for i in range(n) for j in rows[i]}
    return PrecisionPattern(pattern.layout, frozenset(pairs))


def is_fill_closed(pattern: PrecisionPattern) -> bool:
    rows = pattern.column_rows
    for i in range(pattern.layout.n_blocks):
        below = rows[i]
        for a, k in enumerate(below):
            rk = set(rows[k])
            if any(j not in rk for j in below[a + 1:]):
                return False
    return True


class _Storage:
    """Flat column-stacked layout of one pattern plus cached index maps."""

    def __init__(self, pattern: PrecisionPattern):
        self.pattern = pattern
        lay = pattern.layout
        dims = lay.block_dims
        self.rows = pattern.column_rows
        self.base = np.zeros(lay.n_blocks, dtype=np.intp)
        self.height = np.zeros(lay.n_blocks, dtype=np.intp)
        # row offset of block j inside column k's stack
        self.rowpos = []
        size = 0
        for k in range(lay.n_blocks):
            pos = {k: 0}
            h = dims[k]
            for j in self.rows[k]:
                pos[j] = h
                h += dims[j]
            self.rowpos.append(pos)
            self.base[k] = size
            self.height[k] = h
            size += h * dims[k]
        self.size = size
        self._block_cache = {}
        self._gather_cache = {}
        self._scatter_cache = {}

    def column(self, data: np.ndarray, k: int) -> np.ndarray:
        d = self.pattern.layout.block_dims[k]
        b = self.base[k]
        return data[b:b + self.height[k] * d].reshape(self.height[k], d)

    def block_slice(self, i: int, j: int):
        """Flat slice and shape of stored block (i, j), i >= j."""
        key = (i, j)
        hit = self._block_cache.get(key)
        if hit is None:
            dims = self.pattern.layout.block_dims
            try:
                r = self.rowpos[j][i]
            except KeyError:
                raise PatternViolation(f"block {(i, j)} not in pattern") from None
            start = self.base[j] + r * dims[j]
            hit = (slice(start, start + dims[i] * dims[j]), (dims[i], dims[j]))
            self._block_cache[key] = hit
        return hit

    def position(self, a_blocks, b_blocks) -> np.ndarray:
        """Flat indices of the dense submatrix rows ``a_blocks`` x cols ``b_blocks``.

        Every requested (row block, col block) pair must satisfy row >= col.
        """
        lay = self.pattern.layout
        dims = lay.block_dims
        na = sum(dims[b] for b in a_blocks)
        nb = sum(dims[b] for b in b_blocks)
        out = np.empty((na, nb), dtype=np.intp)
        r0 = 0
        for i in a_blocks:
            c0 = 0
            for j in b_blocks:
                sl, shp = self.block_slice(i, j)
                out[r0:r0 + dims[i], c0:c0 + dims[j]] = np.arange(sl.start, sl.stop).reshape(shp)
                c0 += dims[j]
            r0 += dims[i]
        return out

    def symmetric_gather(self, blocks: tuple) -> np.ndarray:
        """Index matrix reading the full dense submatrix on ``blocks`` x ``blocks``."""
        hit = self._gather_cache.get(blocks)
        if hit is not None:
            return hit
        dims = np.asarray(self.pattern.layout.block_dims, dtype=np.intp)
        bl = np.asarray(blocks, dtype=np.intp)
        nb = len(blocks)
        # block-level row position of max(i, j) inside column min(i, j)
        rp = np.empty((nb, nb), dtype=np.intp)
        for q, j in enumerate(blocks):
            pos = self.rowpos[j]
            for p, i in enumerate(blocks):
                if i >= j:
                    try:
                        rp[p, q] = rp[q, p] = pos[i]
                    except KeyError:
                        raise PatternViolation(f"block {(i, j)} not in pattern") from None
        sb = np.repeat(np.arange(nb), dims[bl])              # local block of each scalar
        so = np.arange(len(sb)) - np.repeat(np.cumsum(dims[bl]) - dims[bl], dims[bl])
        R, C = sb[:, None], sb[None, :]
        lower = bl[R] >= bl[C]
        col_blk = np.where(lower, bl[C], bl[R])
        row_off = np.where(lower, so[:, None], so[None, :])
        col_off = np.where(lower, so[None, :], so[:, None])
        out = self.base[col_blk] + (rp[R, C] + row_off) * dims[col_blk] + col_off
        out = np.ascontiguousarray(out, dtype=np.intp)
        out.flags.writeable = False
        self._gather_cache[blocks] = out
        return out

    def lower_scatter(self, blocks: tuple):
        """(flat target indices, flat source positions) for adding a dense local
        matrix on ``blocks`` into storage; only pairs with row block >= col block."""
        hit = self._scatter_cache.get(blocks)
        if hit is not None:
            return hit
        if len(set(blocks)) != len(blocks):
            raise ValueError(f"repeated block in {blocks}")
        dims = self.pattern.layout.block_dims
        blk = np.repeat(np.array(blocks, dtype=np.intp), [dims[b] for b in blocks])
        mask = blk[:, None] >= blk[None, :]
        for i in blocks:
            for j in blocks:
                if i > j and (i, j) not in self.pattern.lower_blocks:
                    raise PatternViolation(f"factor on blocks {blocks} touches {(i, j)} outside the pattern")
        gather = self.symmetric_gather(blocks)
        hit = (gather[mask], np.flatnonzero(mask.ravel()))
        self._scatter_cache[blocks] = hit
        return hit


class BlockSparseSym:
    """Symmetric matrix with dense blocks on a lower-triangular block pattern."""

    def __init__(self, pattern: PrecisionPattern, data: np.ndarray | None = None):
        self.pattern = pattern
        st = pattern.storage
        if data is None:
            data = np.zeros(st.size)
        elif data.shape != (st.size,):
            raise DimensionMismatch("flat data does not match pattern storage")
        self.data = data

    @property
    def layout(self) -> BlockLayout:
        return self.pattern.layout

    def block(self, i: int, j: int) -> np.ndarray:
        st = self.pattern.storage
        if i >= j:
            sl, shp = st.block_slice(i, j)
            return self.data[sl].reshape(shp)
        sl, shp = st.block_slice(j, i)
        return self.data[sl].reshape(shp).T

    @property
    def blocks(self) -> dict:
        return {p: self.block(*p) for p in sorted(self.pattern.lower_blocks)}

    def copy(self) -> "BlockSparseSym":
        return BlockSparseSym(self.pattern, self.data.copy())

    def combine(self, other: "BlockSparseSym", t: float) -> "BlockSparseSym":
        """Return ``self + t * (other - self)``; patterns must agree."""
        if other.pattern != self.pattern:
            raise PatternViolation("patterns differ")
        return BlockSparseSym(self.pattern, self.data + t * (other.data - self.data))

    def to_dense(self) -> np.ndarray:
        lay = self.layout
        out = np.zeros((lay.total_dim, lay.total_dim))
        for (i, j) in self.pattern.lower_blocks:
            b = self.block(i, j)
            out[lay.slice(i), lay.slice(j)] = b
            if i != j:
                out[lay.slice(j), lay.slice(i)] = b.T
        return out

    @classmethod
    def from_dense(cls, pattern: PrecisionPattern, dense: np.ndarray) -> "BlockSparseSym":
        lay = pattern.layout
        dense = np.asarray(dense, dtype=float)
        if dense.shape != (lay.total_dim, lay.total_dim):
            raise DimensionMismatch(f"dense matrix {dense.shape} does not match dimension {lay.total_dim}")
        out = cls(pattern)
        for (i, j) in pattern.lower_blocks:
            out.block(i, j)[...] = dense[lay.slice(i), lay.slice(j)]
        return out

    @classmethod
    def identity(cls, pattern: PrecisionPattern) -> "BlockSparseSym":
        out = cls(pattern)
        for i, d in enumerate(pattern.layout.block_dims):
            out.block(i, i)[...] = np.eye(d)
        return out

    def quad_form(self, v: np.ndarray) -> float:
        """vᵀ A v without densifying."""
        lay = self.layout
        total = 0.0
        for (i, j) in self.pattern.lower_blocks:
            vi = v[lay.slice(i)]
            vj = v[lay.slice(j)]
            q = vi @ self.block(i, j) @ vj
            total += q if i == j else 2.0 * q
        return float(total)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        lay = self.layout
        out = np.zeros(lay.total_dim)
        for (i, j) in self.pattern.lower_blocks:
            b = self.block(i, j)
            out[lay.slice(i)] += b @ v[lay.slice(j)]
            if i != j:
                out[lay.slice(j)] += b.T @ v[lay.slice(i)]
        return out


def scatter_add(A: BlockSparseSym, block_indices: Sequence[int], local: np.ndarray) -> BlockSparseSym:
    """Add a dense local matrix over ``block_indices`` into ``A`` in place."""
    blocks = tuple(int(b) for b in block_indices)
    dims = A.layout.block_dims
    n = sum(dims[b] for b in blocks)
    local = np.asarray(local, dtype=float)
    if local.shape != (n, n):
        raise DimensionMismatch(f"local matrix {local.shape} does not match blocks {blocks} ({n})")
    target, source = A.pattern.storage.lower_scatter(blocks)
    A.data[target] += local.ravel()[source]
    return A


class LdlFactors:
    """Block LDL^T factors stored on a fill-closed pattern.

    ``data`` uses the column-stacked storage of ``fill_pattern``: the top
    of column ``k`` holds ``D_k`` and the rows below hold ``L_{R_k,k}``.
    """

    def __init__(self, fill_pattern, data, d_inv, log_det_value):
        self.fill_pattern = fill_pattern
        self.data = data
        self.d_inv = d_inv
        self._log_det = log_det_value

    @property
    def layout(self) -> BlockLayout:
        return self.fill_pattern.layout

    def D_block(self, k: int) -> np.ndarray:
        d = self.layout.block_dims[k]
        return self.fill_pattern.storage.column(self.data, k)[:d]

    def L_block(self, i: int, j: int) -> np.ndarray:
        if i == j:
            return np.eye(self.layout.block_dims[i])
        if i < j:
            return np.zeros((self.layout.block_dims[i], self.layout.block_dims[j]))
        st = self.fill_pattern.storage
        sl, shp = st.block_slice(i, j)
        return self.data[sl].reshape(shp)

    @property
    def L_blocks(self) -> dict:
        return {(i, j): self.L_block(i, j) for (i, j) in sorted(self.fill_pattern.lower_blocks) if i != j}

    @property
    def D_blocks(self) -> list:
        return [self.D_block(k) for k in range(self.layout.n_blocks)]

    def dense_L(self) -> np.ndarray:
        lay = self.layout
        out = np.eye(lay.total_dim)
        for (i, j), b in self.L_blocks.items():
            out[lay.slice(i), lay.slice(j)] = b
        return out

    def dense_D(self) -> np.ndarray:
        lay = self.layout
        out = np.zeros((lay.total_dim, lay.total_dim))
        for k in range(lay.n_blocks):
            out[lay.slice(k), lay.slice(k)] = self.D_block(k)
        return out


class _Plan:
    """Per-column index maps used by factorization and selected inversion."""

    def __init__(self, fill: PrecisionPattern):
        st = fill.storage
        lay = fill.layout
        dims = lay.block_dims
        self.cols = []
        for k in range(lay.n_blocks):
            rows = st.rows[k]
            d = dims[k]
            if rows:
                gather = st.symmetric_gather(rows)
                blk = np.repeat(np.array(rows, dtype=np.intp), [dims[r] for r in rows])
                mask = (blk[:, None] >= blk[None, :]).ravel()
                update_src = np.flatnonzero(mask)
                update_dst = gather.ravel()[update_src]
                row_scalars = lay.indices(rows)
            else:
                gather = update_src = update_dst = row_scalars = None
            self.cols.append((d, int(st.base[k]), int(st.height[k]), rows, gather,
                              update_src, update_dst, row_scalars))


_INTERNED: dict = {}


def intern_pattern(pattern: PrecisionPattern) -> PrecisionPattern:
    """Canonical instance for an equal pattern, so per-pattern caches are shared.

    Repeated problems with one structure (Monte Carlo trials) then build
    their storage maps, fill and factorization plans once.
    """
    canon = _INTERNED.get(pattern)
    if canon is None:
        if len(_INTERNED) >= 64:
            _INTERNED.clear()
        canon = _INTERNED[pattern] = pattern
    return canon


def _plan(fill: PrecisionPattern) -> _Plan:
    plan = fill.__dict__.get("_ldl_plan")
    if plan is None:
        plan = _Plan(fill)
        fill.__dict__["_ldl_plan"] = plan
    return plan


def _fill_of(pattern: PrecisionPattern) -> PrecisionPattern:
    fill = pattern.__dict__.get("_fill")
    if fill is None:
        fill = intern_pattern(symbolic_fill(pattern))
        pattern.__dict__["_fill"] = fill
    return fill


def _embed_map(src: PrecisionPattern, dst: PrecisionPattern) -> np.ndarray:
    """Flat index in ``dst`` storage of each flat entry of ``src`` storage."""
    key = "_embed_" + str(id(dst))
    hit = src.__dict__.get(key)
    if hit is not None and hit[0] is dst:
        return hit[1]
    s, d = src.storage, dst.storage
    out = np.empty(s.size, dtype=np.intp)
    for (i, j) in src.lower_blocks:
        ssl, _ = s.block_slice(i, j)
        dsl, _ = d.block_slice(i, j)
        out[ssl] = np.arange(dsl.start, dsl.stop)
    src.__dict__[key] = (dst, out)
    return out


def ldl_factorize(A: BlockSparseSym, fill_pattern: PrecisionPattern | None = None) -> LdlFactors:
    """Block LDL^T factorization without pivoting.

    ``fill_pattern`` defaults to the (cached) symbolic fill of ``A.pattern``.
    Raises NotPositiveDefinite when a pivot block fails its Cholesky test.
    """
    fill = fill_pattern if fill_pattern is not None else _fill_of(A.pattern)
    plan = _plan(fill)
    F = np.zeros(fill.storage.size)
    if fill is A.pattern:
        F[:] = A.data
    else:
        F[_embed_map(A.pattern, fill)] = A.data
    d_inv = []
    log_det_value = 0.0
    for k, (d, base, h, rows, _g, upd_src, upd_dst, _r) in enumerate(plan.cols):
        col = F[base:base + h * d].reshape(h, d)
        Dk = col[:d]
        if d == 1:
            piv = Dk[0, 0]
            if not piv > 0.0 or not np.isfinite(piv):
                raise NotPositiveDefinite(k)
            Dinv = np.array([[1.0 / piv]])
            log_det_value += np.log(piv)
        else:
            Dk = 0.5 * (Dk + Dk.T)
            col[:d] = Dk
            try:
                c = np.linalg.cholesky(Dk)
            except np.linalg.LinAlgError:
                raise NotPositiveDefinite(k) from None
            diag = np.diag(c)
            if not np.all(np.isfinite(diag)) or np.any(diag <= 0.0):
                raise NotPositiveDefinite(k)
            log_det_value += 2.0 * np.sum(np.log(diag))
            ci = np.linalg.inv(c)
            Dinv = ci.T @ ci
        d_inv.append(Dinv)
        if rows:
            W = col[d:].copy()
            Lc = W @ Dinv
            col[d:] = Lc
            F[upd_dst] -= (Lc @ W.T).ravel()[upd_src]
    return LdlFactors(fill, F, d_inv, float(log_det_value))


def solve(F: LdlFactors, r: np.ndarray) -> np.ndarray:
    """Solve (L D Lᵀ) x = r by sparse forward then backward substitution."""
    lay = F.layout
    r = np.asarray(r, dtype=float)
    if r.shape != (lay.total_dim,):
        raise DimensionMismatch(f"rhs has shape {r.shape}, expected ({lay.total_dim},)")
    plan = _plan(F.fill_pattern)
    data = F.data
    y = r.copy()
    offs = lay.offsets
    for k, (d, base, h, rows, _g, _us, _ud, rsc) in enumerate(plan.cols):
        if rows:
            o = offs[k]
            Lc = data[base + d * d:base + h * d].reshape(h - d, d)
            y[rsc] -= Lc @ y[o:o + d]
    for k, (d, *_rest) in enumerate(plan.cols):
        o = offs[k]
        y[o:o + d] = F.d_inv[k] @ y[o:o + d]
    for k in range(lay.n_blocks - 1, -1, -1):
        d, base, h, rows, _g, _us, _ud, rsc = plan.cols[k]
        if rows:
            o = offs[k]
            Lc = data[base + d * d:base + h * d].reshape(h - d, d)
            y[o:o + d] -= Lc.T @ y[rsc]
    return y


def log_det(F: LdlFactors) -> float:
    """ln|A| as the sum of the log-determinants of the D blocks."""
    return F._log_det


class PartialCovariance:
    """Blocks of A⁻¹ on the fill pattern of the factorization."""

    def __init__(self, pattern: PrecisionPattern, data: np.ndarray):
        self.pattern = pattern
        self.data = data

    def block(self, i: int, j: int) -> np.ndarray:
        st = self.pattern.storage
        if i >= j:
            sl, shp = st.block_slice(i, j)
            return self.data[sl].reshape(shp)
        sl, shp = st.block_slice(j, i)
        return self.data[sl].reshape(shp).T

    @property
    def blocks(self) -> dict:
        return {p: self.block(*p) for p in sorted(self.pattern.lower_blocks)}

    def gather(self, blocks: Sequence[int]) -> np.ndarray:
        """Dense covariance of the concatenated ``blocks``."""
        return self.data[self.pattern.storage.symmetric_gather(tuple(blocks))]

    def diagonal(self) -> np.ndarray:
        lay = self.pattern.layout
        return np.concatenate([np.diag(self.block(k, k)) for k in range(lay.n_blocks)])


def takahashi_partial_inverse(F: LdlFactors) -> PartialCovariance:
    """Selected inverse on the fill pattern by backward substitution.

    Column k (last to first): Σ_{R,k} = −Σ_{R,R} L_{R,k} and
    Σ_{k,k} = D_k⁻¹ − Σ_{R,k}ᵀ L_{R,k}; all of Σ_{R,R} lies in the fill
    pattern (four-corners closure) and was filled by earlier columns.
    """
    fill = F.fill_pattern
    plan = _plan(fill)
    data = F.data
    S = np.zeros(fill.storage.size)
    for k in range(fill.layout.n_blocks - 1, -1, -1):
        d, base, h, rows, gather, _us, _ud, _r = plan.cols[k]
        col = S[base:base + h * d].reshape(h, d)
        if rows:
            Lc = data[base + d * d:base + h * d].reshape(h - d, d)
            Srk = -(S[gather] @ Lc)
            Skk = F.d_inv[k] - Srk.T @ Lc
            col[:d] = 0.5 * (Skk + Skk.T)
            col[d:] = Srk
        else:
            col[:d] = F.d_inv[k]
    return PartialCovariance(fill, S)


def write_matrix_market(path, M, comment: str = "") -> None:
    """Write a BlockSparseSym or PartialCovariance in coordinate format.

    Only stored entries are written (lower triangle, symmetric header);
    indices are 1-based as per the format.
    """
    pattern = M.pattern
    lay = pattern.layout
    rows, cols, vals = [], [], []
    for (i, j) in sorted(pattern.lower_blocks):
        b = M.block(i, j)
        ri = lay.indices([i])
        cj = lay.indices([j])
        rr, cc = np.meshgrid(ri, cj, indexing="ij")
        keep = rr >= cc
        rows.append(rr[keep])
        cols.append(cc[keep])
        vals.append(b[keep])
    n = lay.total_dim
    mat = sps.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    scipy.io.mmwrite(path, mat, comment=comment, symmetry="symmetric", precision=17)
