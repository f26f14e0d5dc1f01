"""Linear / second-order cone programming.

Programs have the form::

    minimize    c'x + offset
    subject to  A_eq x  = b_eq
                A_in x <= b_in
                ||F_j x + g_j||_2 <= h_j'x + k_j      for every cone block j

The default backend is a homogeneous self-dual interior-point method with
Nesterov-Todd scaling and a Mehrotra predictor-corrector step.  The KKT
systems are solved with a sparse LU factorisation of the (statically
regularised) quasi-definite matrix followed by iterative refinement.  A
``cvxopt`` backend with the same contract is available for cross-checks.
"""

from __future__ import annotations

import enum
import io
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidProgram, OutOfRange, ParseError

logger = logging.getLogger(__name__)


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass(frozen=True)
class ToleranceSpec:
    feas: float = 1e-8
    gap: float = 1e-8
    max_iter: int = 200


@dataclass(frozen=True)
class SOCBlock:
    """One cone constraint ``||F x + g|| <= h'x + k``."""

    F: sp.csr_matrix
    g: np.ndarray
    h: np.ndarray
    k: float

    @property
    def dim(self):
        return self.F.shape[0] + 1


@dataclass(frozen=True, eq=False)
class ConicProgram:
    """Cone constraints are stored stacked: block j owns ``dims[j] - 1``
    consecutive rows of ``cone_F``/``cone_g`` and row j of ``cone_H``/``cone_k``.
    """

    c: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    A_in: sp.csr_matrix
    b_in: np.ndarray
    cone_F: sp.csr_matrix = None
    cone_g: np.ndarray = None
    cone_H: sp.csr_matrix = None
    cone_k: np.ndarray = None
    cone_dims: tuple = ()
    offset: float = 0.0

    def __post_init__(self):
        n = self.c.shape[0]
        if n < 1:
            raise InvalidProgram("conic program needs at least one variable")
        if self.cone_F is None:
            object.__setattr__(self, "cone_F", sp.csr_matrix((0, n)))
            object.__setattr__(self, "cone_g", np.zeros(0))
            object.__setattr__(self, "cone_H", sp.csr_matrix((0, n)))
            object.__setattr__(self, "cone_k", np.zeros(0))
        if self.A_eq.shape != (self.b_eq.shape[0], n):
            raise InvalidProgram(f"equality block shape {self.A_eq.shape} vs rhs {self.b_eq.shape} / n={n}")
        if self.A_in.shape != (self.b_in.shape[0], n):
            raise InvalidProgram(f"inequality block shape {self.A_in.shape} vs rhs {self.b_in.shape} / n={n}")
        K = len(self.cone_dims)
        R = sum(self.cone_dims) - K
        if (
            self.cone_F.shape != (R, n)
            or self.cone_g.shape != (R,)
            or self.cone_H.shape != (K, n)
            or self.cone_k.shape != (K,)
            or any(q < 1 for q in self.cone_dims)
        ):
            raise InvalidProgram("cone block dimensions do not match the variable count")

    @property
    def n(self):
        return self.c.shape[0]

    @property
    def socs(self):
        out = []
        r = 0
        H = self.cone_H.toarray() if self.cone_dims else None
        for j, q in enumerate(self.cone_dims):
            out.append(SOCBlock(self.cone_F[r : r + q - 1], self.cone_g[r : r + q - 1], H[j], float(self.cone_k[j])))
            r += q - 1
        return tuple(out)

    def objective_value(self, x):
        return float(self.c @ x + self.offset)

    def cone_margins(self, x):
        """``h'x + k - ||F x + g||`` for every cone."""
        if not self.cone_dims:
            return np.zeros(0)
        v = self.cone_F @ x + self.cone_g
        owner = np.repeat(np.arange(len(self.cone_dims)), np.asarray(self.cone_dims) - 1)
        sq = np.bincount(owner, weights=v * v, minlength=len(self.cone_dims))
        return self.cone_H @ x + self.cone_k - np.sqrt(sq)

    def violations(self, x):
        """Constraint violations of a primal point (equality uses the inf-norm)."""
        eq = float(np.max(np.abs(self.A_eq @ x - self.b_eq), initial=0.0))
        ineq = float(np.max(self.A_in @ x - self.b_in, initial=0.0))
        soc = float(np.max(-self.cone_margins(x), initial=0.0))
        return {"eq": eq, "ineq": max(ineq, 0.0), "soc": max(soc, 0.0)}


@dataclass
class Solution:
    x: np.ndarray
    objective: float
    status: Status
    residuals: dict = field(default_factory=dict)
    iterations: int = 0
    dual_objective: float = math.nan
    y: np.ndarray | None = None

    @property
    def ok(self):
        return self.status is Status.OPTIMAL


def _csr(M, shape=None):
    if M is None:
        return sp.csr_matrix(shape)
    return sp.csr_matrix(M)


def make_program(c, A_eq=None, b_eq=None, A_in=None, b_in=None, socs=(), offset=0.0):
    """Convenience constructor accepting dense or sparse blocks.

    ``socs`` holds :class:`SOCBlock` objects or ``(F, g, h, k)`` tuples.
    """
    c = np.asarray(c, dtype=float).ravel()
    b = ProgramBuilder()
    b.add_variables(c.shape[0])
    b.add_objective(np.arange(c.shape[0]), c)
    if A_eq is not None:
        b.add_eq(np.atleast_2d(A_eq) if not sp.issparse(A_eq) else A_eq, b_eq)
    if A_in is not None:
        b.add_le(np.atleast_2d(A_in) if not sp.issparse(A_in) else A_in, b_in)
    for blk in socs:
        if isinstance(blk, SOCBlock):
            b.add_soc(blk.F, blk.g, blk.h, blk.k)
        else:
            F, g, h, k = blk
            b.add_soc(np.atleast_2d(F) if not sp.issparse(F) else F, g, np.atleast_2d(h) if not sp.issparse(h) else h, k)
    b.offset = float(offset)
    return b.build()


class ProgramBuilder:
    """Incrementally assembles a :class:`ConicProgram`.

    Constraint blocks are passed as sparse matrices whose column indices are
    global variable indices; the column count may be smaller than the final
    number of variables.
    """

    def __init__(self):
        self.n = 0
        self._c = []
        self._eq = []
        self._in = []
        self._cones = []
        self.offset = 0.0

    def add_variables(self, count):
        idx = np.arange(self.n, self.n + count)
        self.n += count
        self._c.append(np.zeros(count))
        return idx

    def _pad(self, M, n=None):
        n = self.n if n is None else n
        M = sp.csr_matrix(M)
        if M.shape[1] < n:
            M = sp.hstack([M, sp.csr_matrix((M.shape[0], n - M.shape[1]))], format="csr")
        return M

    def add_eq(self, M, rhs):
        self._eq.append((sp.csr_matrix(M), np.asarray(rhs, float).ravel()))

    def add_le(self, M, rhs):
        self._in.append((sp.csr_matrix(M), np.asarray(rhs, float).ravel()))

    def add_soc(self, F, g, h, k):
        """``||F x + g|| <= h'x + k``; ``h`` is a sparse row or dense vector."""
        F = sp.csr_matrix(F)
        h = sp.csr_matrix(np.atleast_2d(h) if not sp.issparse(h) else h)
        self.add_socs(F, g, h, [k], [F.shape[0] + 1])

    def add_socs(self, F, g, H, k, dims):
        """Several cones at once, stacked as in :class:`ConicProgram`."""
        dims = [int(q) for q in dims]
        F = sp.csr_matrix(F)
        H = sp.csr_matrix(H)
        g = np.asarray(g, float).ravel()
        k = np.asarray(k, float).ravel()
        if F.shape[0] != sum(dims) - len(dims) or H.shape[0] != len(dims) or g.shape[0] != F.shape[0]:
            raise InvalidProgram("stacked cone blocks have inconsistent sizes")
        self._cones.append((F, g, H, k, dims))

    def add_objective(self, idx, coeffs):
        c = self.objective_vector()
        np.add.at(c, np.asarray(idx), coeffs)
        self._c = [c]

    def objective_vector(self):
        return np.concatenate(self._c) if self._c else np.zeros(0)

    def add_square_epigraph(self, L):
        """Add ``t`` with ``t >= ||L x||^2`` (one rotated cone); return its index."""
        L = sp.csr_matrix(L)
        t = self.add_variables(1)[0]
        rows = L.shape[0]
        F = sp.vstack([2.0 * self._pad(L), sp.csr_matrix(([1.0], ([0], [t])), shape=(1, self.n))])
        g = np.concatenate([np.zeros(rows), [-1.0]])
        h = sp.csr_matrix(([1.0], ([0], [t])), shape=(1, self.n))
        self.add_soc(F, g, h, 1.0)
        return t

    def add_weighted_squares(self, cols, weights):
        """Add ``t_j >= w_j x_{cols_j}^2`` for each j; return the ``t`` indices.

        Each term gets its own three-dimensional rotated cone
        ``||(2 sqrt(w_j) x, t_j - 1)|| <= t_j + 1``, which keeps the scaling
        matrices of the interior-point method block-sparse.
        """
        cols = np.asarray(cols)
        w = np.asarray(weights, float)
        K = cols.shape[0]
        t = self.add_variables(K)
        n = self.n
        r = np.arange(K)
        F = sp.csr_matrix(
            (np.concatenate([2.0 * np.sqrt(w), np.ones(K)]), (np.concatenate([2 * r, 2 * r + 1]), np.concatenate([cols, t]))),
            shape=(2 * K, n),
        )
        g = np.tile([0.0, -1.0], K)
        H = sp.csr_matrix((np.ones(K), (r, t)), shape=(K, n))
        self.add_socs(F, g, H, np.ones(K), [3] * K)
        return t

    def build(self):
        n = self.n

        def stack(blocks):
            if not blocks:
                return sp.csr_matrix((0, n)), np.zeros(0)
            M = sp.vstack([self._pad(M) for M, _ in blocks], format="csr")
            return M, np.concatenate([r for _, r in blocks])

        A_eq, b_eq = stack(self._eq)
        A_in, b_in = stack(self._in)
        if self._cones:
            F = sp.vstack([self._pad(c[0]) for c in self._cones], format="csr")
            g = np.concatenate([c[1] for c in self._cones])
            H = sp.vstack([self._pad(c[2]) for c in self._cones], format="csr")
            k = np.concatenate([c[3] for c in self._cones])
            dims = tuple(q for c in self._cones for q in c[4])
            return ConicProgram(self.objective_vector(), A_eq, b_eq, A_in, b_in, F, g, H, k, dims, self.offset)
        return ConicProgram(self.objective_vector(), A_eq, b_eq, A_in, b_in, offset=self.offset)


def lift_quadratic(c1, c2, base):
    """Replace the objective of ``base`` with ``c1'x + x'diag(c2)x``.

    Every variable with positive ``c2`` gets an epigraph variable (appended
    after the existing ones) bounded by a rotated cone; with ``c2 == 0`` the
    program is returned with objective ``c1'x`` and no extra variable.
    """
    c1 = np.asarray(c1, float)
    c2 = np.asarray(c2, float)
    if np.any(c2 < 0):
        raise InvalidProgram("c2 must be elementwise nonnegative")
    n = base.n
    c = np.zeros(n)
    c[: c1.shape[0]] = c1
    nz = np.flatnonzero(c2 > 0)
    if nz.size == 0:
        return replace(base, c=c, offset=0.0)
    b = ProgramBuilder()
    b.add_variables(n)
    b.add_objective(np.arange(n), c)
    b.add_eq(base.A_eq, base.b_eq)
    b.add_le(base.A_in, base.b_in)
    if base.cone_dims:
        b.add_socs(base.cone_F, base.cone_g, base.cone_H, base.cone_k, base.cone_dims)
    t = b.add_weighted_squares(nz, c2[nz])
    b.add_objective(t, np.ones(t.shape[0]))
    return b.build()


# --------------------------------------------------------------------------
# cone algebra on R_+^l x Q^{q_1} x ... x Q^{q_k}; second-order blocks of equal
# size are processed together as (count, q) index arrays


class _Cones:
    def __init__(self, l, qdims):
        self.l = l
        self.qdims = list(qdims)
        starts = []
        off = l
        for q in self.qdims:
            starts.append(off)
            off += q
        self.dim = off
        self.degree = l + len(self.qdims)
        self.groups = []
        by_dim = {}
        for s, q in zip(starts, self.qdims):
            by_dim.setdefault(q, []).append(s)
        for q in sorted(by_dim):
            st = np.asarray(by_dim[q])
            self.groups.append(st[:, None] + np.arange(q)[None, :])
        self.e = np.zeros(off)
        self.e[:l] = 1.0
        for idx in self.groups:
            self.e[idx[:, 0]] = 1.0
        # sparsity pattern of block-diagonal scaling matrices
        rows = [np.arange(l)]
        cols = [np.arange(l)]
        for idx in self.groups:
            rows.append(np.repeat(idx, idx.shape[1], axis=1).ravel())
            cols.append(np.tile(idx, (1, idx.shape[1])).ravel())
        self.w_rows = np.concatenate(rows)
        self.w_cols = np.concatenate(cols)

    def prod(self, u, v):
        out = np.empty_like(u)
        l = self.l
        out[:l] = u[:l] * v[:l]
        for idx in self.groups:
            a, b = u[idx], v[idx]
            out[idx[:, 0]] = np.sum(a * b, axis=1)
            out[idx[:, 1:]] = a[:, :1] * b[:, 1:] + b[:, :1] * a[:, 1:]
        return out

    def div(self, lam, d):
        """Solve ``lam o u = d`` for ``u``."""
        out = np.empty_like(d)
        l = self.l
        out[:l] = d[:l] / lam[:l]
        for idx in self.groups:
            a, b = lam[idx], d[idx]
            u0 = (a[:, 0] * b[:, 0] - np.sum(a[:, 1:] * b[:, 1:], axis=1)) / _jdet(a)
            out[idx[:, 0]] = u0
            out[idx[:, 1:]] = (b[:, 1:] - u0[:, None] * a[:, 1:]) / a[:, :1]
        return out

    def shift_into(self, v):
        """Shift a vector strictly into the cone interior (initialisation)."""
        viol = -np.inf
        if self.l:
            viol = max(viol, -float(np.min(v[: self.l])))
        for idx in self.groups:
            x = v[idx]
            viol = max(viol, float(np.max(np.linalg.norm(x[:, 1:], axis=1) - x[:, 0])))
        if viol < 0:
            return v.copy()
        return v + (1.0 + viol) * self.e

    def max_step(self, v, dv):
        """Largest ``a`` with ``v + a dv`` in the cone (``inf`` if unbounded)."""
        amax = np.inf
        l = self.l
        if l:
            neg = dv[:l] < 0
            if np.any(neg):
                amax = min(amax, float(np.min(-v[:l][neg] / dv[:l][neg])))
        for idx in self.groups:
            x, d = v[idx], dv[idx]
            a = d[:, 0] ** 2 - np.sum(d[:, 1:] ** 2, axis=1)
            b = 2.0 * (x[:, 0] * d[:, 0] - np.sum(x[:, 1:] * d[:, 1:], axis=1))
            c = _jdet(x)
            amax = min(amax, float(np.min(_first_positive_root(a, b, c), initial=np.inf)))
        return amax

    def residual_norm(self, r):
        """Largest constraint violation implied by a slack residual ``r``."""
        out = float(np.max(np.abs(r[: self.l]), initial=0.0))
        for idx in self.groups:
            x = r[idx]
            out = max(out, float(np.max(np.abs(x[:, 0]) + np.linalg.norm(x[:, 1:], axis=1))))
        return out


def _jdet(x):
    """Row-wise ``x0^2 - ||x1||^2`` computed without cancellation."""
    r = np.linalg.norm(x[:, 1:], axis=1)
    return (x[:, 0] - r) * (x[:, 0] + r)


def _first_positive_root(a, b, c):
    """Smallest ``t > 0`` with ``a t^2 + b t + c = 0`` (rows; ``c > 0``)."""
    out = np.full(a.shape, np.inf)
    scale = np.maximum.reduce([np.abs(a), np.abs(b), np.abs(c), np.full(a.shape, 1e-300)])
    lin = np.abs(a) <= 1e-14 * scale
    sel = lin & (b < 0)
    out[sel] = -c[sel] / b[sel]
    disc = b * b - 4.0 * a * c
    quad = ~lin & (disc >= 0)
    if np.any(quad):
        aa, bb, cc = a[quad], b[quad], c[quad]
        sq = np.sqrt(disc[quad])
        qq = -0.5 * (bb + np.where(bb >= 0, sq, -sq))
        with np.errstate(divide="ignore", invalid="ignore"):
            r1 = qq / aa
            r2 = np.where(qq != 0, cc / qq, np.inf)
        r1 = np.where(r1 > 0, r1, np.inf)
        r2 = np.where(r2 > 0, r2, np.inf)
        out[quad] = np.minimum(r1, r2)
    return out


class _NTScaling:
    """Nesterov-Todd scaling ``W`` with ``W z = W^{-1} s = lam``.

    On a second-order block ``W = beta (2 v v' - J)`` with ``v'Jv = 1``.
    """

    def __init__(self, cones, s, z):
        self.cones = cones
        l = cones.l
        self.d = np.sqrt(s[:l] / z[:l])
        self.blocks = []
        for idx in cones.groups:
            sb, zb = s[idx], z[idx]
            a = np.sqrt(np.maximum(_jdet(sb), 1e-300))
            b = np.sqrt(np.maximum(_jdet(zb), 1e-300))
            beta = np.sqrt(a / b)
            sn, zn = sb / a[:, None], zb / b[:, None]
            gamma = np.sqrt(np.maximum((1.0 + np.sum(sn * zn, axis=1)) / 2.0, 1e-300))
            w = sn.copy()
            w[:, 1:] -= zn[:, 1:]
            w[:, 0] += zn[:, 0]
            w /= 2.0 * gamma[:, None]
            v = w.copy()
            v[:, 0] += 1.0
            v /= np.sqrt(2.0 * v[:, :1])
            self.blocks.append((beta, v))
        self.lam = self.apply(z)

    def apply(self, x, inverse=False):
        out = np.empty_like(x)
        l = self.cones.l
        out[:l] = x[:l] / self.d if inverse else x[:l] * self.d
        for idx, (beta, v) in zip(self.cones.groups, self.blocks):
            xb = x[idx]
            vv = v.copy()
            if inverse:
                vv[:, 1:] *= -1.0
            Jx = xb.copy()
            Jx[:, 1:] *= -1.0
            res = 2.0 * vv * np.sum(vv * xb, axis=1)[:, None] - Jx
            out[idx] = res / beta[:, None] if inverse else res * beta[:, None]
        return out

    def inv_data(self):
        """Entries of ``W^{-1}`` in the cones' block pattern."""
        parts = [1.0 / self.d]
        for beta, v in self.blocks:
            jv = v.copy()
            jv[:, 1:] *= -1.0
            q = v.shape[1]
            M = 2.0 * jv[:, :, None] * jv[:, None, :]
            M[:, 0, 0] -= 1.0
            M[:, np.arange(1, q), np.arange(1, q)] += 1.0
            parts.append((M / beta[:, None, None]).ravel())
        return np.concatenate(parts)


class _KKT:
    """Solves ``A'dy + G'dz = bx, A dx = by, G dx - W^2 dz = bz``.

    The factorised matrix is the scaled form
    ``[[0, A', (W^-1 G)'], [A, 0, 0], [W^-1 G, 0, -I]]`` in ``(dx, dy, W dz)``,
    which stays far better conditioned than the ``-W^2`` form near the end
    of the iterations.
    """

    REG = 1e-9

    def __init__(self, A, G, cones):
        self.n, self.p, self.m = A.shape[1], A.shape[0], G.shape[0]
        self.A = sp.coo_matrix(A)
        self.G = sp.csr_matrix(G)
        self.cones = cones
        n, p, m = self.n, self.p, self.m
        self.N = n + p + m
        self.reg_diag = np.concatenate([np.full(n, self.REG), np.full(p, -self.REG), np.full(m, -self.REG)])

    def factor(self, W=None):
        n, p, m, N = self.n, self.p, self.m, self.N
        self.W = W
        if W is None:
            WG = sp.coo_matrix(self.G)
        else:
            Winv = sp.csr_matrix((W.inv_data(), (self.cones.w_rows, self.cones.w_cols)), shape=(m, m))
            WG = sp.coo_matrix(Winv @ self.G)
        rows, cols, data = [], [], []
        for M, r0 in ((self.A, n), (WG, n + p)):
            rows += [M.row + r0, M.col]
            cols += [M.col, M.row + r0]
            data += [M.data, M.data]
        rows.append(np.arange(n + p, N))
        cols.append(np.arange(n + p, N))
        data.append(-np.ones(m))
        rows, cols, data = np.concatenate(rows), np.concatenate(cols), np.concatenate(data)
        self.K = sp.csc_matrix((data, (rows, cols)), shape=(N, N))
        Kreg = self.K + sp.diags(self.reg_diag, format="csc")
        self.lu = spla.splu(Kreg, permc_spec="COLAMD", diag_pivot_thresh=0.1)

    def solve(self, bx, by, bz, refine=6):
        rbz = bz if self.W is None else self.W.apply(bz, inverse=True)
        rhs = np.concatenate([bx, by, rbz])
        sol = self.lu.solve(rhs)
        nr = np.linalg.norm(rhs, np.inf) + 1.0
        for _ in range(refine):
            r = rhs - self.K @ sol
            if np.linalg.norm(r, np.inf) <= 1e-15 * nr:
                break
            sol = sol + self.lu.solve(r)
        n, p = self.n, self.p
        dx, dy, u = sol[:n], sol[n : n + p], sol[n + p :]
        dz = u if self.W is None else self.W.apply(u, inverse=True)
        return dx, dy, dz


def _to_standard(prog):
    """Rewrite as ``G x + s = h``, ``s`` in R_+^l x SOCs."""
    n = prog.n
    dims = np.asarray(prog.cone_dims, dtype=int)
    K = dims.shape[0]
    # cone j occupies slack rows start_j (head) and start_j+1.. (tail)
    starts = np.concatenate([[0], np.cumsum(dims)[:-1]]).astype(int) if K else np.zeros(0, int)
    tail = np.concatenate([s + 1 + np.arange(q - 1) for s, q in zip(starts, dims)]) if K else np.zeros(0, int)
    order = np.empty(int(dims.sum()), dtype=int)
    order[starts] = np.arange(K)
    order[tail] = K + np.arange(tail.shape[0])
    stacked = sp.vstack([-prog.cone_H, -prog.cone_F], format="csr")
    G = sp.vstack([prog.A_in, stacked[order]], format="csr")
    h = np.concatenate([prog.b_in, np.concatenate([prog.cone_k, prog.cone_g])[order]])
    return G, h, _Cones(prog.A_in.shape[0], dims.tolist())


def _solve_builtin(prog, tol):
    c = prog.c
    A, b = prog.A_eq.tocsr(), prog.b_eq
    G, h, cones = _to_standard(prog)
    n, p = prog.n, A.shape[0]
    kkt = _KKT(A, G, cones)

    # initial point from two least-squares style solves with W = I
    kkt.factor(None)
    x, _, zz = kkt.solve(np.zeros(n), b, h)
    s = cones.shift_into(-zz)
    _, y, zz = kkt.solve(-c, np.zeros(p), np.zeros(cones.dim))
    z = cones.shift_into(zz)
    tau, kappa = 1.0, 1.0

    nc = max(1.0, float(np.linalg.norm(c, np.inf)))
    nb = max(1.0, float(np.linalg.norm(b, np.inf)) if p else 1.0)
    nh = max(1.0, float(np.linalg.norm(h, np.inf)) if h.size else 1.0)
    status = Status.NUMERICAL_FAILURE
    info = {}
    it = 0
    for it in range(tol.max_iter + 1):
        rx = A.T @ y + G.T @ z + c * tau
        ry = -(A @ x) + b * tau
        rz = -(G @ x) + h * tau - s
        cx, by, hz = float(c @ x), float(b @ y), float(h @ z)
        rt = -cx - by - hz - kappa
        mu = (float(s @ z) + tau * kappa) / (cones.degree + 1)

        pcost = cx / tau
        dcost = -(by + hz) / tau
        pres = max(
            float(np.max(np.abs(ry), initial=0.0)) / tau,
            cones.residual_norm(rz) / tau,
        )
        dres = float(np.max(np.abs(rx), initial=0.0)) / tau / nc
        gap = float(s @ z) / tau**2
        relgap = max(gap, abs(pcost - dcost)) / max(1.0, abs(pcost))
        info = {"primal": pres, "dual": dres, "gap": relgap, "mu": mu}
        logger.debug("it %d pres %.3e dres %.3e gap %.3e tau %.3e kappa %.3e", it, pres, dres, relgap, tau, kappa)
        if pres <= tol.feas and dres <= tol.feas and relgap <= tol.gap:
            status = Status.OPTIMAL
            break
        # infeasibility certificates
        if by + hz < 0:
            pinf = float(np.max(np.abs(A.T @ y + G.T @ z), initial=0.0)) / (-(by + hz)) / nc
            if pinf <= tol.feas:
                status = Status.INFEASIBLE
                info["certificate"] = pinf
                break
        if cx < 0:
            dinf = max(
                float(np.max(np.abs(A @ x), initial=0.0)) / nb,
                cones.residual_norm(G @ x + s) / nh,
            ) / (-cx)
            if dinf <= tol.feas:
                status = Status.UNBOUNDED
                info["certificate"] = dinf
                break
        if it == tol.max_iter:
            break

        try:
            W = _NTScaling(cones, s, z)
            kkt.factor(W)
        except (RuntimeError, ValueError, FloatingPointError) as exc:
            logger.debug("KKT factorisation failed at iteration %d: %s", it, exc)
            break
        lam = W.lam
        x1, y1, z1 = kkt.solve(-c, b, h)
        denom = kappa / tau - float(c @ x1) - float(b @ y1) - float(h @ z1)

        def direction(gamma, ds, dk):
            x2, y2, z2 = kkt.solve(-(1 - gamma) * rx, (1 - gamma) * ry, (1 - gamma) * rz - W.apply(cones.div(lam, ds)))
            dtau = (-(1 - gamma) * rt + float(c @ x2) + float(b @ y2) + float(h @ z2) + dk / tau) / denom
            dx, dy, dz = x2 + dtau * x1, y2 + dtau * y1, z2 + dtau * z1
            # slack step from the linearised primal equation: keeps the primal
            # residual contracting even when W is badly conditioned
            dsv = -(G @ dx) + h * dtau + (1 - gamma) * rz
            dkap = (dk - kappa * dtau) / tau
            return dx, dy, dz, dsv, dtau, dkap

        def step_to_boundary(dz, ds, dtau, dkap):
            a = min(cones.max_step(s, ds), cones.max_step(z, dz))
            if dtau < 0:
                a = min(a, -tau / dtau)
            if dkap < 0:
                a = min(a, -kappa / dkap)
            return a

        ds_aff = -cones.prod(lam, lam)
        dx, dy, dz, dsv, dtau, dkap = direction(0.0, ds_aff, -tau * kappa)
        alpha = min(1.0, step_to_boundary(dz, dsv, dtau, dkap))
        sigma = (1.0 - alpha) ** 3
        corr = cones.prod(W.apply(dsv, inverse=True), W.apply(dz))
        ds_cc = ds_aff + sigma * mu * cones.e - corr
        dk_cc = -tau * kappa + sigma * mu - dtau * dkap
        dx, dy, dz, dsv, dtau, dkap = direction(sigma, ds_cc, dk_cc)
        alpha = min(1.0, 0.99 * step_to_boundary(dz, dsv, dtau, dkap))
        if not np.isfinite(alpha) or alpha < 1e-12:
            logger.debug("step length collapsed at iteration %d", it)
            break
        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * dsv
        tau = tau + alpha * dtau
        kappa = kappa + alpha * dkap

    if status is Status.INFEASIBLE:
        scale = -(float(b @ y) + float(h @ z))
        return Solution(np.full(n, np.nan), math.nan, status, info, it, y=y / scale)
    if status is Status.UNBOUNDED:
        return Solution(x / -float(c @ x), -math.inf, status, info, it)
    xs = x / tau
    sol = Solution(
        xs,
        prog.objective_value(xs),
        status,
        info,
        it,
        dual_objective=-(float(b @ y) + float(h @ z)) / tau + prog.offset,
        y=y / tau,
    )
    if status is Status.OPTIMAL:
        viol = prog.violations(xs)
        sol.residuals.update({f"viol_{k}": v for k, v in viol.items()})
        if max(viol.values()) > tol.feas:
            # slack-based stopping test passed but the raw point does not
            sol.status = Status.NUMERICAL_FAILURE
    return sol


def _solve_cvxopt(prog, tol):
    import cvxopt
    from cvxopt import solvers

    G, h, cones = _to_standard(prog)

    def spm(M):
        M = sp.coo_matrix(M)
        return cvxopt.spmatrix(M.data.tolist(), M.row.tolist(), M.col.tolist(), M.shape)

    args = dict(dims={"l": cones.l, "q": cones.qdims, "s": []})
    if prog.A_eq.shape[0]:
        args["A"] = spm(prog.A_eq)
        args["b"] = cvxopt.matrix(prog.b_eq)
    opts = {"show_progress": False, "feastol": tol.feas, "abstol": tol.gap, "reltol": tol.gap, "maxiters": tol.max_iter}
    try:
        res = solvers.conelp(cvxopt.matrix(prog.c), spm(G), cvxopt.matrix(h), options=opts, **args)
    except (ValueError, ArithmeticError) as exc:
        # cvxopt raises on loss of cone interiority near the end of a run
        logger.debug("cvxopt aborted: %s", exc)
        return Solution(np.full(prog.n, np.nan), math.nan, Status.NUMERICAL_FAILURE, {"error": str(exc)}, 0)
    mapping = {
        "optimal": Status.OPTIMAL,
        "primal infeasible": Status.INFEASIBLE,
        "dual infeasible": Status.UNBOUNDED,
    }
    status = mapping.get(res["status"], Status.NUMERICAL_FAILURE)
    x = np.array(res["x"]).ravel() if res["x"] is not None else np.full(prog.n, np.nan)
    info = {"primal": res.get("primal infeasibility"), "dual": res.get("dual infeasibility"), "gap": res.get("relative gap")}
    obj = prog.objective_value(x) if status is Status.OPTIMAL else math.nan
    dual = (res["dual objective"] + prog.offset) if res.get("dual objective") is not None else math.nan
    return Solution(x, obj, status, info, res.get("iterations", 0), dual_objective=dual)


BACKENDS = {"builtin": _solve_builtin, "cvxopt": _solve_cvxopt}


def solve(prog, tol=None, backend="builtin"):
    """Solve a :class:`ConicProgram`; the returned status is never raised."""
    tol = tol or ToleranceSpec()
    try:
        fn = BACKENDS[backend]
    except KeyError:
        raise OutOfRange(f"unknown solver backend {backend!r}; choose from {sorted(BACKENDS)}") from None
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        sol = fn(prog, tol)
    logger.debug("solve: %s after %d iterations (%s)", sol.status.value, sol.iterations, sol.residuals)
    return sol


# --------------------------------------------------------------------------
# plain-text dump, for feeding the assembled program to an external solver


def _num(v):
    return repr(float(v))


def dump_program(prog, fh=None):
    """Write ``prog`` in a line-oriented text format.

    Layout (indices 0-based, only nonzeros listed)::

        dpcc-conic 1
        n <vars> offset <value>
        c <col> <value>
        eq <rows>                  followed by  r <row> <col> <value> / b <row> <value>
        le <rows>                  same
        soc <cone-rows> k <value>  followed by  f <row> <col> <value> / g <row> <value> / h <col> <value>
        end

    A cone ``soc q k`` stands for ``||F x + g|| <= h'x + k`` with ``F`` having
    ``q`` rows.  Returns the text when ``fh`` is None.
    """
    out = fh or io.StringIO()
    w = out.write
    w("dpcc-conic 1\n")
    w(f"n {prog.n} offset {_num(prog.offset)}\n")
    for i in np.flatnonzero(prog.c):
        w(f"c {i} {_num(prog.c[i])}\n")
    for tag, M, rhs in (("eq", prog.A_eq, prog.b_eq), ("le", prog.A_in, prog.b_in)):
        w(f"{tag} {M.shape[0]}\n")
        M = sp.coo_matrix(M)
        for r, col, v in zip(M.row, M.col, M.data):
            w(f"r {r} {col} {_num(v)}\n")
        for r in np.flatnonzero(rhs):
            w(f"b {r} {_num(rhs[r])}\n")
    for blk in prog.socs:
        w(f"soc {blk.F.shape[0]} k {_num(blk.k)}\n")
        F = sp.coo_matrix(blk.F)
        for r, col, v in zip(F.row, F.col, F.data):
            w(f"f {r} {col} {_num(v)}\n")
        for r in np.flatnonzero(blk.g):
            w(f"g {r} {_num(blk.g[r])}\n")
        for col in np.flatnonzero(blk.h):
            w(f"h {col} {_num(blk.h[col])}\n")
    w("end\n")
    if fh is None:
        return out.getvalue()
    return None


def load_program(text):
    """Inverse of :func:`dump_program`."""
    lines = iter(text.splitlines())
    header = next(lines).split()
    if header[:2] != ["dpcc-conic", "1"]:
        raise ParseError("not a dpcc conic program dump")
    _, n, _, offset = next(lines).split()
    n = int(n)
    c = np.zeros(n)
    blocks = {}
    cones = []
    cur = None
    for line in lines:
        tok = line.split()
        if not tok:
            continue
        kind = tok[0]
        if kind == "c":
            c[int(tok[1])] = float(tok[2])
        elif kind in ("eq", "le"):
            cur = {"rows": int(tok[1]), "trip": [], "rhs": np.zeros(int(tok[1]))}
            blocks[kind] = cur
        elif kind in ("r", "f"):
            cur["trip"].append((int(tok[1]), int(tok[2]), float(tok[3])))
        elif kind == "b":
            cur["rhs"][int(tok[1])] = float(tok[2])
        elif kind == "soc":
            q = int(tok[1])
            cur = {"rows": q, "k": float(tok[3]), "trip": [], "g": np.zeros(q), "h": np.zeros(n)}
            cones.append(cur)
        elif kind == "g":
            cur["g"][int(tok[1])] = float(tok[2])
        elif kind == "h":
            cur["h"][int(tok[1])] = float(tok[2])
        elif kind == "end":
            break
        else:
            raise ParseError(f"unknown record {kind!r} in conic program dump")

    def mat(blk):
        if not blk["trip"]:
            return sp.csr_matrix((blk["rows"], n))
        r, col, v = zip(*blk["trip"])
        return sp.csr_matrix((v, (r, col)), shape=(blk["rows"], n))

    b = ProgramBuilder()
    b.add_variables(n)
    b.add_objective(np.arange(n), c)
    b.offset = float(offset)
    if "eq" in blocks:
        b.add_eq(mat(blocks["eq"]), blocks["eq"]["rhs"])
    if "le" in blocks:
        b.add_le(mat(blocks["le"]), blocks["le"]["rhs"])
    for cone in cones:
        b.add_soc(mat(cone), cone["g"], cone["h"], cone["k"])
    return b.build()
