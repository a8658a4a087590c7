"""Finite-difference solver on the periodic grid for harmonic, resolvent and (k,j)-problems.

Unknowns live on U nodes ``(i h, j h)``, ``h = 1/m``.  The operator ``lam u - Lap(u)/2``
uses the Shortley-Weller stencil: an arm that enters a trap is cut at the exact circle
intersection and closed with the trap's boundary value.  The matrix is an M-matrix, so
the discrete maximum principle holds.  A sparse LU factorization is computed once per
``(grid, lam)`` and reused for every right-hand side.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import TWO_PI, Scene, TorusPoint, wrap
from .trapfield import QUADRATURE_M, BoundaryMeasure, FieldSpec, exit_measure, glue_measures, v_thresholds

SNAP = 0.01         # nodes within SNAP*h outside a circle are treated as boundary nodes
FIT_RADIUS = 3.0    # flux fit neighbourhood, in units of h
MAGIC = b"TFLD"


class SolverError(RuntimeError):
    pass


@dataclass(eq=False)
class Grid:
    """Node classification: ``label[i, j] = 0`` for U nodes, ``k`` for nodes of trap ``k``."""

    scene: Scene
    m: int
    label: np.ndarray
    sd: np.ndarray

    @property
    def h(self) -> float:
        return 1.0 / self.m

    @cached_property
    def u_index(self) -> np.ndarray:
        """Flat index of each U node into the unknown vector, ``-1`` elsewhere."""
        idx = np.full(self.m * self.m, -1, dtype=np.int64)
        mask = self.label.reshape(-1) == 0
        idx[mask] = np.arange(mask.sum())
        return idx.reshape(self.m, self.m)

    @property
    def n_unknowns(self) -> int:
        return int((self.label == 0).sum())

    def trap_count(self, k: int) -> int:
        return int((self.label == k).sum())

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        ax = np.arange(self.m) * self.h
        return np.meshgrid(ax, ax, indexing="ij")

    @cached_property
    def _ops(self) -> dict:
        return {}


def build_grid(scene: Scene, m: int) -> Grid:
    if scene.n:
        need = math.ceil(8.0 / (2.0 * float(scene.radii.min())))
        if m < need:
            raise SolverError(f"resolution too coarse: m={m}, need m >= {need}")
    h = 1.0 / m
    X, Y = np.meshgrid(np.arange(m) * h, np.arange(m) * h, indexing="ij")
    label = np.zeros((m, m), dtype=np.int64)
    sd = np.full((m, m), np.inf)
    for t in scene.traps:
        dx = X - t.center.x
        dy = Y - t.center.y
        dx -= np.floor(dx + 0.5)
        dy -= np.floor(dy + 0.5)
        s = np.hypot(dx, dy) - t.radius
        label[s <= SNAP * h] = t.id
        sd = np.minimum(sd, s)
    return Grid(scene, m, label, sd)


def _arm(px, py, dirx, diry, trap) -> float:
    """Distance from node ``p`` along a unit axis direction to the circle of ``trap``."""
    dx = px - trap.center.x
    dy = py - trap.center.y
    dx -= math.floor(dx + 0.5)
    dy -= math.floor(dy + 0.5)
    b = dx * dirx + dy * diry
    c = dx * dx + dy * dy - trap.radius**2
    disc = b * b - c
    if disc < 0.0:
        return math.nan
    return -b - math.sqrt(disc)


@dataclass
class _Operator:
    A: sp.csc_matrix
    B: np.ndarray          # (n_traps, n_unknowns): coefficient of b_k in the right-hand side
    lu: object


def _assemble(grid: Grid, lam: float) -> _Operator:
    m, h = grid.m, grid.h
    lab = grid.label
    idx = grid.u_index
    n_u = grid.n_unknowns
    n_t = grid.scene.n
    ii, jj = np.nonzero(lab == 0)
    rows, cols, vals = [], [], []
    diag = np.full(n_u, float(lam))
    B = np.zeros((max(n_t, 1), n_u))
    me = idx[ii, jj]
    dirs = ((1, 0), (-1, 0), (0, 1), (0, -1))
    arms = {}
    for di, dj in dirs:
        ni = (ii + di) % m
        nj = (jj + dj) % m
        nl = lab[ni, nj]
        a = np.full(ii.size, h)
        cut = np.flatnonzero(nl > 0)
        for q in cut:
            t = grid.scene.trap(int(nl[q]))
            s = _arm(ii[q] * h, jj[q] * h, float(di), float(dj), t)
            if not (s > 0.0) or s > h * (1 + 1e-12):
                s = h
            a[q] = s
        arms[(di, dj)] = (a, nl, idx[ni, nj])
    for axis in (((1, 0), (-1, 0)), ((0, 1), (0, -1))):
        (a_p, l_p, n_p), (a_m, l_m, n_m) = arms[axis[0]], arms[axis[1]]
        # -1/2 u_xx with u_xx = 2/(a+ + a-) ((u+ - u)/a+ - (u - u-)/a-)
        w_p = 1.0 / (a_p * (a_p + a_m))
        w_m = 1.0 / (a_m * (a_p + a_m))
        diag += w_p + w_m
        for w, l, n in ((w_p, l_p, n_p), (w_m, l_m, n_m)):
            inner = l == 0
            rows.append(me[inner])
            cols.append(n[inner])
            vals.append(-w[inner])
            for k in range(1, n_t + 1):
                sel = l == k
                if sel.any():
                    np.add.at(B[k - 1], me[sel], w[sel])
    rows.append(me)
    cols.append(me)
    vals.append(diag)
    A = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n_u, n_u))
    if lam == 0.0 and n_t == 0:
        raise SolverError("lam = 0 on the bare torus needs a mean-zero gauge (unsupported)")
    return _Operator(A, B[:n_t], spla.splu(A, permc_spec="COLAMD"))


def _operator(grid: Grid, lam: float) -> _Operator:
    key = float(lam)
    ops = grid._ops
    if key not in ops:
        ops[key] = _assemble(grid, key)
    return ops[key]


# -- fields ---------------------------------------------------------------------

@dataclass
class ScalarField:
    grid: Grid
    values: np.ndarray
    residual: float = 0.0

    def __call__(self, pts) -> np.ndarray:
        return interpolate(self, pts)

    @property
    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))

    def to_csv(self, path) -> None:
        X, Y = self.grid.coords()
        I, J = np.meshgrid(np.arange(self.grid.m), np.arange(self.grid.m), indexing="ij")
        with open(path, "w") as fh:
            fh.write("# i: node index along x\n# j: node index along y\n# x: node x coordinate [torus units]\n"
                     "# y: node y coordinate [torus units]\n# value: field value at the node\n")
            fh.write("i,j,x,y,value\n")
            for row in zip(I.ravel(), J.ravel(), X.ravel(), Y.ravel(), self.values.ravel()):
                fh.write("%d,%d,%.17g,%.17g,%.17g\n" % row)

    def to_bytes(self) -> bytes:
        head = MAGIC + struct.pack("<II", self.grid.m, self.grid.scene.n) + b"\0" * 4
        return head + np.ascontiguousarray(self.values, dtype="<f8").tobytes()

    def save_binary(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())


def read_binary(path) -> tuple[int, int, np.ndarray]:
    raw = open(path, "rb").read()
    if raw[:4] != MAGIC:
        raise SolverError("not a field file")
    m, n = struct.unpack("<II", raw[4:12])
    vals = np.frombuffer(raw[16:], dtype="<f8").reshape(m, m)
    return m, n, vals


def interpolate(u: ScalarField, pts) -> np.ndarray:
    """Periodic bilinear interpolation of nodal values."""
    p = np.atleast_2d(np.asarray([TorusPoint.of(q).as_array() for q in np.atleast_2d(pts)]))
    m = u.grid.m
    gx = p[:, 0] * m
    gy = p[:, 1] * m
    i0 = np.floor(gx).astype(np.int64)
    j0 = np.floor(gy).astype(np.int64)
    fx = gx - i0
    fy = gy - j0
    i0 %= m
    j0 %= m
    i1 = (i0 + 1) % m
    j1 = (j0 + 1) % m
    v = u.values
    return ((1 - fx) * (1 - fy) * v[i0, j0] + fx * (1 - fy) * v[i1, j0]
            + (1 - fx) * fy * v[i0, j1] + fx * fy * v[i1, j1])


def _fill(grid: Grid, u_vec: np.ndarray, b: Sequence[float]) -> np.ndarray:
    out = np.empty((grid.m, grid.m))
    mask = grid.label == 0
    out[mask] = u_vec
    for k in range(1, grid.scene.n + 1):
        out[grid.label == k] = b[k - 1]
    return out


def _sample(grid: Grid, psi) -> np.ndarray:
    """Right-hand side on U nodes from a constant, a node array or a callable ``psi(X, Y)``."""
    if psi is None:
        return np.zeros(grid.n_unknowns)
    if callable(psi):
        X, Y = grid.coords()
        vals = np.asarray(psi(X, Y), dtype=float) * np.ones((grid.m, grid.m))
    else:
        vals = np.asarray(psi, dtype=float) * np.ones((grid.m, grid.m))
    return vals[grid.label == 0]


def _residual(op: _Operator, x: np.ndarray, rhs: np.ndarray) -> float:
    scale = max(1.0, float(np.max(np.abs(rhs))) if rhs.size else 1.0)
    return float(np.max(np.abs(op.A @ x - rhs))) / scale if rhs.size else 0.0


def dirichlet_solve(grid: Grid, b: Sequence[float] | None = None, psi=None, lam: float = 0.0
                    ) -> ScalarField:
    """Solve ``lam u - Lap(u)/2 = psi`` in U with ``u = b_k`` on trap ``k``."""
    n = grid.scene.n
    b = np.zeros(n) if b is None else np.asarray(b, dtype=float)
    if b.size != n:
        raise SolverError(f"need {n} boundary values, got {b.size}")
    op = _operator(grid, lam)
    rhs = _sample(grid, psi) + (b @ op.B if n else 0.0)
    x = op.lu.solve(rhs)
    return ScalarField(grid, _fill(grid, x, b), _residual(op, x, rhs))


def _unit_solves(grid: Grid, lam: float) -> np.ndarray:
    """``h_k`` on U nodes for every trap (rows)."""
    cache = grid._ops.setdefault(("h", float(lam)), {})
    if "h" not in cache:
        op = _operator(grid, lam)
        cache["h"] = np.array([op.lu.solve(op.B[k].copy()) for k in range(grid.scene.n)])
    return cache["h"]


# -- boundary flux --------------------------------------------------------------

def _flux_stencil(grid: Grid, k: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Weights ``w`` on U nodes with ``du/d(rho) ~ sum w (u_node - b_k)`` at the boundary point.

    Least-squares fit of ``u - b_k = rho (a1 + a2 rho + a3 tau + a4 tau^2 + a5 rho tau)``
    in local normal/tangential coordinates over U nodes within ``FIT_RADIUS h``.
    """
    trap = grid.scene.trap(k)
    h, m = grid.h, grid.m
    bx = trap.center.x + trap.radius * math.cos(theta)
    by = trap.center.y + trap.radius * math.sin(theta)
    rr = FIT_RADIUS * h
    i_lo, i_hi = math.floor((bx - rr) * m), math.ceil((bx + rr) * m)
    j_lo, j_hi = math.floor((by - rr) * m), math.ceil((by + rr) * m)
    I, J = np.meshgrid(np.arange(i_lo, i_hi + 1), np.arange(j_lo, j_hi + 1), indexing="ij")
    I, J = I.ravel(), J.ravel()
    px, py = I * h, J * h
    near = np.hypot(px - bx, py - by) <= rr
    I, J, px, py = I[near], J[near], px[near], py[near]
    lab = grid.label[I % m, J % m]
    foreign = lab[(lab > 0) & (lab != k)]
    if foreign.size:
        raise SolverError(f"flux probes of trap {k} at theta={theta:.4f} enter trap {int(foreign[0])}: "
                          "trap too close / grid too coarse")
    keep = lab == 0
    I, J, px, py = I[keep], J[keep], px[keep], py[keep]
    dx, dy = px - trap.center.x, py - trap.center.y
    rho = np.hypot(dx, dy) - trap.radius
    tau = np.arctan2(dy, dx) - theta
    tau = (tau + math.pi) % TWO_PI - math.pi
    tau *= trap.radius
    if rho.size < 8:
        raise SolverError(f"flux fit of trap {k}: too few U nodes (grid too coarse)")
    r_, t_ = rho / h, tau / h
    X = np.column_stack([r_, r_ * r_, r_ * t_, r_ * t_ * t_, r_ * r_ * t_])
    w = np.linalg.pinv(X)[0] / h
    return (I % m) * m + (J % m), w


def _flux_matrix(grid: Grid, k: int, theta: np.ndarray) -> tuple[sp.csr_matrix, np.ndarray]:
    """Rows map nodal values to ``<grad u, n>`` at each angle; second term multiplies ``b_k``."""
    cache = grid._ops.setdefault(("flux", k), {})
    key = theta.tobytes()
    if key not in cache:
        rows, cols, vals, const = [], [], [], np.zeros(theta.size)
        for r, th in enumerate(theta):
            flat, w = _flux_stencil(grid, k, float(th))
            # n points into the trap: <grad u, n> = -du/d(rho)
            rows.append(np.full(flat.size, r))
            cols.append(flat)
            vals.append(-w)
            const[r] = w.sum()
        F = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(theta.size, grid.m * grid.m))
        cache[key] = (F, const)
    return cache[key]


def flux_integral(u: ScalarField, k: int, nu: BoundaryMeasure, M: int = QUADRATURE_M) -> float:
    """``int <grad u, n> nu(d theta)`` over the boundary of trap ``k`` (n into the trap)."""
    grid = u.grid
    th, w = nu.quadrature(M)
    F, const = _flux_matrix(grid, k, np.ascontiguousarray(th, dtype=float))
    bk = _boundary_value(u, k)
    local = F @ u.values.reshape(-1) + const * bk
    return float(w @ local)


def _boundary_value(u: ScalarField, k: int) -> float:
    vals = u.values[u.grid.label == k]
    return float(vals[0]) if vals.size else 0.0


def _unit_weights(w: np.ndarray) -> np.ndarray:
    """Normalize to unit mass and round to 40 mantissa bits.

    The flux constraints are homogeneous in nu; rounding makes ``c * nu`` and ``nu``
    produce identical weights, hence bitwise-identical constants.
    """
    w = np.asarray(w, dtype=float) / float(np.sum(w))
    mant, ex = np.frexp(w)
    return np.ldexp(np.round(mant * 2.0**40) / 2.0**40, ex)


def _flux_rows(grid: Grid, lam: float, nus: Sequence[BoundaryMeasure], idx: Sequence[int],
               M: int = QUADRATURE_M):
    """Flux functional of trap ``i`` (for ``i`` in idx) as a linear map on U-node vectors."""
    out = []
    mask = (grid.label == 0).reshape(-1)
    for i in idx:
        th, w = nus[i - 1].quadrature(M)
        w = _unit_weights(w)
        F, const = _flux_matrix(grid, i, np.ascontiguousarray(th, dtype=float))
        row = np.asarray(w @ F).reshape(-1)
        trap_part = row[grid.label.reshape(-1) == i].sum() + float(w @ const)
        out.append((row[mask], row, trap_part))
    return out


# -- (k,j)-problem ------------------------------------------------------------

@dataclass
class KJSolution:
    u: ScalarField
    k: int
    j: int
    constants: np.ndarray
    flux_residuals: np.ndarray
    residual: float

    def at(self, pts) -> np.ndarray:
        return interpolate(self.u, pts)


def _kj_core(grid: Grid, k: int, j: int, nus: Sequence[BoundaryMeasure], lam: float = 0.0,
             f_tilde: np.ndarray | None = None, data: np.ndarray | None = None):
    """Superpose ``u0 + sum_{i in free} c_i h_i`` with zero nu_i-flux on the free traps."""
    n = grid.scene.n
    H = _unit_solves(grid, lam)
    free = list(range(1, k))
    if data is None:
        data = np.zeros(n)
        data[j - 1] = 1.0
    u0 = (data @ H if n else np.zeros(grid.n_unknowns))
    if f_tilde is not None:
        u0 = u0 + f_tilde
    rows = _flux_rows(grid, lam, nus, free)
    # flux of a U-vector x with trap values t: row_u @ x + sum over traps of the trap-node
    # weights; for trap i only its own nodes can appear in its fit, each carrying t_i
    def flux(i_pos, vec, tvals):
        row_u, _, trap_part = rows[i_pos]
        return float(row_u @ vec) + trap_part * tvals[free[i_pos] - 1]

    nf = len(free)
    Mx = np.zeros((nf, nf))
    rhs = np.zeros(nf)
    for a in range(nf):
        rhs[a] = -flux(a, u0, data)
        for b_ in range(nf):
            e = np.zeros(n)
            e[free[b_] - 1] = 1.0
            Mx[a, b_] = flux(a, H[free[b_] - 1], e)
    if nf:
        if not np.all(np.isfinite(Mx)) or abs(np.linalg.det(Mx)) < 1e-300 or \
                np.linalg.cond(Mx) > 1e12:
            raise SolverError("singular flux constraint matrix (grid defect)")
        c = np.linalg.solve(Mx, rhs)
    else:
        c = np.zeros(0)
    vec = u0 + (c @ H[[i - 1 for i in free]] if nf else 0.0)
    tvals = data.copy()
    for a, i in enumerate(free):
        tvals[i - 1] = c[a]
    res = np.array([flux(a, vec, tvals) for a in range(nf)])
    return vec, tvals, c, res


def solve_kj(grid: Grid, k: int, j: int, nus: Sequence[BoundaryMeasure]) -> KJSolution:
    """``(k,j)``-problem on U with traps in their scene order (1 = shallowest)."""
    n = grid.scene.n
    if not (1 <= k <= n and k <= j <= n):
        raise SolverError(f"need 1 <= k <= j <= n={n}, got k={k}, j={j}")
    if len(nus) < k - 1:
        raise SolverError("glue measures missing for constrained traps")
    vec, tvals, c, res = _kj_core(grid, k, j, nus)
    op = _operator(grid, 0.0)
    rhs = tvals @ op.B
    return KJSolution(ScalarField(grid, _fill(grid, vec, tvals)), k, j, c, res,
                      _residual(op, vec, rhs))


@dataclass
class ResolventSolution:
    u: ScalarField
    constants: np.ndarray
    flux_residuals: np.ndarray


def resolvent_solve(grid: Grid, lam: float, psi, nus: Sequence[BoundaryMeasure]) -> ResolventSolution:
    """``lam f - Af = psi`` as ``f = f_tilde + sum_k c_k h_k`` with zero nu_k-flux on every trap."""
    if not lam > 0:
        raise SolverError("resolvent needs lam > 0")
    n = grid.scene.n
    op = _operator(grid, lam)
    rhs = _sample(grid, psi)
    f_t = op.lu.solve(rhs)
    vec, tvals, c, res = _kj_core(grid, n + 1, 0, nus, lam=lam, f_tilde=f_t, data=np.zeros(n)) \
        if n else (f_t, np.zeros(0), np.zeros(0), np.zeros(0))
    return ResolventSolution(ScalarField(grid, _fill(grid, vec, tvals),
                                         _residual(op, vec, rhs + (tvals @ op.B if n else 0.0))),
                             c, res)


# -- metastable profile ---------------------------------------------------------

@dataclass
class MetastableProfile:
    lam: float
    k: int
    order: tuple[int, ...]
    probs: np.ndarray
    constants: np.ndarray

    def by_trap(self) -> np.ndarray:
        """Probabilities indexed by original trap id (column ``id - 1``)."""
        out = np.zeros_like(self.probs)
        for new, old in enumerate(self.order):
            out[:, old - 1] = self.probs[:, new]
        return out


def metastable_profile(spec: FieldSpec, lam: float, points, m: int = 256,
                       mus: Sequence[BoundaryMeasure] | None = None, margin: float = 0.01,
                       grid: Grid | None = None) -> MetastableProfile:
    """Limit distribution over trap neighbourhoods at time ``exp(lam / eps)``.

    Columns of ``probs`` follow the ascending-depth relabeling in ``order``
    (``order[c]`` is the original id of column ``c``).
    """
    scene = spec.scene
    n = scene.n
    ladder = v_thresholds(spec)
    vals = np.asarray(ladder.values)
    k = ladder.window(lam)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    probs = np.zeros((pts.shape[0], n))
    if k == n + 1:
        if lam - vals[-1] < margin * vals[-1]:
            raise SolverError("lambda too close to threshold V_n")
        probs[:, n - 1] = 1.0
        return MetastableProfile(lam, k, ladder.order, probs, np.zeros((0, 0)))
    lo = vals[k - 2] if k >= 2 else 0.0
    hi = vals[k - 1]
    if min(lam - lo, hi - lam) < margin * (hi - lo):
        raise SolverError(f"lambda too close to threshold (window [{lo:.6g}, {hi:.6g}])")
    relabeled = Scene.disks([scene.trap(o).center.as_array() for o in ladder.order],
                            [scene.trap(o).radius for o in ladder.order])
    if mus is None:
        mus = [exit_measure(spec, o) for o in range(1, n + 1)]
    nus_orig = glue_measures(spec, mus)
    nus = [nus_orig[o - 1] for o in ladder.order]
    g = grid if grid is not None else build_grid(relabeled, m)
    consts = np.zeros((k - 1, n - k + 1))
    fields = []
    for j in range(k, n + 1):
        sol = solve_kj(g, k, j, nus)
        consts[:, j - k] = sol.constants
        fields.append(sol.u)
    for r, p in enumerate(pts):
        kk, d = _owner(relabeled, p)
        if kk and d <= 0.0:
            if kk < k:
                probs[r, k - 1:] = consts[kk - 1]
            else:
                probs[r, kk - 1] = 1.0
        else:
            probs[r, k - 1:] = [float(interpolate(f, p)[0]) for f in fields]
    return MetastableProfile(lam, k, ladder.order, probs, consts)


def _owner(scene: Scene, p) -> tuple[int, float]:
    from .geometry import nearest_trap
    return nearest_trap(p, scene)


def harmonic_measure(grid: Grid, points) -> np.ndarray:
    """Probability of first hitting each trap, by row per point."""
    H = _unit_solves(grid, 0.0)
    out = []
    for k in range(grid.scene.n):
        b = np.zeros(grid.scene.n)
        b[k] = 1.0
        out.append(interpolate(ScalarField(grid, _fill(grid, H[k], b)), points))
    return np.column_stack(out)
