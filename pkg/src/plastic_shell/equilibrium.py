"""Static equilibrium under plastic targets and positional penalties.

Minimizes E_e(x; targets) + w ||C x - d||^2 by Newton iterations with the
SPD-projected stiffness, a direct sparse factorization per step, and an
Armijo backtracking line search. Anchors are quadratic penalties, not hard
constraints; well-posedness requires at least three non-collinear anchors
in every connected component so no rigid mode survives.
"""

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .mesh import MeshError
from .shell_energy import _Assembly


class EquilibriumError(RuntimeError):
    """Ill-posed anchors, singular stiffness, or non-finite state."""


class AnchorSet:
    """Penalty-constrained vertices.

    weight None defers to the dimensionally consistent default 1e3 * E * h
    chosen when a solve sees the material.
    """

    def __init__(self, indices, positions, weight=None):
        self.indices = np.asarray(indices, dtype=np.int64).ravel()
        self.positions = np.asarray(positions, dtype=np.float64)
        if self.positions.shape != (len(self.indices), 3):
            raise EquilibriumError(
                f"anchor positions shape {self.positions.shape} does not "
                f"match {len(self.indices)} indices")
        if len(np.unique(self.indices)) != len(self.indices):
            raise EquilibriumError("duplicate anchor indices")
        if not np.all(np.isfinite(self.positions)):
            raise EquilibriumError("non-finite anchor positions")
        self.weight = weight

    def __len__(self):
        return len(self.indices)

    def resolved_weight(self, mat):
        if self.weight is not None:
            return float(self.weight)
        return 1e3 * mat.E * mat.h


class EquilibriumResult:
    def __init__(self, positions, residual, iterations, converged):
        self.positions = positions
        self.residual = residual
        self.iterations = iterations
        self.converged = converged


def _collinear(points, scale):
    if len(points) < 3:
        return True
    c = points - points.mean(axis=0)
    sv = np.linalg.svd(c, compute_uv=False)
    return sv[1] <= 1e-9 * max(scale, sv[0])


def validate_anchors(mesh, anchors):
    """Every connected component needs >= 3 non-collinear anchors."""
    n = mesh.n_vertices
    if np.any(anchors.indices < 0) or np.any(anchors.indices >= n):
        raise EquilibriumError("anchor index out of range")
    comp = mesh.vertex_components()
    diag = mesh.bbox_diagonal("rest")
    for c in np.unique(comp):
        sel = comp[anchors.indices] == c
        if sel.sum() < 3:
            raise EquilibriumError(
                f"component {int(c)}: needs at least 3 anchors, "
                f"got {int(sel.sum())}")
        if _collinear(anchors.positions[sel], diag):
            raise EquilibriumError(
                f"component {int(c)}: anchors are collinear")


def default_force_tolerance(mesh, mat):
    return 1e-6 * mat.E * mat.h * mesh.bbox_diagonal("rest")


def _refined_step(force_at, x, g, lu, fd_step, char_force, tol):
    """Truncated CG step on differenced curvature, preconditioned by lu.

    The assembled stiffness drops the stress-dependent curvature block;
    near buckling states that underestimate makes full Newton steps
    overshoot until the line search crawls. Central differences of the
    analytic force supply the missing curvature matrix-free. CG stops on
    the usual forcing rule, or early at negative curvature (the partial
    iterate is still a descent direction); a probe that folds the mesh
    likewise just ends the inner iteration.
    """
    dx = np.zeros_like(g)
    resid = -g
    z = lu.solve(resid)
    newton = z
    p = z.copy()
    rz = resid @ z
    gnorm = np.linalg.norm(g)
    forcing = min(0.5, np.sqrt(gnorm / char_force))
    limit = max(forcing * gnorm, 0.01 * tol)
    for _ in range(40):
        h = fd_step / np.linalg.norm(p)
        dv = (h * p).reshape(-1, 3)
        try:
            Hp = (force_at(x + dv) - force_at(x - dv)) / (2.0 * h)
        except MeshError:
            break
        pHp = p @ Hp
        if pHp <= 0.0:
            break
        alpha = rz / pHp
        dx = dx + alpha * p
        resid = resid - alpha * Hp
        if np.linalg.norm(resid) <= limit:
            break
        z = lu.solve(resid)
        rz_new = resid @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return dx if dx.any() else newton


def _descend(mesh, targets, anchors, mat, x, tol, budget, lu_cache,
             refined):
    """One minimization pass; refined switches the step construction.

    refined=False takes factorized Newton steps with chord reuse of the
    factorization. refined=True refactors every iteration and uses the
    factorization only as a preconditioner for _refined_step.
    """
    n = mesh.n_vertices
    w = anchors.resolved_weight(mat)
    ai = anchors.indices
    ad = anchors.positions
    adof = (3 * ai[:, None] + np.arange(3)).ravel()

    def energy_at(pos):
        # folded trial geometry (undefined mid-edge normals) is rejectable,
        # not fatal: report +inf and let the line search back off
        try:
            asm = _Assembly(mesh, targets, mat, pos)
            em, eb = asm.energies()
        except MeshError:
            return np.inf, None
        return em.sum() + eb.sum() + w * np.sum((pos[ai] - ad) ** 2), asm

    pen = np.zeros(3 * n)
    pen[adof] = 2.0 * w

    def force_at(pos):
        f = _Assembly(mesh, targets, mat, pos).gradient()
        f[adof] += (2.0 * w) * (pos[ai] - ad).ravel()
        return f

    energy, asm = energy_at(x)
    if not np.isfinite(energy):
        raise EquilibriumError("non-finite energy at start")

    diag = mesh.bbox_diagonal("rest")
    char_force = mat.E * mat.h * diag
    iterations = 0
    lu = None if (lu_cache is None or refined) else lu_cache.get("lu")
    lu_age = 0
    best_since_fact = np.inf

    def refactor(at_asm, residual):
        nonlocal lu, lu_age, best_since_fact
        K = at_asm.hessian(project=False) + sparse.diags(pen)
        try:
            # K is SPD, so symmetric-mode ordering with no partial
            # pivoting roughly halves the factorization time
            lu = spla.splu(K.tocsc(), permc_spec="MMD_AT_PLUS_A",
                           diag_pivot_thresh=0.0,
                           options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise EquilibriumError(
                f"singular stiffness (anchors ill-posed?): {exc}"
            ) from None
        lu_age = 0
        best_since_fact = residual
        if lu_cache is not None:
            lu_cache["lu"] = lu

    def backtrack(dx, slope):
        t = 1.0
        while t >= 1e-12:
            x_try = x + t * dx.reshape(n, 3)
            e_try, asm_try = energy_at(x_try)
            if np.isfinite(e_try) and e_try <= energy + 1e-4 * t * slope:
                return t, x_try, e_try, asm_try
            t *= 0.5
        return None

    while True:
        g = asm.gradient()
        g[adof] += (2.0 * w) * (x[ai] - ad).ravel()
        residual = np.abs(g).max()
        if residual < tol:
            return EquilibriumResult(x, residual, iterations, True)
        if iterations >= budget:
            return EquilibriumResult(x, residual, iterations, False)

        if refined:
            refactor(asm, residual)
            dx = _refined_step(force_at, x, g, lu, 1e-7 * diag,
                               char_force, tol)
        else:
            # chord scheme: the factorization dominates the iteration cost,
            # so it is reused while the residual keeps contracting and
            # rebuilt only on clear divergence or plain age
            if (lu is None or lu_age >= 10
                    or residual > 2.0 * best_since_fact):
                refactor(asm, residual)
            else:
                lu_age += 1
                best_since_fact = min(best_since_fact, residual)
            dx = lu.solve(-g)
        if not np.all(np.isfinite(dx)):
            raise EquilibriumError("linear solve produced non-finite step")

        slope = g @ dx
        if slope >= 0.0:
            dx = -g
            slope = -(g @ g)
        hit = backtrack(dx, slope)
        if hit is None:
            return EquilibriumResult(x, residual, iterations, False)
        t, x_try, e_try, asm_try = hit
        if t < 1.0 and not refined:
            lu = None
        x, energy, asm = x_try, e_try, asm_try
        iterations += 1


def solve_equilibrium(mesh, targets, anchors, mat, warm_start=None,
                      tol_force=None, max_iterations=200, lu_cache=None):
    """Newton-solve f_e(x) + f_c(x) = 0.

    warm_start may be (n, 3) or flat; None starts from the rest positions.
    Returns an EquilibriumResult; running out of iterations or a collapsed
    line search reports converged=False instead of raising so trial states
    can be discarded by callers.

    lu_cache, an ordinary dict owned by the caller, carries the last
    stiffness factorization between solves of nearby states (line-search
    probes); a stale factorization only ever costs extra iterations, the
    Armijo test and the divergence-triggered refactor keep it safe.

    The solve runs in two phases. Factorized Newton steps handle the
    common case. When that phase stalls, the assembled stiffness is
    usually underestimating stress-dependent curvature (flat regions
    under compression), so the solve restarts with truncated-Newton
    steps built from differenced forces (_refined_step), which see the
    full curvature. The reported iteration count sums both phases and
    never exceeds max_iterations; budgets smaller than 26 leave no room
    for a second phase and keep single-phase behavior.
    """
    validate_anchors(mesh, anchors)
    n = mesh.n_vertices
    if warm_start is None:
        x0 = mesh.rest_positions.copy()
    else:
        x0 = np.asarray(warm_start, dtype=np.float64).reshape(n, 3).copy()
    if not np.all(np.isfinite(x0)):
        raise EquilibriumError("non-finite warm start")
    tol = (default_force_tolerance(mesh, mat) if tol_force is None
           else tol_force)

    plain_budget = (max_iterations if max_iterations <= 25
                    else max(25, max_iterations - 75))
    res = _descend(mesh, targets, anchors, mat, x0.copy(), tol,
                   plain_budget, lu_cache, refined=False)
    if res.converged or plain_budget >= max_iterations:
        return res
    spent = res.iterations
    rec = _descend(mesh, targets, anchors, mat, x0, tol,
                   max_iterations - spent, lu_cache, refined=True)
    if not rec.converged and res.residual < rec.residual:
        return EquilibriumResult(res.positions, res.residual,
                                 spent + rec.iterations, False)
    return EquilibriumResult(rec.positions, rec.residual,
                             spent + rec.iterations, rec.converged)


def pick_default_anchors(landmarks, mesh):
    """Anchors from stay-in-place landmarks, else farthest-point picks.

    Landmarks whose target coincides with the rest position (within
    1e-9 of the bbox diagonal) are taken verbatim. Otherwise each connected
    component gets three deterministic non-landmark vertices: the lowest
    eligible index, the vertex farthest from it, and the vertex farthest
    from the line through those two.
    """
    rest = mesh.rest_positions
    diag = mesh.bbox_diagonal("rest")
    li = np.asarray(landmarks.indices, dtype=np.int64)
    lt = np.asarray(landmarks.targets, dtype=np.float64)
    if len(li):
        still = np.linalg.norm(lt - rest[li], axis=1) <= 1e-9 * diag
        if np.any(still):
            return AnchorSet(li[still], lt[still])

    comp = mesh.vertex_components()
    taken = set(int(v) for v in li)
    picked = []
    for c in np.unique(comp):
        eligible = np.nonzero((comp == c))[0]
        eligible = np.array([v for v in eligible if int(v) not in taken])
        if len(eligible) < 3:
            raise EquilibriumError(
                f"component {int(c)}: fewer than 3 eligible anchor vertices")
        p = rest[eligible]
        v0 = 0
        v1 = int(np.argmax(np.linalg.norm(p - p[v0], axis=1)))
        axis = p[v1] - p[v0]
        axis_n = np.linalg.norm(axis)
        if axis_n <= 1e-14 * max(diag, 1.0):
            raise EquilibriumError(
                f"component {int(c)}: eligible vertices coincide")
        axis = axis / axis_n
        perp = np.linalg.norm(np.cross(p - p[v0], axis), axis=1)
        v2 = int(np.argmax(perp))
        if perp[v2] <= 1e-9 * diag:
            raise EquilibriumError(
                f"component {int(c)}: eligible vertices are collinear")
        picked.extend(int(eligible[v]) for v in (v0, v1, v2))
    picked = np.array(sorted(set(picked)), dtype=np.int64)
    return AnchorSet(picked, rest[picked])
