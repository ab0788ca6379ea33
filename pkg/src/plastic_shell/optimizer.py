"""Outer Gauss-Newton loop over the plastic strain field.

Minimizes ||L p||^2 + alpha * E_l(x(p)) + beta * ||p - p0||^2 where x(p) is
the static equilibrium for targets built from p. The landmark term couples
to p through the equilibrium sensitivity J = dx/dp obtained by implicit
differentiation of the force balance; the normal system folds the rank
3*(#landmarks) term into the sparse factorization of L^T L + beta I by the
Woodbury identity. After every accepted step the rest shape is replaced by
the deformed positions and p is reset to p0, so each iteration linearizes
about a fresh identity.
"""

import time

import numpy as np
from scipy import sparse
from scipy.optimize import minimize_scalar
from scipy.sparse import linalg as spla

from .equilibrium import (AnchorSet, EquilibriumError, pick_default_anchors,
                          solve_equilibrium)
from .laplacian import assemble_operator
from .mesh import TriangleMesh
from .plasticity import (PlasticStrainField, build_targets, field_violations,
                         identity_packed, target_jacobian)
from .shell_energy import MaterialParams, _Assembly


class OptimizerError(RuntimeError):
    pass


class LandmarkSet:
    """Vertex indices with target positions."""

    def __init__(self, indices, targets):
        self.indices = np.asarray(indices, dtype=np.int64).ravel()
        self.targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
        if len(self.indices) != len(self.targets):
            raise OptimizerError("landmark indices and targets differ in length")
        if len(np.unique(self.indices)) != len(self.indices):
            raise OptimizerError("duplicate landmark indices")
        if not np.all(np.isfinite(self.targets)):
            raise OptimizerError("non-finite landmark targets")

    def __len__(self):
        return len(self.indices)

    def validate_for(self, mesh):
        if len(self.indices) and (self.indices.min() < 0
                                  or self.indices.max() >= mesh.n_vertices):
            raise OptimizerError("landmark index out of range")


class OptimizerConfig:
    def __init__(self, alpha=1e3, beta=1e-2, lambda_theta=1.0, lambda_s=1.0,
                 max_iterations=30, stop_eps=0.5, eta_max=2.0,
                 line_search_probes=12, probe_inner_iterations=25):
        if min(alpha, beta, lambda_theta, lambda_s) < 0:
            raise OptimizerError("weights must be non-negative")
        if max_iterations < 1:
            raise OptimizerError("max_iterations must be at least 1")
        if eta_max <= 0:
            raise OptimizerError("eta_max must be positive")
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.lambda_theta = float(lambda_theta)
        self.lambda_s = float(lambda_s)
        self.max_iterations = int(max_iterations)
        self.stop_eps = float(stop_eps)
        self.eta_max = float(eta_max)
        self.line_search_probes = int(line_search_probes)
        # probes further than this many warm-started Newton steps score
        # +inf, bounding line-search cost; the next outer iteration reaches
        # the same region from a closer rest shape instead
        self.probe_inner_iterations = int(probe_inner_iterations)


class IterationRow:
    fields = ("iteration", "objective", "eps_land_max", "eps_land_mean",
              "dp_norm", "eta", "inner_iterations", "wall_seconds")

    def __init__(self, iteration, objective, eps_land_max, eps_land_mean,
                 dp_norm, eta, inner_iterations, wall_seconds):
        self.iteration = iteration
        self.objective = objective
        self.eps_land_max = eps_land_max
        self.eps_land_mean = eps_land_mean
        self.dp_norm = dp_norm
        self.eta = eta
        self.inner_iterations = inner_iterations
        self.wall_seconds = wall_seconds

    def astuple(self):
        return tuple(getattr(self, f) for f in self.fields)


class IterationTrace:
    def __init__(self):
        self.rows = []

    def append(self, row):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def __getitem__(self, i):
        return self.rows[i]


def landmark_energy(x, landmarks):
    d = x[landmarks.indices] - landmarks.targets
    return float(np.sum(d * d))


def landmark_error(x, landmarks, bbox_diag):
    """(max, mean) distance to targets, normalized so bbox_diag reads 100."""
    if not len(landmarks):
        return 0.0, 0.0
    d = np.linalg.norm(x[landmarks.indices] - landmarks.targets, axis=1)
    scale = 100.0 / bbox_diag
    return float(d.max() * scale), float(d.mean() * scale)


def objective(p, x, L, config, landmarks, p0=None):
    """||L p||^2 + alpha * E_l(x) + beta * ||p - p0||^2."""
    if p0 is None:
        p0 = identity_packed(len(p) // 6)
    lp = L.operator @ p
    dp = p - p0
    return (float(lp @ lp) + config.alpha * landmark_energy(x, landmarks)
            + config.beta * float(dp @ dp))


class SensitivityOperator:
    """J = dx/dp realized on a frozen factorization of the stiffness."""

    def __init__(self, lu, Fp, n_vertices):
        self._lu = lu
        self._Fp = Fp
        self.shape = (3 * n_vertices, Fp.shape[1])

    def matvec(self, dp):
        return self._lu.solve(self._Fp @ np.asarray(dp, dtype=np.float64))

    def landmark_rows(self, vertex_indices):
        """Dense (3k, 6m) block of J restricted to the given vertices."""
        vertex_indices = np.asarray(vertex_indices, dtype=np.int64)
        rows = (3 * vertex_indices[:, None] + np.arange(3)).ravel()
        E = np.zeros((self.shape[0], len(rows)))
        E[rows, np.arange(len(rows))] = 1.0
        Y = self._lu.solve(E)
        return np.asarray(Y.T @ self._Fp)


def sensitivity(mesh, p, x, mat, anchors):
    """Implicit-function sensitivity of equilibrium positions wrt p.

    Assumes x is an equilibrium for p. The stiffness (SPD-projected elastic
    Hessian plus the anchor penalty block) is factorized once; columns of
    df/dp = (df/dq)(dq/dp) are applied on demand.
    """
    field = PlasticStrainField.from_packed(p)
    targets = build_targets(mesh, field)
    w = anchors.resolved_weight(mat)
    n = mesh.n_vertices
    pen = np.zeros(3 * n)
    adof = (3 * anchors.indices[:, None] + np.arange(3)).ravel()
    pen[adof] = 2.0 * w
    asm = _Assembly(mesh, targets, mat, x)
    K = asm.hessian(project=False) + sparse.diags(pen)
    try:
        lu = spla.splu(K.tocsc(), permc_spec="MMD_AT_PLUS_A",
                       diag_pivot_thresh=0.0,
                       options=dict(SymmetricMode=True))
    except RuntimeError as exc:
        raise OptimizerError(f"singular stiffness: {exc}") from None
    Fp = (-asm.gradient_target_jacobian()) @ target_jacobian(mesh, field)
    return SensitivityOperator(lu, Fp, n)


def gauss_newton_step(mesh, p, x, L, config, landmarks, anchors, mat,
                      p0=None, sens=None):
    """Solve (L^T L + beta I + alpha U^T U) dp = -g/2, U = landmark rows of J.

    Returns (dp, g) with g the objective gradient at (p, x); the low-rank
    landmark term is folded in with the Woodbury identity against the
    sparse factorization of L^T L + beta I.
    """
    m = len(p) // 6
    if p0 is None:
        p0 = identity_packed(m)
    if sens is None:
        sens = sensitivity(mesh, p, x, mat, anchors)
    U = sens.landmark_rows(landmarks.indices)
    r = (x[landmarks.indices] - landmarks.targets).ravel()

    Lop = L.operator
    M = (Lop.T @ Lop + config.beta * sparse.identity(6 * m)).tocsc()
    try:
        lu = spla.splu(M)
    except RuntimeError as exc:
        raise OptimizerError(
            f"smoothness system not factorizable (beta = {config.beta}): "
            f"{exc}") from None

    g_half = Lop.T @ (Lop @ p) + config.beta * (p - p0) \
        + config.alpha * (U.T @ r)
    rhs = -g_half
    t1 = lu.solve(rhs)
    if len(landmarks):
        Vt = lu.solve(np.ascontiguousarray(U.T))
        C = np.eye(U.shape[0]) + config.alpha * (U @ Vt)
        y = np.linalg.solve(C, U @ t1)
        dp = t1 - config.alpha * (Vt @ y)
    else:
        dp = t1
    if not np.all(np.isfinite(dp)):
        raise OptimizerError("non-finite Gauss-Newton step")
    return dp, 2.0 * g_half


class LineSearchResult:
    def __init__(self, eta, positions, objective, inner_iterations,
                 rejected, n_probes):
        self.eta = eta
        self.positions = positions
        self.objective = objective
        self.inner_iterations = inner_iterations
        self.rejected = rejected
        self.n_probes = n_probes


def line_search_eta(mesh, p, dp, x, L, config, landmarks, anchors, mat,
                    p0=None, baseline=None, jdp=None):
    """Bounded Brent search for eta in [0, eta_max] minimizing the objective.

    Probes solve equilibrium for p + eta*dp; invalid fields and
    non-converged solves score +inf. Each probe warm-starts from the
    nearest already-solved eta, corrected by the first-order sensitivity
    prediction jdp = J dp when available. Probe solves are capped at
    config.probe_inner_iterations Newton steps, so etas the warm starts
    cannot reach cheaply score +inf and the search retreats instead of
    grinding. Returns the best probe; if nothing improves on the eta = 0
    objective the step is rejected.
    """
    if p0 is None:
        p0 = identity_packed(len(p) // 6)
    if baseline is None:
        baseline = objective(p, x, L, config, landmarks, p0)
    cache = {}
    solved = {0.0: x}
    lu_cache = {}
    if jdp is not None:
        jdp = np.asarray(jdp, dtype=np.float64).reshape(x.shape)

    def probe(eta, budget=None, fresh=False):
        eta = float(eta)
        if eta in cache:
            return cache[eta][0]
        p_try = p + eta * dp
        blocks = p_try.reshape(-1, 6)
        if len(field_violations(blocks[:, :3], blocks[:, 3:])):
            cache[eta] = (np.inf, None, 0)
            return np.inf
        # warm start: secant through the two nearest solved probes when eta
        # lies between them; extrapolating the secant outward tends to fold
        # the mesh, so outside the solved range start from the nearest
        # probe as-is. The eta = 0 tangent seeds the very first jump.
        # fresh probes ignore all of that and restart from the eta = 0
        # state with a clean factorization.
        etas = sorted(solved, key=lambda e: abs(e - eta))
        near = etas[0]
        warm = solved[near]
        if fresh:
            warm = solved[0.0]
        elif len(etas) > 1:
            e2 = etas[1]
            lo, hi = min(near, e2), max(near, e2)
            if hi - lo > 1e-9 and lo <= eta <= hi:
                warm = warm + ((eta - near) / (e2 - near)) * (solved[e2] - warm)
        elif jdp is not None:
            warm = warm + (eta - near) * jdp
        if budget is None:
            budget = config.probe_inner_iterations
        try:
            field = PlasticStrainField(blocks[:, :3], blocks[:, 3:],
                                       validate=False)
            targets = build_targets(mesh, field)
            res = solve_equilibrium(
                mesh, targets, anchors, mat, warm_start=warm,
                max_iterations=budget,
                lu_cache=None if fresh else lu_cache)
        except EquilibriumError:
            cache[eta] = (np.inf, None, 0)
            return np.inf
        if not res.converged:
            cache[eta] = (np.inf, None, res.iterations)
            return np.inf
        val = objective(p_try, res.positions, L, config, landmarks, p0)
        cache[eta] = (val, res.positions, res.iterations)
        solved[eta] = res.positions
        return val

    # xatol at half a percent of the range: the objective is flat near its
    # minimizer in eta, so tighter brackets buy nothing but probe solves.
    # Failed probes score +inf on purpose; silence the parabolic-fit noise.
    with np.errstate(invalid="ignore"):
        minimize_scalar(probe, bounds=(0.0, config.eta_max), method="bounded",
                        options={"maxiter": config.line_search_probes,
                                 "xatol": 5e-3 * config.eta_max})
    if not any(np.isfinite(v[0]) for v in cache.values()):
        # every capped probe ran out of budget; retreat toward eta = 0 with
        # full-budget restarts so a hard but sound step is not thrown away
        retry = min((e for e in cache if e > 0.0), default=None)
        if retry is not None:
            cache.pop(retry)
            for factor in (1.0, 0.25, 0.0625):
                if np.isfinite(probe(retry * factor, budget=200,
                                     fresh=True)):
                    break
    best_eta, (best_val, best_x, best_inner) = min(
        cache.items(), key=lambda kv: (kv[1][0], kv[0]))
    if not np.isfinite(best_val) or best_val >= baseline:
        return LineSearchResult(0.0, x, baseline, 0, True, len(cache))
    return LineSearchResult(best_eta, best_x, best_val, best_inner, False,
                            len(cache))


class OptimizeResult:
    """Final mesh plus per-iteration history and trace."""

    def __init__(self, mesh, fields, positions, trace, converged,
                 eps_land_max):
        self.mesh = mesh
        self.fields = fields
        self.positions = positions
        self.trace = trace
        self.converged = converged
        self.eps_land_max = eps_land_max


def optimize(mesh, landmarks, anchors=None, config=None, mat=None):
    """Run the outer loop until the landmark error drops under stop_eps.

    Each iteration: rebuild the Laplacian on the current rest shape, take a
    Gauss-Newton step from p0, line-search eta, accept the equilibrium of
    the best probe, then promote it to the next rest shape and reset p.
    The landmark error is normalized against the original bbox diagonal.
    """
    config = config or OptimizerConfig()
    landmarks.validate_for(mesh)
    if anchors is None:
        anchors = pick_default_anchors(landmarks, mesh)
    work = TriangleMesh(mesh.rest_positions.copy(), mesh.triangles,
                        mesh.current_positions.copy())
    if mat is None:
        mat = MaterialParams.default_for(work)
    diag0 = work.bbox_diagonal("rest")
    m = work.n_triangles
    p0 = identity_packed(m)

    trace = IterationTrace()
    fields, positions = [], []
    t_start = time.perf_counter()

    field0 = PlasticStrainField.identity(m)
    targets = build_targets(work, field0)
    res = solve_equilibrium(work, targets, anchors, mat,
                            warm_start=work.current_positions)
    if not res.converged:
        raise OptimizerError(
            "initial equilibrium did not converge "
            f"(residual {res.residual:.3e})")
    x = res.positions
    L = assemble_operator(work, config.lambda_theta, config.lambda_s)
    obj = objective(p0, x, L, config, landmarks, p0)
    eps_max, eps_mean = landmark_error(x, landmarks, diag0)
    trace.append(IterationRow(0, obj, eps_max, eps_mean, 0.0, 0.0,
                              res.iterations,
                              time.perf_counter() - t_start))
    converged = eps_max < config.stop_eps
    last_logged = obj

    it = 0
    while not converged and it < config.max_iterations:
        it += 1
        t_it = time.perf_counter()
        # rest-shape update: previous equilibrium becomes the reference
        work = TriangleMesh(x.copy(), work.triangles, x.copy())
        L = assemble_operator(work, config.lambda_theta, config.lambda_s)
        targets = build_targets(work, field0)
        res = solve_equilibrium(work, targets, anchors, mat, warm_start=x)
        if not res.converged:
            break
        x = res.positions
        baseline = objective(p0, x, L, config, landmarks, p0)
        baseline = min(baseline, last_logged)

        sens = sensitivity(work, p0, x, mat, anchors)
        dp, g = gauss_newton_step(work, p0, x, L, config, landmarks,
                                  anchors, mat, p0=p0, sens=sens)
        ls = line_search_eta(work, p0, dp, x, L, config, landmarks,
                             anchors, mat, p0=p0, baseline=baseline,
                             jdp=sens.matvec(dp))
        if ls.rejected:
            break
        x = ls.positions
        work.current_positions = x.copy()
        accepted = PlasticStrainField.from_packed(p0 + ls.eta * dp,
                                                  validate=False)
        fields.append(accepted)
        positions.append(x.copy())
        eps_max, eps_mean = landmark_error(x, landmarks, diag0)
        trace.append(IterationRow(it, ls.objective, eps_max, eps_mean,
                                  float(np.linalg.norm(dp)), ls.eta,
                                  ls.inner_iterations,
                                  time.perf_counter() - t_it))
        last_logged = ls.objective
        converged = eps_max < config.stop_eps

    final = TriangleMesh(work.rest_positions.copy(), work.triangles,
                         x.copy())
    return OptimizeResult(final, fields, positions, trace, converged,
                          eps_max)
