"""Outer Gauss-Newton loop: step algebra, line search, full optimize."""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import sparse

from plastic_shell.equilibrium import AnchorSet, solve_equilibrium
from plastic_shell.fixtures import plane_grid
from plastic_shell.laplacian import assemble_operator
from plastic_shell.optimizer import (LandmarkSet, OptimizerConfig,
                                     OptimizerError, gauss_newton_step,
                                     landmark_energy, landmark_error,
                                     line_search_eta, objective, optimize,
                                     sensitivity)
from plastic_shell.plasticity import (PlasticStrainField, build_targets,
                                      identity_packed, target_jacobian)
from plastic_shell.shell_energy import MaterialParams, _Assembly


def _corner_anchors(mesh):
    rest = mesh.rest_positions
    lo, hi = rest.min(axis=0), rest.max(axis=0)
    corners = [lo, [hi[0], lo[1], lo[2]], [lo[0], hi[1], lo[2]]]
    idx = [int(np.argmin(np.linalg.norm(rest - c, axis=1))) for c in corners]
    return AnchorSet(np.array(idx), rest[idx])


def _center_landmark(mesh, lift):
    rest = mesh.rest_positions
    center = rest.mean(axis=0)
    i = int(np.argmin(np.linalg.norm(rest - center, axis=1)))
    t = rest[i] + [0.0, 0.0, lift * mesh.bbox_diagonal("rest")]
    return LandmarkSet(np.array([i]), np.array([t]))


def test_landmark_set_validation(plane):
    with pytest.raises(OptimizerError, match="duplicate"):
        LandmarkSet(np.array([1, 1]), np.zeros((2, 3)))
    with pytest.raises(OptimizerError, match="length"):
        LandmarkSet(np.array([1]), np.zeros((2, 3)))
    with pytest.raises(OptimizerError, match="non-finite"):
        LandmarkSet(np.array([1]), np.array([[np.inf, 0.0, 0.0]]))
    lm = LandmarkSet(np.array([plane.n_vertices]), np.zeros((1, 3)))
    with pytest.raises(OptimizerError, match="out of range"):
        lm.validate_for(plane)


def test_optimizer_config_validation():
    with pytest.raises(OptimizerError, match="non-negative"):
        OptimizerConfig(beta=-1.0)
    with pytest.raises(OptimizerError, match="max_iterations"):
        OptimizerConfig(max_iterations=0)
    with pytest.raises(OptimizerError, match="eta_max"):
        OptimizerConfig(eta_max=0.0)
    c = OptimizerConfig(alpha=10.0, beta=0.5)
    assert c.alpha == 10.0 and c.beta == 0.5


def test_landmark_energy_and_error():
    x = np.zeros((4, 3))
    x[1] = [1.0, 0.0, 0.0]
    lm = LandmarkSet(np.array([0, 1]),
                     np.array([[0.0, 0.0, 0.0], [1.0, 0.5, 0.0]]))
    assert_allclose(landmark_energy(x, lm), 0.25)
    # scaled so the bbox diagonal reads 100
    mx, mean = landmark_error(x, lm, bbox_diag=2.0)
    assert_allclose([mx, mean], [25.0, 12.5])
    empty = LandmarkSet(np.array([], dtype=int), np.zeros((0, 3)))
    assert landmark_error(x, empty, 2.0) == (0.0, 0.0)


def test_objective_terms(plane):
    rng = np.random.default_rng(3)
    cfg = OptimizerConfig(alpha=7.0, beta=0.3)
    L = assemble_operator(plane, cfg.lambda_theta, cfg.lambda_s)
    m = plane.n_triangles
    p0 = identity_packed(m)
    lm = LandmarkSet(np.array([0]), plane.rest_positions[[0]] + 0.1)
    x = plane.rest_positions

    # at the reference field only the landmark term survives
    assert_allclose(objective(p0, x, L, cfg, lm),
                    cfg.alpha * landmark_energy(x, lm), rtol=1e-12)

    p = p0 + 0.01 * rng.standard_normal(6 * m)
    lp = L.operator @ p
    d = p - p0
    expect = lp @ lp + cfg.alpha * landmark_energy(x, lm) + cfg.beta * (d @ d)
    assert_allclose(objective(p, x, L, cfg, lm, p0), expect, rtol=1e-12)


def test_sensitivity_predicts_resolved_displacement():
    """J dp from the implicit-function operator tracks the actual change
    of the equilibrium under a small field perturbation."""
    mesh = plane_grid(4, 4)
    mat = MaterialParams.default_for(mesh)
    anchors = _corner_anchors(mesh)
    m = mesh.n_triangles
    p0 = identity_packed(m)
    x0 = solve_equilibrium(mesh, build_targets(
        mesh, PlasticStrainField.identity(m)), anchors, mat).positions
    sens = sensitivity(mesh, p0, x0, mat, anchors)
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(10):
        dp = rng.standard_normal(6 * m)
        dp *= 1e-5 / np.linalg.norm(dp)
        predicted = sens.matvec(dp).reshape(-1, 3)
        field = PlasticStrainField.from_packed(p0 + dp)
        moved = solve_equilibrium(mesh, build_targets(mesh, field), anchors,
                                  mat, warm_start=x0,
                                  tol_force=1e-10).positions
        actual = moved - x0
        worst = max(worst, np.abs(predicted - actual).max()
                    / np.abs(actual).max())
    assert worst < 1e-2


def test_gauss_newton_step_dense_oracle():
    """The Woodbury-folded solve equals a dense solve of the full normal
    system with explicitly materialized landmark sensitivity rows."""
    mesh = plane_grid(3, 3)
    mat = MaterialParams.default_for(mesh)
    anchors = _corner_anchors(mesh)
    cfg = OptimizerConfig(alpha=50.0, beta=0.1)
    m = mesh.n_triangles
    p0 = identity_packed(m)
    lm = LandmarkSet(np.array([4, 11]),
                     mesh.rest_positions[[4, 11]] + [0.0, 0.0, 0.03])
    L = assemble_operator(mesh, cfg.lambda_theta, cfg.lambda_s)
    field = PlasticStrainField.identity(m)
    targets = build_targets(mesh, field)
    x = solve_equilibrium(mesh, targets, anchors, mat).positions

    dp, g = gauss_newton_step(mesh, p0, x, L, cfg, lm, anchors, mat, p0=p0)

    # dense reconstruction of U = landmark rows of dx/dp
    n = mesh.n_vertices
    pen = np.zeros(3 * n)
    adof = (3 * anchors.indices[:, None] + np.arange(3)).ravel()
    pen[adof] = 2.0 * anchors.resolved_weight(mat)
    asm = _Assembly(mesh, targets, mat, x)
    K = (asm.hessian(project=False) + sparse.diags(pen)).toarray()
    Fp = (asm.gradient_target_jacobian()
          @ target_jacobian(mesh, field)).toarray()
    J = np.linalg.solve(K, -Fp)
    ldof = (3 * lm.indices[:, None] + np.arange(3)).ravel()
    U = J[ldof]
    r = (x[lm.indices] - lm.targets).ravel()

    Ld = L.operator.toarray()
    M = Ld.T @ Ld + cfg.beta * np.eye(6 * m) + cfg.alpha * (U.T @ U)
    g_half = Ld.T @ (Ld @ p0) + cfg.alpha * (U.T @ r)
    dp_dense = np.linalg.solve(M, -g_half)

    scale = np.abs(dp_dense).max()
    assert np.abs(dp - dp_dense).max() < 1e-9 * scale
    assert_allclose(g, 2.0 * g_half, rtol=1e-9, atol=1e-12 * scale)
    # descent direction for the linearized model
    assert g @ dp <= 0.0


def test_line_search_improves_or_rejects():
    mesh = plane_grid(4, 4)
    mat = MaterialParams.default_for(mesh)
    anchors = _corner_anchors(mesh)
    cfg = OptimizerConfig()
    m = mesh.n_triangles
    p0 = identity_packed(m)
    lm = _center_landmark(mesh, 0.1)
    L = assemble_operator(mesh)
    x = solve_equilibrium(mesh, build_targets(
        mesh, PlasticStrainField.identity(m)), anchors, mat).positions
    baseline = objective(p0, x, L, cfg, lm, p0)

    sens = sensitivity(mesh, p0, x, mat, anchors)
    dp, _ = gauss_newton_step(mesh, p0, x, L, cfg, lm, anchors, mat,
                              p0=p0, sens=sens)
    ls = line_search_eta(mesh, p0, dp, x, L, cfg, lm, anchors, mat,
                         p0=p0, baseline=baseline, jdp=sens.matvec(dp))
    assert not ls.rejected
    assert 0.0 < ls.eta <= cfg.eta_max
    assert ls.objective < baseline
    assert ls.n_probes <= cfg.line_search_probes + 3

    # a null direction cannot improve anything and must be rejected
    ls0 = line_search_eta(mesh, p0, np.zeros(6 * m), x, L, cfg, lm,
                          anchors, mat, p0=p0, baseline=baseline)
    assert ls0.rejected
    assert ls0.eta == 0.0
    assert_allclose(ls0.positions, x, atol=0)


def test_line_search_survives_invalid_directions():
    # a direction that breaks positive definiteness at large eta still
    # yields a valid small step
    mesh = plane_grid(3, 3)
    mat = MaterialParams.default_for(mesh)
    anchors = _corner_anchors(mesh)
    cfg = OptimizerConfig(eta_max=2.0)
    m = mesh.n_triangles
    p0 = identity_packed(m)
    lm = _center_landmark(mesh, 0.05)
    L = assemble_operator(mesh)
    x = solve_equilibrium(mesh, build_targets(
        mesh, PlasticStrainField.identity(m)), anchors, mat).positions
    dp = np.zeros(6 * m)
    dp[3::6] = -0.9            # s00 hits zero at eta ~ 1.1
    baseline = objective(p0, x, L, cfg, lm, p0)
    ls = line_search_eta(mesh, p0, dp, x, L, cfg, lm, anchors, mat,
                         p0=p0, baseline=baseline)
    # every probed eta either produced a valid field or scored +inf
    assert np.isfinite(ls.objective)
    if not ls.rejected:
        assert ls.eta < 1.1


def test_optimize_stationary_landmarks_is_a_no_op(plane):
    idx = np.array([0, 5, 30])
    lm = LandmarkSet(idx, plane.rest_positions[idx])
    res = optimize(plane, lm)
    assert res.converged
    assert res.eps_land_max == 0.0
    assert len(res.trace) == 1
    assert res.trace[0].iteration == 0
    assert res.fields == [] and res.positions == []
    assert_allclose(res.mesh.current_positions, plane.rest_positions,
                    atol=1e-12)


def test_optimize_lifts_center_landmark():
    mesh = plane_grid(6, 6)
    lm = _center_landmark(mesh, 0.15)
    anchors = _corner_anchors(mesh)
    res = optimize(mesh, lm, anchors=anchors)
    assert res.converged
    assert res.eps_land_max < 0.5
    assert len(res.fields) == len(res.positions) == len(res.trace) - 1

    objs = [row.objective for row in res.trace]
    assert all(b <= a + 1e-12 for a, b in zip(objs, objs[1:]))
    for row in res.trace:
        assert 0.0 <= row.eta <= 2.0
        assert row.inner_iterations >= 0
        assert row.wall_seconds >= 0.0
    # landmark error improves overall
    assert res.trace[-1].eps_land_max < res.trace[0].eps_land_max
    assert_allclose(res.mesh.current_positions, res.positions[-1], atol=0)
    # the input mesh is left untouched
    assert_allclose(mesh.current_positions, mesh.rest_positions, atol=0)


def test_optimize_respects_iteration_budget():
    mesh = plane_grid(5, 5)
    lm = _center_landmark(mesh, 0.3)
    cfg = OptimizerConfig(max_iterations=1, stop_eps=1e-6)
    res = optimize(mesh, lm, anchors=_corner_anchors(mesh), config=cfg)
    assert not res.converged
    assert res.trace[-1].iteration <= 1


def test_optimize_checks_landmark_range(plane):
    lm = LandmarkSet(np.array([plane.n_vertices + 3]), np.zeros((1, 3)))
    with pytest.raises(OptimizerError, match="out of range"):
        optimize(plane, lm)
