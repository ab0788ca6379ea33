"""Command-line driver: run a landmark job or check the derivative stack.

Subcommands:
  plastic-shell run --config job.cfg
  plastic-shell check-gradients --mesh mesh.obj

The config file is flat ``key = value`` text; see parse_config for the
accepted keys. Relative paths are resolved against the config file's
directory so job folders can be moved around.
"""

import argparse
import csv
import os
import sys
import time

# honor the thread cap before numpy pulls in its BLAS pools
_cap = os.environ.get("PLASTIC_SHELL_THREADS")
if _cap:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _cap)

import numpy as np

from .equilibrium import AnchorSet, EquilibriumError
from .mesh import MeshError, TriangleMesh, load_obj, save_obj
from .optimizer import (IterationRow, LandmarkSet, OptimizerConfig,
                        OptimizerError, optimize)
from .plasticity import (FieldError, PlasticStrainField, build_targets,
                         save_field)
from .shell_energy import (EnergyError, MaterialParams, elastic_force,
                           elastic_hessian_spd, force_target_jacobian,
                           total_energy)


class CliError(Exception):
    """Error with the pipeline stage it belongs to; printed as one line."""

    def __init__(self, stage, message):
        super().__init__(message)
        self.stage = stage


# keys with config-file type and JobConfig attribute
_PATH_KEYS = {"mesh": "mesh_path", "landmarks": "landmarks_path",
              "anchors": "anchors_path", "output_dir": "output_dir"}
_INT_KEYS = {"snapshot_every", "max_iterations"}
_FLOAT_KEYS = {"E", "nu", "h", "alpha", "beta", "lambda_theta", "lambda_s",
               "stop_eps"}


class JobConfig:
    """Parsed job description; see parse_config for field semantics."""

    def __init__(self, mesh_path, landmarks_path, output_dir,
                 anchors_path=None, snapshot_every=1,
                 E=1.0, nu=0.3, h=None, **optimizer_overrides):
        self.mesh_path = mesh_path
        self.landmarks_path = landmarks_path
        self.anchors_path = anchors_path
        self.output_dir = output_dir
        self.snapshot_every = int(snapshot_every)
        self.E = float(E)
        self.nu = float(nu)
        self.h = None if h is None else float(h)
        self.optimizer_overrides = optimizer_overrides
        if self.snapshot_every < 1:
            raise CliError("config", "snapshot_every must be at least 1")
        # surface range errors at parse time, not mid-pipeline
        try:
            OptimizerConfig(**optimizer_overrides)
        except OptimizerError as exc:
            raise CliError("config", str(exc)) from None
        if not self.E > 0:
            raise CliError("config", f"E must be positive, got {self.E}")
        if not -1.0 < self.nu < 0.5:
            raise CliError("config",
                           f"nu must be in (-1, 0.5), got {self.nu}")
        if self.h is not None and not self.h > 0:
            raise CliError("config", f"h must be positive, got {self.h}")


def parse_config(path):
    """Read a flat key = value job file into a JobConfig.

    Keys: mesh, landmarks, output_dir (required); anchors, snapshot_every,
    E, nu, h, alpha, beta, lambda_theta, lambda_s, max_iterations,
    stop_eps (optional). '#' starts a comment. Input paths must exist.
    """
    if not os.path.isfile(path):
        raise CliError("config", f"config file not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    raw = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError("config",
                               f"{path}:{ln}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _PATH_KEYS and key not in _INT_KEYS \
                    and key not in _FLOAT_KEYS:
                raise CliError("config", f"{path}:{ln}: unknown key '{key}'")
            if key in raw:
                raise CliError("config",
                               f"{path}:{ln}: duplicate key '{key}'")
            if not value:
                raise CliError("config", f"{path}:{ln}: empty value")
            raw[key] = (ln, value)

    kwargs = {}
    for key, (ln, value) in raw.items():
        if key in _PATH_KEYS:
            kwargs[_PATH_KEYS[key]] = os.path.join(base, value)
        else:
            caster = int if key in _INT_KEYS else float
            try:
                kwargs[key] = caster(value)
            except ValueError:
                raise CliError(
                    "config",
                    f"{path}:{ln}: {key} needs a{'n integer' if key in _INT_KEYS else ' number'}, got '{value}'"
                ) from None
    for required in ("mesh", "landmarks", "output_dir"):
        if _PATH_KEYS[required] not in kwargs:
            raise CliError("config", f"{path}: missing required key "
                                     f"'{required}'")
    for key in ("mesh", "landmarks", "anchors"):
        p = kwargs.get(_PATH_KEYS[key])
        if p is not None and not os.path.isfile(p):
            raise CliError("config", f"{key} file not found: {p}")
    return JobConfig(**kwargs)


def _parse_vertex_targets(path, stage):
    """Shared `index tx ty tz` reader for landmark and anchor files."""
    entries = []
    seen = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise CliError(stage, f"{path}:{ln}: expected "
                                      f"'index tx ty tz', got {len(parts)} fields")
            try:
                idx = int(parts[0])
                xyz = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise CliError(stage, f"{path}:{ln}: {exc}") from None
            if idx < 0:
                raise CliError(stage,
                               f"{path}:{ln}: negative vertex index {idx}")
            if not all(np.isfinite(xyz)):
                raise CliError(stage,
                               f"{path}:{ln}: non-finite target position")
            if idx in seen:
                raise CliError(stage, f"{path}:{ln}: duplicate vertex index "
                                      f"{idx} (first used on line {seen[idx]})")
            seen[idx] = ln
            entries.append((idx, xyz))
    if not entries:
        raise CliError(stage, f"{path}: no entries")
    indices = np.array([e[0] for e in entries], dtype=np.int64)
    positions = np.array([e[1] for e in entries], dtype=np.float64)
    return indices, positions


def parse_landmarks(path):
    """LandmarkSet from `index tx ty tz` lines (0-based vertex indices)."""
    indices, targets = _parse_vertex_targets(path, "landmarks")
    return LandmarkSet(indices, targets)


def parse_anchors(path):
    """AnchorSet from the same line format as landmarks."""
    indices, positions = _parse_vertex_targets(path, "anchors")
    try:
        return AnchorSet(indices, positions)
    except EquilibriumError as exc:
        raise CliError("anchors", str(exc)) from None


def _check_indices(indices, mesh, stage, path):
    bad = indices[indices >= mesh.n_vertices]
    if len(bad):
        raise CliError(stage, f"{path}: vertex index {int(bad[0])} out of "
                              f"range for mesh with {mesh.n_vertices} vertices")


def _write_report(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(IterationRow.fields)
        for row in rows:
            writer.writerow(row.astuple())


def _render_figures(rows, out_dir):
    """Convergence plots next to the CSV; Agg keeps this headless-safe."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    its = [r.iteration for r in rows]
    paths = []

    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 7), sharex=True)
    ax1.semilogy(its, [max(r.objective, 1e-300) for r in rows], "o-")
    ax1.set_ylabel("objective")
    ax1.grid(True, which="both", alpha=0.3)
    ax2.semilogy(its, [max(r.eps_land_max, 1e-300) for r in rows], "o-",
                 label="max")
    ax2.semilogy(its, [max(r.eps_land_mean, 1e-300) for r in rows], "s--",
                 label="mean")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("landmark error (bbox = 100)")
    ax2.grid(True, which="both", alpha=0.3)
    ax2.legend()
    fig.tight_layout()
    p = os.path.join(out_dir, "convergence.png")
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 7), sharex=True)
    ax1.plot(its, [r.eta for r in rows], "o-")
    ax1.set_ylabel("step size eta")
    ax1.grid(True, alpha=0.3)
    ax2.bar(its, [r.inner_iterations for r in rows], color="tab:gray")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("inner iterations")
    ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    p = os.path.join(out_dir, "steps.png")
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)
    return paths


def run(job):
    """Execute a job: optimize, then write meshes, checkpoint, and report."""
    try:
        mesh = load_obj(job.mesh_path)
    except (MeshError, OSError) as exc:
        raise CliError("mesh", str(exc)) from None

    landmarks = parse_landmarks(job.landmarks_path)
    _check_indices(landmarks.indices, mesh, "landmarks", job.landmarks_path)
    anchors = None
    if job.anchors_path is not None:
        anchors = parse_anchors(job.anchors_path)
        _check_indices(anchors.indices, mesh, "anchors", job.anchors_path)

    try:
        mat = MaterialParams.default_for(mesh, E=job.E, nu=job.nu, h=job.h)
    except EnergyError as exc:
        raise CliError("material", str(exc)) from None

    config = OptimizerConfig(**job.optimizer_overrides)
    try:
        result = optimize(mesh, landmarks, anchors=anchors, config=config,
                          mat=mat)
    except (OptimizerError, EquilibriumError, EnergyError, FieldError,
            MeshError) as exc:
        raise CliError("optimize", str(exc)) from None

    try:
        os.makedirs(job.output_dir, exist_ok=True)
        save_obj(result.mesh, os.path.join(job.output_dir, "final.obj"))
        n_acc = len(result.positions)
        for i, pos in enumerate(result.positions):
            it = i + 1
            if it % job.snapshot_every == 0 or it == n_acc:
                snap = TriangleMesh(pos, result.mesh.triangles)
                save_obj(snap, os.path.join(job.output_dir,
                                            f"iter_{it:03d}.obj"))
        field = (result.fields[-1] if result.fields
                 else PlasticStrainField.identity(mesh.n_triangles))
        save_field(field, os.path.join(job.output_dir, "plastic_field.txt"))
        _write_report(result.trace,
                      os.path.join(job.output_dir, "report.csv"))
    except OSError as exc:
        raise CliError("artifacts", str(exc)) from None
    try:
        _render_figures(result.trace, job.output_dir)
    except Exception as exc:
        raise CliError("figures", str(exc)) from None

    last = result.trace[-1]
    print(f"{job.output_dir}: {last.iteration} iterations, "
          f"eps_land_max {last.eps_land_max:.4g}, "
          f"converged {result.converged}")
    if not result.converged:
        print("warning: stopped before reaching stop_eps "
              f"({config.stop_eps})", file=sys.stderr)
    return 0


def check_gradients(mesh_path, n_configs=5, seed=0):
    """Finite-difference audits of the derivative stack on a given mesh.

    Checks the elastic force against central differences of the energy (on
    a sampled dof subset so large meshes stay affordable), the
    force/target Jacobian along random target directions, and the
    Gauss-Newton Hessian at a stress-free state where it is exact.
    """
    try:
        mesh = load_obj(mesh_path)
    except (MeshError, OSError) as exc:
        raise CliError("mesh", str(exc)) from None

    rng = np.random.default_rng(seed)
    mat = MaterialParams.default_for(mesh)
    diag = mesh.bbox_diagonal("rest")
    step = 1e-6 * diag
    n = mesh.n_vertices
    m = mesh.n_triangles
    n_dofs = min(3 * n, 90)
    failures = 0

    def report(name, err, tol):
        nonlocal failures
        ok = err < tol
        failures += 0 if ok else 1
        print(f"{name}: {'PASS' if ok else 'FAIL'} "
              f"(rel err {err:.3e}, tol {tol:.0e})")

    worst_g = 0.0
    worst_j = 0.0
    for _ in range(n_configs):
        theta = rng.normal(0.0, 0.05, (m, 3))
        s = np.tile([1.0, 1.0, 0.0], (m, 1)) + rng.normal(0.0, 0.03, (m, 3))
        field = PlasticStrainField(theta, s)
        targets = build_targets(mesh, field)
        x = mesh.rest_positions + rng.normal(0.0, 0.005 * diag, (n, 3))
        work = TriangleMesh(mesh.rest_positions, mesh.triangles, x)

        f = elastic_force(work, targets, mat)
        dofs = rng.choice(3 * n, size=n_dofs, replace=False)
        fd = np.zeros(n_dofs)
        flat = x.ravel()
        for k, dof in enumerate(dofs):
            for sign in (1.0, -1.0):
                xp = flat.copy()
                xp[dof] += sign * step
                probe = TriangleMesh(mesh.rest_positions, mesh.triangles,
                                     xp.reshape(n, 3))
                fd[k] += sign * total_energy(probe, targets, mat).total
        fd /= 2.0 * step
        scale = max(np.abs(fd).max(), 1e-30)
        worst_g = max(worst_g, np.abs(f[dofs] - fd).max() / scale)

        J = force_target_jacobian(work, targets, mat)
        dq = rng.normal(0.0, 1.0, 6 * m)
        dq *= 1e-7 / np.linalg.norm(dq)
        ap, bp = targets.abar_packed, targets.bbar_packed
        d6 = dq.reshape(m, 6)
        tp = type(targets)(ap + d6[:, :3], bp + d6[:, 3:], targets.nbar)
        tm = type(targets)(ap - d6[:, :3], bp - d6[:, 3:], targets.nbar)
        dfd = (elastic_force(work, tp, mat)
               - elastic_force(work, tm, mat)) / 2.0
        dan = J @ dq
        worst_j = max(worst_j,
                      np.abs(dan - dfd).max() / max(np.abs(dfd).max(), 1e-30))

    report("force gradient vs finite differences", worst_g, 1e-5)
    report("force/target jacobian vs finite differences", worst_j, 1e-4)

    # at identity plasticity and rest positions the state is stress free,
    # so the Gauss-Newton Hessian equals the true energy Hessian
    field = PlasticStrainField.identity(m)
    targets = build_targets(mesh, field)
    H = elastic_hessian_spd(mesh, targets, mat, state="rest")
    dx = rng.normal(0.0, 1.0, 3 * n)
    dx *= step / np.linalg.norm(dx)
    rp = TriangleMesh(mesh.rest_positions, mesh.triangles,
                      mesh.rest_positions + dx.reshape(n, 3))
    rm = TriangleMesh(mesh.rest_positions, mesh.triangles,
                      mesh.rest_positions - dx.reshape(n, 3))
    dfd = (elastic_force(rp, targets, mat)
           - elastic_force(rm, targets, mat)) / 2.0
    dan = H @ dx
    err = np.abs(dan - dfd).max() / max(np.abs(dfd).max(), 1e-30)
    report("hessian at stress-free state vs finite differences", err, 1e-4)

    return 1 if failures else 0


def _build_parser():
    ap = argparse.ArgumentParser(
        prog="plastic-shell",
        description="landmark-driven surface modeling with plastic "
                    "rotation-strain fields")
    sub = ap.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run a job from a config file")
    runp.add_argument("--config", required=True)
    chk = sub.add_parser("check-gradients",
                         help="finite-difference audit of the derivatives")
    chk.add_argument("--mesh", required=True)
    chk.add_argument("--configs", type=int, default=5)
    chk.add_argument("--seed", type=int, default=0)
    return ap


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return run(parse_config(args.config))
        return check_gradients(args.mesh, n_configs=args.configs,
                               seed=args.seed)
    except CliError as exc:
        print(f"error: {exc.stage}: {exc}", file=sys.stderr)
        return 2 if exc.stage in ("config", "landmarks", "anchors") else 1


if __name__ == "__main__":
    raise SystemExit(main())
