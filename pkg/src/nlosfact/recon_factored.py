"""Joint recovery of albedo, visibility and normals by alternating minimization.

The data term ||tau - A(V, n) rho||^2 is a convex quadratic in rho with (V, n)
fixed and in V with (rho, n) fixed; the normal subproblem is smooth but
nonconvex in the angles. Each outer iteration runs an ADMM albedo solve, a
projected-gradient visibility solve and a quasi-Newton normal solve.

Everything except the albedo step only touches voxels with nonzero albedo,
since paths through empty voxels carry no flux and have zero gradient.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import optimize

from .core import AlbedoVolume, NormalField, TransientImage, VisibilityField
from .forward import FactoredModel, TransportOperator, gather_paths, path_table, scatter_paths
from .recon_linear import LinearSolverConfig, admm_solve, linear_objective, tv_norm

log = logging.getLogger(__name__)

STEP_RULES = ("fixed", "backtracking", "barzilai_borwein")


class MemoryBudgetError(MemoryError):
    pass


@dataclass(frozen=True)
class FactoredSolverConfig:
    outer_iterations: int = 5
    albedo_inner_iterations: int = 20
    visibility_gradient_steps: int = 10
    normal_solver_iterations: int = 20
    normal_smoothness: float = 10.0  # weight of the neighbor-difference prior on normals
    normal_init_spread: float = 0.0  # half-angle (rad) of the random initial cone around -z
    step_length_rule: str = "barzilai_borwein"
    initial_step: float | None = None  # None: exact line minimizer along the first gradient
    rng_seed: int = 0
    estimate_normals: bool = True
    linear_config: LinearSolverConfig = field(default_factory=LinearSolverConfig)
    armijo_c: float = 1e-4
    armijo_shrink: float = 0.5
    memory_budget_bytes: int = 4 * 2**30

    def __post_init__(self):
        if self.outer_iterations < 1:
            raise ValueError("outer_iterations must be >= 1")
        if self.step_length_rule not in STEP_RULES:
            raise ValueError(f"step_length_rule must be one of {STEP_RULES}")
        if not (np.isfinite(self.normal_smoothness) and self.normal_smoothness >= 0):
            raise ValueError("normal_smoothness must be finite and >= 0")
        if not 0.0 <= self.normal_init_spread <= np.pi / 2:
            raise ValueError("normal_init_spread must lie in [0, pi/2]")
        if self.initial_step is not None and not self.initial_step > 0:
            raise ValueError("initial_step must be > 0")
        if self.step_length_rule == "fixed" and self.initial_step is None:
            raise ValueError("the fixed step rule needs initial_step")
        if isinstance(self.linear_config, dict):
            object.__setattr__(self, "linear_config", LinearSolverConfig(**self.linear_config))

    @property
    def albedo_config(self) -> LinearSolverConfig:
        return replace(self.linear_config, iterations=self.albedo_inner_iterations)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class FactoredEstimate:
    albedo: AlbedoVolume
    normals: NormalField | None
    visibility: VisibilityField
    objective_trace: list[float]
    diagnostics: list[str] = field(default_factory=list)


class _Paths:
    """Path quantities restricted to voxels with nonzero albedo."""

    def __init__(self, albedo: AlbedoVolume, visibility: VisibilityField, normals):
        g = albedo.geometry
        self.geometry = g
        self.cols = np.flatnonzero(albedo.flat)
        self.table = path_table(g).columns(self.cols)
        self.rho = albedo.flat[self.cols]
        self.vis = visibility.data[:, self.cols]
        self.normals = normals
        if normals is None:
            self.cos = None
            self.shade = 1.0
        else:
            self.cos = np.einsum("sjk,jk->sj", self.table.direction, normals.vectors[self.cols])
            self.shade = np.maximum(self.cos, 0.0)

    def coefficient(self) -> np.ndarray:
        """Flux per unit visibility: falloff * shade * rho."""
        return self.table.attenuation * self.shade * self.rho

    def residual(self, tau: np.ndarray, vis=None) -> np.ndarray:
        vis = self.vis if vis is None else vis
        return tau.ravel() - scatter_paths(self.table, self.coefficient() * vis)


def _tau(tau) -> np.ndarray:
    return tau.data if isinstance(tau, TransientImage) else np.asarray(tau, dtype=float)


def _check_budget(geometry, config: FactoredSolverConfig):
    need = geometry.n_samples * geometry.n_voxels * 8
    if need > config.memory_budget_bytes:
        raise MemoryBudgetError(
            f"dense visibility needs {need / 2**30:.2f} GiB, budget is "
            f"{config.memory_budget_bytes / 2**30:.2f} GiB")


def data_term(tau, albedo, normals, visibility) -> float:
    r = _Paths(albedo, visibility, normals).residual(_tau(tau))
    return float(r @ r)


def objective(tau, albedo: AlbedoVolume, normals: NormalField | None,
              visibility: VisibilityField, linear_config: LinearSolverConfig | None = None,
              normal_smoothness: float = 0.0) -> float:
    """Data misfit plus the albedo priors and, optionally, the normal prior."""
    cfg = linear_config or LinearSolverConfig()
    value = data_term(tau, albedo, normals, visibility)
    rho = albedo.data
    value += cfg.sparsity_weight * float(np.abs(rho).sum()) + cfg.tv_weight * tv_norm(rho)
    return value + normal_prior(albedo, normals, normal_smoothness)


def grad_visibility(tau, albedo, normals, visibility) -> np.ndarray:
    """Gradient of the data term w.r.t. every visibility entry, shape (S, J)."""
    paths = _Paths(albedo, visibility, normals)
    back = gather_paths(paths.table, paths.residual(_tau(tau)))
    out = np.zeros(visibility.data.shape)
    out[:, paths.cols] = -2.0 * back * paths.coefficient()
    return out


def _normal_grad_cols(paths: _Paths, back: np.ndarray) -> np.ndarray:
    # the clamp max(0, w.n) has zero subgradient where w.n < 0
    g_n = -2.0 * back * paths.table.attenuation * paths.vis * paths.rho * (paths.cos > 0)
    n = paths.normals
    du, dv = n.jacobians()
    d = paths.table.direction
    gu = np.einsum("sj,sjk,jk->j", g_n, d, du[paths.cols])
    gv = np.einsum("sj,sjk,jk->j", g_n, d, dv[paths.cols])
    return np.stack([gu, gv], axis=1)


def grad_normals(tau, albedo, normals: NormalField, visibility) -> np.ndarray:
    """Gradient w.r.t. the normal angles, shape (*voxel_grid, 2) holding (d/du, d/dv)."""
    if normals is None:
        raise ValueError("isotropic model has no normals to differentiate")
    paths = _Paths(albedo, visibility, normals)
    back = gather_paths(paths.table, paths.residual(_tau(tau)))
    out = np.zeros((albedo.geometry.n_voxels, 2))
    out[paths.cols] = _normal_grad_cols(paths, back)
    return out.reshape(albedo.geometry.voxel_grid + (2,))


# --------------------------------------------------------------------------
# visibility step


def _visibility_descent(tau, paths: _Paths, config: FactoredSolverConfig, steps: int):
    """Projected gradient on V restricted to occupied columns; returns (V_cols, trace)."""
    tau = _tau(tau)
    coef = paths.coefficient()
    V = paths.vis.copy()

    def evaluate(V):
        r = tau.ravel() - scatter_paths(paths.table, coef * V)
        return float(r @ r), r

    J, r = evaluate(V)
    trace = [J]
    rule = config.step_length_rule
    prev = None
    for _ in range(steps):
        G = -2.0 * gather_paths(paths.table, r) * coef
        # components pinned at a bound and pushed outward do not move
        free = np.where(((V <= 0) & (G > 0)) | ((V >= 1) & (G < 0)), 0.0, G)
        gg = float(np.vdot(free, free))
        if gg == 0.0:
            break
        if rule == "fixed":
            alpha = config.initial_step
        elif rule == "barzilai_borwein" and prev is not None:
            s, y = V - prev[0], G - prev[1]
            sy = float(np.vdot(s, y))
            alpha = float(np.vdot(s, s)) / sy if sy > 0 else None
        else:
            alpha = None
        if alpha is None:
            if config.initial_step is not None and prev is None:
                alpha = config.initial_step
            else:
                Fd = scatter_paths(paths.table, coef * free)
                alpha = 0.5 * gg / float(Fd @ Fd)

        if rule == "fixed":
            V_new = np.clip(V - alpha * G, 0.0, 1.0)
            J_new, r_new = evaluate(V_new)
        else:
            while True:
                V_new = np.clip(V - alpha * G, 0.0, 1.0)
                J_new, r_new = evaluate(V_new)
                if J_new <= J + config.armijo_c * float(np.vdot(G, V_new - V)):
                    break
                alpha *= config.armijo_shrink
                if alpha < 1e-14:
                    log.info("visibility step length underflow; keeping current iterate")
                    return V, trace
        prev = (V, G)
        V, J, r = V_new, J_new, r_new
        trace.append(J)
    return V, trace


def update_visibility(tau, albedo: AlbedoVolume, normals, visibility: VisibilityField,
                      config: FactoredSolverConfig | None = None, steps: int | None = None
                      ) -> VisibilityField:
    config = config or FactoredSolverConfig()
    steps = config.visibility_gradient_steps if steps is None else steps
    out = np.clip(visibility.data, 0.0, 1.0)
    paths = _Paths(albedo, VisibilityField(out), normals)
    if paths.cols.size:
        out = out.copy()
        out[:, paths.cols], _ = _visibility_descent(tau, paths, config, steps)
    return VisibilityField(out)


# --------------------------------------------------------------------------
# normal step


def _neighbor_pairs(geometry, cols: np.ndarray) -> np.ndarray:
    """Index pairs (into ``cols``) of face-adjacent occupied voxels."""
    shape = geometry.voxel_grid
    pos = np.full(geometry.n_voxels, -1)
    pos[cols] = np.arange(cols.size)
    grid = pos.reshape(shape)
    pairs = []
    for axis in range(3):
        a = np.moveaxis(grid, axis, 0)
        lo, hi = a[:-1].ravel(), a[1:].ravel()
        keep = (lo >= 0) & (hi >= 0)
        pairs.append(np.stack([lo[keep], hi[keep]], axis=1))
    return np.concatenate(pairs)


def normal_prior(albedo: AlbedoVolume, normals: NormalField, weight: float) -> float:
    """weight * sum of squared normal differences over adjacent occupied voxels."""
    if normals is None or weight == 0:
        return 0.0
    cols = np.flatnonzero(albedo.flat)
    pairs = _neighbor_pairs(albedo.geometry, cols)
    n = normals.vectors[cols]
    return weight * float(np.sum((n[pairs[:, 0]] - n[pairs[:, 1]]) ** 2))


def update_normals(tau, albedo: AlbedoVolume, normals: NormalField, visibility: VisibilityField,
                   config: FactoredSolverConfig | None = None, iterations: int | None = None
                   ) -> NormalField:
    """Limited-memory quasi-Newton over the angles of occupied voxels."""
    config = config or FactoredSolverConfig()
    iterations = config.normal_solver_iterations if iterations is None else iterations
    tau = _tau(tau)
    base = _Paths(albedo, visibility, normals)
    cols = base.cols
    if cols.size == 0:
        return normals
    u0 = normals.angles_u.ravel().copy()
    v0 = normals.angles_v.ravel().copy()
    k = cols.size
    d = base.table.direction
    weight = base.table.attenuation * base.vis * base.rho
    smooth = config.normal_smoothness
    pairs = _neighbor_pairs(albedo.geometry, cols) if smooth else None

    def fun(x):
        u, v = x[:k], x[k:]
        sv = np.sin(v)
        n = np.stack([np.cos(u) * sv, np.sin(u) * sv, np.cos(v)], axis=1)
        cos = np.einsum("sjk,jk->sj", d, n)
        r = tau.ravel() - scatter_paths(base.table, weight * np.maximum(cos, 0.0))
        back = gather_paths(base.table, r)
        g_n = -2.0 * back * weight * (cos > 0)
        cu, su, cv = np.cos(u), np.sin(u), np.cos(v)
        du = np.stack([-su * sv, cu * sv, np.zeros(k)], axis=1)
        dv = np.stack([cu * cv, su * cv, -sv], axis=1)
        gu = np.einsum("sj,sjk,jk->j", g_n, d, du)
        gv = np.einsum("sj,sjk,jk->j", g_n, d, dv)
        f = float(r @ r)
        if smooth and pairs.size:
            diff = n[pairs[:, 0]] - n[pairs[:, 1]]
            f += smooth * float(np.sum(diff**2))
            g = np.zeros((k, 3))
            np.add.at(g, pairs[:, 0], 2 * smooth * diff)
            np.add.at(g, pairs[:, 1], -2 * smooth * diff)
            gu += np.einsum("jk,jk->j", g, du)
            gv += np.einsum("jk,jk->j", g, dv)
        return f, np.concatenate([gu, gv])

    x0 = np.concatenate([u0[cols], v0[cols]])
    f0, g0 = fun(x0)
    if not np.any(g0):
        return normals
    res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B",
                            options={"maxcor": 5, "maxiter": iterations})
    if res.status not in (0, 1):
        log.info("normal solver stopped early: %s", res.message)
    if not np.all(np.isfinite(res.x)) or res.fun > f0:
        return normals
    u0[cols], v0[cols] = res.x[:k], res.x[k:]
    shape = normals.angles_u.shape
    return NormalField(u0.reshape(shape), v0.reshape(shape))


# --------------------------------------------------------------------------
# alternating minimization


def random_init(geometry, seed, estimate_normals=True, normal_spread=0.0):
    """Random albedo in [0, 1] and random normals tilted at most ``normal_spread`` from -z.

    ``normal_spread = pi/2`` draws from the whole wall-facing hemisphere.
    """
    rng = np.random.default_rng(seed)
    rho = AlbedoVolume(geometry, rng.uniform(0.0, 1.0, geometry.voxel_grid))
    normals = None
    if estimate_normals:
        u = rng.uniform(0.0, 2 * np.pi, geometry.voxel_grid)
        v = np.pi - rng.uniform(0.0, normal_spread, geometry.voxel_grid)
        normals = NormalField(u, v)
    return rho, normals


def albedo_step(tau, albedo, normals, visibility, config: FactoredSolverConfig, state=None):
    """ADMM albedo solve with the current factors, never worse than its start.

    Returns the new albedo and the ADMM state to resume from next time.
    """
    model = FactoredModel(albedo.geometry, visibility, normals)
    op = TransportOperator(model, assemble=True)
    cfg = config.albedo_config
    tau_a = _tau(tau)
    rho, info = admm_solve(op, tau_a, cfg, x0=albedo.data, state=state)
    candidate = AlbedoVolume(albedo.geometry, np.maximum(rho, 0.0))
    w = _smoothness(config, normals)
    before = linear_objective(op, tau_a, albedo.data, cfg) + normal_prior(albedo, normals, w)
    after = linear_objective(op, tau_a, candidate.data, cfg) + normal_prior(candidate, normals, w)
    return (albedo if after > before else candidate), info["state"]


def _smoothness(config: FactoredSolverConfig, normals) -> float:
    return config.normal_smoothness if normals is not None and config.estimate_normals else 0.0


def als_factorize(tau, geometry=None, config: FactoredSolverConfig | None = None,
                  init: tuple | None = None) -> FactoredEstimate:
    """Alternate albedo, visibility and normal updates for ``outer_iterations`` rounds.

    ``init`` optionally supplies (albedo, normals, visibility) starting values;
    by default visibility starts at one and albedo/normals are random.
    """
    config = config or FactoredSolverConfig()
    geometry = geometry or tau.geometry
    _check_budget(geometry, config)
    tau_a = _tau(tau)
    if np.any(tau_a < 0):
        raise ValueError("transient must be nonnegative")
    if init is None:
        albedo, normals = random_init(geometry, config.rng_seed, config.estimate_normals,
                                      config.normal_init_spread)
        visibility = VisibilityField.ones(geometry)
    else:
        albedo, normals, visibility = init
    trace, notes = [], []
    state = None
    for k in range(config.outer_iterations):
        albedo, state = albedo_step(tau_a, albedo, normals, visibility, config, state)
        visibility = update_visibility(tau_a, albedo, normals, visibility, config)
        if normals is not None and config.estimate_normals:
            normals = update_normals(tau_a, albedo, normals, visibility, config)
        J = objective(tau_a, albedo, normals, visibility, config.linear_config,
                      _smoothness(config, normals))
        if not np.isfinite(J):
            raise FloatingPointError(f"objective became non-finite at outer iteration {k}")
        trace.append(J)
        log.debug("outer iteration %d: J = %.6e", k, J)
        if len(trace) > 1 and J > trace[-2] * (1 + 1e-6):
            notes.append(f"objective increased at outer iteration {k}")
    return FactoredEstimate(albedo, normals, visibility, trace, notes)
