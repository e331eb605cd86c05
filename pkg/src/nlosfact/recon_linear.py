"""Linear inversions with visibility and normals held fixed.

Backprojection, Laplacian-filtered backprojection, and an ADMM solver for

    minimize ||tau - A rho||^2 + l1 ||rho||_1 + ltv TV(rho)   s.t. rho >= 0

where TV is the anisotropic l1 norm of forward differences.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .core import AlbedoVolume, TransientImage
from .forward import FactoredModel, TransportOperator

log = logging.getLogger(__name__)


class SolverDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class LinearSolverConfig:
    iterations: int = 150
    sparsity_weight: float = 0.1
    tv_weight: float = 0.001
    admm_penalty: float = 1.0
    cg_iterations: int = 10
    nonnegativity: bool = True

    def __post_init__(self):
        if self.iterations < 1 or self.cg_iterations < 1:
            raise ValueError("iteration counts must be >= 1")
        for name in ("sparsity_weight", "tv_weight"):
            w = getattr(self, name)
            if not (np.isfinite(w) and w >= 0):
                raise ValueError(f"{name} must be finite and >= 0")
        if not (np.isfinite(self.admm_penalty) and self.admm_penalty > 0):
            raise ValueError("admm_penalty must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def grad3(x: np.ndarray) -> np.ndarray:
    """Forward differences along each axis, zero at the far boundary; shape (3, *x.shape)."""
    g = np.zeros((3,) + x.shape)
    g[0, :-1] = x[1:] - x[:-1]
    g[1, :, :-1] = x[:, 1:] - x[:, :-1]
    g[2, :, :, :-1] = x[:, :, 1:] - x[:, :, :-1]
    return g


def grad3_adjoint(g: np.ndarray) -> np.ndarray:
    out = np.zeros(g.shape[1:])
    out[:-1] -= g[0, :-1]
    out[1:] += g[0, :-1]
    out[:, :-1] -= g[1, :, :-1]
    out[:, 1:] += g[1, :, :-1]
    out[:, :, :-1] -= g[2, :, :, :-1]
    out[:, :, 1:] += g[2, :, :, :-1]
    return out


def laplacian3(x: np.ndarray) -> np.ndarray:
    """6-neighbor Laplacian with zero-flux (reflecting) boundaries."""
    return -grad3_adjoint(grad3(x))


def tv_norm(x: np.ndarray) -> float:
    return float(np.abs(grad3(x)).sum())


def conjugate_residual(apply, b, x0, iterations, tol=0.0):
    """Conjugate residual iterations for a symmetric positive definite operator.

    Same Krylov space and cost as CG (one operator application per step), but
    each iterate minimizes the residual 2-norm, so the returned norms never
    increase. Index 0 of the norms is the starting residual.
    """
    x = x0.copy()
    r = b - apply(x)
    p = r.copy()
    Ar = apply(r)
    Ap = Ar.copy()
    rAr = float(np.vdot(r, Ar))
    norms = [float(np.linalg.norm(r))]
    for _ in range(iterations):
        ApAp = float(np.vdot(Ap, Ap))
        if norms[-1] <= tol or rAr <= 0.0 or ApAp == 0.0:
            break
        alpha = rAr / ApAp
        x += alpha * p
        r -= alpha * Ap
        norms.append(float(np.linalg.norm(r)))
        Ar = apply(r)
        rAr_new = float(np.vdot(r, Ar))
        beta = rAr_new / rAr
        p = r + beta * p
        Ap = Ar + beta * Ap
        rAr = rAr_new
    return x, norms


def linear_objective(op: TransportOperator, tau: np.ndarray, rho: np.ndarray,
                     config: LinearSolverConfig) -> float:
    resid = tau - op.matvec(rho)
    value = float(np.vdot(resid, resid))
    if config.sparsity_weight:
        value += config.sparsity_weight * float(np.abs(rho).sum())
    if config.tv_weight:
        value += config.tv_weight * tv_norm(rho)
    return value


def _as_array(tau) -> np.ndarray:
    return tau.data if isinstance(tau, TransientImage) else np.asarray(tau, dtype=float)


def admm_solve(op: TransportOperator, tau, config: LinearSolverConfig, x0=None, state=None):
    """ADMM core on raw arrays; returns (rho, info).

    Splits z1 = rho (l1 + nonnegativity) and z2 = D rho (TV). The x-update
    runs warm-started conjugate residual iterations on (2 A^T A + p I + p D^T D) x = rhs. Passing the
    ``info["state"]`` of a previous call resumes from its splitting and dual
    variables instead of restarting them.
    """
    tau = _as_array(tau)
    shape = op.geometry.voxel_grid
    p = config.admm_penalty
    use_tv = config.tv_weight > 0
    if state is not None:
        x, z1, u1, z2, u2 = (None if a is None else a.copy() for a in state)
    else:
        x = np.zeros(shape) if x0 is None else np.array(x0, dtype=float).reshape(shape)
        z1 = np.maximum(x, 0.0) if config.nonnegativity else x.copy()
        u1 = np.zeros(shape)
        z2 = u2 = None
    if use_tv and z2 is None:
        z2 = grad3(x)
        u2 = np.zeros_like(z2)

    def normal_op(v):
        out = 2.0 * op.rmatvec(op.matvec(v)) + p * v
        if use_tv:
            out += p * grad3_adjoint(grad3(v))
        return out

    atb = 2.0 * op.rmatvec(tau)
    r0 = tau - op.matvec(z1)
    fid0 = float(np.vdot(r0, r0))
    # a warm start can begin near zero misfit; growth is judged against the
    # worse of the start point and the all-zero volume
    guard = 10.0 * max(fid0, float(np.vdot(tau, tau)))
    history = []
    cg_norms = []
    for it in range(config.iterations):
        rhs = atb + p * (z1 - u1)
        if use_tv:
            rhs += p * grad3_adjoint(z2 - u2)
        x, norms = conjugate_residual(normal_op, rhs, x, config.cg_iterations)
        cg_norms.append(norms)

        v1 = x + u1
        z1 = soft_threshold(v1, config.sparsity_weight / p)
        if config.nonnegativity:
            z1 = np.maximum(z1, 0.0)
        u1 += x - z1
        if use_tv:
            dx = grad3(x)
            z2 = soft_threshold(dx + u2, config.tv_weight / p)
            u2 += dx - z2

        resid = tau - op.matvec(z1)
        fid = float(np.vdot(resid, resid))
        history.append(fid)
        if fid > guard:
            raise SolverDivergenceError(
                f"ADMM data fidelity grew from {fid0:.3e} to {fid:.3e} at iteration {it}")
    info = {"fidelity": history, "cg_residuals": cg_norms, "initial_fidelity": fid0,
            "state": (x, z1, u1, z2, u2)}
    return z1, info


def admm_linear_solve(model: FactoredModel, tau, config: LinearSolverConfig | None = None,
                      x0=None) -> AlbedoVolume:
    config = config or LinearSolverConfig()
    op = TransportOperator(model, assemble=True)
    rho, _ = admm_solve(op, tau, config, x0)
    return AlbedoVolume(model.geometry, np.maximum(rho, 0.0) if config.nonnegativity else rho)


def backproject(tau, model: FactoredModel | None = None) -> AlbedoVolume:
    """A^T tau under the unoccluded, isotropic model, clamped at zero."""
    if model is None:
        model = FactoredModel.unoccluded(tau.geometry)
    bp = TransportOperator(model).rmatvec(_as_array(tau))
    return AlbedoVolume(model.geometry, np.maximum(bp, 0.0))


def filtered_backproject(tau, threshold_quantile: float = 0.0,
                         model: FactoredModel | None = None) -> AlbedoVolume:
    """Negative Laplacian of the backprojection, clamped and quantile-thresholded."""
    if not 0.0 <= threshold_quantile < 1.0:
        raise ValueError("threshold_quantile must lie in [0, 1)")
    if model is None:
        model = FactoredModel.unoccluded(tau.geometry)
    bp = TransportOperator(model).rmatvec(_as_array(tau))
    out = np.maximum(-laplacian3(bp), 0.0)
    pos = out[out > 0]
    if threshold_quantile > 0 and pos.size:
        out[out < np.quantile(pos, threshold_quantile)] = 0.0
    return AlbedoVolume(model.geometry, out)
