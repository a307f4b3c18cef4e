"""Objective construction and surrogate-gradient-guided latent dynamics.

The scalar objective J is always minimized. Target mode is a weighted
squared error to per-property targets; directional mode is the negated
signed sum of predictions (sign +1 maximizes a property, -1 minimizes it).

Guided integration runs explicit Euler on dz/dt = v(z, t) - gamma * g(z),
where g is the objective gradient through mean pooling and the surrogate.
Gradient post-processing order is fixed: normalize to unit global norm
first, then clip, then scale by gamma inside the integrator. Exploration
noise is injected once at preparation time, never per step.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, NumericFailure
from .seqvae import LatentState, mean_pool
from .rng import Rng


@dataclass
class ObjectiveSpec:
    """Either target mode (weights + targets) or directional mode (signs)."""

    mode: str  # "target" | "directional"
    weights: tuple = (1.0, 1.0)
    targets: tuple = None
    signs: tuple = None

    def __post_init__(self):
        if self.mode not in ("target", "directional"):
            raise ContractViolation(f"unknown objective mode {self.mode!r}")
        if any(w < 0 or not np.isfinite(w) for w in self.weights):
            raise ContractViolation("weights must be finite and nonnegative")
        if self.mode == "target" and self.targets is None:
            raise ContractViolation("target mode requires targets")
        if self.mode == "directional":
            if self.signs is None or any(s not in (-1, 1) for s in self.signs):
                raise ContractViolation("directional mode requires signs in {+1, -1}")

    @classmethod
    def maximize_p1_minimize_p2(cls) -> "ObjectiveSpec":
        """The default two-property setting: raise p1, lower p2."""
        return cls(mode="directional", signs=(1, -1))


def objective_value(spec: ObjectiveSpec, pred) -> float:
    """Scalar J for a prediction vector; minimized by the guided dynamics."""
    pred = np.asarray(pred, dtype=np.float64)
    if spec.mode == "target":
        w = np.asarray(spec.weights)
        c = np.asarray(spec.targets)
        return float((w * (pred - c) ** 2).sum())
    return float(-(np.asarray(spec.signs) * pred).sum())


def _objective_graph(spec: ObjectiveSpec, pred: Tensor) -> Tensor:
    if spec.mode == "target":
        diff = pred - Tensor(np.asarray(spec.targets))
        return (Tensor(np.asarray(spec.weights)) * diff * diff).sum()
    return -(Tensor(np.asarray(spec.signs, dtype=np.float64)) * pred).sum()


def objective_gradient(spec: ObjectiveSpec, surrogate, z: np.ndarray,
                       normalize: bool = False, clip_norm: float = None) -> np.ndarray:
    """Exact reverse-mode gradient of J with respect to the K×d latent.

    Post-processing: unit-norm rescaling first (zero gradient stays zero),
    then norm clipping. Scaling by gamma is the integrator's job.
    """
    zt = Tensor(np.asarray(z, dtype=np.float64), requires_grad=True)
    pooled = mean_pool(zt).reshape(1, z.shape[-1])
    pred = surrogate.predict_graph(pooled)
    j = _objective_graph(spec, pred.reshape(2))
    (g,) = ad.gradients(j, [zt])
    if not np.isfinite(g).all():
        raise NumericFailure("non-finite objective gradient")
    if normalize:
        norm = np.linalg.norm(g)
        if norm > 0:
            g = g / norm
    if clip_norm is not None:
        norm = np.linalg.norm(g)
        if norm > clip_norm:
            g = g * (clip_norm / norm)
    return g


@dataclass
class GuidanceConfig:
    gamma: float = 36.07
    sigma: float = 0.80
    steps: int = 12
    t_start: float = 0.89
    clip_norm: float = 5.0  # None disables clipping
    normalize_gradient: bool = True

    def __post_init__(self):
        if self.gamma < 0 or self.sigma < 0:
            raise ContractViolation("gamma and sigma must be >= 0")
        if self.steps < 1:
            raise ContractViolation("steps must be >= 1")
        if not (0.0 <= self.t_start < 1.0):
            raise ContractViolation("t_start must lie in [0, 1)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ContractViolation("clip_norm must be positive when set")


@dataclass
class TrajectoryRecord:
    step: int
    t: float
    objective: float
    grad_norm: float
    velocity_norm: float


def guided_integrate(field, surrogate, spec: ObjectiveSpec, cfg: GuidanceConfig,
                     z_init: LatentState) -> tuple:
    """Euler integration of the guided dynamics from cfg.t_start to 1.

    Returns (trajectory records, final LatentState). With gamma == 0 the
    update degenerates bit-exactly to unconditional flow integration.
    """
    z = np.array(z_init.z, dtype=np.float64)
    dt = (1.0 - cfg.t_start) / cfg.steps
    t = cfg.t_start
    trajectory = []
    for step in range(cfg.steps):
        v = field.velocity(z, t)
        if cfg.gamma == 0.0:
            g = np.zeros_like(z)
            z = z + dt * v
        else:
            g = objective_gradient(spec, surrogate, z,
                                   normalize=cfg.normalize_gradient,
                                   clip_norm=cfg.clip_norm)
            z = z + dt * (v - cfg.gamma * g)
        t = cfg.t_start + (step + 1) * dt
        if not np.isfinite(z).all():
            raise NumericFailure("non-finite state during guided integration",
                                 where=f"step={step}")
        pred = surrogate.predict(mean_pool(z))
        trajectory.append(TrajectoryRecord(
            step=step, t=t, objective=objective_value(spec, pred),
            grad_norm=float(np.linalg.norm(g)),
            velocity_norm=float(np.linalg.norm(v))))
    return trajectory, LatentState(z=z, t=1.0)


def prepare_generation(rng: Rng, K: int, d: int) -> LatentState:
    """Base-distribution draw at t=0 for conditioned generation."""
    return LatentState(z=rng.normal((K, d)), t=0.0)


def prepare_optimization(vae, x, sigma: float, t_start: float, rng: Rng) -> LatentState:
    """Posterior-mean encoding of an existing structure plus one noise draw."""
    if sigma < 0:
        raise ContractViolation("sigma must be >= 0")
    post = vae.encode(x)
    z = post.mu + sigma * rng.normal(post.mu.shape)
    return LatentState(z=z, t=t_start)


def gradient_ascent_baseline(surrogate, spec: ObjectiveSpec, z_init: LatentState,
                             eta: float, steps: int, sigma: float, rng: Rng) -> LatentState:
    """No-flow ablation: noise injection, then plain descent on J."""
    if eta <= 0:
        raise ContractViolation("eta must be > 0")
    z = z_init.z + sigma * rng.normal(z_init.z.shape)
    for step in range(steps):
        g = objective_gradient(spec, surrogate, z)
        z = z - eta * g
        if not np.isfinite(z).all():
            raise NumericFailure("non-finite state in gradient ascent", where=f"step={step}")
    return LatentState(z=z, t=1.0)


def trajectory_lines(trajectory) -> list:
    """Line-delimited dump records: step, t, J, |g|, |v|."""
    return [f"{r.step}\t{r.t:.6f}\t{r.objective:.8f}\t{r.grad_norm:.8f}\t{r.velocity_norm:.8f}"
            for r in trajectory]
