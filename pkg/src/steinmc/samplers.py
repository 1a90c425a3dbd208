"""Ensemble update rules and the generic evolution runner.

All update rules are written internally in score space (score = grad log
density); the H-space descent forms used in their docstrings relate through
H = -log pi.  The interacting samplers share one drift,

    phi_i = (1/L) [ sum_l K_il * score_l + repulsion_i ],

where repulsion_i is the kernel-gradient row from :mod:`steinmc.kernels`.
Adding correlated noise with covariance (2 eps / L) K to an eps * phi step
makes the product target stationary; omitting the noise gives the
deterministic flow, which settles on variance-underestimating
configurations.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .diagnostics import RunReport, ess_multivariate, gelman_rubin, moment_error
from .errors import ConfigError, DegenerateChainError, DivergenceError
from .kernels import KernelConfig, KernelMatrix
from .targets import TargetModel

SAMPLER_KINDS = ("sgld", "svgd", "repulsive_sgld", "repulsive_sgdm", "repulsive_adam")
INTERACTING_KINDS = ("svgd", "repulsive_sgld", "repulsive_sgdm", "repulsive_adam")


@dataclass
class ParticleEnsemble:
    """L particles in d dimensions plus the iteration counter."""

    positions: np.ndarray
    step_index: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[0] < 1:
            raise ValueError("positions must be an L x d matrix with L >= 1")

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]


@dataclass
class StepSchedule:
    """Constant or polynomially decaying step sizes.

    The decaying variant eps_t = eps0 * (1 + t)^(-gamma) with gamma in
    (0.5, 1] has divergent sum and convergent squared sum, the classic
    stochastic-approximation conditions.
    """

    kind: str = "constant"
    eps0: float = 1e-3
    gamma: float = 0.55

    def __post_init__(self):
        if self.kind not in ("constant", "robbins_monro"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.eps0 > 0:
            raise ValueError("eps0 must be > 0")
        if self.kind == "robbins_monro" and not (0.5 < self.gamma <= 1.0):
            raise ValueError("gamma must lie in (0.5, 1]")

    def eps(self, t: int) -> float:
        if self.kind == "constant":
            return self.eps0
        return self.eps0 * (1.0 + t) ** (-self.gamma)


@dataclass
class MomentumState:
    """Auxiliary momenta (and gradient second moments for the adaptive rule)."""

    momenta: np.ndarray
    second_moments: np.ndarray | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    stabilizer: float = 1e-8

    def __post_init__(self):
        self.momenta = np.asarray(self.momenta, dtype=float)
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.second_moments is not None:
            self.second_moments = np.asarray(self.second_moments, dtype=float)
            if np.any(self.second_moments < 0):
                raise ValueError("second moments must be non-negative")


@dataclass
class CollectionPolicy:
    """Discard the first `burn_in` iterations, then keep every `thin`-th."""

    burn_in: int = 0
    thin: int = 1

    def __post_init__(self):
        if self.burn_in < 0 or self.thin < 1:
            raise ValueError("burn_in must be >= 0 and thin >= 1")

    def collect_at(self, t: int) -> bool:
        # t is the 1-based count of completed iterations
        return t > self.burn_in and (t - self.burn_in) % self.thin == 0


def _scores(target: TargetModel, positions: np.ndarray) -> np.ndarray:
    batch = getattr(target, "grad_log_density_batch", None)
    if batch is not None:
        out = np.asarray(batch(positions), dtype=float)
    else:
        out = np.empty_like(positions)
        for i, z in enumerate(positions):
            out[i] = np.asarray(target.grad_log_density(z), dtype=float)
    finite = np.all(np.isfinite(out), axis=1)
    if not np.all(finite):
        raise DivergenceError(iteration=-1, particle=int(np.argmax(~finite)))
    return out


def _check_finite(positions: np.ndarray, iteration: int, snapshot=None):
    bad = ~np.all(np.isfinite(positions), axis=1)
    if np.any(bad):
        raise DivergenceError(
            iteration=iteration, particle=int(np.argmax(bad)), snapshot=snapshot
        )


def _interaction_drift(scores: np.ndarray, km: KernelMatrix) -> np.ndarray:
    """(1/L) [K @ scores + repulsion rows]; the shared interacting drift."""
    n = km.n_particles
    return (km.entries @ scores + km.grad_terms) / n


def _pooled_ess(collected: np.ndarray) -> float:
    """Effective draw count behind the pooled moment estimate.

    The per-event ensemble mean carries the information the pooled estimator
    uses; its autocorrelation time discounts the L x n_events pooled draws.
    Reported as the per-dimension minimum of L * ess(mean series), which
    reduces to the standard scalar estimator when L = 1.  Both within-chain
    autocorrelation and interaction-induced cross-chain correlation register
    through the mean series.
    """
    n_events, n_chains, dim = collected.shape
    if n_events < 10:
        return float("nan")
    mean_series = collected.mean(axis=1)  # (n_events, d)
    try:
        return n_chains * ess_multivariate(mean_series)
    except DegenerateChainError:
        return float("nan")


def sgld_step(
    ensemble: ParticleEnsemble, target: TargetModel, eps: float, rng: np.random.Generator
) -> ParticleEnsemble:
    """Langevin step per particle: z + eps * score + N(0, 2 eps I); no interaction."""
    if not eps > 0:
        raise ValueError("eps must be > 0")
    z = ensemble.positions
    scores = _scores(target, z)
    noise = np.sqrt(2.0 * eps) * rng.standard_normal(z.shape)
    new = z + eps * scores + noise
    _check_finite(new, ensemble.step_index + 1, snapshot=z)
    return ParticleEnsemble(new, ensemble.step_index + 1)


def svgd_direction(
    ensemble: ParticleEnsemble, target: TargetModel, km: KernelMatrix
) -> np.ndarray:
    """Descent direction on H = -log pi; row i of -(1/L)[K @ score + repulsion].

    Updating z <- z - eps * direction performs kernel-smoothed ascent on the
    log density plus repulsion between particles.
    """
    scores = _scores(target, ensemble.positions)
    return -_interaction_drift(scores, km)


def svgd_step(
    ensemble: ParticleEnsemble,
    target: TargetModel,
    kernel_cfg: KernelConfig,
    eps: float,
) -> ParticleEnsemble:
    """Deterministic interacting step (no noise)."""
    if not eps > 0:
        raise ValueError("eps must be > 0")
    km = kernels.kernel_matrix(ensemble.positions, kernel_cfg)
    direction = svgd_direction(ensemble, target, km)
    new = ensemble.positions - eps * direction
    _check_finite(new, ensemble.step_index + 1, snapshot=ensemble.positions)
    return ParticleEnsemble(new, ensemble.step_index + 1)


def repulsive_sgld_step(
    ensemble: ParticleEnsemble,
    target: TargetModel,
    kernel_cfg: KernelConfig,
    eps: float,
    rng: np.random.Generator,
    km: KernelMatrix | None = None,
) -> ParticleEnsemble:
    """Interacting Langevin step: eps * drift plus kernel-correlated noise.

    With a single particle the kernel collapses to 1 and the update law is
    bitwise identical to :func:`sgld_step`.
    """
    if not eps > 0:
        raise ValueError("eps must be > 0")
    z = ensemble.positions
    if km is None:
        km = kernels.kernel_matrix(z, kernel_cfg)
    scores = _scores(target, z)
    drift = _interaction_drift(scores, km)
    noise = kernels.sample_repulsive_noise(km, eps, rng, ensemble.dim)
    new = z + eps * drift + noise
    _check_finite(new, ensemble.step_index + 1, snapshot=z)
    return ParticleEnsemble(new, ensemble.step_index + 1)


def repulsive_sgdm_step(
    ensemble: ParticleEnsemble,
    momentum: MomentumState,
    target: TargetModel,
    kernel_cfg: KernelConfig,
    eps: float,
    rng: np.random.Generator | None = None,
    position_noise: bool = False,
    km: KernelMatrix | None = None,
) -> tuple[ParticleEnsemble, MomentumState]:
    """Momentum-augmented interacting step.

    Positions descend along kernel-smoothed momenta while being pushed apart;
    momenta absorb the kernel-smoothed H-gradient plus the repulsion:

        z_i <- z_i - (eps/L) sum_l [ K_il m_l - repulsion_il ]
        m_i <- m_i + (eps/L) sum_l [ K_il grad_H_l + repulsion_il ]

    With L = 1 this is z <- z - eps m, m <- m + eps grad_H(z), the explicit
    Euler discretization of a phase-space rotation: it drifts the energy
    H(z) + ||m||^2/2 by O(eps^2) per step instead of tearing along an
    unstable direction.  The update is deterministic by default;
    `position_noise` adds the kernel-correlated noise used by the Langevin
    variant.
    """
    if not eps > 0:
        raise ValueError("eps must be > 0")
    z = ensemble.positions
    m = momentum.momenta
    if m.shape != z.shape:
        raise ValueError("momentum state shape must match ensemble")
    if km is None:
        km = kernels.kernel_matrix(z, kernel_cfg)
    n = ensemble.n_particles
    scores = _scores(target, z)

    new_z = z - (eps / n) * (km.entries @ m - km.grad_terms)
    new_m = m - (eps / n) * (km.entries @ scores - km.grad_terms)
    if position_noise:
        if rng is None:
            raise ValueError("position_noise requires an rng")
        new_z = new_z + kernels.sample_repulsive_noise(km, eps, rng, ensemble.dim)

    _check_finite(new_z, ensemble.step_index + 1, snapshot=z)
    new_momentum = MomentumState(
        new_m,
        second_moments=momentum.second_moments,
        beta1=momentum.beta1,
        beta2=momentum.beta2,
        stabilizer=momentum.stabilizer,
    )
    return ParticleEnsemble(new_z, ensemble.step_index + 1), new_momentum


def repulsive_adam_step(
    ensemble: ParticleEnsemble,
    momentum: MomentumState,
    target: TargetModel,
    kernel_cfg: KernelConfig,
    eps: float,
    rng: np.random.Generator,
    km: KernelMatrix | None = None,
) -> tuple[ParticleEnsemble, MomentumState]:
    """Adaptively preconditioned interacting step with noise.

    Per particle, m and v track exponential moving averages of the H-gradient
    and its square (no bias correction).  Positions then take the momentum
    kernel step with m rescaled by the per-particle diagonal mass
    1/sqrt(v + stabilizer), plus kernel-correlated noise:

        m <- beta1 m + (1 - beta1) grad_H          (elementwise, per particle)
        v <- beta2 v + (1 - beta2) grad_H^2
        z_i <- z_i - (eps/L) sum_l [ K_il m_l/sqrt(v_l + c) - repulsion_il ] + noise_i
    """
    if not eps > 0:
        raise ValueError("eps must be > 0")
    z = ensemble.positions
    m = momentum.momenta
    v = momentum.second_moments
    if v is None:
        raise ValueError("adaptive step requires second_moments in the momentum state")
    if m.shape != z.shape or v.shape != z.shape:
        raise ValueError("momentum state shape must match ensemble")
    if km is None:
        km = kernels.kernel_matrix(z, kernel_cfg)
    n = ensemble.n_particles

    grad_h = -_scores(target, z)
    new_m = momentum.beta1 * m + (1.0 - momentum.beta1) * grad_h
    new_v = momentum.beta2 * v + (1.0 - momentum.beta2) * grad_h**2
    scaled = new_m / np.sqrt(new_v + momentum.stabilizer)

    new_z = z - (eps / n) * (km.entries @ scaled - km.grad_terms)
    new_z = new_z + kernels.sample_repulsive_noise(km, eps, rng, ensemble.dim)

    _check_finite(new_z, ensemble.step_index + 1, snapshot=z)
    new_momentum = MomentumState(
        new_m,
        second_moments=new_v,
        beta1=momentum.beta1,
        beta2=momentum.beta2,
        stabilizer=momentum.stabilizer,
    )
    return ParticleEnsemble(new_z, ensemble.step_index + 1), new_momentum


def momentum_block_matrix(km: KernelMatrix) -> np.ndarray:
    """The 2L x 2L curl matrix [[0, -K], [K, 0]] of the momentum dynamics."""
    n = km.n_particles
    out = np.zeros((2 * n, 2 * n))
    out[:n, n:] = -km.entries
    out[n:, :n] = km.entries
    return out


@dataclass
class RunResult:
    """Collected draws plus diagnostics for one sampler run."""

    samples: np.ndarray  # pooled chain-major, (n_events * L, d), moment space
    per_particle: np.ndarray  # (L, n_events, d), moment space
    report: RunReport
    final: ParticleEnsemble


def run(
    kind: str,
    target: TargetModel,
    *,
    n_particles: int,
    iterations: int,
    schedule: StepSchedule,
    policy: CollectionPolicy,
    seed: int,
    init_mean=0.0,
    init_std=1.0,
    kernel_cfg: KernelConfig | None = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    stabilizer: float = 1e-8,
    repulsion_cutoff: int | None = None,
    position_noise: bool = False,
) -> RunResult:
    """Evolve an ensemble and collect draws under the thinning policy.

    Deterministic given the seed.  `repulsion_cutoff` switches the
    interacting samplers to the identity kernel (no interaction) from that
    iteration on.  Collected draws are mapped through the target's moment
    transform and pooled over particles; the reported ESS discounts the
    pooled draw count by the autocorrelation of the per-event ensemble mean.
    """
    if kind not in SAMPLER_KINDS:
        raise ConfigError(f"unknown sampler kind {kind!r}", field="sampler")
    if iterations <= policy.burn_in:
        raise ConfigError(
            "iterations must exceed burn_in or nothing is collected", field="iterations"
        )
    kernel_cfg = kernel_cfg or KernelConfig()
    rng = np.random.default_rng(seed)

    dim = target.dim
    mean = np.broadcast_to(np.asarray(init_mean, dtype=float), (dim,))
    std = np.broadcast_to(np.asarray(init_std, dtype=float), (dim,))
    ensemble = ParticleEnsemble(mean + std * rng.standard_normal((n_particles, dim)))

    if (iterations - policy.burn_in) // policy.thin == 0:
        raise ConfigError(
            "collection window shorter than the thinning interval", field="iterations"
        )

    momentum = None
    if kind == "repulsive_sgdm":
        # momenta start from their standard-Gaussian stationary law
        momentum = MomentumState(
            rng.standard_normal((n_particles, dim)),
            beta1=beta1,
            beta2=beta2,
            stabilizer=stabilizer,
        )
    elif kind == "repulsive_adam":
        momentum = MomentumState(
            np.zeros((n_particles, dim)),
            second_moments=np.zeros((n_particles, dim)),
            beta1=beta1,
            beta2=beta2,
            stabilizer=stabilizer,
        )

    collected: list[np.ndarray] = []
    start = time.perf_counter()
    try:
        for t in range(iterations):
            eps = schedule.eps(t)
            refresh = getattr(target, "resample_batch", None)
            if refresh is not None:
                refresh(rng)
            km = None
            if kind in INTERACTING_KINDS:
                if repulsion_cutoff is not None and t >= repulsion_cutoff:
                    km = kernels.identity_kernel(n_particles, dim)
                else:
                    km = kernels.kernel_matrix(ensemble.positions, kernel_cfg)

            if kind == "sgld":
                ensemble = sgld_step(ensemble, target, eps, rng)
            elif kind == "svgd":
                direction = svgd_direction(ensemble, target, km)
                new = ensemble.positions - eps * direction
                _check_finite(new, t + 1, snapshot=ensemble.positions)
                ensemble = ParticleEnsemble(new, t + 1)
            elif kind == "repulsive_sgld":
                ensemble = repulsive_sgld_step(
                    ensemble, target, kernel_cfg, eps, rng, km=km
                )
            elif kind == "repulsive_sgdm":
                ensemble, momentum = repulsive_sgdm_step(
                    ensemble,
                    momentum,
                    target,
                    kernel_cfg,
                    eps,
                    rng=rng,
                    position_noise=position_noise,
                    km=km,
                )
            else:  # repulsive_adam
                ensemble, momentum = repulsive_adam_step(
                    ensemble, momentum, target, kernel_cfg, eps, rng, km=km
                )

            if policy.collect_at(t + 1):
                collected.append(ensemble.positions.copy())
    except DivergenceError as err:
        if err.snapshot is None:
            err.snapshot = ensemble.positions
        if err.iteration < 0:
            err.iteration = ensemble.step_index + 1
        raise
    wall = time.perf_counter() - start

    stacked = np.stack(collected)  # (n_events, L, d)
    transformed = target.moment_transform(stacked)
    per_particle = np.transpose(transformed, (1, 0, 2))
    pooled = per_particle.reshape(-1, dim)

    errors = [
        (spec.label, moment_error(pooled, spec.order, spec.exact))
        for spec in target.reference_moments
    ]
    pooled_ess = _pooled_ess(transformed)
    n_events = stacked.shape[0]
    if n_particles >= 2 and n_events >= 10:
        rhat = gelman_rubin(per_particle)
    else:
        rhat = np.full(dim, np.nan)

    report = RunReport(
        ess=pooled_ess,
        ess_per_second=pooled_ess / wall if wall > 0 else 0.0,
        rhat=rhat,
        moment_errors=errors,
        wall_clock=wall,
        collected_count=pooled.shape[0],
        extra={"sampler": kind, "target": target.name, "seed": seed},
    )
    return RunResult(samples=pooled, per_particle=per_particle, report=report, final=ensemble)
