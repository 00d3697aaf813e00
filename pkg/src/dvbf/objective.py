"""Training objectives: sequential ELBO, beta-scaled ELBO with linear KL
annealing, and the GECO constrained Lagrangian.

All objectives share the same per-sequence decomposition: a Gaussian
reconstruction NLL summed over pixels and time, and a KL sum consisting of
KL(q(z_1|x_1) || N(0, I)) plus per-step KL(posterior_t || prior_t).
Reported values are per-sequence means over the batch. Losses are the
negatives of the maximized bounds (the training loop minimizes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .model import DiagGaussian, FilterResult, Model, standard_normal

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ObjectiveConfig:
    kind: str = "elbo"            # elbo | beta | geco
    beta: float = 1.0             # >= 1
    anneal_temp: float = 1.0      # iterations to ramp the KL weight
    kappa: float = 3.0            # GECO target RMS reconstruction error
    geco_step_size: float = 1e-2  # nu
    geco_ema_decay: float = 0.99

    def validate(self) -> None:
        if self.kind not in ("elbo", "beta", "geco"):
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.kind == "beta" and (self.beta < 1.0 or self.anneal_temp <= 0):
            raise ValueError("beta objective needs beta >= 1 and anneal_temp > 0")
        if self.kind == "geco" and not (self.geco_step_size > 0
                                        and 0 < self.geco_ema_decay < 1):
            raise ValueError("geco needs step size > 0 and ema decay in (0,1)")


@dataclass
class GecoState:
    lam: float = 1.0
    constraint_ema: float | None = None


@dataclass
class ObjectiveReport:
    """Per-batch scalars (per-sequence means unless noted)."""

    elbo: float
    recon_nll: float
    kl_raw: float
    kl_weight: float
    lam: float | None = None          # GECO multiplier used for this batch
    constraint: float | None = None   # GECO per-frame constraint mean


# ---------------------------------------------------------------------------
# constituents
# ---------------------------------------------------------------------------

def kl_diag(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis.

    0.5 * sum_i [ log(vp/vq) + (vq + (mq - mp)^2) / vp - 1 ]
    """
    if q.mean.data.shape != p.mean.data.shape:
        raise dc.ShapeError(
            f"kl_diag: dimension mismatch {q.mean.data.shape} vs {p.mean.data.shape}")
    if not (np.all(q.var.data > 0) and np.all(p.var.data > 0)):
        raise dc.DomainError("kl_diag: variances must be positive")
    ratio = dc.sub(dc.log(p.var), dc.log(q.var))
    quad = dc.div(dc.add(q.var, dc.square(dc.sub(q.mean, p.mean))), p.var)
    terms = dc.sub(dc.add(ratio, quad), 1.0)
    axis = q.mean.data.ndim - 1
    return dc.mul(dc.tsum(terms, axis=axis), 0.5)


def recon_nll(x, mean, var) -> Tensor:
    """Gaussian NLL of one frame: 0.5 * sum_px [(x-m)^2/v + log v + log 2pi]."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    n = x.data.size
    d = dc.sub(x, mean)
    quad = dc.tsum(dc.div(dc.square(d), var))
    return dc.mul(dc.add(quad, dc.mul(dc.add(dc.log(var), LOG_2PI), float(n))), 0.5)


@dataclass
class SequenceTerms:
    """Differentiable per-sequence pieces shared by all objectives."""

    nll_seq: Tensor       # [B] reconstruction NLL summed over pixels and time
    kl_seq: Tensor        # [B] initial KL + per-step transition KLs
    sq_frames: Tensor     # [T*B] per-frame squared residual sums (time-major)
    n_frames: int

    def report_values(self) -> tuple[float, float]:
        return float(np.mean(self.nll_seq.data)), float(np.mean(self.kl_seq.data))


def sequence_terms(filt: FilterResult, obs: np.ndarray, model: Model) -> SequenceTerms:
    b, t = obs.shape[:2]
    n_o = model.cfg.obs_dim
    dt = dc.get_dtype()
    targets = Tensor(np.ascontiguousarray(
        obs.transpose(1, 0, 2, 3, 4), dtype=dt).reshape(t * b, n_o))

    mean, var = model.decode(filt.stacked_latents())
    diff = dc.sub(targets, mean)
    sq_frames = dc.tsum(dc.square(diff), axis=1)                      # [T*B]
    nll_frames = dc.mul(
        dc.add(dc.div(sq_frames, var),
               dc.mul(dc.add(dc.log(var), LOG_2PI), float(n_o))), 0.5)
    nll_seq = dc.tsum(dc.reshape(nll_frames, (t, b)), axis=0)         # [B]

    kl_seq = kl_diag(filt.posteriors[0], standard_normal(model.cfg.latent_dim, b))
    if t > 1:
        post = DiagGaussian(
            dc.concat([p.mean for p in filt.posteriors[1:]], axis=0),
            dc.concat([p.var for p in filt.posteriors[1:]], axis=0))
        prior = DiagGaussian(
            dc.concat([p.mean for p in filt.priors], axis=0),
            dc.concat([p.var for p in filt.priors], axis=0))
        kl_steps = kl_diag(post, prior)                               # [(T-1)*B]
        kl_seq = dc.add(kl_seq, dc.tsum(dc.reshape(kl_steps, (t - 1, b)), axis=0))
    return SequenceTerms(nll_seq, kl_seq, sq_frames, t * b)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

def sequential_elbo(filt: FilterResult, obs: np.ndarray,
                    model: Model) -> tuple[Tensor, ObjectiveReport]:
    """Plain sequential ELBO; returns (loss-to-minimize, report)."""
    terms = sequence_terms(filt, obs, model)
    loss = dc.tmean(dc.add(terms.nll_seq, terms.kl_seq))
    nll, kl = terms.report_values()
    return loss, ObjectiveReport(elbo=-(nll + kl), recon_nll=nll,
                                 kl_raw=kl, kl_weight=1.0)


def anneal_factor(iteration: int, beta: float, anneal_temp: float) -> float:
    """KL weight ramping linearly from 0 to beta over anneal_temp iterations."""
    return beta * min(1.0, iteration / anneal_temp)


def beta_elbo(filt: FilterResult, obs: np.ndarray, model: Model,
              iteration: int, cfg: ObjectiveConfig) -> tuple[Tensor, ObjectiveReport]:
    """KL-weighted bound; the report keeps kl_raw unweighted."""
    terms = sequence_terms(filt, obs, model)
    w = anneal_factor(iteration, cfg.beta, cfg.anneal_temp)
    loss = dc.tmean(dc.add(terms.nll_seq, dc.mul(terms.kl_seq, w)))
    nll, kl = terms.report_values()
    return loss, ObjectiveReport(elbo=-(nll + kl), recon_nll=nll,
                                 kl_raw=kl, kl_weight=w)


def suggest_beta(obs_dim: int, latent_dim: int) -> float:
    """dim_x / dim_z rounded to the nearest power of two (advisory only)."""
    if obs_dim <= 0 or latent_dim <= 0:
        raise ValueError("dimensions must be positive")
    return 2.0 ** round(math.log2(obs_dim / latent_dim))


def geco_update(state: GecoState, constraint_mean: float,
                cfg: ObjectiveConfig) -> GecoState:
    """Multiplicative-exponential multiplier step on the constraint EMA."""
    if state.constraint_ema is None:
        ema = constraint_mean
    else:
        ema = cfg.geco_ema_decay * state.constraint_ema \
            + (1.0 - cfg.geco_ema_decay) * constraint_mean
    lam = state.lam * math.exp(min(cfg.geco_step_size * ema, 700.0))
    lam = min(max(lam, 1e-6), 1e6)
    return GecoState(lam=lam, constraint_ema=ema)


def geco_objective(filt: FilterResult, obs: np.ndarray, model: Model,
                   state: GecoState, cfg: ObjectiveConfig
                   ) -> tuple[Tensor, ObjectiveReport, GecoState]:
    """lambda * E[C] + KL with C = ||x - g(z)||^2 - kappa^2 per frame.

    lambda is excluded from gradient descent; it moves only through the
    EMA update after each batch.
    """
    terms = sequence_terms(filt, obs, model)
    c_frames = dc.sub(terms.sq_frames, cfg.kappa ** 2)
    loss = dc.add(dc.mul(dc.tmean(c_frames), state.lam), dc.tmean(terms.kl_seq))
    c_mean = float(np.mean(c_frames.data))
    nll, kl = terms.report_values()
    report = ObjectiveReport(elbo=-(nll + kl), recon_nll=nll, kl_raw=kl,
                             kl_weight=1.0, lam=state.lam, constraint=c_mean)
    return loss, report, geco_update(state, c_mean, cfg)


class Objective:
    """Dispatcher holding GECO state across batches."""

    def __init__(self, cfg: ObjectiveConfig):
        cfg.validate()
        self.cfg = cfg
        self.geco = GecoState() if cfg.kind == "geco" else None

    def compute(self, filt: FilterResult, obs: np.ndarray, model: Model,
                iteration: int) -> tuple[Tensor, ObjectiveReport]:
        if self.cfg.kind == "elbo":
            return sequential_elbo(filt, obs, model)
        if self.cfg.kind == "beta":
            return beta_elbo(filt, obs, model, iteration, self.cfg)
        loss, report, self.geco = geco_objective(filt, obs, model,
                                                 self.geco, self.cfg)
        return loss, report


def objective_config_from_run(rc: dict) -> ObjectiveConfig:
    return ObjectiveConfig(
        kind=rc["objective.kind"],
        beta=rc["objective.beta"],
        anneal_temp=rc["objective.anneal_temp"],
        kappa=rc["objective.kappa"],
        geco_step_size=rc["objective.geco_step_size"],
        geco_ema_decay=rc["objective.geco_ema_decay"],
    )
