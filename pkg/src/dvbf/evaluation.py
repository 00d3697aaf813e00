"""Checkpoint evaluation: ELBO/KL/NLL aggregates, latent to ground-truth
correlation, n-step predictive MSE, and generated/reconstructed/original
trajectory strips.

Correlation runs on filtered posterior means (zero-noise filtering) over
the held-out split. n-step MSE filters up to each start step, rolls the
prior transition with the true controls, decodes, and averages squared
pixel error against the observed frame; a mean-image baseline through the
same machinery provides the calibration anchor (its MSE must equal the
directly-computed pixel variance of the target frames).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .formats import SequenceBatch, read_sequences, write_metrics, write_pgm
from .model import Model, load_model
from .objective import sequential_elbo

STATE_CHANNELS = {
    "pendulum": ("angle", "velocity"),
    "ball": ("pos_x", "pos_y", "vel_x", "vel_y"),
}


class EvalError(Exception):
    pass


@dataclass
class MetricsRecord:
    elbo: float
    kl: float
    nll: float
    corr: dict                      # channel -> {"r": best |r|, "latent": index}
    corr_trig: dict                 # wrapped-angle variant (pendulum)
    mse: dict                       # horizon -> {"per_pixel": ..., "per_image": ...}
    meta: dict = field(default_factory=dict)

    def flat(self) -> dict[str, float]:
        out = {"elbo": self.elbo, "kl": self.kl, "nll": self.nll}
        for ch, d in self.corr.items():
            out[f"corr.{ch}.r"] = d["r"]
            out[f"corr.{ch}.latent"] = float(d["latent"])
        for ch, d in self.corr_trig.items():
            out[f"corr_trig.{ch}.r"] = d["r"]
        for h, d in self.mse.items():
            out[f"mse.{h}.per_pixel"] = d["per_pixel"]
            out[f"mse.{h}.per_image"] = d["per_image"]
        for k, v in self.meta.items():
            out[f"meta.{k}"] = float(v)
        return out


# ---------------------------------------------------------------------------
# correlation
# ---------------------------------------------------------------------------

def latent_correlation(latents: np.ndarray, truths: np.ndarray) -> list[dict]:
    """Best |Pearson r| over latent dims for each ground-truth channel.

    latents: [N, n_z], truths: [N, n_channels]; zero-variance latent dims
    score 0.
    """
    if latents.shape[0] < 2:
        raise EvalError(f"need N >= 2 rows, got {latents.shape[0]}")
    if latents.shape[0] != truths.shape[0]:
        raise EvalError("latents and truths disagree on N")
    n = latents.shape[0]
    lc = latents - latents.mean(axis=0)
    tc = truths - truths.mean(axis=0)
    ls = lc.std(axis=0)
    ts = tc.std(axis=0)
    cov = tc.T @ lc / n                       # [C, n_z]
    denom = np.outer(ts, ls)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 0, cov / np.maximum(denom, 1e-300), 0.0)
    r = np.nan_to_num(r, nan=0.0)
    out = []
    for c in range(truths.shape[1]):
        idx = int(np.argmax(np.abs(r[c])))
        out.append({"r": float(abs(r[c, idx])), "latent": idx})
    return out


def filtered_means(model: Model, batch: SequenceBatch,
                   chunk: int = 64) -> np.ndarray:
    """Zero-noise filtered latents, [n, T, n_z]."""
    outs = []
    for lo in range(0, batch.n_seqs, chunk):
        part = batch.subset(slice(lo, lo + chunk))
        filt = model.filter(part.observations, part.controls)
        zs = np.stack([z.data for z in filt.latents])       # [T, b, nz]
        outs.append(zs.transpose(1, 0, 2))
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# n-step MSE
# ---------------------------------------------------------------------------

class ModelPredictor:
    """nstep_mse strategy backed by a trained model."""

    def __init__(self, model: Model):
        self.model = model

    def filter_latents(self, batch: SequenceBatch) -> np.ndarray:
        return filtered_means(self.model, batch)

    def step_mean(self, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        prior = self.model.transitions.prior(Tensor(z), Tensor(u))
        return prior.mean.data

    def decode_flat(self, z: np.ndarray) -> np.ndarray:
        mean, _ = self.model.decode(Tensor(z))
        return mean.data


class MeanImageBaseline:
    """Predicts the dataset mean frame regardless of state (calibration)."""

    def __init__(self, batch: SequenceBatch):
        obs = batch.observations.astype(np.float64)
        self.mean_image = obs.reshape(-1, obs.shape[2] * obs.shape[3] * obs.shape[4]) \
            .mean(axis=0)

    def filter_latents(self, batch: SequenceBatch) -> np.ndarray:
        return np.zeros((batch.n_seqs, batch.horizon, 1))

    def step_mean(self, z, u):
        return z

    def decode_flat(self, z: np.ndarray) -> np.ndarray:
        return np.tile(self.mean_image, (z.shape[0], 1))


def nstep_mse(predictor, batch: SequenceBatch,
              horizons=(1, 5, 10)) -> dict[int, dict[str, float]]:
    """Prior-rollout prediction error per horizon, averaged over all valid
    (sequence, start) pairs; zero-noise rollouts."""
    t_len = batch.horizon
    if max(horizons) >= t_len:
        raise EvalError(f"horizon {max(horizons)} needs T > {max(horizons)}")
    n = batch.n_seqs
    n_o = int(np.prod(batch.obs_shape))
    zs = predictor.filter_latents(batch)                     # [n, T, nz]
    out = {}
    for h in sorted(horizons):
        n_starts = t_len - h
        z = zs[:, :n_starts].reshape(n * n_starts, -1)       # [(n*S), nz]
        for j in range(h):
            # controls u_{t+j} for start t: [n, S, nu] -> rows match z
            u = batch.controls[:, j:j + n_starts].reshape(n * n_starts, -1)
            z = predictor.step_mean(z, u)
        pred = predictor.decode_flat(z)
        targets = batch.observations[:, h:].reshape(n * n_starts, n_o)
        err = np.mean((pred - targets) ** 2)
        out[h] = {"per_pixel": float(err), "per_image": float(err * n_o)}
    return out


def pixel_variance_oracle(batch: SequenceBatch, horizons=(1, 5, 10)) -> dict[int, float]:
    """Direct squared error of the dataset mean image on each horizon's
    target frames; independent route for the calibration anchor."""
    n_o = int(np.prod(batch.obs_shape))
    frames = batch.observations.astype(np.float64).reshape(-1, n_o)
    mean_image = frames.mean(axis=0)
    t_len = batch.horizon
    out = {}
    for h in horizons:
        targets = batch.observations[:, h:].reshape(-1, n_o)
        out[h] = float(np.mean((targets - mean_image) ** 2))
    return out


# ---------------------------------------------------------------------------
# strips
# ---------------------------------------------------------------------------

def trajectory_strip(model: Model, obs: np.ndarray, controls: np.ndarray,
                     every: int = 2, pad: int = 2) -> np.ndarray:
    """Three-row montage (generated / reconstructed / original) of every
    `every`-th frame of one sequence."""
    t_len = obs.shape[0]
    gen = model.generate(controls[None], t_len, x1=obs[None, 0])[:, 0]
    filt = model.filter(obs[None], controls[None])
    recon = model.decode_images(filt.stacked_latents())
    rows = [gen[::every], recon[::every], obs[::every]]
    h, w = obs.shape[-2:]
    n_frames = rows[0].shape[0]
    canvas = np.ones((3 * h + 2 * pad, n_frames * w + (n_frames - 1) * pad))
    for r, imgs in enumerate(rows):
        for i in range(n_frames):
            y = r * (h + pad)
            x = i * (w + pad)
            canvas[y:y + h, x:x + w] = np.clip(imgs[i, 0], 0.0, 1.0)
    return canvas


def emit_strips(model: Model, batch: SequenceBatch, path, index: int = 0) -> None:
    strip = trajectory_strip(model, batch.observations[index],
                             batch.controls[index])
    write_pgm(path, strip)


# ---------------------------------------------------------------------------
# full evaluation
# ---------------------------------------------------------------------------

def holdout_split(batch: SequenceBatch, frac: float = 0.1) -> SequenceBatch:
    n_hold = max(int(round(batch.n_seqs * frac)), 1)
    return batch.subset(slice(batch.n_seqs - n_hold, batch.n_seqs))


def evaluate_model(model: Model, rc: dict, batch: SequenceBatch,
                   horizons=(1, 5, 10), noise_seed: int = 0) -> MetricsRecord:
    """All metrics on the held-out split of `batch`."""
    held = holdout_split(batch, rc["eval.holdout_frac"])
    env_kind = rc["env.kind"]

    # ELBO/KL/NLL with a fixed single-sample noise draw per sequence
    rng = np.random.default_rng(noise_seed)
    elbos, klls, nlls = [], [], []
    for lo in range(0, held.n_seqs, 64):
        part = held.subset(slice(lo, lo + 64))
        noise = rng.standard_normal(
            (part.horizon, part.n_seqs, model.cfg.latent_dim))
        filt = model.filter(part.observations, part.controls, noise)
        _, rep = sequential_elbo(filt, part.observations, model)
        w = part.n_seqs
        elbos.append((rep.elbo, w))
        klls.append((rep.kl_raw, w))
        nlls.append((rep.recon_nll, w))

    def wavg(pairs):
        tot = sum(w for _, w in pairs)
        return sum(v * w for v, w in pairs) / tot

    zs = filtered_means(model, held)
    lat = zs.reshape(-1, zs.shape[-1])
    truths = held.states.reshape(-1, held.states.shape[-1]).astype(np.float64)
    channels = STATE_CHANNELS[env_kind]
    corr_rows = latent_correlation(lat, truths)
    corr = {ch: row for ch, row in zip(channels, corr_rows)}

    corr_trig = {}
    if env_kind == "pendulum":
        # wrapped angles break linear correlation; log the sin/cos variant
        trig = np.stack([np.sin(truths[:, 0]), np.cos(truths[:, 0])], axis=1)
        rows = latent_correlation(lat, trig)
        corr_trig["angle"] = {"r": max(r["r"] for r in rows),
                              "latent": rows[0]["latent"]}

    mse = nstep_mse(ModelPredictor(model), held, horizons)
    return MetricsRecord(
        elbo=wavg(elbos), kl=wavg(klls), nll=wavg(nlls),
        corr=corr, corr_trig=corr_trig, mse=mse,
        meta={"n_heldout": held.n_seqs, "horizon": held.horizon},
    )


def evaluate_checkpoint(ckpt_path, data_path, out_dir,
                        horizons=(1, 5, 10)) -> MetricsRecord:
    """CLI entry: load, evaluate, write metrics file and strips."""
    model, rc, _ = load_model(ckpt_path)
    dc.set_precision(rc["train.precision"])
    model, rc, _ = load_model(ckpt_path)  # reload at run precision
    batch = read_sequences(data_path)
    record = evaluate_model(model, rc, batch, horizons)
    os.makedirs(out_dir, exist_ok=True)
    write_metrics(os.path.join(out_dir, "metrics.txt"), record.flat())
    held = holdout_split(batch, rc["eval.holdout_frac"])
    emit_strips(model, held, os.path.join(out_dir, "strips.pgm"))
    return record
