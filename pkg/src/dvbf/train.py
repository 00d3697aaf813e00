"""Optimization loop: minibatching, Adam, annealing/GECO bookkeeping,
checkpointing and deterministic seeding.

A fixed seed gives a bitwise-reproducible single-threaded run; the PCG64
generator state is serialized into checkpoints (as 16-bit limbs, since
blobs are float32) so resumed runs continue the exact stream.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .formats import read_checkpoint, read_sequences
from .model import Model, model_config_from_run, save_model
from .objective import Objective, ObjectiveReport, objective_config_from_run


class NumericAbort(Exception):
    """Training hit a non-finite value; message names the offending tensor."""


@dataclass
class TrainConfig:
    batch_size: int = 32
    iterations: int = 15000
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 10.0
    seed: int = 0
    checkpoint_every: int = 1000
    precision: str = "float32"
    holdout_frac: float = 0.1

    def validate(self) -> None:
        if self.iterations <= 0:
            raise ValueError("iterations must be > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


def train_config_from_run(rc: dict) -> TrainConfig:
    return TrainConfig(
        batch_size=rc["train.batch_size"],
        iterations=rc["train.iterations"],
        learning_rate=rc["train.learning_rate"],
        adam_beta1=rc["train.adam_beta1"],
        adam_beta2=rc["train.adam_beta2"],
        adam_eps=rc["train.adam_eps"],
        grad_clip_norm=rc["train.grad_clip_norm"],
        seed=rc["train.seed"],
        checkpoint_every=rc["train.checkpoint_every"],
        precision=rc["train.precision"],
        holdout_frac=rc["eval.holdout_frac"],
    )


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Standard bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * np.square(g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_blobs(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_blobs(self, blobs: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            self.m[k] = np.asarray(blobs[f"adam.m.{k}"], dtype=p.data.dtype).copy()
            self.v[k] = np.asarray(blobs[f"adam.v.{k}"], dtype=p.data.dtype).copy()


def clip_global_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = dc.global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def check_finite(loss_value: float, params: dict[str, Tensor]) -> None:
    if not math.isfinite(loss_value):
        raise NumericAbort("non-finite loss")
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericAbort(f"non-finite gradient in {name}")


# ---------------------------------------------------------------------------
# rng state <-> float32 blob (16-bit limbs fit float32 exactly)
# ---------------------------------------------------------------------------

def rng_state_to_blob(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    limbs = []
    for val, n in ((st["state"]["state"], 8), (st["state"]["inc"], 8),
                   (int(st["has_uint32"]), 1), (st["uinteger"], 2)):
        for i in range(n):
            limbs.append((val >> (16 * i)) & 0xFFFF)
    return np.array(limbs, dtype=np.float32)


def rng_state_from_blob(blob: np.ndarray) -> np.random.Generator:
    limbs = [int(round(float(x))) for x in blob]

    def take(n):
        nonlocal limbs
        out = sum(limb << (16 * i) for i, limb in enumerate(limbs[:n]))
        limbs = limbs[n:]
        return out

    state = take(8)
    inc = take(8)
    has_uint32 = take(1)
    uinteger = take(2)
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": state, "inc": inc},
        "has_uint32": has_uint32,
        "uinteger": uinteger,
    }
    return rng


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

LOG_FIELDS = ("iter", "elbo", "nll", "kl_raw", "kl_weight", "lambda")


def _log_row(writer, iteration: int, report: ObjectiveReport) -> None:
    writer.writerow({
        "iter": iteration,
        "elbo": f"{report.elbo:.6f}",
        "nll": f"{report.recon_nll:.6f}",
        "kl_raw": f"{report.kl_raw:.6f}",
        "kl_weight": f"{report.kl_weight:.6f}",
        "lambda": "" if report.lam is None else f"{report.lam:.6e}",
    })


def train(data_path, run_config: dict, out_dir, resume=None,
          progress=None) -> tuple[str, str]:
    """Train per the run config; returns (final checkpoint path, log path).

    `progress`, when given, is called as progress(iteration, report) after
    each optimizer step.
    """
    cfg = train_config_from_run(run_config)
    cfg.validate()
    dc.set_precision(cfg.precision)

    data = read_sequences(data_path)
    n_hold = int(round(data.n_seqs * cfg.holdout_frac))
    n_train = max(data.n_seqs - n_hold, 1)
    obs = data.observations[:n_train]
    controls = data.controls[:n_train]
    t_len = data.horizon

    model = Model(model_config_from_run(run_config))
    params = model.parameters()
    adam = Adam(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                cfg.adam_eps)
    objective = Objective(objective_config_from_run(run_config))
    rng = np.random.default_rng(cfg.seed)
    start_iter = 0

    if resume is not None:
        _, blobs = read_checkpoint(resume)
        model.load_blobs(blobs)
        adam.load_blobs(blobs)
        adam.t = int(round(float(blobs["train.step"])))
        start_iter = int(round(float(blobs["train.iter"])))
        rng = rng_state_from_blob(blobs["train.rng"])
        if objective.geco is not None and "geco.lambda" in blobs:
            objective.geco.lam = float(blobs["geco.lambda"])
            ema = float(blobs["geco.ema"])
            objective.geco.constraint_ema = None if math.isnan(ema) else ema

    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "log.csv")
    final_path = os.path.join(out_dir, "checkpoint_final.ckpt")

    def extra_blobs(iteration):
        extras = {
            "train.iter": np.float32(iteration),
            "train.step": np.float32(adam.t),
            "train.rng": rng_state_to_blob(rng),
        }
        extras.update(adam.state_blobs())
        if objective.geco is not None:
            extras["geco.lambda"] = np.float32(objective.geco.lam)
            ema = objective.geco.constraint_ema
            extras["geco.ema"] = np.float32(math.nan if ema is None else ema)
        return extras

    mode = "a" if (resume is not None and os.path.exists(log_path)) else "w"
    with open(log_path, mode, newline="") as logf:
        writer = csv.DictWriter(logf, fieldnames=LOG_FIELDS)
        if mode == "w":
            writer.writeheader()
        for iteration in range(start_iter, cfg.iterations):
            idx = rng.integers(0, n_train, size=cfg.batch_size)
            noise = rng.standard_normal(
                (t_len, cfg.batch_size, model.cfg.latent_dim))
            batch_obs = obs[idx]
            batch_ctrl = controls[idx]

            dc.zero_grads(params.values())
            try:
                with dc.Tape() as tape:
                    filt = model.filter(batch_obs, batch_ctrl, noise)
                    loss, report = objective.compute(filt, batch_obs, model,
                                                     iteration)
                    loss_value = float(loss.data)
                    if not math.isfinite(loss_value):
                        raise NumericAbort("non-finite loss")
                    tape.backward(loss)
            except dc.DomainError as e:
                # divergence shows up as a domain violation (NaN variance)
                # before the loss is even formed; name the culprit if a
                # parameter already went non-finite, else blame activations
                for name, p in params.items():
                    if not np.all(np.isfinite(p.data)):
                        raise NumericAbort(f"non-finite parameter {name}") from e
                raise NumericAbort(f"non-finite activation: {e}") from e
            check_finite(loss_value, params)
            clip_global_norm(params.values(), cfg.grad_clip_norm)
            adam.step()

            _log_row(writer, iteration, report)
            if progress is not None:
                progress(iteration, report)
            done = iteration + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 \
                    and done < cfg.iterations:
                save_model(os.path.join(out_dir, f"checkpoint_{done:06d}.ckpt"),
                           model, run_config, extra_blobs(done))
        save_model(final_path, model, run_config, extra_blobs(cfg.iterations))
    return final_path, log_path
