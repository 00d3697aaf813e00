"""Empowerment on a learned transition model.

Empowerment of a state is the channel capacity between a k-step open-loop
control sequence and the resulting latent state. It is estimated from
below by the variational bound

    E_hat(z) = max_omega E_{u ~ omega, z' ~ rollout}
               [ log q(u | z, z') - log omega(u | z) ]

with a source distribution omega(u|z) and a planning distribution
q(u|z,z'), both tanh-squashed diagonal Gaussians over the concatenated
k-step control vector. Rolling z' uses the model's prior transition with
reparameterized sampling, so the bound is differentiable in both nets and
they are trained by joint gradient ascent. The squashing Jacobians of
omega and q cancel inside the bound, which is therefore evaluated in
pre-squash space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .model import DiagGaussian, Model, ParamStore, Dense, GaussianHead, fuse
from .train import Adam, clip_global_norm

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class EmpowermentConfig:
    horizon: int = 7         # k open-loop steps
    hidden: int = 128
    n_samples: int = 32      # MC samples per state for bound evaluation
    iterations: int = 3000
    batch: int = 64
    learning_rate: float = 1e-3
    seed: int = 0


def empowerment_config_from_run(rc: dict) -> EmpowermentConfig:
    return EmpowermentConfig(
        horizon=rc["empowerment.horizon"],
        hidden=rc["empowerment.hidden"],
        n_samples=rc["empowerment.n_samples"],
        iterations=rc["empowerment.iterations"],
        batch=rc["empowerment.batch"],
        learning_rate=rc["empowerment.learning_rate"],
        seed=rc["empowerment.seed"],
    )


class EmpowermentNets:
    """Source omega(u|z) and planning q(u|z,z') distributions.

    Controls live in [-bound, bound]^(k*n_u) via u = bound * tanh(a); the
    underlying Gaussians are over the pre-squash vector a.
    """

    def __init__(self, latent_dim: int, control_dim: int, bound: float,
                 cfg: EmpowermentConfig):
        self.latent_dim = latent_dim
        self.control_dim = control_dim
        self.bound = float(bound)
        self.k = cfg.horizon
        if self.k < 1:
            raise ValueError("empowerment horizon must be >= 1")
        self.u_dim = self.k * control_dim
        self.store = ParamStore()
        rng = np.random.default_rng(cfg.seed)
        self.omega_hidden = Dense(self.store, "phi_t", "omega.hidden", rng,
                                  latent_dim, cfg.hidden)
        self.omega_head = GaussianHead(self.store, "phi_t", "omega", rng,
                                       cfg.hidden, self.u_dim, 1e-4)
        self.q_hidden = Dense(self.store, "phi_t", "q.hidden", rng,
                              2 * latent_dim, cfg.hidden)
        self.q_head = GaussianHead(self.store, "phi_t", "q", rng,
                                   cfg.hidden, self.u_dim, 1e-4)

    def parameters(self) -> dict[str, Tensor]:
        return self.store.named()

    def omega(self, z: Tensor) -> DiagGaussian:
        return self.omega_head(dc.relu(self.omega_hidden(z)))

    def q_plan(self, z: Tensor, z_final: Tensor) -> DiagGaussian:
        return self.q_head(dc.relu(self.q_hidden(dc.concat([z, z_final], axis=1))))

    def squash(self, a: Tensor) -> Tensor:
        return dc.mul(dc.tanh(a), self.bound)

    def log_prob_u(self, dist: DiagGaussian, a: np.ndarray) -> np.ndarray:
        """Density over u of a squashed Gaussian, evaluated via the
        pre-squash point a (Jacobian-corrected)."""
        mean, var = dist.mean.data, dist.var.data
        base = -0.5 * np.sum((a - mean) ** 2 / var + np.log(var) + LOG_2PI,
                             axis=1)
        th = np.tanh(a)
        jac = np.sum(np.log(self.bound * np.maximum(1.0 - th * th, 1e-12)),
                     axis=1)
        return base - jac

    def sample_controls(self, z: Tensor, noise: np.ndarray) -> tuple[Tensor, Tensor]:
        """(pre-squash a, squashed u), reparameterized through omega."""
        w = self.omega(z)
        a = w.sample(noise)
        return a, self.squash(a)

    def omega_entropy_estimate(self, z: np.ndarray, rng,
                               n: int = 128) -> float:
        """MC entropy of omega's squashed density (monitoring)."""
        zt = Tensor(np.repeat(z, n, axis=0))
        w = self.omega(zt)
        a = w.mean.data + np.sqrt(w.var.data) * rng.standard_normal(
            w.mean.data.shape)
        return float(np.mean(-self.log_prob_u(w, a)))

    def blobs(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.parameters().items()}
        out["emp.meta"] = np.array(
            [self.latent_dim, self.control_dim, self.bound, self.k],
            dtype=np.float32)
        return out


def nets_from_blobs(blobs: dict[str, np.ndarray],
                    cfg: EmpowermentConfig) -> EmpowermentNets:
    latent_dim, control_dim, bound, k = blobs["emp.meta"]
    cfg_k = EmpowermentConfig(**{**cfg.__dict__, "horizon": int(k)})
    nets = EmpowermentNets(int(latent_dim), int(control_dim), float(bound), cfg_k)
    for name, t in nets.parameters().items():
        t.data = np.asarray(blobs[name], dtype=t.data.dtype).copy()
    return nets


# ---------------------------------------------------------------------------
# the bound
# ---------------------------------------------------------------------------

def rollout_latents(transition, z: Tensor, u: Tensor, k: int, control_dim: int,
                    noise: np.ndarray) -> Tensor:
    """k reparameterized steps through the prior transition; returns z_k."""
    for j in range(k):
        u_j = dc.narrow(u, 1, j * control_dim, control_dim)
        prior = transition.prior(z, u_j)
        z = prior.sample(noise[j])
    return z


def bound_terms(nets: EmpowermentNets, transition, z: Tensor,
                ctrl_noise: np.ndarray, roll_noise: np.ndarray) -> Tensor:
    """Per-row log q(u|z,z') - log omega(u|z); squash Jacobians cancel."""
    w = nets.omega(z)
    a = w.sample(ctrl_noise)
    u = nets.squash(a)
    z_final = rollout_latents(transition, z, u, nets.k, nets.control_dim,
                              roll_noise)
    q = nets.q_plan(z, z_final)
    return dc.sub(q.log_prob(a), w.log_prob(a))


def empowerment_bound(nets: EmpowermentNets, transition, z: np.ndarray,
                      n_samples: int, seed: int = 0) -> np.ndarray:
    """Monte-Carlo estimate of the bound per state; evaluation mode."""
    b = z.shape[0]
    rng = np.random.default_rng(seed)
    zt = Tensor(np.repeat(z, n_samples, axis=0))
    rows = b * n_samples
    ctrl_noise = rng.standard_normal((rows, nets.u_dim))
    roll_noise = rng.standard_normal((nets.k, rows, nets.latent_dim))
    vals = bound_terms(nets, transition, zt, ctrl_noise, roll_noise).data
    return vals.reshape(b, n_samples).mean(axis=1)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class EmpowermentTrace:
    bound: list
    omega_entropy: list


def train_empowerment(nets: EmpowermentNets, transition, states: np.ndarray,
                      cfg: EmpowermentConfig, progress=None,
                      samples_per_state: int = 4) -> EmpowermentTrace:
    """Joint gradient ascent of the bound over omega and q.

    `states` is a pool of latent start states [N, nz]; each iteration draws
    a batch from the pool, samples controls from omega and rolls the
    (frozen) transition with reparameterized noise.
    """
    params = nets.parameters()
    adam = Adam(params, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    trace = EmpowermentTrace([], [])
    for it in range(cfg.iterations):
        idx = rng.integers(0, states.shape[0], size=cfg.batch)
        z = np.repeat(states[idx], samples_per_state, axis=0)
        rows = z.shape[0]
        ctrl_noise = rng.standard_normal((rows, nets.u_dim))
        roll_noise = rng.standard_normal((nets.k, rows, nets.latent_dim))
        dc.zero_grads(params.values())
        with dc.Tape() as tape:
            terms = bound_terms(nets, transition, Tensor(z), ctrl_noise,
                                roll_noise)
            loss = dc.mul(dc.tmean(terms), -1.0)
            tape.backward(loss)
        clip_global_norm(params.values(), 10.0)
        adam.step()
        trace.bound.append(-float(loss.data))
        if it % 50 == 0:
            trace.omega_entropy.append(
                nets.omega_entropy_estimate(states[idx[:8]], rng))
        if progress is not None:
            progress(it, trace.bound[-1])
    return trace


# ---------------------------------------------------------------------------
# maps and rollouts (bouncing-ball environment)
# ---------------------------------------------------------------------------

def ball_state_latents(model: Model, env, positions: np.ndarray) -> np.ndarray:
    """Render ball positions (velocity zero), filter one step, take means."""
    from .env import BallState
    frames = np.stack([env.render(BallState((float(p[0]), float(p[1])),
                                            (0.0, 0.0)))
                       for p in positions])
    return model.initial_net(frames.astype(dc.get_dtype())).mean.data


def empowerment_map(nets: EmpowermentNets, model: Model, env,
                    grid_n: int = 16, n_samples: int = 32,
                    seed: int = 0) -> np.ndarray:
    """Bound evaluated on a grid of ball positions; [grid_n, grid_n]."""
    lo = env.cfg.ball_radius
    hi = env.cfg.box_side - env.cfg.ball_radius
    centers = lo + (np.arange(grid_n) + 0.5) * (hi - lo) / grid_n
    xs, ys = np.meshgrid(centers, centers)
    positions = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)
    z = ball_state_latents(model, env, positions)
    vals = empowerment_bound(nets, model.transitions, z, n_samples, seed)
    return vals.reshape(grid_n, grid_n)


def wall_distance(positions: np.ndarray, env) -> np.ndarray:
    lo = env.cfg.ball_radius
    hi = env.cfg.box_side - env.cfg.ball_radius
    px, py = positions[..., 0], positions[..., 1]
    return np.minimum(np.minimum(px - lo, hi - px),
                      np.minimum(py - lo, hi - py))


def empowerment_rollout(nets: EmpowermentNets, model: Model, env,
                        n_agents: int, steps: int, seed: int = 0,
                        policy: str = "empowerment") -> np.ndarray:
    """Closed-loop receding-horizon rollout; returns positions
    [n_agents, steps+1, 2].

    Each step acts with the first control of omega's mean plan at the
    filtered latent, steps the true simulator, then re-filters.
    """
    from .env import BallState
    rng = np.random.default_rng(seed)
    states = [env.sample_state(rng) for _ in range(n_agents)]
    nu = env.control_dim
    positions = np.empty((n_agents, steps + 1, 2))
    positions[:, 0] = [s.pos for s in states]

    frames = np.stack([env.render(s) for s in states]).astype(dc.get_dtype())
    z = model.initial_net(frames).mean

    for t in range(steps):
        if policy == "empowerment":
            w = nets.omega(z)
            u_full = nets.squash(Tensor(w.mean.data)).data
            u = u_full[:, :nu]
        elif policy == "random":
            u = rng.uniform(-nets.bound, nets.bound, size=(n_agents, nu))
        else:
            raise ValueError(f"unknown policy {policy!r}")
        states = [env.step(s, u[i]) for i, s in enumerate(states)]
        positions[:, t + 1] = [s.pos for s in states]
        frames = np.stack([env.render(s) for s in states]).astype(dc.get_dtype())
        post = model.filter_step(z, Tensor(u.astype(dc.get_dtype())), frames)
        z = post.mean
    return positions
