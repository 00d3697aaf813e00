"""Deterministic simulators and renderers for the two benchmark systems.

Pendulum: torque-controlled point mass on a rigid rod, angle measured from
the upright position,

    m l^2 psidd = -mu * psid + m g l sin(psi) + u

integrated with semi-implicit Euler and rendered as a Gaussian blob on a
small grayscale frame.

Bouncing ball: point mass in a square box driven by per-axis forces,
semi-implicit Euler with impulse-based wall reflection (position clamped
to contact, normal velocity negated and scaled by the restitution,
tangential velocity preserved), rendered as an anti-aliased disc.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .formats import SequenceBatch, write_sequences


def wrap_angle(psi: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.fmod(psi + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


# ---------------------------------------------------------------------------
# pendulum
# ---------------------------------------------------------------------------

@dataclass
class PendulumState:
    psi: float       # rad, wrapped to (-pi, pi], 0 = upright
    psi_dot: float   # rad/s


@dataclass
class PendulumConfig:
    m: float = 1.0
    l: float = 1.0
    g: float = 9.8
    mu: float = 0.5
    dt: float = 0.05
    max_torque: float = 5.0
    image_size: int = 16
    blob_sigma: float = 1.2   # px
    blob_radius_frac: float = 5.5 / 16.0  # rod length in pixels per 16 px frame


def pendulum_step(s: PendulumState, u: float, cfg: PendulumConfig) -> PendulumState:
    acc = (-cfg.mu * s.psi_dot + cfg.m * cfg.g * cfg.l * math.sin(s.psi) + u) \
        / (cfg.m * cfg.l * cfg.l)
    psi_dot = s.psi_dot + cfg.dt * acc
    psi = wrap_angle(s.psi + cfg.dt * psi_dot)
    return PendulumState(psi, psi_dot)


def pendulum_energy(s: PendulumState, cfg: PendulumConfig) -> float:
    """Conserved quantity of the frictionless, unforced dynamics.

    With the torque equation above (psi from upright) the potential is
    +m g l cos(psi), minimal at the hanging position psi = pi.
    """
    kinetic = 0.5 * cfg.m * cfg.l * cfg.l * s.psi_dot ** 2
    return kinetic + cfg.m * cfg.g * cfg.l * math.cos(s.psi)


def render_pendulum(s: PendulumState, size: int = 16, cfg: PendulumConfig | None = None) -> np.ndarray:
    """Gaussian blob at the mass position; peak value 1, frame in [0, 1]."""
    cfg = cfg or PendulumConfig()
    c = (size - 1) / 2.0
    rho = cfg.blob_radius_frac * size
    sigma = cfg.blob_sigma * size / 16.0
    col0 = c + rho * math.sin(s.psi)
    row0 = c - rho * math.cos(s.psi)
    rows = np.arange(size)[:, None]
    cols = np.arange(size)[None, :]
    d2 = (rows - row0) ** 2 + (cols - col0) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


# ---------------------------------------------------------------------------
# bouncing ball
# ---------------------------------------------------------------------------

@dataclass
class BallState:
    pos: tuple[float, float]  # box units, confined to [r, L-r]^2
    vel: tuple[float, float]


@dataclass
class BallConfig:
    box_side: float = 10.0
    ball_radius: float = 1.0
    mass: float = 1.0
    dt: float = 0.05
    restitution: float = 1.0
    max_force: float = 12.0
    image_size: int = 64


def _reflect_axis(p: float, v: float, lo: float, hi: float, e: float) -> tuple[float, float]:
    if p < lo:
        return lo, -e * v
    if p > hi:
        return hi, -e * v
    return p, v


def ball_step(s: BallState, u: tuple[float, float], cfg: BallConfig) -> BallState:
    lo = cfg.ball_radius
    hi = cfg.box_side - cfg.ball_radius
    vx = s.vel[0] + cfg.dt * u[0] / cfg.mass
    vy = s.vel[1] + cfg.dt * u[1] / cfg.mass
    px = s.pos[0] + cfg.dt * vx
    py = s.pos[1] + cfg.dt * vy
    px, vx = _reflect_axis(px, vx, lo, hi, cfg.restitution)
    py, vy = _reflect_axis(py, vy, lo, hi, cfg.restitution)
    return BallState((px, py), (vx, vy))


def render_ball(s: BallState, size: int = 64, cfg: BallConfig | None = None) -> np.ndarray:
    """Filled disc with 1-px linear anti-aliasing, values in [0, 1]."""
    cfg = cfg or BallConfig()
    scale = size / cfg.box_side
    radius = cfg.ball_radius * scale
    cx = s.pos[0] * scale - 0.5
    cy = s.pos[1] * scale - 0.5
    rows = np.arange(size)[:, None]
    cols = np.arange(size)[None, :]
    dist = np.sqrt((rows - cy) ** 2 + (cols - cx) ** 2)
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


# ---------------------------------------------------------------------------
# environment wrappers + dataset generation
# ---------------------------------------------------------------------------

class PendulumEnv:
    """State/render/control bundle used by dataset generation and rollouts."""

    name = "pendulum"
    state_dim = 2
    control_dim = 1

    def __init__(self, cfg: PendulumConfig | None = None):
        self.cfg = cfg or PendulumConfig()

    @property
    def image_size(self) -> int:
        return self.cfg.image_size

    def sample_state(self, rng: np.random.Generator) -> PendulumState:
        return PendulumState(
            psi=float(rng.uniform(-math.pi, math.pi)),
            psi_dot=float(rng.uniform(-8.0, 8.0)),
        )

    def sample_control(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-self.cfg.max_torque, self.cfg.max_torque, size=1)

    def step(self, s: PendulumState, u) -> PendulumState:
        return pendulum_step(s, float(u[0]), self.cfg)

    def render(self, s: PendulumState) -> np.ndarray:
        return render_pendulum(s, self.cfg.image_size, self.cfg)[None]  # [1,h,w]

    def state_vector(self, s: PendulumState) -> np.ndarray:
        return np.array([s.psi, s.psi_dot])


class BallEnv:
    name = "ball"
    state_dim = 4
    control_dim = 2

    def __init__(self, cfg: BallConfig | None = None):
        self.cfg = cfg or BallConfig()

    @property
    def image_size(self) -> int:
        return self.cfg.image_size

    def sample_state(self, rng: np.random.Generator) -> BallState:
        lo = self.cfg.ball_radius
        hi = self.cfg.box_side - self.cfg.ball_radius
        pos = rng.uniform(lo, hi, size=2)
        vel = rng.uniform(-3.0, 3.0, size=2)
        return BallState((float(pos[0]), float(pos[1])), (float(vel[0]), float(vel[1])))

    def sample_control(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-self.cfg.max_force, self.cfg.max_force, size=2)

    def step(self, s: BallState, u) -> BallState:
        return ball_step(s, (float(u[0]), float(u[1])), self.cfg)

    def render(self, s: BallState) -> np.ndarray:
        return render_ball(s, self.cfg.image_size, self.cfg)[None]

    def state_vector(self, s: BallState) -> np.ndarray:
        return np.array([s.pos[0], s.pos[1], s.vel[0], s.vel[1]])


def make_env(name: str, image_size: int | None = None, **overrides):
    if name == "pendulum":
        cfg = PendulumConfig(**overrides)
        if image_size:
            cfg.image_size = image_size
        return PendulumEnv(cfg)
    if name == "ball":
        cfg = BallConfig(**overrides)
        if image_size:
            cfg.image_size = image_size
        return BallEnv(cfg)
    raise ValueError(f"unknown environment {name!r}")


def rollout(env, state, controls: np.ndarray):
    """Step the simulator through a control sequence.

    Returns (observations [T,c,h,w], states [T,state_dim]) including the
    initial frame; len(controls) = T-1.
    """
    frames = [env.render(state)]
    states = [env.state_vector(state)]
    for u in controls:
        state = env.step(state, u)
        frames.append(env.render(state))
        states.append(env.state_vector(state))
    return np.stack(frames), np.stack(states)


def generate_sequences(env, n_seqs: int, horizon: int, seed: int) -> SequenceBatch:
    """i.i.d.-uniform-control episodes; per-sequence rng seed = seed ^ index."""
    if horizon < 2:
        raise ValueError(f"horizon must be >= 2, got {horizon}")
    c, h, w = env.render(env.sample_state(np.random.default_rng(0))).shape
    obs = np.empty((n_seqs, horizon, c, h, w), dtype=np.float32)
    controls = np.empty((n_seqs, horizon - 1, env.control_dim), dtype=np.float32)
    states = np.empty((n_seqs, horizon, env.state_dim), dtype=np.float32)
    for i in range(n_seqs):
        rng = np.random.default_rng(seed ^ i)
        s0 = env.sample_state(rng)
        us = np.stack([env.sample_control(rng) for _ in range(horizon - 1)])
        frames, tracks = rollout(env, s0, us)
        obs[i] = frames
        controls[i] = us
        states[i] = tracks
    return SequenceBatch(obs, controls, states)


def generate_dataset(env, n_seqs: int, horizon: int, seed: int, path) -> SequenceBatch:
    batch = generate_sequences(env, n_seqs, horizon, seed)
    write_sequences(path, batch)
    return batch
