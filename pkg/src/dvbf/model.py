"""The state-space model family.

Generative side: an initial latent distribution, a prior transition
p(z_{t+1} | z_t, u_t) (MLP, locally-linear or switching-linear) and a
convolutional Gaussian decoder with one global emission variance.

Recognition side (filtering only): an initial network on the first frame
and, per step, either the product of an inverse measurement model with a
posterior transition (fused form, precision-weighted Gaussian product) or
a single joint network on (z_{t-1}, u_{t-1}, features(x_t)) (the
Deep-Kalman-Filter-style baseline). With mean sharing enabled the prior
and posterior transitions emit the same mean tensor from the same
weights; each keeps its own variance head.

Encoder/decoder follow the small-image layout: 3x3 stride-2 same-padded
convolutions halving the frame down to 1x1 (filter counts doubling from
`base_filters`, last layer at least latent_dim wide), one hidden dense
layer, and the mirrored transposed-convolution stack ending in a dense
layer over the full frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from . import config as cfgmod
from .formats import read_checkpoint, write_checkpoint


# ---------------------------------------------------------------------------
# distributions
# ---------------------------------------------------------------------------

@dataclass
class DiagGaussian:
    """Diagonal Gaussian as a (mean, variance) tensor pair; variance > 0."""

    mean: Tensor
    var: Tensor

    @property
    def dim(self) -> int:
        return self.mean.data.shape[-1]

    def sample(self, noise: np.ndarray) -> Tensor:
        return dc.sample_reparam(self.mean, self.var, noise)

    def log_prob(self, x: Tensor) -> Tensor:
        """Per-row log density, summed over the last axis."""
        d = dc.sub(x, self.mean)
        quad = dc.div(dc.square(d), self.var)
        terms = dc.add(dc.add(quad, dc.log(self.var)), math.log(2.0 * math.pi))
        return dc.mul(dc.tsum(terms, axis=1), -0.5)

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.var.detach())


def fuse(q_e: DiagGaussian, q_t: DiagGaussian) -> DiagGaussian:
    """Renormalized product of two diagonal Gaussians (precision weighting)."""
    if q_e.mean.data.shape != q_t.mean.data.shape:
        raise dc.ShapeError(
            f"fuse: dimension mismatch {q_e.mean.data.shape} vs {q_t.mean.data.shape}"
        )
    if not (np.all(q_e.var.data > 0) and np.all(q_t.var.data > 0)):
        raise dc.DomainError("fuse: variances must be positive")
    pe = dc.div(1.0, q_e.var)
    pt = dc.div(1.0, q_t.var)
    var = dc.div(1.0, dc.add(pe, pt))
    mean = dc.mul(var, dc.add(dc.mul(q_e.mean, pe), dc.mul(q_t.mean, pt)))
    return DiagGaussian(mean, var)


def standard_normal(dim: int, batch: int) -> DiagGaussian:
    dt = dc.get_dtype()
    return DiagGaussian(Tensor(np.zeros((batch, dim), dtype=dt)),
                        Tensor(np.ones((batch, dim), dtype=dt)))


# ---------------------------------------------------------------------------
# parameters and layers
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameter registry with the spec's group structure."""

    GROUPS = ("theta_0", "theta_t", "theta_e", "phi_e", "phi_t")

    def __init__(self):
        self.groups: dict[str, dict[str, Tensor]] = {g: {} for g in self.GROUPS}

    def add(self, group: str, name: str, value: np.ndarray) -> Tensor:
        t = dc.parameter(value)
        if name in self.groups[group]:
            raise ValueError(f"duplicate parameter {group}/{name}")
        self.groups[group][name] = t
        return t

    def named(self) -> dict[str, Tensor]:
        out = {}
        for g in self.GROUPS:
            for name, t in self.groups[g].items():
                out[f"{g}.{name}"] = t
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named().values())


def _glorot(rng, fan_in, fan_out, shape):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Dense:
    def __init__(self, store: ParamStore, group: str, name: str, rng,
                 n_in: int, n_out: int, w_scale: float = 1.0, b_init=None):
        w = _glorot(rng, n_in, n_out, (n_in, n_out)) * w_scale
        b = np.zeros(n_out) if b_init is None else np.asarray(b_init, dtype=float)
        self.w = store.add(group, f"{name}.w", w)
        self.b = store.add(group, f"{name}.b", b)

    def __call__(self, x: Tensor) -> Tensor:
        return dc.linear(x, self.w, self.b)


class Conv:
    def __init__(self, store, group, name, rng, c_in, c_out, stride=2):
        k = _glorot(rng, c_in * 9, c_out * 9, (c_out, c_in, 3, 3))
        self.k = store.add(group, f"{name}.k", k)
        self.b = store.add(group, f"{name}.b", np.zeros(c_out))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return dc.bias_add(dc.conv2d(x, self.k, self.stride), self.b, axis=1)


class ConvTranspose:
    def __init__(self, store, group, name, rng, c_in, c_out, stride=2):
        # kernel layout matches conv2d: [c_in_here, c_out_here, 3, 3]
        k = _glorot(rng, c_in * 9, c_out * 9, (c_in, c_out, 3, 3))
        self.k = store.add(group, f"{name}.k", k)
        self.b = store.add(group, f"{name}.b", np.zeros(c_out))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return dc.bias_add(dc.conv2d_transpose(x, self.k, self.stride), self.b, axis=1)


def _var_head(dense: Dense, x: Tensor, floor: float) -> Tensor:
    return dc.add(dc.softplus(dense(x)), floor)


class GaussianHead:
    """Two dense heads producing a DiagGaussian (softplus + floor variance)."""

    def __init__(self, store, group, name, rng, n_in, n_out, floor):
        self.mean = Dense(store, group, f"{name}.mean", rng, n_in, n_out)
        self.rawvar = Dense(store, group, f"{name}.var", rng, n_in, n_out)
        self.floor = floor

    def __call__(self, x: Tensor) -> DiagGaussian:
        return DiagGaussian(self.mean(x), _var_head(self.rawvar, x, self.floor))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ModelConfig:
    image_size: int = 16
    channels: int = 1
    latent_dim: int = 64
    control_dim: int = 1
    transition: str = "mlp"          # mlp | locally_linear | slds
    posterior: str = "fused"         # fused | joint
    shared_mean: bool = False
    slds_bases: int = 8
    enc_hidden: int = 256
    trans_hidden: int = 256
    hyper_hidden: int = 128
    base_filters: int = 4
    var_floor: float = 1e-4
    seed: int = 0

    @property
    def obs_dim(self) -> int:
        return self.channels * self.image_size * self.image_size

    def conv_filters(self) -> list[int]:
        """Doubling filter counts; the deepest layer is at least latent_dim."""
        n_layers = int(round(math.log2(self.image_size)))
        if 2 ** n_layers != self.image_size or n_layers < 2:
            raise ValueError(f"image_size must be a power of two >= 4, got {self.image_size}")
        filters = [self.base_filters * 2 ** i for i in range(n_layers)]
        filters[-1] = max(filters[-1], self.latent_dim)
        return filters


def model_config_from_run(rc: dict) -> ModelConfig:
    control_dim = {"pendulum": 1, "ball": 2}[rc["env.kind"]]
    return ModelConfig(
        image_size=rc["env.image_size"],
        channels=1,
        latent_dim=rc["model.latent_dim"],
        control_dim=control_dim,
        transition=rc["model.transition"],
        posterior=rc["model.posterior"],
        shared_mean=rc["model.shared_mean"],
        slds_bases=rc["model.slds_bases"],
        enc_hidden=rc["model.enc_hidden"],
        trans_hidden=rc["model.trans_hidden"],
        hyper_hidden=rc["model.hyper_hidden"],
        base_filters=rc["model.base_filters"],
        var_floor=rc["model.var_floor"],
        seed=rc["model.seed"],
    )


# ---------------------------------------------------------------------------
# transitions
# ---------------------------------------------------------------------------

def _zu(z: Tensor, u: Tensor) -> Tensor:
    return dc.concat([z, u], axis=1)


class MlpTransitionCore:
    """Sigmoid hidden layer + mean head; the sharable part of an MLP transition."""

    def __init__(self, store, group, name, rng, cfg: ModelConfig):
        n_in = cfg.latent_dim + cfg.control_dim
        self.hidden = Dense(store, group, f"{name}.hidden", rng, n_in, cfg.trans_hidden)
        self.mean = Dense(store, group, f"{name}.mean", rng, cfg.trans_hidden, cfg.latent_dim)

    def features(self, z, u) -> Tensor:
        return dc.sigmoid(self.hidden(_zu(z, u)))

    def mean_from(self, h: Tensor) -> Tensor:
        return self.mean(h)


class LocallyLinearCore:
    """Hypernetwork emitting A(z,u), B(z,u), c(z,u); mean = A z + B u + c."""

    def __init__(self, store, group, name, rng, cfg: ModelConfig):
        nz, nu = cfg.latent_dim, cfg.control_dim
        n_in = nz + nu
        n_out = nz * nz + nz * nu + nz
        self.nz, self.nu = nz, nu
        self.hidden = Dense(store, group, f"{name}.hyper.hidden", rng, n_in, cfg.hyper_hidden)
        # small head initialized so A(.,.) starts at the identity map
        b_init = np.concatenate([np.eye(nz).reshape(-1), np.zeros(nz * nu + nz)])
        self.head = Dense(store, group, f"{name}.hyper.head", rng,
                          cfg.hyper_hidden, n_out, w_scale=0.01, b_init=b_init)

    def features(self, z, u) -> Tensor:
        return dc.relu(self.hidden(_zu(z, u)))

    def mean_from(self, h: Tensor, z: Tensor, u: Tensor) -> Tensor:
        nz, nu = self.nz, self.nu
        b = z.data.shape[0]
        out = self.head(h)
        a_flat = dc.narrow(out, 1, 0, nz * nz)
        b_flat = dc.narrow(out, 1, nz * nz, nz * nu)
        c = dc.narrow(out, 1, nz * nz + nz * nu, nz)
        a_mat = dc.reshape(a_flat, (b, nz, nz))
        b_mat = dc.reshape(b_flat, (b, nz, nu))
        return dc.add(dc.add(dc.bmatvec(a_mat, z), dc.bmatvec(b_mat, u)), c)


class SldsCore:
    """K linear bases mixed by a softmax gate on (z, u)."""

    def __init__(self, store, group, name, rng, cfg: ModelConfig):
        nz, nu, k = cfg.latent_dim, cfg.control_dim, cfg.slds_bases
        self.nz, self.nu, self.k = nz, nu, k
        # right-multiplication layout: mean_k = z @ A_k + u @ B_k + c_k
        a0 = np.stack([np.eye(nz) + rng.uniform(-0.05, 0.05, (nz, nz)) for _ in range(k)])
        b0 = np.stack([_glorot(rng, nu, nz, (nu, nz)) for _ in range(k)])
        self.a = store.add(group, f"{name}.bases.a", a0)
        self.b = store.add(group, f"{name}.bases.b", b0)
        self.c = store.add(group, f"{name}.bases.c", np.zeros((k, nz)))
        self.gate = Dense(store, group, f"{name}.gate", rng, nz + nu, k)

    def features(self, z, u) -> Tensor:
        return dc.softmax_rows(self.gate(_zu(z, u)))  # mixing weights alpha

    def mean_from(self, alpha: Tensor, z: Tensor, u: Tensor) -> Tensor:
        nz = self.nz
        total = None
        for i in range(self.k):
            a_i = dc.reshape(dc.narrow(self.a, 0, i, 1), (nz, nz))
            b_i = dc.reshape(dc.narrow(self.b, 0, i, 1), (self.nu, nz))
            c_i = dc.reshape(dc.narrow(self.c, 0, i, 1), (nz,))
            mean_i = dc.bias_add(dc.add(dc.matmul(z, a_i), dc.matmul(u, b_i)), c_i, axis=1)
            w_i = dc.expand_cols(dc.narrow(alpha, 1, i, 1), nz)
            term = dc.mul(w_i, mean_i)
            total = term if total is None else dc.add(total, term)
        return total


class TransitionPair:
    """Prior and posterior transitions over (z, u).

    With shared_mean the mean core is built once (its parameters live under
    theta_t) and both sides reuse the same mean tensor per step; variance
    heads are always private. Without sharing, two fully independent
    transitions are built (prior under theta_t, posterior under phi_t).
    """

    def __init__(self, store: ParamStore, rng, cfg: ModelConfig):
        self.cfg = cfg
        self.kind = cfg.transition
        self.shared = cfg.shared_mean
        nz, nu = cfg.latent_dim, cfg.control_dim
        floor = cfg.var_floor

        def make_core(group, name):
            if self.kind == "mlp":
                return MlpTransitionCore(store, group, name, rng, cfg)
            if self.kind == "locally_linear":
                return LocallyLinearCore(store, group, name, rng, cfg)
            if self.kind == "slds":
                return SldsCore(store, group, name, rng, cfg)
            raise ValueError(f"unknown transition kind {self.kind!r}")

        if self.shared:
            self.core = make_core("theta_t", "trans")
            var_in = cfg.trans_hidden if self.kind == "mlp" else nz + nu
            self.prior_var = Dense(store, "theta_t", "trans.prior_var", rng, var_in, nz)
            self.post_var = Dense(store, "phi_t", "trans.post_var", rng, var_in, nz)
        else:
            self.prior_core = make_core("theta_t", "prior")
            self.post_core = make_core("phi_t", "post")
            var_in = cfg.trans_hidden if self.kind == "mlp" else nz + nu
            self.prior_var = Dense(store, "theta_t", "prior.var", rng, var_in, nz)
            self.post_var = Dense(store, "phi_t", "post.var", rng, var_in, nz)
        self.floor = floor

    def _single(self, core, var_head, z, u) -> DiagGaussian:
        if self.kind == "mlp":
            h = core.features(z, u)
            return DiagGaussian(core.mean_from(h), _var_head(var_head, h, self.floor))
        feats = core.features(z, u)
        mean = core.mean_from(feats, z, u)
        return DiagGaussian(mean, _var_head(var_head, _zu(z, u), self.floor))

    def prior(self, z, u) -> DiagGaussian:
        core = self.core if self.shared else self.prior_core
        return self._single(core, self.prior_var, z, u)

    def posterior(self, z, u) -> DiagGaussian:
        core = self.core if self.shared else self.post_core
        return self._single(core, self.post_var, z, u)

    def step(self, z, u) -> tuple[DiagGaussian, DiagGaussian]:
        """(prior, posterior-transition); shared mode computes the mean once."""
        if not self.shared:
            return self.prior(z, u), self.posterior(z, u)
        if self.kind == "mlp":
            h = self.core.features(z, u)
            mean = self.core.mean_from(h)
            vp = _var_head(self.prior_var, h, self.floor)
            vq = _var_head(self.post_var, h, self.floor)
        else:
            feats = self.core.features(z, u)
            mean = self.core.mean_from(feats, z, u)
            zu = _zu(z, u)
            vp = _var_head(self.prior_var, zu, self.floor)
            vq = _var_head(self.post_var, zu, self.floor)
        return DiagGaussian(mean, vp), DiagGaussian(mean, vq)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class FilterResult:
    """Per-step filtering output; posteriors[0] is the initial distribution."""

    latents: list            # T tensors [B, nz]
    posteriors: list         # T DiagGaussians
    priors: list             # T-1 DiagGaussians (transitions for t >= 2)

    @property
    def horizon(self) -> int:
        return len(self.latents)

    def stacked_latents(self) -> Tensor:
        return dc.concat(self.latents, axis=0)  # [T*B, nz], time-major


class Model:
    """DVBF-family state-space model over image sequences."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(cfg.seed)
        nz = cfg.latent_dim
        filters = cfg.conv_filters()
        floor = cfg.var_floor

        # shared convolutional trunk (inverse measurement architecture)
        self.enc_convs = []
        c_prev = cfg.channels
        for i, f in enumerate(filters):
            self.enc_convs.append(Conv(self.store, "phi_e", f"enc.conv{i}", rng, c_prev, f))
            c_prev = f
        self.enc_fc = Dense(self.store, "phi_e", "enc.fc", rng, filters[-1], cfg.enc_hidden)
        self.meas_head = GaussianHead(self.store, "phi_e", "meas", rng,
                                      cfg.enc_hidden, nz, floor)
        self.init_head = GaussianHead(self.store, "theta_0", "init", rng,
                                      cfg.enc_hidden, nz, floor)

        self.transitions = TransitionPair(self.store, rng, cfg)

        if cfg.posterior == "joint":
            n_in = nz + cfg.control_dim + cfg.enc_hidden
            self.joint_hidden = Dense(self.store, "phi_t", "joint.hidden", rng,
                                      n_in, cfg.trans_hidden)
            self.joint_head = GaussianHead(self.store, "phi_t", "joint", rng,
                                           cfg.trans_hidden, nz, floor)
        elif cfg.posterior != "fused":
            raise ValueError(f"unknown posterior form {cfg.posterior!r}")

        # decoder: dense -> dense -> transposed convs -> dense over the frame
        dec_filters = list(reversed(filters[:-1])) + [cfg.channels]
        self.dec_fc1 = Dense(self.store, "theta_e", "dec.fc1", rng, nz, cfg.enc_hidden)
        self.dec_fc2 = Dense(self.store, "theta_e", "dec.fc2", rng,
                             cfg.enc_hidden, filters[-1])
        self.dec_convs = []
        c_prev = filters[-1]
        for i, f in enumerate(dec_filters):
            self.dec_convs.append(
                ConvTranspose(self.store, "theta_e", f"dec.tconv{i}", rng, c_prev, f))
            c_prev = f
        self.dec_out = Dense(self.store, "theta_e", "dec.out", rng,
                             cfg.obs_dim, cfg.obs_dim)
        self.emission_logvar = self.store.add("theta_e", "emission.logvar",
                                              np.zeros(()))

    # -- encoder ------------------------------------------------------------

    def encode_features(self, frames: Tensor) -> Tensor:
        """Conv trunk + hidden dense on [N, c, h, w] frames."""
        h = frames
        for conv in self.enc_convs:
            h = dc.relu(conv(h))
        n = h.data.shape[0]
        flat = dc.reshape(h, (n, h.data.shape[1]))
        return dc.relu(self.enc_fc(flat))

    def initial_net(self, frames) -> DiagGaussian:
        return self.init_head(self.encode_features(self._frames(frames)))

    def inverse_measurement(self, frames) -> DiagGaussian:
        return self.meas_head(self.encode_features(self._frames(frames)))

    def _frames(self, frames) -> Tensor:
        t = frames if isinstance(frames, Tensor) else Tensor(frames)
        if t.data.ndim == 3:
            t = dc.reshape(t, (1,) + t.data.shape)
        if t.data.shape[1:] != (self.cfg.channels, self.cfg.image_size, self.cfg.image_size):
            raise dc.ShapeError(
                f"frame shape {t.data.shape[1:]} != "
                f"({self.cfg.channels}, {self.cfg.image_size}, {self.cfg.image_size})"
            )
        return t

    # -- decoder ------------------------------------------------------------

    def decode(self, z: Tensor) -> tuple[Tensor, Tensor]:
        """Latents [N, nz] -> (flat image means [N, obs_dim], emission variance)."""
        n = z.data.shape[0]
        h = dc.relu(self.dec_fc1(z))
        h = self.dec_fc2(h)
        h = dc.reshape(h, (n, h.data.shape[1], 1, 1))
        for i, tconv in enumerate(self.dec_convs):
            h = tconv(h)
            if i < len(self.dec_convs) - 1:
                h = dc.relu(h)
        flat = dc.reshape(h, (n, self.cfg.obs_dim))
        mean = self.dec_out(flat)
        var = dc.add(dc.exp(self.emission_logvar), 1e-6)
        return mean, var

    def decode_images(self, z: Tensor) -> np.ndarray:
        mean, _ = self.decode(z)
        s = self.cfg.image_size
        return mean.data.reshape(-1, self.cfg.channels, s, s)

    # -- filtering ----------------------------------------------------------

    def filter(self, obs: np.ndarray, controls: np.ndarray,
               noise: np.ndarray | None = None) -> FilterResult:
        """Run the filtering recursion over a [B, T, c, h, w] batch.

        noise: [T, B, nz] standard-normal draws, or None for the
        zero-noise (mean-propagation) evaluation mode.
        """
        b, t = obs.shape[:2]
        nz = self.cfg.latent_dim
        dt = dc.get_dtype()
        time_major = np.ascontiguousarray(obs.transpose(1, 0, 2, 3, 4), dtype=dt)
        frames = self._frames(time_major.reshape(t * b, *obs.shape[2:]))
        feat = self.encode_features(frames)

        if noise is None:
            noise = np.zeros((t, b, nz), dtype=dt)

        q1 = self.init_head(dc.narrow(feat, 0, 0, b))
        z = q1.sample(noise[0].astype(dt, copy=False))
        latents, posteriors, priors = [z], [q1], []

        fused_form = self.cfg.posterior == "fused"
        if fused_form and t > 1:
            meas_all = self.meas_head(feat)

        for step in range(1, t):
            u = Tensor(controls[:, step - 1], dtype=dt)
            if fused_form:
                prior, q_trans = self.transitions.step(z, u)
                q_meas = DiagGaussian(
                    dc.narrow(meas_all.mean, 0, step * b, b),
                    dc.narrow(meas_all.var, 0, step * b, b),
                )
                post = fuse(q_meas, q_trans)
            else:
                prior = self.transitions.prior(z, u)
                fe = dc.narrow(feat, 0, step * b, b)
                h = dc.relu(self.joint_hidden(dc.concat([z, u, fe], axis=1)))
                post = self.joint_head(h)
            z = post.sample(noise[step].astype(dt, copy=False))
            latents.append(z)
            posteriors.append(post)
            priors.append(prior)

        return FilterResult(latents, posteriors, priors)

    def filter_step(self, z_prev: Tensor, u: Tensor, frames) -> DiagGaussian:
        """One filtering update from (z_{t-1}, u_{t-1}) and the new frame."""
        feat = self.encode_features(self._frames(frames))
        if self.cfg.posterior == "fused":
            return fuse(self.meas_head(feat),
                        self.transitions.posterior(z_prev, u))
        h = dc.relu(self.joint_hidden(dc.concat([z_prev, u, feat], axis=1)))
        return self.joint_head(h)

    # -- generation ---------------------------------------------------------

    def generate(self, controls: np.ndarray, n_steps: int,
                 x1: np.ndarray | None = None, z1: np.ndarray | Tensor | None = None,
                 noise: np.ndarray | None = None) -> np.ndarray:
        """Prior rollout decoded to image means, [n_steps, B, c, h, w].

        z1 is sampled from the initial network on x1 unless given directly.
        """
        dt = dc.get_dtype()
        if z1 is None:
            if x1 is None:
                raise dc.ContractError("generate needs x1 or z1")
            q1 = self.initial_net(np.asarray(x1, dtype=dt))
            b = q1.mean.data.shape[0]
            eps = noise[0] if noise is not None else np.zeros((b, self.cfg.latent_dim))
            z = q1.sample(eps.astype(dt, copy=False))
        else:
            z = z1 if isinstance(z1, Tensor) else Tensor(np.asarray(z1, dtype=dt))
        b = z.data.shape[0]
        if n_steps > 1 and controls.shape[1] < n_steps - 1:
            raise dc.ContractError(
                f"need {n_steps - 1} controls, got {controls.shape[1]}")
        zs = [z]
        for step in range(1, n_steps):
            u = Tensor(controls[:, step - 1], dtype=dt)
            prior = self.transitions.prior(z, u)
            eps = noise[step] if noise is not None else np.zeros((b, self.cfg.latent_dim))
            z = prior.sample(eps.astype(dt, copy=False))
            zs.append(z)
        images = self.decode_images(dc.concat(zs, axis=0))
        s = self.cfg.image_size
        return images.reshape(n_steps, b, self.cfg.channels, s, s)

    # -- persistence ----------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.store.named()

    def load_blobs(self, blobs: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(blobs)
        if missing:
            raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:4]} ...")
        for name, t in params.items():
            arr = np.asarray(blobs[name], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"{name}: checkpoint shape {arr.shape} != model {t.data.shape}")
            t.data = arr.copy()


def save_model(path, model: Model, run_config: dict,
               extra_blobs: dict[str, np.ndarray] | None = None) -> None:
    blobs = {name: t.data for name, t in model.parameters().items()}
    if extra_blobs:
        blobs.update(extra_blobs)
    write_checkpoint(path, cfgmod.serialize_config(run_config), blobs)


def load_model(path) -> tuple[Model, dict, dict[str, np.ndarray]]:
    """Rebuild a Model from a checkpoint; returns (model, run_config, blobs)."""
    text, blobs = read_checkpoint(path)
    rc = cfgmod.parse_config(text)
    model = Model(model_config_from_run(rc))
    model.load_blobs(blobs)
    return model, rc, blobs
