"""Flat "section.key = value" run configuration.

One UTF-8 text file covers env, model, objective, train, eval and
empowerment settings. Unknown keys are rejected; parse -> serialize ->
parse is the identity on canonical form (sorted keys, repr'd values).
"""

from __future__ import annotations


class ConfigError(Exception):
    pass


def _bool(s: str) -> bool:
    if s in ("true", "True", "1"):
        return True
    if s in ("false", "False", "0"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "env.kind": (str, "pendulum"),
    "env.image_size": (int, 16),
    "env.n_seqs": (int, 500),
    "env.horizon": (int, 40),
    "env.seed": (int, 0),
    "env.dt": (float, 0.05),
    "env.max_torque": (float, 5.0),
    "env.max_force": (float, 12.0),
    "env.restitution": (float, 1.0),
    "env.box_side": (float, 10.0),
    "env.ball_radius": (float, 1.0),

    "model.latent_dim": (int, 64),
    "model.transition": (str, "mlp"),        # mlp | locally_linear | slds
    "model.posterior": (str, "fused"),       # fused | joint
    "model.shared_mean": (_bool, False),
    "model.slds_bases": (int, 8),
    "model.enc_hidden": (int, 256),
    "model.trans_hidden": (int, 256),
    "model.hyper_hidden": (int, 128),
    "model.base_filters": (int, 4),
    "model.var_floor": (float, 1e-4),
    "model.seed": (int, 0),

    "objective.kind": (str, "elbo"),         # elbo | beta | geco
    "objective.beta": (float, 1.0),
    "objective.anneal_temp": (float, 1.0),
    "objective.kappa": (float, 3.0),
    "objective.geco_step_size": (float, 1e-2),
    "objective.geco_ema_decay": (float, 0.99),

    "train.batch_size": (int, 32),
    "train.iterations": (int, 15000),
    "train.learning_rate": (float, 1e-3),
    "train.adam_beta1": (float, 0.9),
    "train.adam_beta2": (float, 0.999),
    "train.adam_eps": (float, 1e-8),
    "train.grad_clip_norm": (float, 10.0),
    "train.seed": (int, 0),
    "train.checkpoint_every": (int, 1000),
    "train.precision": (str, "float32"),

    "eval.holdout_frac": (float, 0.1),
    "eval.horizons": (str, "1,5,10"),

    "empowerment.horizon": (int, 7),
    "empowerment.hidden": (int, 128),
    "empowerment.iterations": (int, 3000),
    "empowerment.batch": (int, 64),
    "empowerment.n_samples": (int, 32),
    "empowerment.learning_rate": (float, 1e-3),
    "empowerment.seed": (int, 0),
}


def defaults() -> dict:
    return {k: v for k, (_, v) in SCHEMA.items()}


def parse_config(text: str) -> dict:
    """Parse config text into a fully-populated dict (defaults applied)."""
    cfg = defaults()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'section.key = value': {raw!r}")
        key, val = key.strip(), val.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        parser = SCHEMA[key][0]
        try:
            cfg[key] = parser(val)
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from None
    return cfg


def serialize_config(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        val = cfg[key]
        if isinstance(val, bool):
            s = "true" if val else "false"
        elif isinstance(val, float):
            s = repr(val)
        else:
            s = str(val)
        lines.append(f"{key} = {s}")
    return "\n".join(lines) + "\n"


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())
