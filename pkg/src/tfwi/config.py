"""Plain-text pipeline configuration.

Format: one `key = value` per line, `#` comments, blank lines ignored.
Keys are namespaced by section prefix (geometry.*, tokenizer.*,
backbone.*, rl.*, refine.*, seeds.*). Unknown keys are rejected, and
seeds carry no defaults: a config missing a seed does not parse. The
resolved config (defaults materialized) is written next to every run's
outputs.
"""

import os

from .backbone import BackboneConfig
from .refine import EnsembleSpec, RefineConfig
from .rl import RLConfig
from .tokenizer import TokenizerConfig
from .wavesim import AcquisitionGeometry

ENV_CONFIG = "TFWI_CONFIG"


class ConfigError(ValueError):
    """Unknown key, missing required key, or unparseable value."""


_REQUIRED = object()


def _parse_bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s):
    return tuple(int(t) for t in s.split(","))


def _parse_strs(s):
    out = tuple(t.strip() for t in s.split(",") if t.strip())
    if not out:
        raise ValueError("empty list")
    return out


REGISTRY = {
    "geometry.width": (int, 70),
    "geometry.num_sources": (int, 5),
    "geometry.num_receivers": (int, 70),
    "geometry.num_timesteps": (int, 1000),
    "geometry.dx": (float, 10.0),
    "families": (_parse_strs, ("flat-layers", "curved-layers",
                               "faulted-layers")),
    "dataset.count": (int, 100),
    "dataset.augmented_fraction": (float, 0.0),
    "tokenizer.variant": (str, "compact"),
    "tokenizer.K": (int, 512),
    "tokenizer.latent_dim": (int, 0),       # 0 keeps the variant default
    "tokenizer.channels": (_parse_ints, (16, 32)),
    "tokenizer.blocks": (int, 2),
    "tokenizer.heads": (int, 4),
    "tokenizer.train_steps": (int, 1500),
    "tokenizer.batch": (int, 8),
    "tokenizer.lr": (float, 1e-3),
    "tokenizer.commit_weight": (float, 0.25),
    "backbone.mode": (str, "causal"),
    "backbone.layers": (int, 6),
    "backbone.heads": (int, 8),
    "backbone.width": (int, 256),
    "backbone.ff_mult": (int, 4),
    "backbone.dropout": (float, 0.0),
    "backbone.patch_time": (int, 50),
    "backbone.train_steps": (int, 2000),
    "backbone.batch": (int, 8),
    "backbone.lr": (float, 5e-4),
    "rl.group_size": (int, 8),
    "rl.temperature": (float, 1.0),
    "rl.clip_eps": (float, 0.2),
    "rl.kl_coef": (float, 0.02),
    "rl.lr": (float, 5e-5),
    "rl.iterations": (int, 40),
    "refine.max_iters": (int, 20),
    "refine.rel_tol": (float, 1e-4),
    "refine.max_halvings": (int, 5),
    "refine.ensemble_n": (int, 5),
    "refine.temperature": (float, 1.0),
    "seeds.data": (int, _REQUIRED),
    "seeds.tokenizer": (int, _REQUIRED),
    "seeds.backbone": (int, _REQUIRED),
    "seeds.rl": (int, _REQUIRED),
    "seeds.sample": (int, _REQUIRED),
    "output.dir": (str, "runs"),
}


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(t) for t in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


class PipelineConfig:
    """Typed view over the key registry with defaults materialized."""

    def __init__(self, values=None):
        values = dict(values or {})
        self.values = {}
        for key, (_, default) in REGISTRY.items():
            if key in values:
                self.values[key] = values.pop(key)
            elif default is _REQUIRED:
                raise ConfigError(f"missing required config key '{key}'")
            else:
                self.values[key] = default
        if values:
            bad = sorted(values)[0]
            raise ConfigError(f"unknown config key '{bad}'")

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_text(cls, text):
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            key, sep, value = body.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected 'key = value', "
                                  f"got {line!r}")
            key, value = key.strip(), value.strip()
            if key not in REGISTRY:
                raise ConfigError(f"unknown config key '{key}'")
            if key in raw:
                raise ConfigError(f"duplicate config key '{key}'")
            parser = REGISTRY[key][0]
            try:
                raw[key] = parser(value)
            except ValueError as exc:
                raise ConfigError(
                    f"bad value for '{key}': {value!r} ({exc})") from exc
        return cls(raw)

    @classmethod
    def from_file(cls, path=None):
        path = path or os.environ.get(ENV_CONFIG)
        if not path:
            raise ConfigError(
                f"no config path given and ${ENV_CONFIG} is unset")
        with open(path) as fh:
            return cls.from_text(fh.read())

    def text(self):
        lines = [f"{k} = {_format_value(self.values[k])}"
                 for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.text())

    # --- typed builders for the module configs ---------------------------

    def geometry(self):
        return AcquisitionGeometry(
            width=self["geometry.width"],
            num_sources=self["geometry.num_sources"],
            num_receivers=self["geometry.num_receivers"],
            num_timesteps=self["geometry.num_timesteps"])

    def tokenizer_config(self):
        latent = self["tokenizer.latent_dim"] or None
        return TokenizerConfig(
            self["tokenizer.variant"], K=self["tokenizer.K"],
            input_size=self["geometry.width"], latent_dim=latent,
            channels=self["tokenizer.channels"],
            blocks=self["tokenizer.blocks"], heads=self["tokenizer.heads"],
            train_steps=self["tokenizer.train_steps"],
            batch=self["tokenizer.batch"], lr=self["tokenizer.lr"],
            commit_weight=self["tokenizer.commit_weight"])

    def backbone_config(self, tok_cfg, mode=None):
        return BackboneConfig(
            mode=mode or self["backbone.mode"],
            layers=self["backbone.layers"], heads=self["backbone.heads"],
            width=self["backbone.width"], ff_mult=self["backbone.ff_mult"],
            dropout=self["backbone.dropout"], K=tok_cfg.K,
            latent_dim=tok_cfg.d, token_grid=tok_cfg.grid,
            num_sources=self["geometry.num_sources"],
            num_timesteps=self["geometry.num_timesteps"],
            num_receivers=self["geometry.num_receivers"],
            patch_time=self["backbone.patch_time"],
            families=self["families"])

    def rl_config(self):
        return RLConfig(
            group_size=self["rl.group_size"],
            temperature=self["rl.temperature"],
            clip_eps=self["rl.clip_eps"], kl_coef=self["rl.kl_coef"],
            lr=self["rl.lr"], iterations=self["rl.iterations"])

    def refine_config(self, threads=1):
        return RefineConfig(
            max_iters=self["refine.max_iters"],
            rel_tol=self["refine.rel_tol"],
            max_halvings=self["refine.max_halvings"], threads=threads)

    def ensemble_spec(self, threads=1):
        return EnsembleSpec(
            n=self["refine.ensemble_n"],
            temperature=self["refine.temperature"],
            refine_config=self.refine_config(threads))
