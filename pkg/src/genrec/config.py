"""Flat dotted-key configuration with environment overrides.

A config file holds one ``key = value`` per line (``#`` starts a comment).
Any key can be overridden by an environment variable named ``GENREC_`` plus
the key upper-cased with dots replaced by underscores, e.g.
``GENREC_TRAIN_EPOCHS=3`` for ``train.epochs``. Precedence, lowest first:
defaults, file, environment, explicit overrides.
"""

from __future__ import annotations

import os
import zlib
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .errors import ConfigError

ENV_PREFIX = "GENREC_"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "paths.data_dir": "data",
    "paths.out_dir": "out",
    "paths.interactions": "",
    "modalities": ["image", "text", "collab"],
    "target": "collab",
    "collab.source": "file",
    "image.source": "rq",
    "rq.levels": 3,
    "rq.codebook_size": 32,
    "rq.collision_vocab": 256,
    "ssl.epochs": 10,
    "sasrec.dim": 64,
    "sasrec.layers": 2,
    "sasrec.epochs": 30,
    "sasrec.negatives": 100,
    "model.enc_layers": 2,
    "model.dec_layers": 2,
    "model.heads": 4,
    "model.head_dim": 16,
    "model.d_ff": 128,
    "model.across_bins": 24,
    "model.within_bins": 8,
    "model.dropout": 0.1,
    "model.dtype": "float32",
    "train.epochs": 25,
    "train.patience": 3,
    "train.batch_size": 64,
    "train.lr": 0.005,
    "train.weight_decay": 0.0,
    "train.mask_p": 0.0,
    "train.constrained": True,
    "train.every_prefix": False,
    "train.max_history": 20,
    "eval.beam_width": 20,
    "eval.ks": [1, 5, 10],
    "eval.visible": ["all"],
    "synth.n_items": 2000,
    "synth.branching": [8, 4],
    "synth.n_users": 5000,
    "synth.min_len": 5,
    "synth.max_len": 15,
    "synth.locality": 0.9,
    "synth.fanout": 3,
    "synth.dim": 32,
    "synth.noise_image": 0.6,
    "synth.noise_text": 0.6,
    "synth.noise_collab": 0.05,
}

SEED_COMPONENTS = ("synth", "codec", "model", "masking", "sasrec", "ssl")


def env_name(key: str) -> str:
    return ENV_PREFIX + key.upper().replace(".", "_")


def _parse(key: str, raw: str, like: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, list):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if like and isinstance(like[0], int):
                return [int(s) for s in items]
            return items
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None
    return raw


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return str(value)


class Config:
    """Typed view over the flat key space; unknown keys are rejected."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        self._values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value: Any) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        like = DEFAULTS[key]
        self._values[key] = _parse(key, value, like) if isinstance(value, str) and not isinstance(like, str) else value

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def items(self) -> Iterable[tuple[str, Any]]:
        return self._values.items()

    def as_dict(self) -> dict[str, Any]:
        return dict(self._values)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self._values.items())

    def validate(self) -> "Config":
        mods = self["modalities"]
        if not mods or len(set(mods)) != len(mods):
            raise ConfigError(f"modalities must be a non-empty list of distinct names, got {mods}")
        if self["target"] not in mods:
            raise ConfigError(f"target modality {self['target']!r} is not among modalities {mods}")
        if self["collab.source"] not in ("file", "sasrec"):
            raise ConfigError("collab.source must be 'file' or 'sasrec'")
        if self["image.source"] not in ("rq", "ssl"):
            raise ConfigError("image.source must be 'rq' or 'ssl'")
        if not 0.0 <= self["train.mask_p"] <= 1.0:
            raise ConfigError("train.mask_p must lie in [0, 1]")
        if self["eval.beam_width"] < 1 or min(self["eval.ks"], default=1) < 1:
            raise ConfigError("beam width and metric cut-offs must be positive")
        unknown = [m for m in self["eval.visible"] if m not in mods and m not in ("all", "none")]
        if unknown:
            raise ConfigError(f"eval.visible names unknown modalities {unknown}")
        return self

    def visible(self) -> list[str]:
        """Modalities left unmasked at evaluation; ``all`` and ``none`` are shorthands."""
        v = self["eval.visible"]
        if not v or v == ["all"]:
            return list(self["modalities"])
        if v == ["none"]:
            return []
        return [m for m in self["modalities"] if m in v]

    # paths --------------------------------------------------------------

    @property
    def data_dir(self) -> Path:
        return Path(self["paths.data_dir"])

    @property
    def out_dir(self) -> Path:
        return Path(self["paths.out_dir"])

    @property
    def interactions(self) -> Path:
        p = self["paths.interactions"]
        return Path(p) if p else self.data_dir / "interactions.tsv"

    def embedding_file(self, modality: str) -> Path:
        return self.data_dir / f"emb_{modality}.bin"

    # seeds --------------------------------------------------------------

    def seed_for(self, component: str) -> int:
        """Independent seed per component derived from the root seed."""
        if component not in SEED_COMPONENTS:
            raise ConfigError(f"no seed stream for component {component!r}")
        ss = np.random.SeedSequence([int(self["seed"]), zlib.crc32(component.encode())])
        return int(ss.generate_state(1)[0])


def parse_file(path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{no}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def load(path=None, overrides: Mapping[str, Any] | None = None, environ: Mapping[str, str] | None = None) -> Config:
    cfg = Config()
    if path is not None:
        for k, v in parse_file(path).items():
            cfg.set(k, v)
    env = os.environ if environ is None else environ
    for key in DEFAULTS:
        name = env_name(key)
        if name in env:
            cfg.set(key, env[name])
    for k, v in (overrides or {}).items():
        cfg.set(k, v)
    return cfg.validate()
