"""Run configuration: nested defaults, YAML loading and dotted overrides."""

from __future__ import annotations

import copy
from dataclasses import fields
from pathlib import Path

import yaml

from .align import AlignConfig
from .core import FINDINGS, REGIONS
from .imgenc import PretrainConfig
from .phantom import PhantomSpec
from .textenc import TextConfig


BUNDLED = Path(__file__).parent / "configs"


class ConfigError(ValueError):
    pass


def _section(cls, drop=("seed",)):
    return {f.name: copy.deepcopy(f.default) if not callable(f.default_factory) else f.default_factory()
            for f in fields(cls) if f.name not in drop}


def defaults():
    phantom = _section(PhantomSpec)
    phantom.update(n_samples=100, split={"train": 0.7, "val": 0.1, "test": 0.2})
    imgenc = _section(PretrainConfig, drop=("seed", "m"))
    imgenc.update(
        p_size={"arteries": 8, "myocardium": 16, "aorta_tp": 16},
        stride=None,
        sampler={"arteries": "skeleton", "myocardium": "grid", "aorta_tp": "skeleton"},
        max_pretrain_patches=None,
    )
    text = _section(TextConfig, drop=("seed", "m"))
    align = _section(AlignConfig)
    return {
        "seed": 0,
        "m": 768,
        "phantom": phantom,
        "textenc": text,
        "imgenc": imgenc,
        "align": align,
        "zeroshot": {"k": 40, "method": "sample"},
        "paths": {"data": None, "lexicon": None},
    }


def _merge(base, update, where=""):
    for k, v in update.items():
        key = f"{where}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict) and k not in ("finding_priors",):
            if not isinstance(v, dict):
                raise ConfigError(f"{key} must be a mapping")
            if k in ("p_size", "sampler"):
                bad = set(v) - set(REGIONS)
                if bad:
                    raise ConfigError(f"unknown regions under {key}: {sorted(bad)}")
            _merge(base[k], v, key + ".")
        elif k == "finding_priors":
            if not isinstance(v, dict) or set(v) - set(FINDINGS):
                raise ConfigError(f"{key} must map findings to priors")
            base[k] = {**base[k], **v}
        else:
            base[k] = v


def parse_override(text):
    """``a.b.c=value`` -> nested dict; the value is read as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    out = cur = {}
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = yaml.safe_load(raw)
    return out


class RunConfig:
    def __init__(self, data):
        self.data = data
        self._validate()

    @classmethod
    def load(cls, path=None, overrides=(), seed=None):
        cfg = defaults()
        if path is not None:
            path = Path(path)
            bundled = BUNDLED / f"{path}.yaml"
            if not path.is_file() and path.suffix == "" and bundled.is_file():
                path = bundled
            if not path.is_file():
                raise FileNotFoundError(f"config file not found: {path}")
            doc = yaml.safe_load(path.read_text()) or {}
            if not isinstance(doc, dict):
                raise ConfigError("config file must hold a mapping")
            _merge(cfg, doc)
        for o in overrides:
            _merge(cfg, parse_override(o))
        if seed is not None:
            cfg["seed"] = int(seed)
        return cls(cfg)

    def _validate(self):
        self.phantom_spec()
        self.text_config()
        self.pretrain_config()
        self.align_config()
        split = self.data["phantom"]["split"]
        if set(split) != {"train", "val", "test"}:
            raise ConfigError("phantom.split needs train, val and test")
        vals = list(split.values())
        if all(isinstance(v, int) for v in vals):
            if sum(vals) != self.data["phantom"]["n_samples"]:
                raise ConfigError("split counts must add up to phantom.n_samples")
        elif abs(sum(vals) - 1.0) > 1e-9 or min(vals) < 0:
            raise ConfigError("split fractions must be non-negative and sum to 1")
        for r in REGIONS:
            if self.data["imgenc"]["sampler"][r] not in ("skeleton", "grid"):
                raise ConfigError(f"sampler for {r} must be 'skeleton' or 'grid'")
        if self.data["zeroshot"]["method"] not in ("sample", "kmeans"):
            raise ConfigError("zeroshot.method must be 'sample' or 'kmeans'")

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self):
        return int(self.data["seed"])

    def phantom_spec(self):
        p = {k: v for k, v in self.data["phantom"].items() if k not in ("n_samples", "split")}
        try:
            return PhantomSpec(seed=self.seed, **p)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"phantom: {exc}") from exc

    def text_config(self):
        return self._build(TextConfig, "textenc", seed=self.seed + 1, m=self.data["m"])

    def pretrain_config(self):
        keep = {f.name for f in fields(PretrainConfig)}
        section = {k: v for k, v in self.data["imgenc"].items() if k in keep}
        try:
            return PretrainConfig(seed=self.seed + 2, m=self.data["m"], **section)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"imgenc: {exc}") from exc

    def align_config(self):
        return self._build(AlignConfig, "align", seed=self.seed + 3)

    def _build(self, cls, name, **extra):
        try:
            return cls(**self.data[name], **extra)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: {exc}") from exc

    def dump(self):
        return yaml.safe_dump(self.data, sort_keys=True)
