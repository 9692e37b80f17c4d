"""Run configuration: every tunable with its default, validation and a provenance hash."""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace

from .stem_fit import METHODS, FitParams

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# symbols used in messages so errors read like the parameter tables
SYMBOLS = {
    "draws": "M", "tau": "τ", "tau_mask": "τ_mask", "slice_thickness": "H", "slice_spacing": "Δz",
    "min_slice_points": "n_min", "hypotheses": "K", "min_inlier_frac": "ρ_min", "r_min": "r_min",
    "r_max": "r_max", "radius_exponent": "p", "taper_eps": "ε", "taper_trials": "T",
    "taper_min_samples": "min_samples", "taper_min_inliers": "min_inliers", "h_bh": "h_BH",
}


class ConfigError(ValueError):
    def __init__(self, name, message):
        sym = SYMBOLS.get(name)
        label = f"{name} ({sym})" if sym and sym != name else name
        super().__init__(f"invalid {label}: {message}")
        self.field = name


@dataclass(frozen=True)
class RunConfig:
    draws: int = 100
    tau: float = 0.5
    tau_mask: float = 0.1
    slice_thickness: float = 1.0
    slice_spacing: float = 0.1
    min_slice_points: int = 5
    hypotheses: int = 2000
    min_inlier_frac: float = 0.1
    r_min: float = 0.02
    r_max: float = 1.0
    radius_exponent: float = 0.6
    taper_eps: float = 0.02
    taper_trials: int = 1000
    taper_min_samples: int = 3
    taper_min_inliers: int = 10
    taper_start: float = 3.0
    h_bh: float = 1.37
    cyl_trials: int = 1000
    cyl_inlier: float = 0.02
    cyl_sigma: float = 0.02
    cyl_max_iter: int = 100
    ground: str = "nearest"
    grouping: str = "both"
    methods: tuple = ("circle-w",)
    seed: int = 0
    threads: int = field(default=1, compare=False)

    def __post_init__(self):
        validate(self)

    def fit_params(self) -> FitParams:
        return FitParams(
            slice_spacing=self.slice_spacing, slice_thickness=self.slice_thickness,
            min_slice_points=self.min_slice_points, hypotheses=self.hypotheses,
            min_inlier_frac=self.min_inlier_frac, r_min=self.r_min, r_max=self.r_max,
            radius_exponent=self.radius_exponent, taper_eps=self.taper_eps,
            taper_trials=self.taper_trials, taper_min_samples=self.taper_min_samples,
            taper_min_inliers=self.taper_min_inliers, taper_start=self.taper_start, h_bh=self.h_bh,
            cyl_trials=self.cyl_trials, cyl_inlier=self.cyl_inlier, cyl_sigma=self.cyl_sigma,
            cyl_max_iter=self.cyl_max_iter)

    def to_dict(self, with_threads=False):
        d = asdict(self)
        d["methods"] = list(self.methods)
        if not with_threads:
            d.pop("threads")
        return d

    @property
    def hash(self):
        """Short digest of every setting that can change an output (thread count excluded)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def header(self, stage):
        return {"stage": stage, "config_hash": self.hash, "config": self.to_dict()}


_UNIT = ("tau", "tau_mask", "min_inlier_frac")
_POS_INT = ("draws", "min_slice_points", "hypotheses", "taper_trials", "taper_min_samples",
            "taper_min_inliers", "cyl_trials", "cyl_max_iter", "threads")
_POS_FLOAT = ("slice_thickness", "slice_spacing", "r_min", "r_max", "radius_exponent", "taper_eps",
              "taper_start", "h_bh", "cyl_inlier", "cyl_sigma")


def validate(cfg: RunConfig):
    for name in _POS_INT:
        v = getattr(cfg, name)
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise ConfigError(name, f"must be a positive integer (got {v!r})")
    for name in _POS_FLOAT + _UNIT:
        v = getattr(cfg, name)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or v != v:
            raise ConfigError(name, f"must be a number (got {v!r})")
    for name in _POS_FLOAT:
        if not getattr(cfg, name) > 0:
            raise ConfigError(name, f"must be > 0 (got {getattr(cfg, name)!r})")
    for name in _UNIT:
        if not 0 <= getattr(cfg, name) <= 1:
            raise ConfigError(name, f"must lie in [0, 1] (got {getattr(cfg, name)!r})")
    if cfg.r_min >= cfg.r_max:
        raise ConfigError("r_min", f"must be below r_max ({cfg.r_min!r} >= {cfg.r_max!r})")
    if cfg.taper_min_samples < 2:
        raise ConfigError("taper_min_samples", "a line needs at least 2 samples")
    if isinstance(cfg.seed, bool) or not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed", f"must be a non-negative integer (got {cfg.seed!r})")
    if not cfg.methods:
        raise ConfigError("methods", "at least one method is required")
    for m in cfg.methods:
        if m not in METHODS:
            raise ConfigError("methods", f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    if len(set(cfg.methods)) != len(cfg.methods):
        raise ConfigError("methods", "duplicate method")
    if cfg.ground not in ("nearest", "bilinear"):
        raise ConfigError("ground", f"must be 'nearest' or 'bilinear' (got {cfg.ground!r})")
    if cfg.grouping not in ("per-plot", "pooled", "both"):
        raise ConfigError("grouping", f"must be per-plot, pooled or both (got {cfg.grouping!r})")


FIELD_NAMES = tuple(f.name for f in fields(RunConfig))


def _coerce(name, value):
    if name == "methods":
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        return tuple(value)
    return value


def load_config(path) -> RunConfig:
    """Read a TOML file of ``key = value`` pairs (flat, field names as keys)."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"{path}: {exc}") from None
    return from_mapping(doc, source=str(path))


def from_mapping(doc, base: RunConfig | None = None, source="config") -> RunConfig:
    unknown = sorted(set(doc) - set(FIELD_NAMES))
    if unknown:
        raise ConfigError(unknown[0], f"unknown key in {source}")
    kw = {k: _coerce(k, v) for k, v in doc.items()}
    return replace(base or RunConfig(), **kw)


def dump_config(cfg: RunConfig) -> str:
    """TOML text that load_config reads back to an equal config."""
    lines = []
    for k, v in cfg.to_dict(with_threads=True).items():
        if isinstance(v, str):
            lines.append(f'{k} = "{v}"')
        elif isinstance(v, list):
            lines.append(f"{k} = [{', '.join(json.dumps(x) for x in v)}]")
        else:
            lines.append(f"{k} = {v!r}")
    return "\n".join(lines) + "\n"
