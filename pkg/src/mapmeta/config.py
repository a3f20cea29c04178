"""Run configuration shared by the pipeline and the command line."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .consensus import ConsensusConfig
from .geolocalizer import MODES
from .textual_linker import LinkerConfig

GEOCODER_URL_ENV = "MAPMETA_GEOCODER_URL"


class ConfigError(ValueError):
    """Bad or inconsistent configuration; maps to exit status 2."""


@dataclass(frozen=True)
class PipelineConfig:
    embeddings: str | None = None
    embed_dim: int | None = None
    oov: str = "zeros"
    gazetteer: str | None = None
    checkpoint: str | None = None
    sheets_dir: str | None = None
    output_dir: str | None = None
    prob_maps: str | None = None
    geocoder_url: str | None = None
    rate_limit: float | None = 10.0

    text_threshold: float = 0.5
    theta: float = 0.5
    binarize_p: float | None = 0.5
    raster_size: int = 256
    component_mode: str = "scc"
    geo_modes: tuple[str, ...] = MODES
    match_mode: str = "phrase_by_phrase"
    eps_km: float = 10.0
    min_pts: int = 3
    radius_km: float = 50.0
    min_similarity: float = 0.8
    write_candidates: bool = True

    epochs: int = 60
    lr: float = 0.01
    seed: int = 0
    tune_embeddings: bool = False
    workers: int | None = None

    def validate(self) -> "PipelineConfig":
        def check(ok: bool, msg: str) -> None:
            if not ok:
                raise ConfigError(msg)

        check(0.0 < self.text_threshold < 1.0, "text_threshold must be in (0, 1)")
        check(0.0 < self.theta < 1.0, "theta must be in (0, 1)")
        check(self.binarize_p is None or 0.0 < self.binarize_p < 1.0, "binarize_p must be in (0, 1)")
        check(self.raster_size >= 8, "raster_size must be at least 8")
        check(self.component_mode in ("scc", "wcc"), f"unknown component mode {self.component_mode!r}")
        check(bool(self.geo_modes) and all(m in MODES for m in self.geo_modes),
              f"geo_modes must be a non-empty subset of {MODES}")
        check(self.match_mode in self.geo_modes, "match_mode must be one of geo_modes")
        check(self.eps_km > 0, "eps_km must be positive")
        check(self.min_pts >= 1, "min_pts must be >= 1")
        check(self.radius_km > 0, "radius_km must be positive")
        check(0.0 <= self.min_similarity <= 1.0, "min_similarity must be in [0, 1]")
        check(self.oov in ("zeros", "hash"), f"unknown OOV policy {self.oov!r}")
        check(self.embed_dim is None or self.embed_dim > 0, "embed_dim must be positive")
        check(self.rate_limit is None or self.rate_limit > 0, "rate_limit must be positive")
        check(self.epochs >= 1, "epochs must be >= 1")
        check(self.lr >= 0, "lr must be non-negative")
        check(self.workers is None or self.workers >= 1, "workers must be >= 1")
        return self

    def require(self, *names: str) -> None:
        """Fail unless each named path option is set and exists."""
        for name in names:
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f"{name} is required")
            if not Path(value).exists():
                raise ConfigError(f"{name} path does not exist: {value}")

    def linker(self) -> LinkerConfig:
        return LinkerConfig(lr=self.lr, epochs=self.epochs, seed=self.seed, threshold=self.text_threshold,
                            tune_embeddings=self.tune_embeddings)

    def consensus(self) -> ConsensusConfig:
        return ConsensusConfig(self.theta, self.binarize_p, self.text_threshold, self.raster_size)

    def n_workers(self) -> int:
        return self.workers or os.cpu_count() or 1

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["geo_modes"] = list(self.geo_modes)
        return d


_FIELDS = {f.name for f in fields(PipelineConfig)}


def _coerce(values: Mapping[str, Any]) -> dict[str, Any]:
    unknown = sorted(set(values) - _FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = dict(values)
    if "geo_modes" in out and out["geo_modes"] is not None:
        modes = out["geo_modes"]
        out["geo_modes"] = tuple([modes] if isinstance(modes, str) else modes)
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None,
                env: Mapping[str, str] | None = None) -> PipelineConfig:
    """Defaults, then a JSON file, then the environment, then explicit overrides.

    Overrides whose value is ``None`` are ignored so argparse defaults can be
    passed through unchanged.
    """
    cfg = PipelineConfig()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = replace(cfg, **_coerce(data))
    env = os.environ if env is None else env
    if env.get(GEOCODER_URL_ENV):
        cfg = replace(cfg, geocoder_url=env[GEOCODER_URL_ENV])
    if overrides:
        cfg = replace(cfg, **_coerce({k: v for k, v in overrides.items() if v is not None}))
    try:
        return cfg.validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

