"""Run configuration: defaults, file and environment overrides, validation."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Tuple

import yaml

from .container import MAGIC, ArrayContainer, ContainerError, fingerprint
from .spectro import BandConfig, StftParams

ENV_PREFIX = "BINMAP_"
INIT_STRATEGIES = ("gmm_x", "gmm_joint")
TABLE_PREFIX = "# config: "      # first line of every tabular output


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


@dataclass(frozen=True)
class RunConfig:
    window_ms: float = 64.0
    hop_ms: float = 8.0
    sample_rate: int = 16000
    ild_band: Tuple[int, int] = (1, 512)
    ipd_band: Tuple[int, int] = (20, 128)
    threshold_db: float = -40.0
    K: int = 64
    ladder: Tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64)
    init: str = "gmm_x"
    em_max_iter: int = 200
    em_tol: float = 1e-6
    vem_max_iter: int = 50
    vem_tol: float = 1e-5
    seed: int = 0
    head_seed: int = 1
    grid_step: float = 2.0

    @property
    def stft(self) -> StftParams:
        return StftParams(self.window_ms, self.hop_ms, self.sample_rate)

    @property
    def band(self) -> BandConfig:
        return BandConfig(self.ild_band, self.ipd_band)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.stft, self.band)

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for name in ("ild_band", "ipd_band", "ladder"):
            out[name] = list(out[name])
        return out

    def validate(self) -> "RunConfig":
        def need(cond: bool, msg: str):
            if not cond:
                raise ConfigError(msg)
        need(self.window_ms > 0 and self.hop_ms > 0, "window_ms and hop_ms must be positive")
        need(self.sample_rate > 0, "sample_rate must be positive")
        params = self.stft
        need(params.n_fft >= 2 and 0 < params.hop_length <= params.n_fft,
             "hop must not exceed the window")
        need(params.n_fft % params.hop_length == 0,
             "the window length must be a multiple of the hop")
        try:
            self.band.validate(params.n_bins)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        need(self.threshold_db < 0, "threshold_db must be negative (relative to the peak)")
        need(self.K >= 1, "K must be at least 1")
        need(len(self.ladder) > 0 and all(k >= 1 for k in self.ladder)
             and list(self.ladder) == sorted(set(self.ladder)),
             "ladder must be a strictly increasing list of positive counts")
        need(self.init in INIT_STRATEGIES, f"init must be one of {INIT_STRATEGIES}")
        need(self.em_max_iter >= 1 and self.vem_max_iter >= 1, "iteration caps must be >= 1")
        need(self.em_tol > 0 and self.vem_tol > 0, "tolerances must be positive")
        need(0 <= self.seed < 2 ** 64 and 0 <= self.head_seed < 2 ** 64,
             "seeds must be unsigned 64-bit integers")
        need(self.grid_step > 0, "grid_step must be positive")
        return self

    @classmethod
    def from_mapping(cls, values: Mapping[str, object],
                     base: Optional["RunConfig"] = None) -> "RunConfig":
        base = base or cls()
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(fields))
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        updates = {}
        for name, raw in values.items():
            current = getattr(base, name)
            try:
                if isinstance(current, tuple):
                    updates[name] = tuple(int(v) for v in raw)
                elif isinstance(current, bool):
                    updates[name] = bool(raw)
                elif isinstance(current, int):
                    if isinstance(raw, float) and not raw.is_integer():
                        raise ValueError("not an integer")
                    updates[name] = int(raw)
                elif isinstance(current, float):
                    updates[name] = float(raw)
                else:
                    updates[name] = str(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {name}: {raw!r}") from None
        return dataclasses.replace(base, **updates)


def _read_settings(path: Path):
    """Settings from a YAML/JSON file, or the config embedded in a previous output."""
    blob = path.read_bytes()
    if blob.startswith(MAGIC):
        try:
            return ArrayContainer.from_bytes(blob).meta.get("config")
        except ContainerError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from None
    text = blob.decode("utf-8", errors="replace")
    if text.startswith(TABLE_PREFIX):
        text = text.splitlines()[0][len(TABLE_PREFIX):]
    try:
        return yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None


def load_config(path=None, overrides: Optional[Mapping[str, object]] = None,
                environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Defaults, then the settings file, then ``BINMAP_*`` variables, then ``overrides``.

    The file may be YAML/JSON or any earlier output (table, report or
    container), whose embedded config is reused.
    """
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        data = _read_settings(path)
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must hold a mapping of settings")
        # configs embedded in outputs nest the settings under "config"
        cfg = RunConfig.from_mapping(data.get("config", data), cfg)
    env = os.environ if environ is None else environ
    from_env = {}
    for name in (f.name for f in dataclasses.fields(RunConfig)):
        key = ENV_PREFIX + name.upper()
        if key in env:
            try:
                from_env[name] = yaml.safe_load(env[key])
            except yaml.YAMLError:
                raise ConfigError(f"cannot parse {key}={env[key]!r}") from None
    cfg = RunConfig.from_mapping(from_env, cfg)
    if overrides:
        cfg = RunConfig.from_mapping({k: v for k, v in overrides.items() if v is not None}, cfg)
    return cfg.validate()
