"""Run configuration and scenario profiles (YAML, strictly validated)."""
from __future__ import annotations

import hashlib
import json
import os
from importlib import resources
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import photonics as ph
from . import polarization as pol
from .devices import agent_names

ENV_PREFIX = "QNETCTL_ENDPOINT_"
DEG = np.pi / 180.0


class ConfigError(ValueError):
    """Invalid configuration; ``str()`` names the offending key path."""


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# -- scenario profile ------------------------------------------------------------

class StateSpec(Strict):
    kind: Literal["bell", "werner", "dephased"] = "bell"
    p: float = Field(1.0, ge=0.0, le=1.0)  # werner mixing
    visibility: float = Field(1.0, ge=0.0, le=1.0)  # dephased: white-noise visibility
    dephasing: float = Field(0.0, ge=0.0, le=1.0)  # dephased: HV-coherence loss

    def density(self) -> np.ndarray:
        if self.kind == "bell":
            return pol.bell_state("phi+")
        if self.kind == "werner":
            return pol.werner_state(self.p)
        return pol.dephased_bell_state(self.visibility, self.dephasing)


class EpsSpec(Strict):
    rep_rate: float = Field(250e6, gt=0)
    mu0: float = Field(0.05, ge=0)
    attenuation: float = Field(0.0, ge=0)
    intrinsic_visibility: float = Field(1.0, ge=0, le=1)
    channel_pair: str = "CH45/CH23"
    noise_rates: tuple[float, float] = (0.0, 0.0)
    alignment_rate: float = Field(1e5, ge=0)


class ChannelSpec(Strict):
    length_km: float = Field(0.0, ge=0)
    loss_db_per_km: float = Field(0.2, ge=0)
    insertion_loss_db: float = Field(0.0, ge=0)
    propagation_delay_ps: int = 0
    drift_rate: float = Field(0.0, ge=0)
    seed: int = 0
    misalignment_seed: Optional[int] = None  # fixed random birefringence of the installed fiber


class DetectorSpec(Strict):
    efficiency: float = Field(1.0, ge=0, le=1)
    dark_rate: float = Field(100.0, ge=0)
    jitter_sigma: float = Field(0.0, ge=0)


class ClockSpec(Strict):
    offset: int = 0
    drift_ppm: float = 0.0
    jitter_sigma: float = Field(0.0, ge=0)
    locked_to_reference: bool = False
    reference_divider: int = Field(1000, ge=1)


class Profile(Strict):
    name: str = "custom"
    description: str = ""
    sites: tuple[str, str] = ("site2", "site3")
    hub: str = "site1"
    coincidence_window_ps: int = Field(500, gt=0)
    eps: EpsSpec = EpsSpec()
    state: StateSpec = StateSpec()
    channels: dict[str, ChannelSpec] = {}
    detectors: dict[str, DetectorSpec] = {}
    clocks: dict[str, ClockSpec] = {}

    @model_validator(mode="after")
    def _sites(self):
        if len(set(self.sites)) != 2 or self.hub in self.sites:
            raise ValueError("need two distinct measurement sites different from the hub")
        for part in ("channels", "detectors", "clocks"):
            unknown = set(getattr(self, part)) - set(self.sites)
            if unknown:
                raise ValueError(f"{part} has entries for unknown site(s) {sorted(unknown)}")
        return self

    def scenario(self) -> ph.Scenario:
        def per_site(part, spec_cls):
            return {s: getattr(self, part).get(s, spec_cls()) for s in self.sites}

        channels = {}
        for s, c in per_site("channels", ChannelSpec).items():
            kw = c.model_dump(exclude={"misalignment_seed"})
            if c.misalignment_seed is not None:
                kw["misalignment"] = pol.random_unitary(np.random.default_rng(c.misalignment_seed))
            channels[s] = ph.FiberChannel(**kw)
        detectors = {s: ph.DetectorModel(**d.model_dump()) for s, d in per_site("detectors", DetectorSpec).items()}
        clocks = {s: ph.ClockModel(**c.model_dump()) for s, c in per_site("clocks", ClockSpec).items()}
        analyzers = {s: pol.analyzer_for("H") for s in self.sites}
        eps = ph.EpsModel(**self.eps.model_dump())
        return ph.Scenario(eps, channels, analyzers, detectors, clocks, self.state.density(), self.sites, self.hub)


# -- run configuration -------------------------------------------------------------

class RpcSpec(Strict):
    max_attempts: int = Field(3, ge=1)
    timeout_ms: int = Field(2000, gt=0)
    backoff_ms: int = Field(100, ge=0)


class SyncSpec(Strict):
    duration: float = Field(5.0, gt=0)
    lock_attempts: int = Field(3, ge=1)
    min_pps: int = Field(3, ge=1)


class DarkSpec(Strict):
    d_min: float = Field(10.0, ge=0)
    d_max: float = 500.0
    dwell: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _order(self):
        if not self.d_min < self.d_max:
            raise ValueError("d_min must be below d_max")
        return self


class GridSpec(Strict):
    start: float = 0.0
    stop: float = 15.5
    step: float = Field(0.5, gt=0)

    def values(self) -> list[float]:
        n = int(np.floor((self.stop - self.start) / self.step + 1e-9))
        return [round(self.start + k * self.step, 10) for k in range(n + 1)]


class CalibrationSpec(Strict):
    grid: GridSpec = GridSpec()
    target_fraction: float = Field(0.85, gt=0, le=1)
    dwell: float = Field(1.0, gt=0)
    min_coincidences: int = Field(30_000, ge=0)  # per grid point (adaptive dwell)
    max_dwell: Optional[float] = Field(60.0, gt=0)
    target_accidentals: int = Field(30_000, ge=1)


class CompensationSpec(Strict):
    step_deg: float = Field(2.0, gt=0)
    half_window_deg: float = Field(30.0, gt=0)
    coarse_step_deg: Optional[float] = Field(10.0, gt=0)
    dwell: float = Field(1.0, gt=0)
    max_rounds: int = Field(5, ge=1)
    n_sigma: float = Field(3.0, gt=0)

    @model_validator(mode="after")
    def _window(self):
        if self.half_window_deg < self.step_deg:
            raise ValueError("half_window_deg must be at least step_deg")
        return self

    def kwargs(self) -> dict:
        return {"step": self.step_deg * DEG, "half_window": self.half_window_deg * DEG, "dwell": self.dwell,
                "max_rounds": self.max_rounds, "n_sigma": self.n_sigma,
                "coarse_step": None if self.coarse_step_deg is None else self.coarse_step_deg * DEG}


class TpiSpec(Strict):
    points: int = Field(16, ge=8)
    dwell: float = Field(1.0, gt=0)


class QstSpec(Strict):
    dwell: float = Field(1.0, gt=0)


class ServiceSpec(Strict):
    run_time_hours: float = Field(12.0, gt=0)
    interval_hours: float = Field(1.0, gt=0)
    threshold_mode: Literal["per-basis", "average"] = "per-basis"
    threshold: Union[float, Literal["auto"]] = "auto"
    auto_fraction: float = Field(0.9, gt=0, le=1)
    calibrate: bool = True

    @model_validator(mode="after")
    def _times(self):
        if not self.run_time_hours > self.interval_hours:
            raise ValueError("run_time_hours must exceed interval_hours")
        return self


class ScheduledDrift(Strict):
    """Scripted fiber disturbance: rotate ``site``'s fiber just before service iteration ``at_iteration``."""
    site: str
    at_iteration: int = Field(ge=1)
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)  # Stokes axis
    angle_deg: float = 90.0

    def unitary(self) -> np.ndarray:
        axis = np.asarray(self.axis, float)
        norm = np.linalg.norm(axis)
        if norm == 0:
            raise ValueError("drift axis must be nonzero")
        return pol.su2_from_vector(axis / norm * self.angle_deg * DEG)


class RunConfig(Strict):
    seed: int = 0
    profile: str = "remote"  # built-in profile name or path to a profile YAML
    output_dir: str = "qnetctl-out"
    time_compression: float = Field(60.0, gt=0)
    transport: Literal["local", "tcp"] = "local"
    coincidence_window_ps: Optional[int] = Field(None, gt=0)
    endpoints: dict[str, str] = {}
    rpc: RpcSpec = RpcSpec()
    sync: SyncSpec = SyncSpec()
    darkcheck: DarkSpec = DarkSpec()
    calibration: CalibrationSpec = CalibrationSpec()
    compensation: CompensationSpec = CompensationSpec()
    tpi: TpiSpec = TpiSpec()
    qst: QstSpec = QstSpec()
    service: ServiceSpec = ServiceSpec()
    drift_events: list[ScheduledDrift] = []

    @field_validator("endpoints")
    @classmethod
    def _endpoints(cls, v: dict[str, str]):
        seen: dict[str, str] = {}
        for name, ep in v.items():
            host, sep, port = ep.rpartition(":")
            if not sep or not host or not port.isdigit():
                raise ValueError(f"endpoint for {name!r} must look like host:port, got {ep!r}")
            if int(port) == 0:  # OS-assigned port, distinct by construction
                continue
            if ep in seen:
                raise ValueError(f"agents {seen[ep]!r} and {name!r} share endpoint {ep}")
            seen[ep] = name
        return v

    def digest(self) -> str:
        """Hash of everything that affects measurements (the output location does not)."""
        blob = json.dumps(self.model_dump(mode="json", exclude={"output_dir"}), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _format_error(exc: ValidationError, source: str) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        if err["type"] == "extra_forbidden":
            lines.append(f"{path}: unknown key")
        else:
            lines.append(f"{path}: {err['msg']}")
    return f"{source}: " + "; ".join(lines)


def _read_yaml(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def parse_config(data: dict, source: str = "<config>", env: dict | None = None) -> RunConfig:
    env = os.environ if env is None else env
    data = dict(data)
    overrides = {k[len(ENV_PREFIX):].lower(): v for k, v in env.items() if k.startswith(ENV_PREFIX)}
    if overrides:
        data["endpoints"] = {**(data.get("endpoints") or {}), **overrides}
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc, source)) from None


def load_config(path, env: dict | None = None) -> RunConfig:
    return parse_config(_read_yaml(path), str(path), env)


def builtin_profiles() -> list[str]:
    files = resources.files("qnetctl").joinpath("profiles").iterdir()
    return sorted(p.name[:-5] for p in files if p.name.endswith(".yaml"))


def parse_profile(data: dict, source: str = "<profile>") -> Profile:
    try:
        return Profile.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc, source)) from None


def load_profile(ref: str) -> Profile:
    """Built-in profile by name, or a YAML file path."""
    if ref in builtin_profiles():
        text = resources.files("qnetctl").joinpath("profiles", f"{ref}.yaml").read_text()
        return parse_profile(yaml.safe_load(text) or {}, f"profile {ref}")
    if not Path(ref).exists():
        raise ConfigError(f"profile: {ref!r} is neither a built-in profile ({', '.join(builtin_profiles())}) "
                          "nor an existing file")
    return parse_profile(_read_yaml(ref), ref)


def resolve_endpoints(cfg: RunConfig, sites) -> dict[str, str]:
    names = agent_names(sites)
    unknown = set(cfg.endpoints) - set(names)
    if unknown:
        raise ConfigError(f"endpoints: unknown agent(s) {sorted(unknown)}; expected {names}")
    return {n: cfg.endpoints.get(n, "127.0.0.1:0") for n in names}
