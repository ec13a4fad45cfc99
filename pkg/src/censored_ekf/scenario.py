"""Synthetic scenarios: truth simulation, noisy censored observations, file formats.

Dataset CSV columns: ``time,channel,value,censored,limit_low,limit_high``.
Censored rows report the violated detection limit as their value. Numbers are
written with 17 significant digits, infinities as ``inf``/``-inf``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time as _time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .censored import ChannelObservation, FilterConfig, FilterResult, PrunePolicy, filter_run
from .core import (
    DynamicsModel,
    IntegrationDivergedError,
    _rk4_joint,
    GaussianBelief,
    IntegratorSettings,
    ObservationModel,
    is_psd,
    step_grid,
)
from .models import (
    ConfigurationError,
    HcvParams,
    HivParams,
    OscillatorParams,
    TransformSpec,
    augment_for_dual_estimation,
    hcv_model,
    hcv_observation,
    hiv_model,
    hiv_observation,
    oscillator_model,
    oscillator_observation,
    equilibrium,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DATASET_COLUMNS = ("time", "channel", "value", "censored", "limit_low", "limit_high")


class DatasetError(ValueError):
    """Malformed or inconsistent dataset file."""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


def fmt(x: float) -> str:
    return format(float(x), ".17g")


# -------------------------------------------------------------------- dataset

@dataclass
class Dataset:
    time: np.ndarray
    channel: np.ndarray
    value: np.ndarray
    censored: np.ndarray
    limit_low: np.ndarray
    limit_high: np.ndarray

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float)
        self.channel = np.asarray(self.channel, dtype=object)
        self.value = np.asarray(self.value, dtype=float)
        self.censored = np.asarray(self.censored, dtype=bool)
        self.limit_low = np.asarray(self.limit_low, dtype=float)
        self.limit_high = np.asarray(self.limit_high, dtype=float)

    def __len__(self):
        return self.time.size

    def validate(self) -> "Dataset":
        n = len(self)
        for name in DATASET_COLUMNS:
            if len(getattr(self, name)) != n:
                raise DatasetError(f"column {name} has the wrong length")
        if n and np.any(np.diff(self.time) < 0):
            i = int(np.flatnonzero(np.diff(self.time) < 0)[0]) + 1
            raise DatasetError(f"times decrease at row {i + 1} ({self.time[i - 1]} -> {self.time[i]})")
        for i in range(n):
            _check_row(self.time[i], self.value[i], self.censored[i], self.limit_low[i],
                       self.limit_high[i], i + 2)
        return self

    def rows(self):
        for i in range(len(self)):
            yield (float(self.time[i]), str(self.channel[i]), float(self.value[i]),
                   bool(self.censored[i]), float(self.limit_low[i]), float(self.limit_high[i]))

    @property
    def censored_fraction(self) -> float:
        return float(self.censored.mean()) if len(self) else 0.0

    def frames(self, channels: Sequence[str]) -> list[tuple[float, list[ChannelObservation]]]:
        """Group rows by time into filter frames; channel names index ``channels``."""
        index = {c: i for i, c in enumerate(channels)}
        out: list[tuple[float, list[ChannelObservation]]] = []
        for t, ch, v, cens, lo, hi in self.rows():
            if ch not in index:
                raise DatasetError(f"channel {ch!r} is not produced by the observation model {tuple(channels)}")
            if cens:
                interval = (-math.inf, lo) if v <= lo else (hi, math.inf)
                obs = ChannelObservation(index[ch], v, True, interval)
            else:
                obs = ChannelObservation(index[ch], v)
            if out and out[-1][0] == t:
                if any(o.channel == obs.channel for o in out[-1][1]):
                    raise DatasetError(f"channel {ch!r} appears twice at t={t}")
                out[-1][1].append(obs)
            else:
                out.append((t, [obs]))
        return out

    def channel_rows(self, name: str) -> "Dataset":
        m = self.channel == name
        return Dataset(self.time[m], self.channel[m], self.value[m], self.censored[m],
                       self.limit_low[m], self.limit_high[m])


def _check_row(t, v, cens, lo, hi, line):
    if not math.isfinite(t):
        raise DatasetError("time must be finite", line)
    if not lo < hi:
        raise DatasetError("limit_low must be below limit_high", line)
    if cens:
        if math.isinf(lo) and math.isinf(hi):
            raise DatasetError("censored row needs at least one finite limit", line)
        if v != lo and v != hi:
            raise DatasetError("censored value must equal its detection limit", line)
    elif not math.isfinite(v):
        raise DatasetError("uncensored value must be finite", line)


def write_dataset(ds: Dataset, path) -> None:
    ds.validate()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DATASET_COLUMNS)
        for t, ch, v, cens, lo, hi in ds.rows():
            w.writerow([fmt(t), ch, fmt(v), int(cens), fmt(lo), fmt(hi)])


def _parse_float(text: str, what: str, line: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise DatasetError(f"cannot parse {what} {text!r}", line) from None


def read_dataset(path) -> Dataset:
    cols: dict[str, list] = {c: [] for c in DATASET_COLUMNS}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != DATASET_COLUMNS:
            raise DatasetError(f"expected header {','.join(DATASET_COLUMNS)}", 1)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(DATASET_COLUMNS):
                raise DatasetError(f"expected {len(DATASET_COLUMNS)} fields, got {len(row)}", line)
            t = _parse_float(row[0], "time", line)
            ch = row[1].strip()
            if not ch:
                raise DatasetError("empty channel name", line)
            v = _parse_float(row[2], "value", line)
            if row[3].strip() not in ("0", "1"):
                raise DatasetError(f"censored flag must be 0 or 1, got {row[3]!r}", line)
            cens = row[3].strip() == "1"
            lo = _parse_float(row[4], "limit_low", line)
            hi = _parse_float(row[5], "limit_high", line)
            _check_row(t, v, cens, lo, hi, line)
            if cols["time"] and t < cols["time"][-1]:
                raise DatasetError(f"times must be nondecreasing ({cols['time'][-1]} then {t})", line)
            for name, val in zip(DATASET_COLUMNS, (t, ch, v, cens, lo, hi)):
                cols[name].append(val)
    return Dataset(**cols)


# --------------------------------------------------------------------- truth

@dataclass
class Trajectory:
    """States (and optionally estimated-parameter coordinates) on a time grid."""

    times: np.ndarray
    states: np.ndarray
    names: tuple[str, ...]

    def column(self, name: str) -> np.ndarray:
        return self.states[:, self.names.index(name)]


def simulate_truth(model: DynamicsModel, x0, times, rng_seed: int = 0, Q=None,
                   integ: IntegratorSettings = IntegratorSettings()) -> np.ndarray:
    """Integrate the model from ``x0`` at ``times[0]``; rows are states at ``times``.

    Deterministic RK4 when ``Q`` is zero, Euler-Maruyama at the same substep
    resolution otherwise.
    """
    times = np.asarray(times, dtype=float)
    if times.size and np.any(np.diff(times) <= 0):
        raise ValueError("simulation times must increase strictly")
    n = model.state_dim
    Q = model.process_noise if Q is None else np.atleast_2d(np.asarray(Q, dtype=float))
    if Q.shape == (1, 1) and n > 1:
        Q = Q[0, 0] * np.eye(n)
    x = np.asarray(x0, dtype=float).copy()
    out = np.empty((times.size, n))
    if times.size == 0:
        return out
    out[0] = x
    stochastic = bool(np.any(Q != 0))
    if stochastic:
        rng = np.random.default_rng(rng_seed)
        w, V = np.linalg.eigh(0.5 * (Q + Q.T))
        Lq = V * np.sqrt(np.clip(w, 0.0, None))
    for k in range(1, times.size):
        if not stochastic:
            x, _, _ = _rk4_joint(model, times[k - 1], times[k], x, None, None, integ)
        else:
            grid = step_grid(times[k - 1], times[k], integ, model.breakpoints)
            for ta, tb in zip(grid[:-1], grid[1:]):
                h = tb - ta
                x = x + h * np.asarray(model.drift(ta, x)) + math.sqrt(h) * (Lq @ rng.standard_normal(n))
                if not np.all(np.isfinite(x)):
                    raise IntegrationDivergedError(tb)
        out[k] = x
    return out


@dataclass(frozen=True)
class CensorWindow:
    channel: str
    low: float = -math.inf
    high: float = math.inf
    start: float = -math.inf
    stop: float = math.inf


def make_observations(times, states, obs_model: ObservationModel, schedule: Mapping[str, Sequence[float]],
                      noise_level: float, censor: Sequence[CensorWindow] = (), rng_seed: int = 0
                      ) -> tuple[Dataset, dict[str, float]]:
    """Noisy, censored observations of a trajectory.

    Each channel gets Gaussian noise with standard deviation
    ``noise_level * RMS(noiseless channel values)``. Returns the dataset and
    the per-channel noise standard deviations.
    """
    if not noise_level >= 0:
        raise ConfigurationError("noise level must be nonnegative")
    times = np.asarray(times, dtype=float)
    rng = np.random.default_rng(rng_seed)
    rows = []
    sigmas = {}
    for ci, ch in enumerate(obs_model.channels):
        tt = np.asarray(schedule.get(ch, ()), dtype=float)
        if tt.size == 0:
            continue
        idx = np.searchsorted(times, tt)
        if np.any(idx >= times.size) or np.any(np.abs(times[np.minimum(idx, times.size - 1)] - tt) > 1e-9):
            raise ConfigurationError(f"observation times for {ch!r} are not on the trajectory grid")
        clean = np.array([obs_model.h(states[i])[ci] for i in idx])
        sigma = noise_level * math.sqrt(float(np.mean(clean ** 2)))
        sigmas[ch] = sigma
        noisy = clean + sigma * rng.standard_normal(clean.size)
        for t, v in zip(tt, noisy):
            lo, hi = _limits_at(censor, ch, t)
            rows.append((t, ci, ch, v, lo, hi))
    rows.sort(key=lambda r: (r[0], r[1]))
    value = np.array([r[3] for r in rows])
    lo = np.array([r[4] for r in rows])
    hi = np.array([r[5] for r in rows])
    value, cens = apply_censoring(value, lo, hi)
    ds = Dataset(np.array([r[0] for r in rows]), np.array([r[2] for r in rows], dtype=object),
                 value, cens, lo, hi)
    return ds.validate(), sigmas


def apply_censoring(value, low, high):
    """Replace values outside ``[low, high]`` with the violated limit. Idempotent."""
    value = np.asarray(value, dtype=float).copy()
    below = value < low
    above = value > high
    value[below] = np.asarray(low, dtype=float)[below] if np.ndim(low) else low
    value[above] = np.asarray(high, dtype=float)[above] if np.ndim(high) else high
    cens = below | above
    return value, cens


def _limits_at(censor, ch, t):
    for w in censor:
        if w.channel == ch and w.start <= t < w.stop:
            return w.low, w.high
    return -math.inf, math.inf


# -------------------------------------------------------------------- config

Number = Union[float, int]
Bound = Optional[Union[float, Literal["inf", "-inf"]]]


def _bound(v, default):
    if v is None:
        return default
    return float(v)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ParamChange(_Strict):
    time: float = Field(description="time at which the true parameters switch")
    params: dict[str, float] = Field(description="new true parameter values")


class ModelSection(_Strict):
    id: Literal["oscillator", "hcv", "hiv"] = Field(description="benchmark system")
    params: dict[str, float] = Field(default_factory=dict,
                                     description="true parameter values; unspecified ones use the model's table defaults")
    param_changes: list[ParamChange] = Field(default_factory=list,
                                             description="truth-only piecewise-constant parameter changes")
    treatment_windows: Optional[list[tuple[float, float]]] = Field(
        default=None, description="HIV only: [start, stop) intervals with u(t) = 1")


class SteadyStateInit(_Strict):
    steady_state: list[float] = Field(description="initial guess (natural units) for the untreated steady state")
    floor: float = Field(default=1e-3, ge=0, description="lower bound for compartments that vanish without treatment")
    relax: float = Field(default=0.0, ge=0, description="integrate the untreated system this long before the root search")


class TruthSection(_Strict):
    t0: float = Field(default=0.0, description="simulation start time")
    initial_state: Union[list[float], SteadyStateInit] = Field(
        description="true initial state in natural units, or {steady_state: guess}")
    process_noise: Union[float, list[float]] = Field(
        default=0.0, description="truth process noise (filter coordinates): scalar or diagonal")


class ChannelSchedule(_Strict):
    start: Optional[float] = Field(default=None, description="first observation time")
    stop: Optional[float] = Field(default=None, description="last observation time (inclusive)")
    step: Optional[float] = Field(default=None, description="spacing between observations")
    times: Optional[list[float]] = Field(default=None, description="explicit observation times")

    @model_validator(mode="after")
    def _one_form(self):
        if (self.times is None) == (self.step is None):
            raise ValueError("give either explicit times or start/stop/step")
        if self.step is not None and (self.start is None or self.stop is None or not self.step > 0):
            raise ValueError("start, stop and a positive step are required")
        return self

    def grid(self) -> np.ndarray:
        if self.times is not None:
            return np.asarray(self.times, dtype=float)
        n = int(math.floor((self.stop - self.start) / self.step + 1e-9))
        return self.start + self.step * np.arange(n + 1)


class CensorSpec(_Strict):
    channel: str = Field(description="channel the detection limits apply to")
    low: Bound = Field(default=None, description="lower detection limit (null = none)")
    high: Bound = Field(default=None, description="upper detection limit (null = none)")
    start: Optional[float] = Field(default=None, description="limits apply from this time")
    stop: Optional[float] = Field(default=None, description="limits apply before this time")


class ObservationSection(_Strict):
    channels: dict[str, ChannelSchedule] = Field(description="observation schedule per channel")
    noise_level: float = Field(description="noise sd as a fraction of each channel's noiseless RMS")
    censor: list[CensorSpec] = Field(default_factory=list, description="detection limits per channel and era")

    @field_validator("noise_level")
    @classmethod
    def _nonneg(cls, v):
        if not v >= 0:
            raise ValueError("noise_level must be nonnegative")
        return v


class EstimateSpec(_Strict):
    name: str = Field(description="parameter to append to the state")
    transform: Literal["identity", "log10", "tan"] = Field(default="identity",
                                                           description="coordinates the parameter is estimated in")


class IntegratorSection(_Strict):
    substeps: int = Field(default=20, ge=1, description="RK4 substeps per observation interval")
    max_step: Optional[float] = Field(default=None, gt=0, description="upper bound on the RK4 step")


class PruneSection(_Strict):
    epsilon: float = Field(default=1e-4, ge=0, description="normalized cross-covariance threshold")
    max_age: Optional[int] = Field(default=50, ge=0, description="maximum history age in observation steps")
    absorb: bool = Field(default=True, description="fold forgotten entries into the belief instead of deleting them")


class EquilibriumPrior(_Strict):
    state_sd: float = Field(default=0.1, ge=0,
                            description="extra independent state sd (filter coordinates) on top of the linearized map")
    floor: float = Field(default=1e-3, ge=0, description="lower bound for compartments that vanish without treatment")
    relax: float = Field(default=0.0, ge=0, description="integrate the untreated system this long before the root search")


class FilterSection(_Strict):
    estimate: list[EstimateSpec] = Field(default_factory=list, description="parameters for dual estimation")
    initial_mean: list[float] = Field(description="initial state then parameter guesses, natural units")
    initial_cov: Union[list[float], list[list[float]]] = Field(
        description="initial covariance in filter coordinates (diagonal or full)")
    equilibrium_prior: Optional[EquilibriumPrior] = Field(
        default=None, description="derive the initial state belief from the untreated equilibrium at the "
                                  "guessed parameters (initial_mean state entries become the search guess)")
    process_noise: Union[float, list[float]] = Field(default=0.0,
                                                     description="state process noise Q (filter coordinates)")
    param_process_noise: Union[float, list[float]] = Field(default=1e-6,
                                                           description="parameter random-walk intensity")
    observation_noise: Union[Literal["auto"], dict[str, float]] = Field(
        default="auto", description="'auto' (generation noise) or sd per channel")
    integrator: IntegratorSection = Field(default_factory=IntegratorSection, description="RK4 settings")
    prune: Optional[PruneSection] = Field(default_factory=PruneSection,
                                          description="history pruning (null disables)")
    moment_method: Literal["ep", "mc"] = Field(default="ep",
                                               description="truncated-moment backend for multi-entry histories")
    moment_tol: float = Field(default=1e-3, gt=0, description="Monte-Carlo standard-error target (relative)")
    min_mass: float = Field(default=1e-12, ge=0, description="vanishing-mass threshold")
    plain_ekf: bool = Field(default=False, description="treat censored values as exact measurements")


class OutputSection(_Strict):
    dataset: str = Field(default="dataset.csv", description="dataset CSV path (relative to --out)")
    truth: str = Field(default="truth.csv", description="ground-truth CSV path")
    results: str = Field(default="results.csv", description="per-step filter results CSV")
    summary: str = Field(default="summary.json", description="run summary JSON")
    report: str = Field(default="report.csv", description="long-format plot table")


class ScenarioConfig(_Strict):
    schema_version: Literal[1] = Field(description="config schema version")
    name: str = Field(description="scenario name")
    seed: int = Field(default=0, description="master random seed")
    model: ModelSection
    truth: TruthSection
    observations: ObservationSection
    filter: FilterSection
    outputs: OutputSection = Field(default_factory=OutputSection)

    @model_validator(mode="after")
    def _channels_exist(self):
        known = {"oscillator": ("x1",), "hcv": ("viral_load",), "hiv": ("cd4", "viral_load")}[self.model.id]
        for ch in list(self.observations.channels) + [c.channel for c in self.observations.censor]:
            if ch not in known:
                raise ValueError(f"channel {ch!r} does not exist for model {self.model.id} (has {known})")
        if isinstance(self.filter.observation_noise, dict):
            for ch in self.filter.observation_noise:
                if ch not in known:
                    raise ValueError(f"observation_noise names unknown channel {ch!r}")
        return self


def load_config(source: Union[str, Path, Mapping[str, Any]], overrides: Sequence[str] = ()) -> ScenarioConfig:
    """Load a config file (or mapping) and apply ``key.path=value`` overrides."""
    if isinstance(source, Mapping):
        data = json.loads(json.dumps(source))
    else:
        with open(source, encoding="utf-8") as fh:
            data = json.load(fh)
    for item in overrides:
        apply_override(data, item)
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(str(exc)) from None


def apply_override(data: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        if isinstance(node, list):
            node = node[int(p)]
        elif isinstance(node, dict) and p in node:
            node = node[p]
        else:
            raise ConfigurationError(f"override key {key!r} does not exist in the config")
    last = parts[-1]
    if isinstance(node, list):
        node[int(last)] = value
    elif isinstance(node, dict) and last in node:
        node[last] = value
    elif isinstance(node, dict) and _is_optional_key(parts):
        node[last] = value
    else:
        raise ConfigurationError(f"override key {key!r} does not exist in the config")


def _is_optional_key(parts: Sequence[str]) -> bool:
    """Keys with defaults may be set even when absent from the file."""
    model = ScenarioConfig
    for p in parts:
        fields = getattr(model, "model_fields", None)
        if fields is None or p not in fields:
            return False
        ann = fields[p].annotation
        model = next((a for a in getattr(ann, "__args__", (ann,)) if isinstance(a, type)
                      and issubclass(a, BaseModel)), ann)
    return True


def config_keys_help() -> str:
    """Every accepted config key with its description, for ``--help``."""
    lines = []

    def walk(model, prefix):
        for name, f in model.model_fields.items():
            lines.append(f"  {prefix}{name}: {f.description or ''}".rstrip())
            stack = [(f.annotation, f"{prefix}{name}.")]
            while stack:
                ann, pre = stack.pop()
                origin = getattr(ann, "__origin__", None)
                args = getattr(ann, "__args__", ())
                if isinstance(ann, type) and issubclass(ann, BaseModel):
                    walk(ann, pre)
                elif origin is list:
                    stack.extend((a, pre[:-1] + "[].") for a in args)
                elif origin is dict:
                    stack.append((args[-1], pre + "<name>."))
                else:
                    stack.extend((a, pre) for a in args)

    walk(ScenarioConfig, "")
    return "\n".join(lines)


# ------------------------------------------------------------------ scenario

@dataclass
class Scenario:
    """Everything needed to simulate and filter one configured scenario."""

    config: ScenarioConfig
    truth_model: DynamicsModel
    filter_model: DynamicsModel
    obs_model: ObservationModel
    base_state_names: tuple[str, ...]
    state_transform: TransformSpec
    x0: np.ndarray
    schedule: dict[str, np.ndarray]
    censor: list[CensorWindow]
    integrator: IntegratorSettings
    filter_config: FilterConfig
    param_coords: tuple[str, ...] = field(default_factory=tuple)

    @property
    def seeds(self) -> tuple[int, int, int]:
        """(truth noise, observation noise, filter) seeds derived from the master seed."""
        ss = np.random.SeedSequence(self.config.seed).spawn(3)
        return tuple(int(s.generate_state(1)[0]) for s in ss)

    @property
    def channels(self) -> tuple[str, ...]:
        return self.obs_model.channels

    @property
    def state_names(self) -> tuple[str, ...]:
        return self.filter_model.state_names

    @property
    def obs_times(self) -> np.ndarray:
        ts = np.concatenate([np.asarray(v, dtype=float) for v in self.schedule.values()])
        return np.unique(ts)



def _system_model(model_id: str, params: Mapping[str, float], windows=None, transform=None, Q=None):
    try:
        if model_id == "oscillator":
            return oscillator_model(OscillatorParams(**params), process_noise=Q)
        if model_id == "hcv":
            return hcv_model(HcvParams(**params), transform or "log10", process_noise=Q)
        kw = dict(params)
        if windows is not None:
            kw["treatment_windows"] = tuple(tuple(w) for w in windows)
        return hiv_model(HivParams(**kw), transform or "log10", process_noise=Q)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for {model_id}: {exc}") from None


def _observation(model_id: str, variances: Mapping[str, float]) -> ObservationModel:
    if model_id == "oscillator":
        return oscillator_observation(variances.get("x1", 1.0))
    if model_id == "hcv":
        return hcv_observation(variances.get("viral_load", 1.0))
    return hiv_observation((variances.get("cd4", 1.0), variances.get("viral_load", 1.0)))


class PiecewiseDrift:
    """Drift that switches between parameter sets at fixed times."""

    def __init__(self, pieces: Sequence[tuple[float, DynamicsModel]]):
        self.starts = [t for t, _ in pieces]
        self.models = [m for _, m in pieces]

    def _pick(self, t):
        i = int(np.searchsorted(self.starts, t, side="right")) - 1
        return self.models[max(i, 0)]

    def drift(self, t, x):
        return self._pick(t).drift(t, x)

    def jacobian(self, t, x):
        return self._pick(t).jacobian(t, x)


def build_scenario(cfg: ScenarioConfig) -> Scenario:
    mid = cfg.model.id
    windows = cfg.model.treatment_windows
    if windows is not None and mid != "hiv":
        raise ConfigurationError("treatment_windows applies to the hiv model only")
    base = _system_model(mid, cfg.model.params, windows)
    src = base.source
    n = base.state_dim
    spec = src.transform

    # truth model (possibly with parameter changes)
    pieces = [(-math.inf, base)]
    current = dict(cfg.model.params)
    for change in sorted(cfg.model.param_changes, key=lambda c: c.time):
        current = {**current, **change.params}
        pieces.append((change.time, _system_model(mid, current, windows)))
    Qt = _diag_or_matrix(cfg.truth.process_noise, n)
    if len(pieces) == 1:
        truth_model = base.with_process_noise(Qt)
    else:
        pw = PiecewiseDrift(pieces)
        bps = {t for t, _ in pieces[1:]}
        for _, m in pieces:
            bps.update(m.breakpoints)
        bps = tuple(sorted(bps))
        truth_model = DynamicsModel(n, pw.drift, pw.jacobian, Qt, bps, base.state_names, src)

    # initial state
    init = cfg.truth.initial_state
    if isinstance(init, SteadyStateInit):
        if len(init.steady_state) != n:
            raise ConfigurationError(f"steady_state guess needs {n} entries")
        untreated = _untreated(mid, cfg.model.params).source
        try:
            x_eq = equilibrium(untreated.system, untreated.params, init.steady_state, cfg.truth.t0, init.floor,
                               init.relax)
        except RuntimeError as exc:
            raise ConfigurationError(str(exc)) from None
        y0 = spec.forward(x_eq)
    else:
        x0_raw = np.asarray(init, dtype=float)
        if x0_raw.size != n:
            raise ConfigurationError(f"initial_state needs {n} entries")
        y0 = spec.forward(x0_raw)

    # filter model
    fc = cfg.filter
    variances = {}
    if isinstance(fc.observation_noise, dict):
        variances = {k: v * v for k, v in fc.observation_noise.items()}
    obs = _observation(mid, variances)
    fmodel = base.with_process_noise(_diag_or_matrix(fc.process_noise, n))
    names = [e.name for e in fc.estimate]
    if names:
        fmodel, obs = augment_for_dual_estimation(fmodel, obs, names, [e.transform for e in fc.estimate],
                                                  fc.param_process_noise)
    integ = IntegratorSettings(fc.integrator.substeps, fc.integrator.max_step)
    prune = None if fc.prune is None else PrunePolicy(fc.prune.epsilon, fc.prune.max_age, fc.prune.absorb)
    fconf = FilterConfig(integ, prune, fc.moment_method, fc.moment_tol, fc.min_mass, 0, fc.plain_ekf)

    schedule = {ch: s.grid() for ch, s in cfg.observations.channels.items()}
    censor = [CensorWindow(c.channel, _bound(c.low, -math.inf), _bound(c.high, math.inf),
                           _bound(c.start, -math.inf), _bound(c.stop, math.inf))
              for c in cfg.observations.censor]
    sc = Scenario(cfg, truth_model, fmodel, obs, base.state_names, spec, y0, schedule, censor, integ, fconf,
                  tuple(fmodel.state_names[n:]))
    sc.filter_config = FilterConfig(integ, prune, fc.moment_method, fc.moment_tol, fc.min_mass,
                                    sc.seeds[2], fc.plain_ekf)
    return sc


def _untreated(mid, params):
    if mid == "hcv":
        p = dict(params)
        p.update(epsilon=0.0, rho=0.0)
        return _system_model(mid, p)
    if mid == "hiv":
        return _system_model(mid, params, windows=[])
    return _system_model(mid, params)


def _diag_or_matrix(v, n) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        return float(a) * np.eye(n)
    if a.ndim == 1:
        if a.size != n:
            raise ConfigurationError(f"expected {n} diagonal entries, got {a.size}")
        return np.diag(a)
    if a.shape != (n, n):
        raise ConfigurationError(f"expected a {n}x{n} matrix, got {a.shape}")
    return a


def initial_belief(sc: Scenario) -> GaussianBelief:
    fc = sc.config.filter
    n_base = len(sc.base_state_names)
    mean_nat = np.asarray(fc.initial_mean, dtype=float)
    if mean_nat.size != sc.filter_model.state_dim:
        raise ConfigurationError(f"initial_mean needs {sc.filter_model.state_dim} entries "
                                 f"({', '.join(sc.state_names)}), got {mean_nat.size}")
    mean = np.empty_like(mean_nat)
    if fc.equilibrium_prior is None:
        mean[:n_base] = sc.state_transform.forward(mean_nat[:n_base])
    else:
        mean[:n_base] = 0.0  # replaced by the equilibrium below
    if fc.estimate:
        pspec = sc.filter_model.source.param_transform
        mean[n_base:] = pspec.forward(mean_nat[n_base:])
    cov = _diag_or_matrix(fc.initial_cov, mean.size)
    if not is_psd(cov):
        raise ConfigurationError("initial_cov is not positive semidefinite")
    if fc.equilibrium_prior is not None:
        mean, cov = _equilibrium_prior(sc, mean, cov, mean_nat[:n_base])
    return GaussianBelief(sc.config.truth.t0, mean, cov)


def _equilibrium_prior(sc: Scenario, mean, cov, guess):
    """Initial state belief implied by an untreated equilibrium at uncertain parameters.

    The state mean is the equilibrium at the guessed parameters; its
    covariance with the parameters follows from linearizing the
    parameter-to-equilibrium map by central differences.
    """
    fc = sc.config.filter
    prior = fc.equilibrium_prior
    if not fc.estimate:
        raise ConfigurationError("equilibrium_prior needs estimated parameters")
    n = len(sc.base_state_names)
    aug = sc.filter_model.source
    mid = sc.config.model.id

    def eq_state(q_tilde):
        params = dict(sc.config.model.params)
        params.update(aug.natural(q_tilde))
        src = _untreated(mid, params).source
        try:
            x = equilibrium(src.system, src.params, guess, sc.config.truth.t0, prior.floor, prior.relax)
        except RuntimeError as exc:
            raise ConfigurationError(f"equilibrium prior: {exc}") from None
        return sc.state_transform.forward(x)

    q = mean[n:]
    y0 = eq_state(q)
    J = np.empty((n, q.size))
    for j in range(q.size):
        h = 1e-5 * max(abs(q[j]), 1.0)
        e = np.zeros(q.size)
        e[j] = h
        J[:, j] = (eq_state(q + e) - eq_state(q - e)) / (2 * h)
    Pqq = cov[n:, n:]
    out = cov.copy()
    out[:n, :n] = J @ Pqq @ J.T + prior.state_sd ** 2 * np.eye(n)
    out[:n, n:] = J @ Pqq
    out[n:, :n] = out[:n, n:].T
    mean = mean.copy()
    mean[:n] = y0
    return mean, 0.5 * (out + out.T)


def simulate(sc: Scenario) -> tuple[Dataset, Trajectory, dict[str, float]]:
    """Truth trajectory on the observation grid plus the noisy censored dataset."""
    t0 = sc.config.truth.t0
    obs_t = sc.obs_times
    if obs_t.size and obs_t[0] < t0:
        raise ConfigurationError("observations start before the simulation start time")
    grid = obs_t if obs_t.size and obs_t[0] == t0 else np.concatenate([[t0], obs_t])
    s_truth, s_obs, _ = sc.seeds
    states = simulate_truth(sc.truth_model, sc.x0, grid, s_truth, integ=sc.integrator)
    base_obs = _observation(sc.config.model.id, {})
    ds, sigmas = make_observations(grid, states, base_obs, sc.schedule, sc.config.observations.noise_level,
                                   sc.censor, s_obs)
    truth = _augment_truth(sc, grid, states)
    keep = np.isin(grid, obs_t)
    truth = Trajectory(truth.times[keep], truth.states[keep], truth.names)
    return ds, truth, sigmas


def _augment_truth(sc: Scenario, grid, states) -> Trajectory:
    """Append the true values of estimated parameters (filter coordinates) to the states."""
    names = list(sc.base_state_names)
    cols = [states]
    fm = sc.filter_model
    if sc.param_coords:
        aug = fm.source
        tm = sc.truth_model
        vals = np.empty((grid.size, len(aug.names)))
        for i, t in enumerate(grid):
            src = _truth_source_at(tm, t)
            raw = np.array([src.params[src.system.param_index(nm)] for nm in aug.names])
            vals[i] = aug.param_transform.forward(raw)
        cols.append(vals)
    names = list(fm.state_names)
    return Trajectory(np.asarray(grid, dtype=float), np.hstack(cols), tuple(names))


def _truth_source_at(tm: DynamicsModel, t):
    drift = tm.drift
    owner = getattr(drift, "__self__", None)
    if isinstance(owner, PiecewiseDrift):
        return owner._pick(t).source
    return tm.source


def filter_dataset(sc: Scenario, ds: Dataset, sigmas: Optional[Mapping[str, float]] = None,
                   plain_ekf: Optional[bool] = None) -> FilterResult:
    """Run the configured filter over a dataset."""
    obs = sc.obs_model
    if sc.config.filter.observation_noise == "auto":
        if sigmas is None:
            sigmas = dataset_sigmas(ds, sc.config.observations.noise_level)
        missing = [c for c in obs.channels if c not in sigmas and c in set(ds.channel)]
        if missing:
            raise ConfigurationError(f"no noise level known for channels {missing}")
        R = np.diag([max(sigmas.get(c, 1.0), 1e-12) ** 2 for c in obs.channels])
        obs = obs.with_noise(R)
    fconf = sc.filter_config
    if plain_ekf is not None and plain_ekf != fconf.plain_ekf:
        fconf = FilterConfig(fconf.integrator, fconf.prune, fconf.moment_method, fconf.moment_tol,
                             fconf.min_mass, fconf.seed, plain_ekf)
    frames = ds.frames(obs.channels)
    return filter_run(sc.filter_model, obs, initial_belief(sc), frames, fconf)


def dataset_sigmas(ds: Dataset, noise_level: float) -> dict[str, float]:
    """Noise sd per channel estimated from the dataset values (used without a truth file)."""
    out = {}
    for ch in dict.fromkeys(ds.channel):
        v = ds.value[ds.channel == ch]
        out[str(ch)] = noise_level * math.sqrt(float(np.mean(v ** 2)))
    return out


def truth_sigmas(sc: Scenario, truth: Trajectory) -> dict[str, float]:
    """Noise sd per channel exactly as used when the dataset was generated."""
    obs = _observation(sc.config.model.id, {})
    n = len(sc.base_state_names)
    out = {}
    for ci, ch in enumerate(obs.channels):
        tt = sc.schedule.get(ch)
        if tt is None or len(tt) == 0:
            continue
        idx = np.searchsorted(truth.times, tt)
        clean = np.array([obs.h(truth.states[i, :n])[ci] for i in idx])
        out[ch] = sc.config.observations.noise_level * math.sqrt(float(np.mean(clean ** 2)))
    return out


# ------------------------------------------------------------------- results

RESULT_META = ("step", "time", "history_size", "n_censored", "gain_norm", "correction_gain_norm",
               "estimator_error", "trace_naive", "trace_final")
SUFFIXES = ("mean", "var", "lo", "hi")


@dataclass
class ResultsTable:
    """Per-step filter output as named columns (the results CSV in memory)."""

    columns: dict[str, np.ndarray]
    state_names: tuple[str, ...]

    @classmethod
    def from_result(cls, result: FilterResult) -> "ResultsTable":
        recs = result.records
        if not recs:
            raise DatasetError("filter produced no steps")
        cols: dict[str, np.ndarray] = {}
        for k in RESULT_META:
            cols[k] = np.array([getattr(r, k) for r in recs], dtype=float)
        means = np.array([r.final.mean for r in recs])
        var = np.array([np.diag(r.final.cov) for r in recs])
        sd = np.sqrt(np.clip(var, 0.0, None))
        for i, nm in enumerate(result.state_names):
            cols[f"{nm}_mean"] = means[:, i]
            cols[f"{nm}_var"] = var[:, i]
            cols[f"{nm}_lo"] = means[:, i] - 1.96 * sd[:, i]
            cols[f"{nm}_hi"] = means[:, i] + 1.96 * sd[:, i]
        return cls(cols, tuple(result.state_names))

    def __len__(self):
        return len(self.columns["time"])

    def mean(self, name):
        return self.columns[f"{name}_mean"]


def write_results(result, path) -> ResultsTable:
    table = result if isinstance(result, ResultsTable) else ResultsTable.from_result(result)
    header = list(RESULT_META) + [f"{nm}_{s}" for nm in table.state_names for s in SUFFIXES]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(table)):
            w.writerow([str(int(table.columns[h][i])) if h in ("step", "history_size", "n_censored")
                        else fmt(table.columns[h][i]) for h in header])
    return table


def read_results(path) -> ResultsTable:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError("results file is empty", 1)
        if tuple(header[:len(RESULT_META)]) != RESULT_META or (len(header) - len(RESULT_META)) % 4:
            raise DatasetError("not a results file (unexpected header)", 1)
        names = []
        for i in range(len(RESULT_META), len(header), 4):
            stem = header[i][:-len("_mean")]
            if [f"{stem}_{s}" for s in SUFFIXES] != header[i:i + 4]:
                raise DatasetError(f"malformed state columns near {header[i]!r}", 1)
            names.append(stem)
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"expected {len(header)} fields, got {len(row)}", line)
            rows.append([_parse_float(v, header[j], line) for j, v in enumerate(row)])
    if not rows:
        raise DatasetError("results file has no rows", 2)
    arr = np.array(rows)
    return ResultsTable({h: arr[:, j] for j, h in enumerate(header)}, tuple(names))


def write_truth(truth: Trajectory, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("time",) + truth.names)
        for t, row in zip(truth.times, truth.states):
            w.writerow([fmt(t)] + [fmt(v) for v in row])


def read_truth(path) -> Trajectory:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "time":
            raise DatasetError("truth file must start with a time column", 1)
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"expected {len(header)} fields, got {len(row)}", line)
            rows.append([_parse_float(v, header[j], line) for j, v in enumerate(row)])
    arr = np.array(rows).reshape(-1, len(header))
    return Trajectory(arr[:, 0], arr[:, 1:], tuple(header[1:]))


# ------------------------------------------------------------------- summary

def summarize(sc: Scenario, result: FilterResult, truth: Optional[Trajectory] = None,
              dataset: Optional[Dataset] = None) -> dict:
    """Final estimates with 95% intervals (filter and natural units) and RMSE vs truth."""
    fin = result.final
    lo, hi = fin.interval()
    names = result.state_names
    out: dict[str, Any] = {
        "scenario": sc.config.name,
        "seed": sc.config.seed,
        "steps": len(result.records),
        "final_time": fin.time,
        "final": {nm: {"mean": float(fin.mean[i]), "sd": float(fin.std()[i]),
                       "lo": float(lo[i]), "hi": float(hi[i])} for i, nm in enumerate(names)},
    }
    if dataset is not None:
        out["censored_fraction"] = dataset.censored_fraction
    n = len(sc.base_state_names)
    if sc.param_coords:
        aug = sc.filter_model.source
        params = {}
        for j, nm in enumerate(aug.names):
            t = aug.param_transform.tags[j]
            i = n + j
            params[nm] = {"estimate": float(t.inverse(fin.mean[i])),
                          "lo": float(t.inverse(lo[i])), "hi": float(t.inverse(hi[i]))}
        out["parameters"] = params
    if truth is not None:
        est = result.means
        idx = np.searchsorted(truth.times, result.times)
        ok = (idx < truth.times.size)
        ok[ok] &= np.abs(truth.times[idx[ok]] - result.times[ok]) < 1e-9
        if ok.any():
            tru = truth.states[idx[ok]]
            err = est[ok][:, :tru.shape[1]] - tru
            out["rmse"] = {nm: float(np.sqrt(np.mean(err[:, i] ** 2)))
                           for i, nm in enumerate(truth.names[:err.shape[1]])}
            if sc.param_coords:
                out["final_truth"] = {nm: float(truth.states[idx[ok]][-1, i])
                                      for i, nm in enumerate(truth.names)}
    return out


@dataclass
class RunOutput:
    dataset: Dataset
    truth: Trajectory
    sigmas: dict[str, float]
    result: FilterResult
    summary: dict
    seconds: float = 0.0


def run_scenario(cfg: ScenarioConfig, plain_ekf: Optional[bool] = None) -> RunOutput:
    """Simulate and filter a scenario end to end (no files written)."""
    start = _time.perf_counter()
    sc = build_scenario(cfg)
    ds, truth, sigmas = simulate(sc)
    result = filter_dataset(sc, ds, sigmas, plain_ekf)
    summary = summarize(sc, result, truth, ds)
    return RunOutput(ds, truth, sigmas, result, summary, _time.perf_counter() - start)
