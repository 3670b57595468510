"""Monte Carlo studies of the Delta test: wash-out and pre-exposure designs.

Every replication draws from its own RNG stream keyed by
``(seed, study, number of DIF items, replication index)``, so results do not
depend on the condition grid, on execution order or on the worker count.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .errors import ConfigError, DifgateError, TooManyFailures
from .estimation import EMSettings, ResponseDataset, fit_both_groups
from .irt import make_grid
from .scaling import item_effects, scale_effects

log = logging.getLogger(__name__)

STUDIES = ("washout", "preexposure")
FAILURE_LIMIT = 0.05


@dataclass(frozen=True)
class SimulationConfig:
    study: str = "washout"
    m: int = 16
    n_per_group: int = 500
    replications: int = 500
    dif_proportions: tuple = None
    alpha: float = 0.05
    seed: int = 20240601
    slope_range: tuple = (0.5, 2.0)
    intercept_range: tuple = (-1.5, 1.5)
    shift_range: tuple = (0.4, 0.5)
    washout_impact: float = 0.4
    quad_nodes: int = 61
    em_tol: float = 1e-5
    em_max_iter: int = 500

    def __post_init__(self):
        if self.study not in STUDIES:
            raise ConfigError(f"study: must be one of {STUDIES}, got {self.study!r}")
        for name in ("m", "n_per_group", "replications", "quad_nodes", "em_max_iter"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name}: must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.m < 2:
            raise ConfigError("m: need at least two items")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha: must lie in (0, 1), got {self.alpha}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed: must be a non-negative 64-bit integer")
        grid = self.dif_proportions
        if grid is None:
            grid = tuple(i / self.m for i in range(self.m + 1))
        grid = tuple(float(p) for p in np.atleast_1d(grid))
        for p in grid:
            count = p * self.m
            if not 0 <= p <= 1 or abs(count - round(count)) > 1e-9:
                raise ConfigError(
                    f"dif_proportions: {p} x {self.m} items = {count:g} is not a whole number of items"
                )
        object.__setattr__(self, "dif_proportions", grid)
        for name in ("slope_range", "intercept_range", "shift_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"{name}: lower bound exceeds upper bound")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.slope_range[0] <= 0:
            raise ConfigError("slope_range: slopes must be positive")

    @classmethod
    def from_mapping(cls, mapping):
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        values = {k: tuple(v) if isinstance(v, list) else v for k, v in mapping.items()}
        return cls(**values)

    def as_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def dif_count(self, p):
        return int(round(p * self.m))

    @property
    def impact(self):
        return self.washout_impact if self.study == "washout" else 0.0


@dataclass(frozen=True)
class Truth:
    """Generating parameters on the within-group standardized scale."""

    slopes: np.ndarray = field(repr=False)
    b0: np.ndarray = field(repr=False)
    b1: np.ndarray = field(repr=False)
    dif: np.ndarray = field(repr=False)
    impact: float = 0.0

    @property
    def item_effects(self):
        return (self.b1 - self.b0) / self.slopes


def _choose_dif(m, p, rng):
    count = int(round(p * m))
    if abs(p * m - count) > 1e-9:
        raise ConfigError(f"{p} x {m} items is not a whole number of items")
    dif = np.zeros(m, dtype=bool)
    dif[rng.choice(m, size=count, replace=False)] = True
    return dif


def _draw_responses(slopes, b0, b1, theta0, theta1, rng):
    # b0, b1 are intercepts on the raw (unstandardized) trait scale
    p0 = expit(np.outer(theta0, slopes) + b0)
    p1 = expit(np.outer(theta1, slopes) + b1)
    x = np.vstack([rng.random(p0.shape) < p0, rng.random(p1.shape) < p1]).astype(float)
    group = np.repeat([0, 1], [theta0.size, theta1.size])
    return ResponseDataset(x, group)


def _draw_items(config, rng):
    slopes = rng.uniform(*config.slope_range, size=config.m)
    base = rng.uniform(*config.intercept_range, size=config.m)
    return slopes, slopes * base


def generate_washout(config, p, rng):
    """Impact ``washout_impact`` on the trait; DIF items carry no effect at all."""
    impact = config.washout_impact
    slopes, b = _draw_items(config, rng)
    dif = _choose_dif(config.m, p, rng)
    n = config.n_per_group
    theta0 = rng.standard_normal(n)
    theta1 = impact + rng.standard_normal(n)
    b1_raw = np.where(dif, b - slopes * impact, b)
    data = _draw_responses(slopes, b, b1_raw, theta0, theta1, rng)
    truth = Truth(slopes, b, b1_raw + slopes * impact, dif, impact)
    return data, truth


def generate_preexposure(config, p, rng):
    """No impact; DIF items get a treatment intercept shift drawn from ``shift_range``."""
    slopes, b = _draw_items(config, rng)
    dif = _choose_dif(config.m, p, rng)
    shift = rng.uniform(*config.shift_range, size=config.m)
    n = config.n_per_group
    theta0 = rng.standard_normal(n)
    theta1 = rng.standard_normal(n)
    b1 = np.where(dif, b + shift, b)
    data = _draw_responses(slopes, b, b1, theta0, theta1, rng)
    return data, Truth(slopes, b, b1, dif, 0.0)


GENERATORS = {"washout": generate_washout, "preexposure": generate_preexposure}


def replication_rng(config, n_dif, rep):
    key = [config.seed, STUDIES.index(config.study), n_dif, rep]
    return np.random.default_rng(np.random.SeedSequence(key))


@dataclass(frozen=True)
class ReplicationRecord:
    p: float
    rep: int
    delta_U: float = math.nan
    delta_R: float = math.nan
    Delta: float = math.nan
    se_Delta: float = math.nan
    z: float = math.nan
    p_value: float = math.nan
    rejected: bool = False
    degenerate: bool = False
    true_dif: tuple = ()
    flagged: tuple = ()
    em_iterations: tuple = ()
    failure: str = None

    @property
    def ok(self):
        return self.failure is None

    def as_dict(self):
        return asdict(self)


def run_replication(config, p, rep):
    """Generate, fit and test one dataset; estimation failures become records."""
    n_dif = config.dif_count(p)
    rng = replication_rng(config, n_dif, rep)
    data, truth = GENERATORS[config.study](config, p, rng)
    settings = EMSettings(tol=config.em_tol, max_iter=config.em_max_iter)
    true_dif = tuple(bool(x) for x in truth.dif)
    try:
        params = fit_both_groups(data, make_grid(config.quad_nodes), settings)
        _, res = scale_effects(item_effects(params), alpha=config.alpha)
    except DifgateError as err:
        log.info("replication %s/%d failed: %s", p, rep, err)
        return ReplicationRecord(p, rep, true_dif=true_dif, failure=f"{err.code}: {err}")
    crit = norm.ppf(1 - config.alpha / 2)
    return ReplicationRecord(
        p,
        rep,
        res.delta_U,
        res.robust.delta_R,
        res.Delta,
        res.se_Delta,
        res.z,
        res.p_value,
        bool(not res.degenerate and abs(res.z) > crit),
        res.degenerate,
        true_dif,
        tuple(bool(x) for x in res.flagged),
        (params.control.convergence.em_iterations, params.treatment.convergence.em_iterations),
    )


def _run_task(task):
    config, p, rep = task
    return run_replication(config, p, rep)


@dataclass(frozen=True)
class ConditionSummary:
    p: float
    n_dif: int
    replications: int
    failures: int
    rejection_rate: float
    mean_delta_U: float
    sd_delta_U: float
    mean_delta_R: float
    sd_delta_R: float
    mean_Delta: float
    sd_Delta: float
    mean_se_Delta: float
    bias_U: float
    bias_R: float

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class SimulationSummary:
    config: SimulationConfig
    conditions: tuple
    records: tuple = field(default=(), repr=False)

    def condition(self, p):
        for c in self.conditions:
            if abs(c.p - p) < 1e-12:
                return c
        raise KeyError(p)

    def samples(self, p):
        """Successful replication records for condition ``p``."""
        return [r for r in self.records if abs(r.p - p) < 1e-12 and r.ok]


def _sd(x):
    return float(np.std(x, ddof=1)) if len(x) > 1 else math.nan


def summarize(config, p, records):
    ok = [r for r in records if r.ok]
    failures = len(records) - len(ok)
    du = np.array([r.delta_U for r in ok])
    dr = np.array([r.delta_R for r in ok])
    dd = np.array([r.Delta for r in ok])
    se = np.array([r.se_Delta for r in ok])
    mean = lambda x: float(np.mean(x)) if len(x) else math.nan  # noqa: E731
    return ConditionSummary(
        p,
        config.dif_count(p),
        len(ok),
        failures,
        mean([r.rejected for r in ok]),
        mean(du),
        _sd(du),
        mean(dr),
        _sd(dr),
        mean(dd),
        _sd(dd),
        mean(se),
        mean(du) - config.impact,
        mean(dr) - config.impact,
    )


def run_study(config, threads=1, strict=True):
    """Run every condition of ``config`` and summarize it.

    Raises :class:`TooManyFailures` if more than 5% of the replications of
    any condition fail to estimate (unless ``strict`` is false).
    """
    tasks = [(config, p, rep) for p in config.dif_proportions for rep in range(config.replications)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (8 * threads))))
    else:
        records = [_run_task(t) for t in tasks]
    conditions = []
    for j, p in enumerate(config.dif_proportions):
        block = records[j * config.replications : (j + 1) * config.replications]
        summary = summarize(config, p, block)
        if summary.failures:
            log.warning("p=%g: %d of %d replications failed", p, summary.failures, config.replications)
        if strict and summary.failures > FAILURE_LIMIT * config.replications:
            raise TooManyFailures(
                f"p={p:g}: {summary.failures} of {config.replications} replications failed"
            )
        conditions.append(summary)
    return SimulationSummary(config, tuple(conditions), tuple(records))
