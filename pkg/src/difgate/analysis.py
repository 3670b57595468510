"""End-to-end analysis of one dataset: screen, fit, scale, test, report."""

import datetime as _dt
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from .errors import ValidationError
from .estimation import EMSettings, ScreenReport, ScreenRules, fit_both_groups, screen_and_fit
from .irt import make_grid
from .scaling import default_starts, item_effects, scale_effects

SCHEMA = "difgate/1"
START_RULES = ("median", "mean", "all")


@dataclass(frozen=True)
class AnalysisSettings:
    alpha: float = 0.05
    quad_nodes: int = 61
    em_tol: float = 1e-5
    em_max_iter: int = 500
    starts: str = "default"
    tuning: str = "item"
    screen: bool = True
    binarize_threshold: float = None
    seed: int = None

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValidationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.starts != "default":
            rules = [s.strip() for s in self.starts.split(",") if s.strip()]
            bad = [s for s in rules if s not in START_RULES]
            if bad or not rules:
                raise ValidationError(f"starts must be 'default' or a subset of {START_RULES}, got {self.starts!r}")

    def start_values(self, effects):
        if self.starts == "default":
            return default_starts(effects)
        d = np.array([e.delta_hat for e in effects])
        out = []
        for rule in (s.strip() for s in self.starts.split(",")):
            if rule == "median":
                out.append(float(np.median(d)))
            elif rule == "mean":
                out.append(float(np.mean(d)))
            elif rule == "all":
                out.extend(float(x) for x in d)
        return out

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class AnalysisResult:
    report: dict
    degenerate: bool


def _f(x):
    return None if x is None else float(x)


def analyze_dataset(data, settings=None, source=None, timestamp=None):
    """Run the full pipeline on a :class:`ResponseDataset` and build the report dict."""
    settings = settings or AnalysisSettings()
    grid = make_grid(settings.quad_nodes)
    em = EMSettings(tol=settings.em_tol, max_iter=settings.em_max_iter)
    n_in, m_in = data.n, data.m
    if settings.screen:
        data, params, screening = screen_and_fit(data, grid, em, ScreenRules())
    else:
        params, screening = fit_both_groups(data, grid, em), ScreenReport()
    effects = item_effects(params)
    effects, res = scale_effects(
        effects,
        alpha=settings.alpha,
        starts=settings.start_values(effects),
        tuning=settings.tuning,
        params=params,
    )
    robust = res.robust
    nu = params.nu().reshape(-1, 4)
    items = []
    for i, name in enumerate(data.item_names):
        e = effects[i]
        items.append(
            {
                "item": name,
                "delta_hat": _f(e.delta_hat),
                "se": _f(np.sqrt(e.var)),
                "se_null": _f(np.sqrt(e.var_null)),
                "weight": _f(robust.weights[i]),
                "influence": _f(robust.v_R[i]),
                "threshold": _f(robust.k[i]),
                "flagged": bool(res.flagged[i]),
                "a0": _f(nu[i, 0]),
                "b0": _f(nu[i, 1]),
                "a1": _f(nu[i, 2]),
                "b1": _f(nu[i, 3]),
            }
        )
    report = {
        "schema": SCHEMA,
        "tool_version": __version__,
        "generated_at": timestamp or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "settings": settings.as_dict(),
        "dataset": {
            "source": source,
            "n_persons_input": n_in,
            "n_items_input": m_in,
            "n0": data.n0,
            "n1": data.n1,
            "m": data.m,
            "screening": screening.as_dict(),
        },
        "items": items,
        "naive": {"estimate": _f(res.delta_U), "se": _f(res.se_U)},
        "robust": {
            "estimate": _f(robust.delta_R),
            "se": _f(np.sqrt(res.var_R)),
            "loss": _f(robust.loss),
            "iterations": robust.iterations,
            "n_active": robust.n_active,
            "solutions": [{"estimate": _f(s), "loss": _f(loss)} for s, loss in robust.solutions],
        },
        "delta_test": {
            "Delta": _f(res.Delta),
            "se": _f(res.se_Delta),
            "se_full_covariance": _f(np.sqrt(max(res.var_Delta_full, 0.0))),
            "z": _f(res.z),
            "p_value": _f(res.p_value),
            "alpha": settings.alpha,
            "degenerate": res.degenerate,
        },
        "convergence": {
            label: {
                "em_iterations": fit.convergence.em_iterations,
                "newton_iterations": fit.convergence.newton_iterations,
                "score_max_norm": _f(fit.convergence.grad_norm),
                "loglik": _f(fit.loglik),
            }
            for label, fit in (("control", params.control), ("treatment", params.treatment))
        },
    }
    return AnalysisResult(report, res.degenerate)
