"""Item-level treatment effects, naive and robust test-level effects, Delta test.

All variances are finite-sample variances, i.e. computed directly from the
estimated parameter covariance, so no explicit sample size appears anywhere.

The robust effect is a precision-weighted bisquare location estimate. Working
on the raw residual scale ``r_i = d_i - delta`` with thresholds ``k_i``, an
item's IRLS coefficient is ``(1 - (r_i / k_i)**2)**2 / V_i`` inside the band
and 0 outside it, where ``V_i`` is the null variance of item ``i``.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .errors import AllDownweighted, NoConvergence, ValidationError

DEGENERATE_VAR = 1e-14


@dataclass(frozen=True)
class ItemEffect:
    """Treatment effect of one item in control-group SD units.

    ``grad`` holds the partials with respect to ``(a_i0, b_i0, b_i1)``;
    ``cov`` is the 3x3 covariance of those estimates.
    """

    delta_hat: float
    grad: np.ndarray = field(repr=False)
    var: float
    var_null: float = None
    cov: np.ndarray = field(default=None, repr=False)
    a0: float = None

    @property
    def se(self):
        return float(np.sqrt(self.var))


@dataclass(frozen=True)
class RobustFit:
    delta_R: float
    weights: np.ndarray = field(repr=False)
    v_R: np.ndarray = field(repr=False)
    k: np.ndarray = field(repr=False)
    solutions: tuple = ()
    alpha: float = 0.05
    loss: float = None
    iterations: int = 0

    @property
    def n_active(self):
        return int(np.sum(self.weights > 0))


@dataclass(frozen=True)
class ScalingResult:
    delta_U: float
    var_U: float
    robust: RobustFit
    Delta: float
    var_Delta: float
    z: float
    p_value: float
    flagged: np.ndarray = field(repr=False)
    degenerate: bool = False
    var_R: float = None
    var_Delta_full: float = None

    @property
    def se_Delta(self):
        return float(np.sqrt(self.var_Delta))

    @property
    def se_U(self):
        return float(np.sqrt(self.var_U))


def item_effect(a0, b0, b1, cov=None):
    """Effect ``(b1 - b0) / a0`` with its gradient and delta-method variance."""
    a0, b0, b1 = float(a0), float(b0), float(b1)
    if not a0 > 0:
        raise ValidationError(f"control slope must be positive, got {a0}")
    d = (b1 - b0) / a0
    grad = np.array([-d / a0, -1.0 / a0, 1.0 / a0])
    if cov is None:
        var = np.nan
    else:
        cov = np.asarray(cov, dtype=float)
        var = max(float(grad @ cov @ grad), 0.0)
    return ItemEffect(d, grad, var, None, cov, a0)


def item_effects(params):
    """Item effects for every item of an :class:`ItemParameterSet`."""
    nu = params.nu().reshape(-1, 4)
    cov = params.nu_covariance()
    out = []
    for i, (a0, b0, _a1, b1) in enumerate(nu):
        idx = [4 * i, 4 * i + 1, 4 * i + 3]
        out.append(item_effect(a0, b0, b1, cov[np.ix_(idx, idx)]))
    return out


def effects_from_values(deltas, variances):
    """Build effects directly from values and variances (no fitted model).

    Each effect is represented as an item with unit control slope whose
    treatment intercept alone carries the given variance, so ``var`` and
    ``var_null`` both equal the supplied variance.
    """
    deltas = np.asarray(deltas, dtype=float)
    variances = np.broadcast_to(np.asarray(variances, dtype=float), deltas.shape)
    out = []
    for d, v in zip(deltas, variances):
        e = item_effect(1.0, 0.0, d, np.diag([0.0, 0.0, v]))
        out.append(replace(e, var_null=e.var))
    return out


def null_variance(effects, params=None):
    """Recompute each variance with the effect replaced by the median effect.

    Only the ``a_i0`` partial depends on the effect itself, so this removes the
    inflation that DIF would otherwise add to an item's own variance.
    ``params`` is accepted for callers that hold it; the covariance blocks
    already stored on the effects are what is used.
    """
    if len(effects) < 2:
        raise ValidationError("null variances need at least two items")
    med = float(np.median([e.delta_hat for e in effects]))
    out = []
    for e in effects:
        g = np.array([-med / e.a0, e.grad[1], e.grad[2]])
        out.append(replace(e, var_null=max(float(g @ e.cov @ g), 0.0)))
    return out


def naive_effect(effects):
    """Unweighted mean of the item effects and its variance."""
    d = np.array([e.delta_hat for e in effects])
    v = np.array([e.var for e in effects])
    m = d.size
    return float(d.mean()), float(np.sum(v) / m**2)


def bisquare_psi(u, k):
    u = np.asarray(u, dtype=float)
    t = u / k
    return np.where(np.abs(u) <= k, u * (1 - t**2) ** 2, 0.0)


def bisquare_psi_prime(u, k):
    u = np.asarray(u, dtype=float)
    t2 = (u / k) ** 2
    return np.where(np.abs(u) <= k, (1 - t2) * (1 - 5 * t2), 0.0)


def bisquare_weight(u, k):
    """``psi(u) / u``, equal to 1 at ``u = 0``."""
    u = np.asarray(u, dtype=float)
    t2 = (u / k) ** 2
    return np.where(np.abs(u) <= k, (1 - t2) ** 2, 0.0)


def bisquare_rho(u, k):
    """Bisquare loss rescaled to ``[-1, 0]`` with its minimum ``-1`` at 0."""
    u = np.asarray(u, dtype=float)
    t2 = (u / k) ** 2
    return np.where(np.abs(u) <= k, -((1 - t2) ** 3), 0.0)


def _null_vars(effects):
    v = np.array([e.var if e.var_null is None else e.var_null for e in effects], dtype=float)
    if np.any(~np.isfinite(v)) or np.any(v <= 0):
        raise ValidationError("item null variances must be positive and finite")
    return v


def tuning_parameters(effects, alpha=0.05, epsilon_floor=0.0, tuning="item"):
    """Per-item thresholds on the effect scale.

    ``k_i = z_{1-alpha/2} * sqrt(V_i)``, floored at ``epsilon_floor``. With
    ``tuning="difference"`` the variance of ``d_i - delta_R`` under the null
    replaces ``V_i``.
    """
    if not 0 < alpha < 1:
        raise ValidationError("alpha must lie in (0, 1)")
    v = _null_vars(effects)
    if tuning == "difference":
        v = diff_null_variance(effects)
    elif tuning != "item":
        raise ValidationError(f"unknown tuning {tuning!r}")
    k = norm.ppf(1 - alpha / 2) * np.sqrt(v)
    return np.maximum(k, epsilon_floor)


def robust_loss(delta, d, k, v):
    """Objective whose stationary points are the IRLS fixed points.

    Each item contributes ``omega_i * rho((d_i - delta) / k_i)``; the factor
    ``omega_i`` is proportional to ``k_i**2 / V_i`` and equals 1 for every item
    unless thresholds were floored. Values are in units of one fully weighted
    item, so a cluster of ``c`` coincident items at ``delta`` gives ``-c``.
    """
    omega = k**2 / v
    omega = omega / omega.mean()
    r = d[None, :] - np.atleast_1d(delta)[:, None]
    out = np.sum(omega * bisquare_rho(r, k), axis=1)
    return out if np.ndim(delta) else float(out[0])


def _irls(start, d, k, v, tol, max_iter):
    delta = float(start)
    for it in range(1, max_iter + 1):
        c = bisquare_weight(d - delta, k) / v
        total = c.sum()
        if total <= 0:
            return delta, it, "downweighted"
        new = float(c @ d / total)
        if abs(new - delta) < tol:
            return new, it, "converged"
        delta = new
    return delta, max_iter, "max_iter"


def default_starts(effects):
    d = np.array([e.delta_hat for e in effects])
    starts = [float(np.median(d)), float(np.mean(d))]
    if d.size <= 32:
        starts.extend(float(x) for x in d)
    return starts


def robust_effect(
    effects,
    alpha=0.05,
    starts=None,
    epsilon_floor=0.0,
    k=None,
    tuning="item",
    tol=1e-10,
    max_iter=500,
):
    """Precision-weighted bisquare estimate of the common item effect.

    IRLS is run from every start; among the converged solutions the one with
    the lowest :func:`robust_loss` wins, ties going to more active items and
    then to the smaller absolute value. ``k`` overrides the thresholds.
    """
    if len(effects) < 2:
        raise ValidationError("the robust effect needs at least two items")
    d = np.array([e.delta_hat for e in effects], dtype=float)
    v = _null_vars(effects)
    if k is None:
        k = tuning_parameters(effects, alpha, epsilon_floor, tuning)
    else:
        k = np.broadcast_to(np.asarray(k, dtype=float), d.shape).copy()
        if np.any(k <= 0):
            raise ValidationError("thresholds must be positive")
    starts = default_starts(effects) if starts is None else [float(s) for s in starts]
    if not starts:
        raise ValidationError("need at least one starting value")

    candidates = []
    statuses = set()
    for s in starts:
        delta, iters, status = _irls(s, d, k, v, tol, max_iter)
        statuses.add(status)
        if status != "converged":
            continue
        w = bisquare_weight(d - delta, k)
        candidates.append((robust_loss(delta, d, k, v), -int(np.sum(w > 0)), abs(delta), delta, iters))
    if not candidates:
        if statuses == {"downweighted"}:
            raise AllDownweighted("every start ended with all items down-weighted")
        raise NoConvergence("IRLS did not converge from any start")

    scale = max(1.0, max(abs(c[0]) for c in candidates))
    best = min(candidates, key=lambda c: (round(c[0] / scale, 10), c[1], c[2]))
    loss, _, _, delta, iters = best

    c = bisquare_weight(d - delta, k) / v
    weights = c / c.sum()
    v_R = bisquare_psi_prime(d - delta, k) / v / c.sum()
    solutions = []
    for cand in sorted(candidates, key=lambda c: c[3]):
        if not solutions or abs(cand[3] - solutions[-1][0]) > 1e-8:
            solutions.append((cand[3], cand[0]))
    return RobustFit(float(delta), weights, v_R, k, tuple(solutions), alpha, float(loss), iters)


def diff_null_variance(effects, robust=None):
    """Null variance of ``d_i - delta_R`` under inverse-variance weighting."""
    v = _null_vars(effects)
    var_r = 1.0 / np.sum(1.0 / v)
    return v - var_r


def delta_test(effects, naive, robust, params=None):
    """Difference between the robust and naive effects and its Wald test.

    With ``params`` the variance is also computed from the full parameter
    covariance (``var_Delta_full``) for comparison with the per-item sum.
    """
    delta_U, var_U = naive
    var = np.array([e.var for e in effects])
    m = var.size
    coef = robust.v_R - 1.0 / m
    var_Delta = float(np.sum(coef**2 * var))
    var_R = float(np.sum(robust.v_R**2 * var))
    Delta = robust.delta_R - delta_U
    degenerate = var_Delta <= DEGENERATE_VAR
    if degenerate:
        z, p = 0.0, 1.0
    else:
        z = Delta / np.sqrt(var_Delta)
        p = float(2 * norm.sf(abs(z)))
    full = None
    if params is not None:
        full = _full_var(coef, effects, params)
    return ScalingResult(
        delta_U,
        var_U,
        robust,
        Delta,
        var_Delta,
        float(z),
        p,
        robust.weights == 0,
        bool(degenerate),
        var_R,
        full,
    )


def _full_var(coef, effects, params):
    m = len(effects)
    g = np.zeros(4 * m)
    for i, (c, e) in enumerate(zip(coef, effects)):
        g[[4 * i, 4 * i + 1, 4 * i + 3]] = c * e.grad
    return float(g @ params.nu_covariance() @ g)


def scale_effects(effects, alpha=0.05, starts=None, epsilon_floor=0.0, tuning="item", params=None):
    """Null variances, naive and robust effects and the Delta test in one call."""
    if effects and effects[0].var_null is None:
        effects = null_variance(effects)
    naive = naive_effect(effects)
    robust = robust_effect(effects, alpha, starts, epsilon_floor, tuning=tuning)
    return effects, delta_test(effects, naive, robust, params)
