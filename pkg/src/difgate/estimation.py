"""Marginal maximum likelihood for the 2PL model, fitted one group at a time.

Parameter vectors are ordered ``(a_1, b_1, a_2, b_2, ...)`` throughout, both
for point estimates and for covariance matrices.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logit, logsumexp

from .errors import (
    EmptyData,
    EstimationError,
    GroupMissing,
    NonConvergence,
    NonPositiveSlope,
    SingularInformation,
    TooFewItems,
    ValidationError,
)
from .irt import GroupModel, QuadratureGrid, item_probs, make_grid, node_loglik

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ResponseDataset:
    """Binary responses (``NaN`` = missing) for persons in two groups."""

    responses: np.ndarray = field(repr=False)
    group: np.ndarray = field(repr=False)
    item_names: tuple = ()
    cluster: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        x = np.array(self.responses, dtype=float)
        g = np.array(self.group).astype(int).ravel()
        if x.ndim != 2:
            raise ValidationError("responses must be a persons x items matrix")
        if g.size != x.shape[0]:
            raise ValidationError("group labels must match the number of persons")
        if np.any((g != 0) & (g != 1)):
            raise ValidationError("group labels must be 0 (control) or 1 (treatment)")
        obs = x[~np.isnan(x)]
        if np.any((obs != 0) & (obs != 1)):
            raise ValidationError("observed responses must be 0 or 1")
        names = tuple(self.item_names) or tuple(f"item{i + 1}" for i in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise ValidationError("item_names must match the number of columns")
        if len(set(names)) != len(names):
            raise ValidationError("item names must be unique")
        x.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "responses", x)
        object.__setattr__(self, "group", g)
        object.__setattr__(self, "item_names", names)
        if self.cluster is not None:
            c = np.asarray(self.cluster)
            if c.shape[0] != x.shape[0]:
                raise ValidationError("cluster labels must match the number of persons")
            object.__setattr__(self, "cluster", c)

    @property
    def n(self):
        return self.responses.shape[0]

    @property
    def m(self):
        return self.responses.shape[1]

    @property
    def n0(self):
        return int(np.sum(self.group == 0))

    @property
    def n1(self):
        return int(np.sum(self.group == 1))

    def persons(self, mask):
        mask = np.asarray(mask)
        cluster = None if self.cluster is None else self.cluster[mask]
        return ResponseDataset(self.responses[mask], self.group[mask], self.item_names, cluster)

    def items(self, keep):
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        names = tuple(self.item_names[i] for i in keep)
        return ResponseDataset(self.responses[:, keep], self.group, names, self.cluster)

    def for_group(self, g):
        return self.persons(self.group == g)


@dataclass(frozen=True)
class EMSettings:
    tol: float = 1e-5
    loglik_rtol: float = 1e-9
    max_iter: int = 500
    newton_iter: int = 25
    fd_step: float = 1e-4

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValidationError("max_iter must be at least 1")
        if not self.tol > 0:
            raise ValidationError("tol must be positive")


@dataclass(frozen=True)
class Convergence:
    em_iterations: int
    newton_iterations: int
    grad_norm: float
    loglik_trace: tuple = field(default=(), repr=False)


@dataclass(frozen=True)
class FittedGroup:
    model: GroupModel
    covariance: np.ndarray = field(repr=False)
    loglik: float
    convergence: Convergence
    n: int = 0

    @property
    def params(self):
        return _pack(self.model.slopes, self.model.intercepts)

    @property
    def standard_errors(self):
        return np.sqrt(np.diag(self.covariance))


@dataclass(frozen=True)
class ItemParameterSet:
    """Control and treatment fits for the same items in the same order.

    ``covariance`` optionally overrides the joint covariance of
    ``nu = (a_10, b_10, a_11, b_11, a_20, ...)``, e.g. with a cluster-robust
    estimate computed elsewhere.
    """

    control: FittedGroup
    treatment: FittedGroup
    item_names: tuple = ()
    covariance: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.control.model.m != self.treatment.model.m:
            raise ValidationError("control and treatment fits have different item counts")
        if self.covariance is not None:
            cov = np.asarray(self.covariance, dtype=float)
            if cov.shape != (4 * self.m, 4 * self.m):
                raise ValidationError(f"covariance must be {4 * self.m} x {4 * self.m}")
            object.__setattr__(self, "covariance", cov)

    @property
    def m(self):
        return self.control.model.m

    def nu(self):
        return np.column_stack(
            [
                self.control.model.slopes,
                self.control.model.intercepts,
                self.treatment.model.slopes,
                self.treatment.model.intercepts,
            ]
        ).ravel()

    def nu_covariance(self):
        if self.covariance is not None:
            return self.covariance
        m = self.m
        cov = np.zeros((4 * m, 4 * m))
        idx0 = np.column_stack([4 * np.arange(m), 4 * np.arange(m) + 1]).ravel()
        cov[np.ix_(idx0, idx0)] = self.control.covariance
        cov[np.ix_(idx0 + 2, idx0 + 2)] = self.treatment.covariance
        return cov


@dataclass(frozen=True)
class ScreenRules:
    endorsement: tuple = (0.02, 0.98)
    min_coverage: float = 0.10
    slope_bounds: tuple = (0.25, 10.0)


@dataclass(frozen=True)
class ScreenReport:
    dropped: tuple = ()
    dropped_persons: int = 0

    def __bool__(self):
        return bool(self.dropped) or bool(self.dropped_persons)

    def merge(self, other):
        return ScreenReport(self.dropped + other.dropped, self.dropped_persons + other.dropped_persons)

    def as_dict(self):
        return {
            "dropped_items": [{"item": name, "reason": reason} for name, reason in self.dropped],
            "dropped_persons": self.dropped_persons,
        }


def _pack(slopes, intercepts):
    return np.column_stack([slopes, intercepts]).ravel()


def _unpack(params):
    return params[0::2], params[1::2]


def _posterior(slopes, intercepts, ones, observed, grid):
    joint = node_loglik(slopes, intercepts, ones, observed, grid.nodes) + np.log(grid.weights)
    per_person = logsumexp(joint, axis=1)
    return np.exp(joint - per_person[:, None]), float(per_person.sum())


def _expected_counts(post, ones, observed):
    # (m, Q): expected endorsements and expected number of observed responses per node
    return ones.T @ post, observed.T @ post


def _score(params, ones, observed, grid):
    slopes, intercepts = _unpack(params)
    post, ll = _posterior(slopes, intercepts, ones, observed, grid)
    r, nn = _expected_counts(post, ones, observed)
    resid = r - nn * item_probs(slopes, intercepts, grid.nodes)
    return _pack(resid @ grid.nodes, resid.sum(axis=1)), ll


def _item_objective(slopes, intercepts, r, nn, nodes):
    p = item_probs(slopes, intercepts, nodes)
    return np.sum(r * np.log(p) + (nn - r) * np.log1p(-p), axis=1)


def _m_step(slopes, intercepts, r, nn, nodes, n_newton=5):
    """Newton ascent on each item's expected complete-data log-likelihood."""
    a, b = slopes.copy(), intercepts.copy()
    q_old = _item_objective(a, b, r, nn, nodes)
    for _ in range(n_newton):
        p = item_probs(a, b, nodes)
        resid = r - nn * p
        g_a, g_b = resid @ nodes, resid.sum(axis=1)
        info = nn * p * (1.0 - p)
        h_aa, h_ab, h_bb = info @ nodes**2, info @ nodes, info.sum(axis=1)
        det = h_aa * h_bb - h_ab**2
        det = np.where(det > 1e-300, det, np.inf)
        step_a = (h_bb * g_a - h_ab * g_b) / det
        step_b = (h_aa * g_b - h_ab * g_a) / det
        scale = np.ones_like(a)
        for _ in range(30):
            q_new = _item_objective(a + scale * step_a, b + scale * step_b, r, nn, nodes)
            worse = q_new < q_old
            if not worse.any():
                break
            scale = np.where(worse, scale / 2, scale)
        else:
            scale = np.where(q_new < q_old, 0.0, scale)
            q_new = _item_objective(a + scale * step_a, b + scale * step_b, r, nn, nodes)
        a, b = a + scale * step_a, b + scale * step_b
        q_old = q_new
        if max(np.max(np.abs(scale * step_a)), np.max(np.abs(scale * step_b))) < 1e-12:
            break
    return a, b


def observed_information(params, ones, observed, grid, step=1e-4):
    """Negative Hessian of the marginal log-likelihood by central differences of the score."""
    k = params.size
    hess = np.empty((k, k))
    for j in range(k):
        h = step * (1.0 + abs(params[j]))
        up, down = params.copy(), params.copy()
        up[j] += h
        down[j] -= h
        hess[:, j] = (_score(up, ones, observed, grid)[0] - _score(down, ones, observed, grid)[0]) / (2 * h)
    hess = 0.5 * (hess + hess.T)
    return -hess


def _invert_information(info):
    if not np.all(np.isfinite(info)):
        raise SingularInformation("observed information is not finite")
    eig = np.linalg.eigvalsh(info)
    if eig[0] <= 1e-10 * max(eig[-1], 1e-300):
        raise SingularInformation(
            f"observed information is not positive definite (smallest eigenvalue {eig[0]:.3g})"
        )
    cov = np.linalg.inv(info)
    return 0.5 * (cov + cov.T)


def _starting_values(ones, observed):
    counts = observed.sum(axis=0)
    if np.any(counts == 0):
        raise EmptyData("every item needs at least one observed response")
    rate = np.clip(ones.sum(axis=0) / counts, 1e-4, 1 - 1e-4)
    return np.ones(ones.shape[1]), logit(rate)


def fit_group(data, grid=None, settings=None, group=None):
    """Fit the 2PL model to one group by EM, then polish with Newton steps.

    ``data`` is a :class:`ResponseDataset` holding a single group (or a plain
    response matrix). Returns a :class:`FittedGroup` whose covariance is the
    inverse observed information at the maximum.
    """
    grid = grid or make_grid()
    settings = settings or EMSettings()
    if isinstance(data, ResponseDataset):
        labels = np.unique(data.group)
        if group is None and labels.size == 1:
            group = int(labels[0])
        x = data.responses
    else:
        x = np.asarray(data, dtype=float)
    group = 0 if group is None else group
    observed = (~np.isnan(x)).astype(float)
    ones = np.where(observed > 0, x, 0.0)
    if x.shape[0] == 0 or observed.sum() == 0:
        raise EmptyData(f"group {group}: no observed responses")
    if x.shape[1] < 2:
        raise TooFewItems("a group fit needs at least two items")

    try:
        return _fit(ones, observed, grid, settings, group)
    except EstimationError as err:
        raise err.tagged(group) from None


def _fit(ones, observed, grid, settings, group):
    nodes = grid.nodes
    a, b = _starting_values(ones, observed)
    trace = []
    ll_prev = None
    it = 0
    for it in range(1, settings.max_iter + 1):
        post, ll = _posterior(a, b, ones, observed, grid)
        trace.append(ll)
        r, nn = _expected_counts(post, ones, observed)
        a_new, b_new = _m_step(a, b, r, nn, nodes)
        change = max(np.max(np.abs(a_new - a)), np.max(np.abs(b_new - b)))
        a, b = a_new, b_new
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise NonConvergence("EM produced non-finite parameters")
        if ll_prev is not None and change < settings.tol and abs(ll - ll_prev) <= settings.loglik_rtol * abs(ll):
            break
        ll_prev = ll

    params = _pack(a, b)
    score, ll = _score(params, ones, observed, grid)
    info = None
    newton = 0
    while np.max(np.abs(score)) > settings.tol:
        if newton >= settings.newton_iter:
            raise NonConvergence(
                f"score max-norm {np.max(np.abs(score)):.3g} above tolerance after "
                f"{it} EM and {newton} Newton iterations"
            )
        info = observed_information(params, ones, observed, grid, settings.fd_step)
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise SingularInformation("observed information is singular") from None
        scale = 1.0
        for _ in range(30):
            trial = params + scale * step
            new_score, new_ll = _score(trial, ones, observed, grid)
            if new_ll >= ll - 1e-9 * abs(ll):
                break
            scale /= 2
        params, score, ll = trial, new_score, new_ll
        info = None
        newton += 1

    if info is None:
        info = observed_information(params, ones, observed, grid, settings.fd_step)
    slopes, intercepts = _unpack(params)
    bad = np.flatnonzero(slopes <= 0)
    if bad.size:
        raise NonPositiveSlope(f"non-positive slope estimate for items {bad.tolist()}", items=bad)
    cov = _invert_information(info)
    model = GroupModel.from_arrays(slopes, intercepts, group)
    conv = Convergence(it, newton, float(np.max(np.abs(score))), tuple(trace))
    return FittedGroup(model, cov, ll, conv, n=ones.shape[0])


def fit_both_groups(data, grid=None, settings=None):
    """Fit control and treatment groups separately; cross-group covariance is zero."""
    if data.n0 == 0:
        raise GroupMissing("no persons in the control group (group 0)")
    if data.n1 == 0:
        raise GroupMissing("no persons in the treatment group (group 1)")
    grid = grid or make_grid()
    settings = settings or EMSettings()
    fits = [fit_group(data.for_group(g), grid, settings, group=g) for g in (0, 1)]
    return ItemParameterSet(fits[0], fits[1], data.item_names)


def screen_items(data, rules=None, params=None):
    """Drop items that fail the endorsement, coverage or (post-fit) slope rules.

    Without ``params`` only the pre-fit rules apply. With an
    :class:`ItemParameterSet` for ``data``, items whose slope estimate is
    outside ``rules.slope_bounds`` in either group are dropped as well.
    Persons left with no observed responses are removed.
    """
    rules = rules or ScreenRules()
    x = data.responses
    observed = ~np.isnan(x)
    counts = observed.sum(axis=0)
    rate = np.divide(np.nansum(x, axis=0), counts, out=np.zeros(data.m), where=counts > 0)
    lo, hi = rules.endorsement
    dropped = []
    keep = []
    for i, name in enumerate(data.item_names):
        if counts[i] < rules.min_coverage * data.n:
            dropped.append((name, "coverage"))
        elif not lo <= rate[i] <= hi:
            dropped.append((name, "endorsement"))
        elif params is not None and not _slopes_ok(params, i, rules.slope_bounds):
            dropped.append((name, "discrimination"))
        else:
            keep.append(i)
    if len(keep) < 2:
        raise TooFewItems(f"only {len(keep)} item(s) survive screening")
    out = data.items(keep) if dropped else data
    answered = ~np.all(np.isnan(out.responses), axis=1)
    n_empty = int(np.sum(~answered))
    if n_empty:
        log.warning("dropping %d person(s) with no observed responses", n_empty)
        out = out.persons(answered)
    return out, ScreenReport(tuple(dropped), n_empty)


def _slopes_ok(params, i, bounds):
    lo, hi = bounds
    a0 = params.control.model.items[i].a
    a1 = params.treatment.model.items[i].a
    return lo <= a0 <= hi and lo <= a1 <= hi


def screen_and_fit(data, grid=None, settings=None, rules=None):
    """Pre-fit screen, fit, slope screen, and at most one refit."""
    grid = grid or make_grid()
    data, report = screen_items(data, rules)
    try:
        params = fit_both_groups(data, grid, settings)
    except NonPositiveSlope as err:
        bad = [data.item_names[i] for i in err.items]
        log.warning("group %s: dropping items with non-positive slopes: %s", err.group, bad)
        keep = [i for i, name in enumerate(data.item_names) if name not in bad]
        if len(keep) < 2:
            raise TooFewItems(f"only {len(keep)} item(s) survive screening") from None
        data = data.items(keep)
        report = report.merge(ScreenReport(tuple((name, "discrimination") for name in bad)))
        return data, fit_both_groups(data, grid, settings), report
    screened, post = screen_items(data, rules, params)
    if post.dropped:
        report = report.merge(post)
        return screened, fit_both_groups(screened, grid, settings), report
    return data, params, report


def with_duplicates(data, times=2):
    """Stack ``times`` copies of every person; handy for information checks."""
    return replace(
        data,
        responses=np.tile(data.responses, (times, 1)),
        group=np.tile(data.group, times),
        cluster=None if data.cluster is None else np.tile(data.cluster, times),
    )
