"""Numerical estimates of the generalization-bound terms for a trained model.

Hypotheses are classifier heads acting on the frozen generator's features. Every
supremum over a hypothesis class is approximated by gradient ascent from a few
random starts, so the estimates are lower bounds of the true suprema; raw values
are kept next to the clipped ones so that slack stays visible.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import LabeledDataset, substream
from .discrepancy import _offdiag_grad, _offdiag_sum
from .errors import InvalidArgument

log = logging.getLogger(__name__)


@dataclass
class Stack:
    """A classifier h = softmax(C(G(x)))."""

    G: nn.Network
    C: nn.Network

    def features(self, x):
        return self.G.predict(x)

    def proba(self, x):
        return nn.softmax(self.C.predict(self.G.predict(x)))

    @classmethod
    def from_models(cls, models, which=1):
        return cls(models.G, models.C1 if which == 1 else models.C2)


def _mean(values):
    # exactly rounded, hence independent of sample order
    return math.fsum(values) / len(values)


def expected_disparity(h1, h2, ds):
    """Mean CDD between two classifiers' predictions over a dataset."""
    if len(ds.features) == 0:
        raise InvalidArgument("empty dataset")
    return _mean(_offdiag_sum(h1.proba(ds.features), h2.proba(ds.features)))


# -- hypothesis families ----------------------------------------------------------

class HeadFamily:
    """Randomly initialised classifier heads trained by plain gradient ascent."""

    def __init__(self, layer_dims, lr=0.1):
        self.layer_dims = list(layer_dims)
        self.lr = lr

    def init(self, rng):
        return nn.init_network(self.layer_dims, int(rng.integers(2**32)))

    def proba(self, params, z):
        return nn.softmax(params.predict(z))

    def ascent_step(self, params, z, dp):
        """Move ``params`` uphill on sum(dp * proba(params, z))."""
        p = nn.softmax(params.forward(z))
        g = params.backward(nn.softmax_backward(p, dp))
        lr = self.lr
        for layer, dw, db in zip(params.layers, g.weights, g.biases):
            layer.weight += lr * dw
            layer.bias += lr * db
        return params


# -- determinacy disparity discrepancy ------------------------------------------------

def ddd_estimate(h, ds_s, ds_t, hypothesis_budget=200, seed=0, restarts=5, family=None):
    """sup over h' of E_T CDD(h', h) - E_S CDD(h', h), with h' a head on h's features.

    Each restart draws a fresh h' and takes ``hypothesis_budget`` ascent steps;
    the largest objective seen anywhere is returned unclipped.
    """
    if hypothesis_budget < 1:
        raise InvalidArgument("hypothesis_budget must be >= 1")
    if len(ds_s.features) == 0 or len(ds_t.features) == 0:
        raise InvalidArgument("both datasets must be non-empty")
    family = family or HeadFamily(h.C.layer_dims)
    zs, zt = h.features(ds_s.features), h.features(ds_t.features)
    ps, pt = h.proba(ds_s.features), h.proba(ds_t.features)
    ns, nt = len(zs), len(zt)
    z = np.vstack([zs, zt])
    # d objective / d p' for every row: +1/nt on target rows, -1/ns on source rows
    g_s, _ = _offdiag_grad(ps, ps)
    g_t, _ = _offdiag_grad(pt, pt)
    dp = np.vstack([-g_s / ns, g_t / nt])

    def objective(params):
        return _mean(_offdiag_sum(family.proba(params, zt), pt)) - _mean(_offdiag_sum(family.proba(params, zs), ps))

    best = -np.inf
    for r in range(restarts):
        rng = np.random.default_rng(substream(seed, f"ddd/restart{r}"))
        params = family.init(rng)
        for step in range(hypothesis_budget + 1):
            best = max(best, objective(params))
            if step < hypothesis_budget:
                params = family.ascent_step(params, z, dp)
    return float(best)


# -- Rademacher complexity ----------------------------------------------------------

class FiniteFamily:
    """Explicit functions, given by their values on the sample (rows = members)."""

    def __init__(self, values):
        v = np.atleast_2d(np.asarray(values, dtype=np.float64))
        if v.size == 0 or not np.all(np.isfinite(v)):
            raise InvalidArgument("finite family needs finite function values")
        self.values = v

    @classmethod
    def constant(cls, c, n):
        return cls(np.full((1, n), float(c)))

    def sup(self, sigma, z, y, rng, budget):
        if self.values.shape[1] != len(sigma):
            raise InvalidArgument("family values do not match the sample size")
        return float(np.max(self.values @ sigma) / len(sigma))


class LossFamily:
    """x, y -> min(CE(h(x), y), 1) for classifier heads h (the H term)."""

    def __init__(self, layer_dims, lr=0.1):
        self.heads = HeadFamily(layer_dims, lr)

    def sup(self, sigma, z, y, rng, budget):
        if y is None:
            raise InvalidArgument("the loss family needs labels")
        n = len(sigma)
        net = self.heads.init(rng)
        best = -np.inf
        for step in range(budget + 1):
            p = self.heads.proba(net, z)
            ce = nn.cross_entropy(p, y)
            best = max(best, float(sigma @ np.minimum(ce, 1.0)) / n)
            if step < budget:
                # clipped samples contribute no gradient
                w = (sigma * (ce < 1.0) / n)[:, None]
                self.heads.ascent_step(net, z, w * nn.cross_entropy_grad(p, y))
        return best


class DisparityFamily:
    """x -> CDD(h1(x), h2(x)) for pairs of classifier heads (the G_Gamma H term)."""

    def __init__(self, layer_dims, lr=0.1):
        self.heads = HeadFamily(layer_dims, lr)

    def sup(self, sigma, z, y, rng, budget):
        n = len(sigma)
        h1, h2 = self.heads.init(rng), self.heads.init(rng)
        best = -np.inf
        for step in range(budget + 1):
            p1, p2 = self.heads.proba(h1, z), self.heads.proba(h2, z)
            best = max(best, float(sigma @ _offdiag_sum(p1, p2)) / n)
            if step < budget:
                g1, g2 = _offdiag_grad(p1, p2)
                w = (sigma / n)[:, None]
                self.heads.ascent_step(h1, z, w * g1)
                self.heads.ascent_step(h2, z, w * g2)
        return best


def _sign_vectors(n, n_trials, rng, exhaustive):
    if exhaustive:
        if n > 10:
            raise InvalidArgument("exhaustive sign enumeration is limited to n <= 10")
        return [np.array(s, dtype=np.float64) for s in itertools.product((-1.0, 1.0), repeat=n)]
    return [rng.choice((-1.0, 1.0), size=n) for _ in range(n_trials)]


def rademacher_raw(family, z, y=None, n_trials=20, inner_budget=50, seed=0, exhaustive=False):
    """Unclipped Monte Carlo value of E_sigma sup_g (1/n) sum_i sigma_i g(x_i)."""
    if n_trials < 1:
        raise InvalidArgument("n_trials must be >= 1")
    if not hasattr(family, "sup"):
        raise InvalidArgument(f"not a function family: {family!r}")
    z = np.asarray(z, dtype=np.float64)
    n = len(z)
    if n == 0:
        raise InvalidArgument("empty sample")
    rng = np.random.default_rng(substream(seed, "rademacher/signs"))
    sups = []
    for i, sigma in enumerate(_sign_vectors(n, n_trials, rng, exhaustive)):
        inner = np.random.default_rng(substream(seed, f"rademacher/inner{i}"))
        sups.append(family.sup(sigma, z, y, inner, inner_budget))
    return _mean(sups)


def rademacher_estimate(family, z, y=None, n_trials=20, inner_budget=50, seed=0, exhaustive=False):
    raw = rademacher_raw(family, z, y, n_trials, inner_budget, seed, exhaustive)
    log.debug("rademacher estimate raw=%.6g", raw)
    return max(raw, 0.0)


# -- ideal joint hypothesis ----------------------------------------------------------

def ideal_joint_error(source, target_labeled, budget=2000, seed=0, hidden=(16, 16), lr=0.05):
    """Source error + target error of one network trained on both labeled sets."""
    if not isinstance(source, LabeledDataset) or not isinstance(target_labeled, LabeledDataset):
        raise InvalidArgument("the ideal joint error needs labels for both domains")
    if source.dim != target_labeled.dim:
        raise InvalidArgument("feature dims differ")
    k = max(source.n_classes, target_labeled.n_classes, 2)
    x = np.vstack([source.features, target_labeled.features])
    y = np.concatenate([source.labels, target_labeled.labels])
    # each domain carries half of the loss
    w = np.concatenate([np.full(len(source), 0.5 / len(source)), np.full(len(target_labeled), 0.5 / len(target_labeled))])
    net = nn.init_network([x.shape[1], *hidden, k], substream(seed, "joint/init"))
    opt = nn.OptimizerState(lr, momentum=0.9, weight_decay=0.0, anneal_a=0.0, anneal_b=0.0)
    for _ in range(budget):
        p = nn.softmax(net.forward(x))
        g = nn.softmax_backward(p, w[:, None] * nn.cross_entropy_grad(p, y))
        nn.sgd_step(net, net.backward(g), opt)
    err_s = float(np.mean(np.argmax(net.predict(source.features), axis=1) != source.labels))
    err_t = float(np.mean(np.argmax(net.predict(target_labeled.features), axis=1) != target_labeled.labels))
    return err_s + err_t


# -- assembled bound ------------------------------------------------------------------

def confidence_slack(delta, n):
    return math.sqrt(math.log(2.0 / delta) / (2.0 * n))


@dataclass
class BoundReport:
    source_error: float
    ddd: float
    lam: float
    rad_gh_source: float
    rad_h_source: float
    rad_gh_target: float
    delta: float
    n: int
    m: int
    target_error: float = float("nan")
    raw: dict = field(default_factory=dict)

    @property
    def slack_source(self):
        return 2.0 * confidence_slack(self.delta, self.n)

    @property
    def slack_target(self):
        return confidence_slack(self.delta, self.m)

    @property
    def omega(self):
        return (
            2 * self.rad_gh_source + 2 * self.rad_h_source + self.slack_source
            + 2 * self.rad_gh_target + self.slack_target
        )

    @property
    def bound(self):
        return self.source_error + self.ddd + self.lam + self.omega

    @property
    def holds(self):
        return self.target_error <= self.bound

    def rows(self):
        def r(name, value):
            return (name, value, self.raw.get(name, value))

        return [
            r("source_error", self.source_error),
            r("ddd", self.ddd),
            r("lambda", self.lam),
            r("rademacher_gh_source", self.rad_gh_source),
            r("rademacher_h_source", self.rad_h_source),
            r("rademacher_gh_target", self.rad_gh_target),
            r("delta", self.delta),
            r("n", self.n),
            r("m", self.m),
            r("slack_source", self.slack_source),
            r("slack_target", self.slack_target),
            r("omega", self.omega),
            r("bound", self.bound),
            r("target_error", self.target_error),
        ]

    def to_csv(self, path):
        lines = ["term,value,raw_value"]
        for name, v, raw in self.rows():
            lines.append(f"{name},{float(v):.17g},{float(raw):.17g}")
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


@dataclass
class BoundBudgets:
    ddd_steps: int = 200
    ddd_restarts: int = 5
    rademacher_trials: int = 10
    rademacher_steps: int = 50
    joint_iterations: int = 2000


def bound_report(h, ds_s, ds_t, delta=0.1, budgets=None, seed=0):
    """Estimate every term of the target-error bound for classifier ``h``.

    ``ds_t`` must carry labels: they feed the ideal joint error and the observed
    target error, never the estimate of the other terms.
    """
    if not 0 < delta < 1:
        raise InvalidArgument("delta must lie in (0, 1)")
    if not isinstance(ds_s, LabeledDataset) or not isinstance(ds_t, LabeledDataset):
        raise InvalidArgument("bound report needs labeled source and (evaluation-only) target labels")
    b = budgets or BoundBudgets()
    dims = h.C.layer_dims
    zs, zt = h.features(ds_s.features), h.features(ds_t.features)

    def err(ds):
        return float(np.mean(np.argmax(h.proba(ds.features), axis=1) != ds.labels))

    ddd_raw = ddd_estimate(h, ds_s, ds_t, b.ddd_steps, substream(seed, "bound/ddd"), b.ddd_restarts)
    raw = {
        "ddd": ddd_raw,
        "rademacher_gh_source": rademacher_raw(
            DisparityFamily(dims), zs, None, b.rademacher_trials, b.rademacher_steps, substream(seed, "bound/rgs")),
        "rademacher_h_source": rademacher_raw(
            LossFamily(dims), zs, ds_s.labels, b.rademacher_trials, b.rademacher_steps, substream(seed, "bound/rhs")),
        "rademacher_gh_target": rademacher_raw(
            DisparityFamily(dims), zt, None, b.rademacher_trials, b.rademacher_steps, substream(seed, "bound/rgt")),
    }
    lam = ideal_joint_error(ds_s, ds_t, b.joint_iterations, substream(seed, "bound/joint"))
    report = BoundReport(
        source_error=err(ds_s),
        ddd=max(ddd_raw, 0.0),
        lam=lam,
        rad_gh_source=max(raw["rademacher_gh_source"], 0.0),
        rad_h_source=max(raw["rademacher_h_source"], 0.0),
        rad_gh_target=max(raw["rademacher_gh_target"], 0.0),
        delta=delta,
        n=len(ds_s),
        m=len(ds_t),
        target_error=err(ds_t),
        raw=raw,
    )
    log.info("bound %.4f vs observed target error %.4f (%s)", report.bound, report.target_error,
             "holds" if report.holds else "VIOLATED")
    return report
