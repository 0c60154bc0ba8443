"""Bi-classifier adversarial training: BCDM, the MCD-style L1 baseline and source-only."""

import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import nn
from .data import BatchSampler, LabeledDataset, substream
from .discrepancy import CDD, L1, _entropy, _entropy_grad
from .errors import InvalidArgument, ModelFormatError, NumericalDivergence

log = logging.getLogger(__name__)

METHODS = ("source_only", "mcd_l1", "bcdm")


@dataclass
class TrainConfig:
    method: str = "bcdm"
    alpha: float = 0.01
    entropy_weight: float = 0.01
    batch_size: int = 32
    max_iteration: int = 5000
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    anneal_a: float = 10.0
    anneal_b: float = 0.75
    classifier_lr_multiplier: float = 10.0
    generator_dims: list = field(default_factory=lambda: [2, 16, 16, 16])
    classifier_dims: list = field(default_factory=lambda: [16, 16, 16, 2])
    hidden_activation: str = "relu"
    log_interval: int = 50
    seed: int = 0

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name.endswith("_dims"):
                ok = isinstance(v, list) and all(isinstance(d, int) and not isinstance(d, bool) for d in v)
                if not ok:
                    raise InvalidArgument(f"{f.name} must be a list of integers, got {v!r}")
            elif isinstance(f.default, (int, float)):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise InvalidArgument(f"{f.name} must be a number, got {v!r}")
                if isinstance(f.default, int):
                    if v != int(v):
                        raise InvalidArgument(f"{f.name} must be an integer, got {v!r}")
                    setattr(self, f.name, int(v))
        if self.method not in METHODS:
            raise InvalidArgument(f"method must be one of {METHODS}, got {self.method!r}")
        if self.alpha < 0 or self.entropy_weight < 0:
            raise InvalidArgument("alpha and entropy_weight must be >= 0")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if self.max_iteration < 1:
            raise InvalidArgument("max_iteration must be >= 1")
        if self.log_interval < 1:
            raise InvalidArgument("log_interval must be >= 1")
        if self.generator_dims[-1] != self.classifier_dims[0]:
            raise InvalidArgument("generator output dim must equal classifier input dim")
        if len(self.generator_dims) < 2 or len(self.classifier_dims) < 2:
            raise InvalidArgument("networks need at least one layer")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class ModelTriple:
    G: nn.Network
    C1: nn.Network
    C2: nn.Network
    opt_g: nn.OptimizerState
    opt_c1: nn.OptimizerState
    opt_c2: nn.OptimizerState

    @property
    def n_classes(self):
        return self.C1.out_dim

    def probas(self, x):
        f = self.G.predict(x)
        return nn.softmax(self.C1.predict(f)), nn.softmax(self.C2.predict(f))

    def predict(self, x):
        p1, p2 = self.probas(x)
        return np.argmax(0.5 * (p1 + p2), axis=1)

    def set_progress(self, p):
        for opt in (self.opt_g, self.opt_c1, self.opt_c2):
            opt.progress = p

    def fingerprint(self):
        return "|".join(net.fingerprint() for net in (self.G, self.C1, self.C2))


def build_models(cfg):
    def opt(mult):
        return nn.OptimizerState(cfg.base_lr, cfg.momentum, cfg.weight_decay, cfg.anneal_a, cfg.anneal_b, mult)

    g = nn.init_network(cfg.generator_dims, substream(cfg.seed, "init/G"), cfg.hidden_activation)
    c1 = nn.init_network(cfg.classifier_dims, substream(cfg.seed, "init/C1"), cfg.hidden_activation)
    c2 = nn.init_network(cfg.classifier_dims, substream(cfg.seed, "init/C2"), cfg.hidden_activation)
    m = cfg.classifier_lr_multiplier
    return ModelTriple(g, c1, c2, opt(1.0), opt(m), opt(m))


# -- objectives ---------------------------------------------------------------

def _check_labels(ys, k):
    if np.any(ys < 0) or np.any(ys >= k):
        raise InvalidArgument(f"label out of range [0, {k})")


def _softmax(logits):
    if not np.all(np.isfinite(logits)):
        raise NumericalDivergence("non-finite logits")
    return nn.softmax(logits)


def _ce_logit_grad(p, ys, weight):
    return nn.softmax_backward(p, weight * nn.cross_entropy_grad(p, ys))


def source_loss(models, xs, ys):
    """Mean over the batch of the two classifiers' averaged cross-entropies.

    Returns ``(loss, (grads_G, grads_C1, grads_C2))``.
    """
    ys = np.asarray(ys)
    _check_labels(ys, models.n_classes)
    b = len(ys)
    f = models.G.forward(xs)
    p1 = _softmax(models.C1.forward(f))
    p2 = _softmax(models.C2.forward(f))
    loss = 0.5 * (nn.cross_entropy(p1, ys).mean() + nn.cross_entropy(p2, ys).mean())
    g1 = models.C1.backward(_ce_logit_grad(p1, ys, 0.5 / b))
    g2 = models.C2.backward(_ce_logit_grad(p2, ys, 0.5 / b))
    gg = models.G.backward(g1.inputs + g2.inputs)
    return float(loss), (gg, g1, g2)


def classifier_objective(models, xs, ys, xt, alpha, disc=CDD):
    """Source cross-entropy minus alpha times the mean target discrepancy, G held fixed.

    Returns ``(objective, grads_C1, grads_C2)``.
    """
    ys = np.asarray(ys)
    _check_labels(ys, models.n_classes)
    bs, bt = len(xs), len(xt)
    f = np.vstack([models.G.predict(xs), models.G.predict(xt)])
    p1 = _softmax(models.C1.forward(f))
    p2 = _softmax(models.C2.forward(f))
    p1s, p1t, p2s, p2t = p1[:bs], p1[bs:], p2[:bs], p2[bs:]
    cls = 0.5 * (nn.cross_entropy(p1s, ys).mean() + nn.cross_entropy(p2s, ys).mean())
    d = disc.value(p1t, p2t).mean()
    d1, d2 = disc.grad(p1t, p2t)
    dp1 = np.vstack([0.5 / bs * nn.cross_entropy_grad(p1s, ys), -alpha / bt * d1])
    dp2 = np.vstack([0.5 / bs * nn.cross_entropy_grad(p2s, ys), -alpha / bt * d2])
    g1 = models.C1.backward(nn.softmax_backward(p1, dp1))
    g2 = models.C2.backward(nn.softmax_backward(p2, dp2))
    return float(cls - alpha * d), g1, g2


def generator_objective(models, xt, alpha, entropy_weight, disc=CDD):
    """alpha * mean target discrepancy + entropy_weight * mean entropy of both heads.

    Returns ``(objective, grads_G)``; classifier gradients are discarded.
    """
    bt = len(xt)
    f = models.G.forward(xt)
    p1 = _softmax(models.C1.forward(f))
    p2 = _softmax(models.C2.forward(f))
    d = disc.value(p1, p2).mean()
    ent = 0.5 * (_entropy(p1).mean() + _entropy(p2).mean())
    d1, d2 = disc.grad(p1, p2)
    dp1 = alpha / bt * d1 + 0.5 * entropy_weight / bt * _entropy_grad(p1)
    dp2 = alpha / bt * d2 + 0.5 * entropy_weight / bt * _entropy_grad(p2)
    g1 = models.C1.backward(nn.softmax_backward(p1, dp1))
    g2 = models.C2.backward(nn.softmax_backward(p2, dp2))
    gg = models.G.backward(g1.inputs + g2.inputs)
    return float(alpha * d + entropy_weight * ent), gg


def _finite(value, what):
    if not np.isfinite(value):
        raise NumericalDivergence(f"non-finite {what}: {value}")
    return value


# -- steps --------------------------------------------------------------------

def step_a(models, xs, ys):
    loss, (gg, g1, g2) = source_loss(models, xs, ys)
    _finite(loss, "source loss")
    nn.sgd_step(models.G, gg, models.opt_g)
    nn.sgd_step(models.C1, g1, models.opt_c1)
    nn.sgd_step(models.C2, g2, models.opt_c2)
    return loss


def step_b(models, xs, ys, xt, alpha, disc=CDD):
    if alpha < 0:
        raise InvalidArgument("alpha must be >= 0")
    obj, g1, g2 = classifier_objective(models, xs, ys, xt, alpha, disc)
    _finite(obj, "classifier objective")
    nn.sgd_step(models.C1, g1, models.opt_c1)
    nn.sgd_step(models.C2, g2, models.opt_c2)
    return obj


def step_c(models, xt, alpha, entropy_weight, disc=CDD):
    if alpha < 0 or entropy_weight < 0:
        raise InvalidArgument("alpha and entropy_weight must be >= 0")
    if alpha == 0 and entropy_weight == 0:
        # null objective: leave G (and its momentum) untouched
        return 0.0
    obj, gg = generator_objective(models, xt, alpha, entropy_weight, disc)
    _finite(obj, "generator objective")
    nn.sgd_step(models.G, gg, models.opt_g)
    return obj


# -- driver -------------------------------------------------------------------

@dataclass
class LogRecord:
    iter: int
    src_loss: float
    disc_loss: float
    entropy: float
    target_err: float = float("nan")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def to_csv(self, path):
        def fmt(v):
            return "" if np.isnan(v) else format(v, ".17g")

        lines = ["iter,src_loss,disc_loss,entropy,target_err"]
        for r in self.records:
            lines.append(f"{r.iter},{fmt(r.src_loss)},{fmt(r.disc_loss)},{fmt(r.entropy)},{fmt(r.target_err)}")
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


@dataclass
class EvalResult:
    accuracy: float
    accuracy_c1: float
    accuracy_c2: float


def evaluate(models, ds):
    x, y = ds.features, ds.labels
    p1, p2 = models.probas(x)
    pred = np.argmax(0.5 * (p1 + p2), axis=1)
    return EvalResult(
        float(np.mean(pred == y)),
        float(np.mean(np.argmax(p1, axis=1) == y)),
        float(np.mean(np.argmax(p2, axis=1) == y)),
    )


def train(cfg, source, target, eval_target=None, discrepancy=None):
    """Run the configured method for ``cfg.max_iteration`` iterations.

    bcdm runs the source step, the classifier max-discrepancy step and the
    generator min-discrepancy step every iteration; mcd_l1 swaps CDD for L1;
    source_only runs the source step alone. ``discrepancy`` overrides the
    method's default discrepancy.
    """
    cfg.validate()
    if not isinstance(source, LabeledDataset):
        raise InvalidArgument("source must be labeled")
    if source.dim != cfg.generator_dims[0] or target.dim != cfg.generator_dims[0]:
        raise InvalidArgument("feature dims of source/target do not match generator input")
    if source.n_classes > cfg.classifier_dims[-1]:
        raise InvalidArgument("source labels exceed classifier output dim")
    b = cfg.batch_size
    if b > min(len(source), len(target)):
        raise InvalidArgument(f"batch_size {b} exceeds dataset size")
    disc = discrepancy or (L1 if cfg.method == "mcd_l1" else CDD)

    models = build_models(cfg)
    s_sampler = BatchSampler(len(source), b, substream(cfg.seed, "batch/source"))
    t_sampler = BatchSampler(len(target), b, substream(cfg.seed, "batch/target"))
    tlog = TrainLog()
    xt_all = target.features
    for it in range(cfg.max_iteration):
        models.set_progress(it / cfg.max_iteration)
        si = s_sampler.next_indices()
        ti = t_sampler.next_indices()
        xs, ys = source.features[si], source.labels[si]
        xt = xt_all[ti]
        src = step_a(models, xs, ys)
        if cfg.method != "source_only":
            step_b(models, xs, ys, xt, cfg.alpha, disc)
            step_c(models, xt, cfg.alpha, cfg.entropy_weight, disc)
        if (it + 1) % cfg.log_interval == 0 or it + 1 == cfg.max_iteration:
            f = models.G.predict(xt_all)
            p1, p2 = _softmax(models.C1.predict(f)), _softmax(models.C2.predict(f))
            rec = LogRecord(
                it + 1,
                src,
                float(disc.value(p1, p2).mean()),
                float(0.5 * (_entropy(p1).mean() + _entropy(p2).mean())),
            )
            if eval_target is not None:
                rec.target_err = 1.0 - evaluate(models, eval_target).accuracy
            tlog.records.append(rec)
            log.debug("iter %d src %.4f disc %.4f ent %.4f err %.4f", rec.iter, rec.src_loss,
                      rec.disc_loss, rec.entropy, rec.target_err)
    return models, tlog


# -- model envelope -------------------------------------------------------------

def models_to_json(models):
    return (
        '{"G":' + nn.network_to_dict_json(models.G)
        + ',"C1":' + nn.network_to_dict_json(models.C1)
        + ',"C2":' + nn.network_to_dict_json(models.C2) + "}\n"
    )


def models_from_json(text, cfg=None):
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelFormatError(e.msg, e.pos) from None
    if not isinstance(obj, dict) or not {"G", "C1", "C2"} <= set(obj):
        raise ModelFormatError("model envelope needs G, C1 and C2")
    g, c1, c2 = (nn.network_from_obj(obj[k]) for k in ("G", "C1", "C2"))
    if g.out_dim != c1.in_dim or c1.layer_dims != c2.layer_dims:
        raise ModelFormatError("networks in the envelope do not fit together")
    cfg = cfg or TrainConfig()
    m = cfg.classifier_lr_multiplier

    def opt(mult):
        return nn.OptimizerState(cfg.base_lr, cfg.momentum, cfg.weight_decay, cfg.anneal_a, cfg.anneal_b, mult)

    return ModelTriple(g, c1, c2, opt(1.0), opt(m), opt(m))
