import math

import numpy as np
import pytest

from bcdm import nn
from bcdm.data import LabeledDataset, UnlabeledDataset, toy_domains
from bcdm.discrepancy import CDD, L1, Discrepancy
from bcdm.errors import InvalidArgument, ModelFormatError, NumericalDivergence
from bcdm.trainer import (
    TrainConfig,
    build_models,
    classifier_objective,
    evaluate,
    generator_objective,
    models_from_json,
    models_to_json,
    source_loss,
    step_a,
    step_b,
    step_c,
    train,
)
from gradcheck import flat_grads, max_rel_error
from helpers import constant_head, identity, linear, triple

SMALL = dict(generator_dims=[2, 6, 5], classifier_dims=[5, 4, 3])


def small_models(seed=0, **kw):
    return build_models(TrainConfig(seed=seed, **{**SMALL, **kw}))


def jittered(seed):
    """Small random biases keep pre-activations off the ReLU kink at exactly 0."""
    m = small_models(seed)
    rng = np.random.default_rng(1000 + seed)
    for net in (m.G, m.C1, m.C2):
        for layer in net.layers:
            layer.bias += rng.normal(scale=0.1, size=layer.bias.shape)
    return m


def batch(seed, n=7, k=3):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 2)), rng.integers(0, k, n), rng.normal(size=(n + 2, 2))


def params(m):
    return m.G.parameters() + m.C1.parameters() + m.C2.parameters()


# -- config -----------------------------------------------------------------------

def test_config_rejects_bad_values():
    for bad in [dict(method="dann"), dict(alpha=-1), dict(max_iteration=0), dict(batch_size=0),
                dict(generator_dims=[2, 8], classifier_dims=[4, 2])]:
        with pytest.raises(InvalidArgument):
            TrainConfig(**bad).validate()


def test_config_dict_roundtrip_and_unknown_field():
    cfg = TrainConfig(alpha=0.5, seed=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InvalidArgument, match="alhpa"):
        TrainConfig.from_dict({"alhpa": 1})


# -- objectives -----------------------------------------------------------------

def test_source_loss_closed_forms():
    x = np.zeros((4, 2))
    uniform = triple(identity(), constant_head([0.0, 0.0]))
    assert source_loss(uniform, x, [0, 1, 1, 0])[0] == pytest.approx(math.log(2), abs=1e-11)
    sure = triple(identity(), constant_head([60.0, -60.0]))
    assert source_loss(sure, x, [0, 0, 0, 0])[0] < 1e-12
    with pytest.raises(InvalidArgument):
        source_loss(sure, x, [0, 2, 0, 0])


@pytest.mark.parametrize("seed", range(4))
def test_source_loss_gradients(seed):
    m = jittered(seed)
    xs, ys, _ = batch(seed)
    _, (gg, g1, g2) = source_loss(m, xs, ys)
    err = max_rel_error(lambda: source_loss(m, xs, ys)[0], params(m),
                        flat_grads(gg) + flat_grads(g1) + flat_grads(g2))
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("disc", [CDD, L1], ids=["cdd", "l1"])
def test_classifier_objective_gradients(seed, disc):
    m = jittered(seed)
    xs, ys, xt = batch(seed)
    _, g1, g2 = classifier_objective(m, xs, ys, xt, 0.7, disc)
    err = max_rel_error(lambda: classifier_objective(m, xs, ys, xt, 0.7, disc)[0],
                        m.C1.parameters() + m.C2.parameters(), flat_grads(g1) + flat_grads(g2))
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("disc", [CDD, L1], ids=["cdd", "l1"])
def test_generator_objective_gradients(seed, disc):
    m = jittered(seed)
    _, _, xt = batch(seed)
    _, gg = generator_objective(m, xt, 0.7, 0.3, disc)
    err = max_rel_error(lambda: generator_objective(m, xt, 0.7, 0.3, disc)[0], m.G.parameters(), flat_grads(gg))
    assert err < 1e-4


def test_objective_values_combine_terms():
    m = small_models(1)
    xs, ys, xt = batch(1)
    cls = source_loss(m, xs, ys)[0]
    p1, p2 = m.probas(xt)
    d = CDD.value(p1, p2).mean()
    assert classifier_objective(m, xs, ys, xt, 0.25)[0] == pytest.approx(cls - 0.25 * d, abs=1e-12)
    assert generator_objective(m, xt, 0.25, 0.0)[0] == pytest.approx(0.25 * d, abs=1e-12)


# -- steps ------------------------------------------------------------------------

def test_step_a_descends_at_small_lr():
    worse = 0
    for seed in range(100):
        m = small_models(seed, base_lr=1e-3, weight_decay=0.0)
        xs, ys, _ = batch(seed)
        before = source_loss(m, xs, ys)[0]
        step_a(m, xs, ys)
        worse += source_loss(m, xs, ys)[0] >= before
    assert worse == 0


def test_step_a_zero_gradient_moves_by_decay_only():
    g, c = identity(), constant_head([60.0, -60.0])
    m = triple(g, c)
    for opt in (m.opt_g, m.opt_c1, m.opt_c2):
        opt.weight_decay, opt.base_lr = 0.1, 0.5
    before = [p.copy() for p in params(m)]
    step_a(m, np.ones((3, 2)), [0, 0, 0])
    for old, new in zip(before, params(m)):
        assert np.allclose(new, old - 0.5 * 0.1 * old, atol=1e-12)


def test_step_b_freezes_generator():
    m = small_models(2)
    xs, ys, xt = batch(2)
    g = m.G.fingerprint()
    c1 = m.C1.fingerprint()
    step_b(m, xs, ys, xt, 0.5)
    assert m.G.fingerprint() == g and m.C1.fingerprint() != c1
    with pytest.raises(InvalidArgument):
        step_b(m, xs, ys, xt, -0.1)


def test_step_b_alpha_zero_is_classifier_source_step():
    a, b = small_models(3), small_models(3)
    xs, ys, xt = batch(3)
    step_b(a, xs, ys, xt, 0.0)
    _, (_, g1, g2) = source_loss(b, xs, ys)
    nn.sgd_step(b.C1, g1, b.opt_c1)
    nn.sgd_step(b.C2, g2, b.opt_c2)
    assert a.fingerprint() == b.fingerprint()


def test_step_c_freezes_classifiers():
    m = small_models(4)
    _, _, xt = batch(4)
    c1, c2, g = m.C1.fingerprint(), m.C2.fingerprint(), m.G.fingerprint()
    step_c(m, xt, 0.5, 0.1)
    assert (m.C1.fingerprint(), m.C2.fingerprint()) == (c1, c2) and m.G.fingerprint() != g
    with pytest.raises(InvalidArgument):
        step_c(m, xt, 0.5, -1.0)


def test_step_c_null_objective_leaves_generator():
    m = small_models(5)
    xs, ys, xt = batch(5)
    step_a(m, xs, ys)  # leaves momentum in G's optimizer
    g = m.G.fingerprint()
    step_c(m, xt, 0.0, 0.0)
    assert m.G.fingerprint() == g


def _toy_features(seed=0):
    src, tgt = toy_domains(seed=seed)
    return src.features[:32], src.labels[:32], tgt.features[:32]


def test_step_b_increases_target_cdd():
    src, tgt = toy_domains(seed=0)
    m, _ = train(TrainConfig(method="source_only", max_iteration=200), src, tgt.unlabeled())
    for opt in (m.opt_c1, m.opt_c2):
        opt.base_lr, opt.lr_multiplier, opt.progress, opt.velocity = 1e-3, 1.0, 0.0, []
    xs, ys, xt = _toy_features()
    trace = []
    # at alpha <= 1 the source term dominates and sharpens predictions instead
    for _ in range(50):
        trace.append(CDD.value(*m.probas(xt)).mean())
        step_b(m, xs, ys, xt, 10.0)
    trace.append(CDD.value(*m.probas(xt)).mean())
    assert trace[-1] > trace[0]
    assert np.polyfit(np.arange(len(trace)), trace, 1)[0] > 0


def test_step_c_drives_cdd_down():
    m = build_models(TrainConfig(seed=0, base_lr=1e-3))
    _, _, xt = _toy_features()
    trace = []
    for _ in range(200):
        trace.append(CDD.value(*m.probas(xt)).mean())
        step_c(m, xt, 1.0, 0.0)
    trace.append(CDD.value(*m.probas(xt)).mean())
    assert trace[-1] < trace[0]
    assert np.polyfit(np.arange(len(trace)), trace, 1)[0] < 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises_divergence():
    m = small_models(6)
    xs, ys, _ = batch(6)
    m.G.layers[0].weight[0, 0] = 1e308
    xs[:, 0] = 1e308
    with pytest.raises(NumericalDivergence):
        step_a(m, xs, ys)


# -- training loop --------------------------------------------------------------------

@pytest.fixture(scope="module")
def domains():
    src, tgt = toy_domains(n_per_class=40, seed=1)
    return src, tgt


def quick(method="bcdm", **kw):
    return TrainConfig(method=method, **{**dict(max_iteration=30, batch_size=16, log_interval=10), **kw})


def test_train_rejects_bad_inputs(domains):
    src, tgt = domains
    with pytest.raises(InvalidArgument):
        train(quick(batch_size=500), src, tgt.unlabeled())
    with pytest.raises(InvalidArgument):
        train(quick(), src, UnlabeledDataset(np.zeros((50, 3))))
    with pytest.raises(InvalidArgument):
        train(quick(max_iteration=0), src, tgt.unlabeled())
    with pytest.raises(InvalidArgument):
        train(quick(), src.unlabeled(), tgt.unlabeled())


def test_train_is_deterministic(domains):
    src, tgt = domains
    a, la = train(quick(), src, tgt.unlabeled(), tgt)
    b, lb = train(quick(), src, tgt.unlabeled(), tgt)
    assert a.fingerprint() == b.fingerprint() and la == lb
    c, _ = train(quick(seed=1), src, tgt.unlabeled())
    assert c.fingerprint() != a.fingerprint()


def test_train_log_records(domains, tmp_path):
    src, tgt = domains
    _, log = train(quick(max_iteration=25), src, tgt.unlabeled(), tgt)
    assert [r.iter for r in log.records] == [10, 20, 25]
    assert all(0 <= r.target_err <= 1 for r in log.records)
    log.to_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "iter,src_loss,disc_loss,entropy,target_err" and len(lines) == 4
    _, bare = train(quick(max_iteration=10), src, tgt.unlabeled())
    assert math.isnan(bare.records[0].target_err)


def _replay(cfg, src, tgt, extra_classifier_step):
    """Hand-rolled loop: step_a, optionally followed by a classifier-only source step."""
    from bcdm.data import BatchSampler, substream

    m = build_models(cfg)
    ss = BatchSampler(len(src), cfg.batch_size, substream(cfg.seed, "batch/source"))
    ts = BatchSampler(len(tgt), cfg.batch_size, substream(cfg.seed, "batch/target"))
    for it in range(cfg.max_iteration):
        m.set_progress(it / cfg.max_iteration)
        si, _ = ss.next_indices(), ts.next_indices()
        xs, ys = src.features[si], src.labels[si]
        step_a(m, xs, ys)
        if extra_classifier_step:
            _, (_, g1, g2) = source_loss(m, xs, ys)
            nn.sgd_step(m.C1, g1, m.opt_c1)
            nn.sgd_step(m.C2, g2, m.opt_c2)
    return m


def test_alpha_zero_wiring(domains):
    src, tgt = domains
    cfg = quick(alpha=0.0, entropy_weight=0.0)
    bcdm, _ = train(cfg, src, tgt.unlabeled())
    assert bcdm.fingerprint() == _replay(cfg, src, tgt, True).fingerprint()
    only, _ = train(quick("source_only"), src, tgt.unlabeled())
    assert only.fingerprint() == _replay(quick("source_only"), src, tgt, False).fingerprint()


def test_max_iteration_one_runs_one_cycle(domains):
    src, tgt = domains
    m, log = train(quick(max_iteration=1), src, tgt.unlabeled())
    assert [r.iter for r in log.records] == [1]
    assert m.fingerprint() != build_models(quick(max_iteration=1)).fingerprint()


class Counting:
    def __init__(self, inner):
        self.inner, self.value_calls, self.grad_calls = inner, 0, 0

    def as_discrepancy(self):
        def value(p1, p2):
            self.value_calls += 1
            return self.inner.value(p1, p2)

        def grad(p1, p2):
            self.grad_calls += 1
            return self.inner.grad(p1, p2)

        return Discrepancy("counting", value, grad)


def test_discrepancy_swap_call_sites(domains):
    src, tgt = domains
    stub = Counting(CDD)
    stubbed, _ = train(quick(max_iteration=20), src, tgt.unlabeled(), discrepancy=stub.as_discrepancy())
    # steps B and C each call value and grad once; logging adds a value call per record
    assert stub.grad_calls == 40 and stub.value_calls == 42
    plain, _ = train(quick(max_iteration=20), src, tgt.unlabeled())
    assert stubbed.fingerprint() == plain.fingerprint()
    stub = Counting(L1)
    a, _ = train(quick("mcd_l1", max_iteration=20), src, tgt.unlabeled())
    b, _ = train(quick("bcdm", max_iteration=20), src, tgt.unlabeled(), discrepancy=stub.as_discrepancy())
    assert a.fingerprint() == b.fingerprint() and stub.grad_calls == 40
    stub = Counting(CDD)
    train(quick("source_only", max_iteration=20), src, tgt.unlabeled(), discrepancy=stub.as_discrepancy())
    assert stub.grad_calls == 0


def test_methods_differ(domains):
    src, tgt = domains
    prints = {m: train(quick(m), src, tgt.unlabeled())[0].fingerprint() for m in ("source_only", "mcd_l1", "bcdm")}
    assert len(set(prints.values())) == 3


def test_source_fit_after_training():
    src, tgt = toy_domains(seed=0)
    m, _ = train(TrainConfig(method="source_only"), src, tgt.unlabeled())
    assert evaluate(m, src).accuracy >= 0.99


# -- evaluation ----------------------------------------------------------------------

def test_evaluate_trivial_cases():
    x = np.zeros((4, 2))
    const = triple(identity(), constant_head([1.0, 0.0]))
    assert evaluate(const, LabeledDataset(x, [0, 1, 0, 1])).accuracy == 0.5
    one = triple(identity(), linear([[1.0, 0.0], [-1.0, 0.0]], [0, 0]))
    r = evaluate(one, LabeledDataset(np.array([[2.0, 0.0]]), [0]))
    assert (r.accuracy, r.accuracy_c1, r.accuracy_c2) == (1.0, 1.0, 1.0)


def test_evaluate_ties_break_low():
    tie = triple(identity(), constant_head([0.5, 0.5]))
    assert evaluate(tie, LabeledDataset(np.zeros((2, 2)), [0, 0], 2)).accuracy == 1.0


def test_prediction_invariant_to_logit_shift():
    rng = np.random.default_rng(9)
    c1 = linear(rng.normal(size=(3, 2)), rng.normal(size=3))
    c2 = linear(rng.normal(size=(3, 2)), rng.normal(size=3))
    x = rng.normal(size=(50, 2))
    base = triple(identity(), c1, c2).predict(x)
    s1, s2 = c1.copy(), c2.copy()
    s1.layers[0].bias += 3.0
    s2.layers[0].bias -= 7.5
    assert np.array_equal(triple(identity(), s1, s2).predict(x), base)


# -- model envelope ---------------------------------------------------------------------

def test_models_json_roundtrip():
    m = small_models(7)
    back = models_from_json(models_to_json(m))
    assert back.fingerprint() == m.fingerprint()
    assert models_to_json(back) == models_to_json(m)


@pytest.mark.parametrize("text", ["{", '{"G": 1}', "[]"])
def test_models_json_rejects_garbage(text):
    with pytest.raises(ModelFormatError):
        models_from_json(text)
