import logging
import math

import numpy as np
import pytest

from helpers import MODES, SequenceValidation, gradient_case, tiny_network
from qrt import autodiff as ad
from qrt.calibration import MapKind, build_map, kernel_counter, pit, refl_log_density
from qrt.data import split, synth
from qrt.mdn import MdnConfig
from qrt.metrics import pce_from_pit
from qrt.training import (
    Ablation,
    EarlyStopping,
    MethodSpec,
    Partitions,
    PRESET_NAMES,
    RecalibratedModel,
    SampledMapSource,
    TrainingDiverged,
    posthoc_recalibrate,
    preset,
    qrt_loss,
    recalibrated_nll_direct,
    select_bandwidth,
    select_lambda,
    train,
    vasicek_entropy,
)


def batch(seed, n=16):
    rng = np.random.default_rng(seed)
    return tiny_network(seed), rng.standard_normal((n, 3)), rng.standard_normal(n)


def small_parts(n=300, seed=0, kind="heteroscedastic"):
    X, y = synth(kind, n, seed, n_features=3)
    return Partitions.from_splits(X, y, split(n, seed))


def test_presets_cover_method_table():
    rows = {n: preset(n) for n in PRESET_NAMES}
    assert (rows["BASE"].alpha, rows["BASE"].posthoc) == (0.0, False)
    assert (rows["QRC"].alpha, rows["QRC"].posthoc) == (0.0, True)
    assert rows["QREG"].tuned and not rows["QREG"].posthoc and rows["QREGC"].posthoc
    assert (rows["QRT"].alpha, rows["QRTC"].posthoc) == (1.0, True)
    assert rows["QRIC"].ablation is Ablation.FROZEN_INIT
    assert rows["QRGC"].ablation is Ablation.STOP_GRAD
    assert rows["QRLC"].ablation is Ablation.LEARNED_CENTERS
    assert rows["BASE"].folds_calibration and not rows["QRC"].folds_calibration
    assert rows["QRT"].should_drop_last and not rows["BASE"].should_drop_last
    assert rows["BASE"].batch_size == 512 and rows["BASE"].patience == 30
    back = MethodSpec.from_dict(rows["QRLC"].to_dict())
    assert back == rows["QRLC"]
    with pytest.raises(KeyError):
        preset("QRX")
    with pytest.raises(ValueError):
        MethodSpec(regularizer="other")


def test_alpha_zero_loss_is_base_nll():
    model, X, y = batch(0)
    loss = qrt_loss(model, X, y, alpha=0.0)
    assert loss.item() == -np.mean(model.forward(X).log_pdf(y))


def test_alpha_one_two_path_identity():
    for seed in range(20):
        model, X, y = batch(seed)
        loss = qrt_loss(model, X, y, alpha=1.0, bandwidth=0.1).item()
        z = pit(model.forward(X), y)
        assert abs(loss - recalibrated_nll_direct(model, X, y, z, 0.1)) <= 1e-10


def test_map_term_vanishes_for_uniform_pits():
    z = (np.arange(1, 513) - 0.5) / 512
    terms = [-refl_log_density(z, z, b).value.mean() for b in (0.2, 0.1, 0.05, 0.01)]
    assert abs(terms[-1]) < 1e-3
    assert all(abs(t) < 0.02 for t in terms)


def test_kernel_count_is_three_b_squared():
    model, X, y = batch(1, n=32)
    with kernel_counter.measure() as box:
        qrt_loss(model, X, y, alpha=1.0, bandwidth=0.1)
    assert box[0] == 3 * 32**2


def test_loss_errors():
    model, X, y = batch(2, n=4)
    with pytest.raises(ValueError):
        qrt_loss(model, X[:1], y[:1], alpha=1.0)
    with pytest.raises(ValueError):
        qrt_loss(model, X, y, alpha=1.0, bandwidth=0.0)


@pytest.mark.parametrize("mode", MODES)
def test_gradients_match_finite_differences(mode):
    for seed in range(5):
        assert gradient_case(seed, mode).error < 1e-4


def test_stop_grad_blocks_center_pathway():
    model, X, y = batch(3)
    z0 = pit(model.forward(X), y)

    def grads(ablation, centers):
        params = {k: ad.Tensor(v, requires_grad=True) for k, v in model.params.state_dict().items()}
        qrt_loss(model, X, y, 1.0, 0.1, ablation, centers=centers, params=params).backward()
        return {k: t.grad for k, t in params.items()}

    blocked = grads("stop-grad", None)
    constant = grads("none", z0)
    full = grads("none", None)
    for k in blocked:
        np.testing.assert_allclose(blocked[k], constant[k], rtol=0, atol=1e-14)
    assert any(np.max(np.abs(full[k] - blocked[k])) > 1e-6 for k in full)


def test_vasicek_examples(caplog):
    n = 99
    assert abs(vasicek_entropy(np.arange(1, n + 1) / (n + 1))) < 1e-12
    u = np.random.default_rng(0).uniform(size=10_000)
    assert abs(vasicek_entropy(u)) < 0.02
    with caplog.at_level(logging.WARNING, logger="qrt.training"):
        v = vasicek_entropy(np.array([0.2, 0.2, 0.2, 0.7]), k=1)
    assert math.isfinite(v) and "floored" in caplog.text
    with pytest.raises(ValueError):
        vasicek_entropy(np.array([0.1, 0.2]), k=2)


def test_vasicek_regularizer_gradients():
    model, X, y = batch(4, n=12)
    point = model.params.state_dict()
    res = ad.finite_diff_check(
        lambda p: qrt_loss(model, X, y, -0.5, 0.1, regularizer="vasicek", vasicek_k=3, params=p),
        point, h=1e-6)
    assert res.error < 1e-4


def test_sampled_source_clamping_and_frequency():
    rng = np.random.default_rng(5)
    X, y = rng.standard_normal((50, 3)), rng.standard_normal(50)
    src = SampledMapSource(X, y, 1000, rng)
    assert src.m == 50 and sorted(src.draw()) == list(range(50))
    n, m, draws = 100, 20, 1000
    src = SampledMapSource(np.zeros((n, 1)), np.zeros(n), m, np.random.default_rng(6))
    counts = np.zeros(n)
    for _ in range(draws):
        idx = src.draw()
        assert len(set(idx)) == m
        counts[idx] += 1
    p = m / n
    assert np.all(np.abs(counts / draws - p) < 3 * np.sqrt(p * (1 - p) / draws))
    with pytest.raises(ValueError):
        SampledMapSource(X, y, 1, rng)


def test_sampled_source_reduces_to_batch_map():
    model, X, y = batch(7)

    class Same(SampledMapSource):
        def draw(self):
            return np.arange(len(self.y))

    src = Same(X, y, len(y), np.random.default_rng(0))
    a = qrt_loss(model, X, y, 1.0, 0.1, centers=src.centers(model)).item()
    b = qrt_loss(model, X, y, 1.0, 0.1).item()
    assert a == b


def test_sampled_source_row_count():
    parts = small_parts()
    spec = preset("QRT", bandwidth=0.1, map_source="sampled", map_size=64, batch_size=32, max_epochs=1)
    _, hist = train(MdnConfig(3, 1, 8, 1), spec, parts)
    assert hist.model_rows_per_step == 32 + 64


def test_learned_centers_add_b_parameters():
    parts = small_parts()
    cfg = MdnConfig(3, 1, 8, 2)
    _, plain = train(cfg, preset("QRT", bandwidth=0.1, batch_size=32, max_epochs=1), parts)
    _, learned = train(cfg, preset("QRLC", bandwidth=0.1, batch_size=32, max_epochs=1), parts)
    assert learned.n_parameters - plain.n_parameters == 32


@pytest.mark.parametrize("name", ["BASE", "QRT", "QRIC", "QRGC", "QRLC"])
def test_training_is_deterministic(name):
    parts = small_parts()
    spec = preset(name, bandwidth=0.1, batch_size=64, max_epochs=3)
    m1, h1 = train(MdnConfig(3, 1, 8, 2), spec, parts)
    m2, h2 = train(MdnConfig(3, 1, 8, 2), spec, parts)
    for key in ("train_loss", "train_nll", "val_nll", "val_pce"):
        assert getattr(h1, key) == getattr(h2, key)
    assert h1.selected_epoch == h2.selected_epoch
    for k, v in m1.params.state_dict().items():
        np.testing.assert_array_equal(v, m2.params.state_dict()[k])


def test_patience_stops_and_restores_best():
    e = 4
    values = [5.0 - i for i in range(e + 1)] + [1.0 + 0.1 * i for i in range(1, 100)]
    watcher = SequenceValidation(values)
    spec = preset("BASE", batch_size=64, max_epochs=200, patience=30)
    model, hist = train(MdnConfig(3, 1, 8, 1), spec, small_parts(), validation_fn=watcher)
    assert hist.selected_epoch == e and hist.stopped_epoch == e + 30
    assert len(hist.val_nll) == e + 31
    for k, v in model.params.state_dict().items():
        np.testing.assert_array_equal(v, watcher.snapshots[e][k])


def test_early_stopping_ties_count_as_misses():
    es = EarlyStopping(patience=2)
    assert not es.update(0, 1.0, "a")
    assert not es.update(1, 1.0, "b")
    assert es.update(2, 1.0, "c")
    assert es.best_state == "a"


def test_divergence_reports_history():
    parts = small_parts()
    parts.y_train = parts.y_train.copy()
    parts.y_train[3] = 1e300
    spec = preset("BASE", batch_size=32, max_epochs=5)
    with np.errstate(over="ignore"), pytest.raises(TrainingDiverged, match="epoch 0") as info:
        train(MdnConfig(3, 1, 8, 1), spec, parts)
    assert info.value.history.stopped_epoch == 0
    watcher = SequenceValidation([1.0, 0.5, math.nan])
    with pytest.raises(TrainingDiverged) as info:
        train(MdnConfig(3, 1, 8, 1), spec, small_parts(), validation_fn=watcher)
    assert info.value.history.val_nll[:2] == [1.0, 0.5]


@pytest.mark.slow
def test_linear_gaussian_reaches_noise_entropy():
    n = 5000
    X, y = synth("linear-gaussian", n, 0)
    s = split(n, 0, fold_calibration_into_train=True)
    parts = Partitions.from_splits(X, y, s)
    spec = preset("BASE", max_epochs=300)
    _, hist = train(MdnConfig(4, 2, 32, 1), spec, parts)
    best = hist.val_nll[hist.selected_epoch] + math.log(s.y_sd)
    assert abs(best - 0.5 * math.log(2 * math.pi * math.e)) < 0.05


def test_posthoc_emp_calibrates_its_own_split():
    parts = small_parts(600, kind="bimodal")
    model, _ = train(MdnConfig(3, 1, 8, 1), preset("BASE", batch_size=64, max_epochs=5), parts)
    rec = posthoc_recalibrate(model, parts.X_cal, parts.y_cal, MapKind.EMP)
    z = rec.cdf(parts.X_cal, parts.y_cal)
    n_cal, levels = len(parts.y_cal), 100
    assert pce_from_pit(z, levels) <= 1 / n_cal + 1 / (2 * levels)
    assert pce_from_pit(pit(model.forward(parts.X_cal), parts.y_cal)) > pce_from_pit(z)
    q = rec.quantile(parts.X_cal[:5], np.broadcast_to(np.linspace(0.05, 0.95, 19), (5, 19)))
    assert np.all(np.diff(q, axis=1) >= 0)
    with pytest.raises(ValueError):
        posthoc_recalibrate(model, parts.X_cal[:0], parts.y_cal[:0])


def test_near_identity_map_preserves_nll():
    model, X, y = batch(8, n=200)
    rec = RecalibratedModel(model, build_map("REFL", np.linspace(0, 1, 4001), 0.01))
    base = -np.mean(model.forward(X).log_pdf(y))
    assert abs(-np.mean(rec.log_pdf(X, y)) - base) < 0.01


def test_select_bandwidth_rules():
    assert select_bandwidth([0.1], lambda b: 3.0) == 0.1
    assert select_bandwidth([0.2, 0.05, 0.1], {0.2: 1.0, 0.05: 1.0, 0.1: 1.0}) == 0.05
    rng = np.random.default_rng(9)

    def bimodal(n):
        return np.clip(np.where(rng.uniform(size=n) < 0.5, rng.normal(0.25, 0.03, n), rng.normal(0.75, 0.03, n)), 0, 1)

    fit, held = bimodal(512), bimodal(512)
    scores = {b: -build_map("REFL", fit, b).log_pdf(held).mean() for b in (0.01, 0.05, 0.1, 0.2)}
    assert select_bandwidth(scores, scores) < 0.2
    with pytest.raises(ValueError):
        select_bandwidth([], {})


def test_select_lambda_rules():
    assert select_lambda({0.0: (1.0, 0.10), 0.5: (1.2, 0.01), 1.0: (1.5, 0.0)}) == 0.0
    assert select_lambda({0.0: (1.0, 0.10), 0.5: (1.05, 0.03), 1.0: (1.08, 0.05)}) == 0.5
    assert select_lambda({0.0: (1.0, 0.10), 0.2: (1.10, 0.02)}) == 0.2
    with pytest.raises(ValueError):
        select_lambda({0.5: (1.0, 0.1)})
