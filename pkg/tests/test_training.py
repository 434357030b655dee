import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icl_lab.model import ModelParams, predict, to_diag, to_full
from icl_lab.tasks import NoiseDistribution, make_eval_set, sample_batch
from icl_lab.training import (Adam, TrainConfig, TrainingDiverged, clip_by_global_norm, grad,
                              icl_loss, loss_and_grad, train)


def finite_difference(params, batch, h=1e-6):
    theta = params.to_vector()
    out = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        out[i] = (icl_loss(params.with_vector(theta + e), batch)
                  - icl_loss(params.with_vector(theta - e), batch)) / (2 * h)
    return out


@pytest.mark.parametrize("variant,heads", [("full", 1), ("full", 2), ("diag", 1), ("gdpp", 1)])
def test_gradient_matches_central_differences(rng, variant, heads):
    batch = sample_batch(rng, 16, 3, 7, NoiseDistribution.uniform(1))
    params = ModelParams.init(variant, 3, 3, rng, scale=0.05, heads=heads)
    analytic = grad(params, batch).to_vector()
    numeric = finite_difference(params, batch)
    rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
    assert rel <= 1e-4


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31), L=st.integers(1, 4))
def test_diag_gradient_random(seed, L):
    rng = np.random.default_rng(seed)
    batch = sample_batch(rng, 8, 2, 5, NoiseDistribution.uniform(2))
    params = ModelParams.init("diag", 2, L, rng, scale=0.05)
    analytic = grad(params, batch).to_vector()
    numeric = finite_difference(params, batch)
    assert np.linalg.norm(analytic - numeric) <= 1e-4 * max(np.linalg.norm(numeric), 1e-3)


def test_zero_params_gradient_closed_form(rng):
    batch = sample_batch(rng, 256, 4, 9, NoiseDistribution.uniform(1))
    alpha = np.einsum("bnd,bn->bd", batch.x, batch.y)
    expected = np.mean(2 * batch.y_t * np.einsum("bd,bd->b", alpha, batch.x_t))
    g = grad(ModelParams.zeros("diag", 4, 3), batch)
    for layer in g.layers:
        assert layer.w_yx == pytest.approx(expected, rel=1e-10)
        assert layer.w_xx == 0 and layer.w_xy == 0 and layer.w_yy == 0


def test_zero_params_loss_is_signal_variance():
    batch = make_eval_set(1, 100_000, 10, 20, NoiseDistribution.uniform(5))
    assert abs(icl_loss(ModelParams.zeros("diag", 10, 2), batch) - 10.0) <= 0.1


def test_loss_and_grad_consistent(rng):
    batch = sample_batch(rng, 32, 3, 7, NoiseDistribution.fixed(1))
    p = ModelParams.init("full", 3, 2, rng, scale=0.05)
    loss, g = loss_and_grad(p, batch)
    assert loss == icl_loss(p, batch)
    assert np.array_equal(g.to_vector(), grad(p, batch).to_vector())


def test_variant_nesting_in_loss(rng):
    batch = sample_batch(rng, 64, 3, 7, NoiseDistribution.uniform(2))
    g = ModelParams.init("gdpp", 3, 3, rng, scale=0.05)
    assert icl_loss(g, batch) == pytest.approx(icl_loss(to_diag(g), batch), rel=1e-12)
    assert icl_loss(g, batch) == pytest.approx(icl_loss(to_full(g), batch), rel=1e-12)


def test_clip_by_global_norm():
    g, norm = clip_by_global_norm(np.array([3.0, 4.0]), 1.0)
    assert norm == 5.0 and np.allclose(g, [0.6, 0.8])
    g, _ = clip_by_global_norm(np.array([0.3, 0.4]), 1.0)
    assert np.allclose(g, [0.3, 0.4])


def test_adam_first_step_is_lr_sign():
    opt = Adam(3, lr=0.1)
    theta = opt.step(np.zeros(3), np.array([2.0, -1e-3, 0.0]))
    assert np.allclose(theta[:2], [-0.1, 0.1], rtol=1e-4)
    assert theta[2] == 0.0


def _small(**kw):
    base = dict(variant="diag", layers=2, d=3, n=7, noise=NoiseDistribution.uniform(1),
                batch_size=32, iterations=60, learning_rate=1e-2, seed=4, log_every=10,
                checkpoint_every=20)
    base.update(kw)
    return TrainConfig(**base)


def test_training_reduces_loss():
    rep = train(_small(iterations=300))
    ev = make_eval_set(0, 2000, 3, 7, NoiseDistribution.uniform(1))
    assert icl_loss(rep.params, ev) < 0.5 * icl_loss(ModelParams.zeros("diag", 3, 2), ev)
    assert rep.divergences == []


def test_training_deterministic():
    a = train(_small())
    b = train(_small())
    assert a.params.to_vector().tobytes() == b.params.to_vector().tobytes()
    assert [r[1] for r in a.curve] == [r[1] for r in b.curve]
    assert a.params.meta["seed"] == 4
    assert a.params.meta["training_config_hash"] == _small().digest()


def test_divergence_rolls_back_and_backs_off():
    # parameters this large overflow the forward pass from the first batch on,
    # so every rollback lands on a poisoned checkpoint and retries run out
    cfg = _small(init_scale=1e100, max_retries=3, iterations=40)
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged):
        train(cfg)


def test_divergence_recovers_after_backoff(monkeypatch):
    import icl_lab.training as tr
    calls = {"n": 0}
    real = tr.loss_and_grad

    def flaky(params, batch, need_grad=True):
        calls["n"] += 1
        if calls["n"] == 25:
            raise tr.NonFinite("injected")
        return real(params, batch, need_grad)

    monkeypatch.setattr(tr, "loss_and_grad", flaky)
    rep = train(_small(iterations=50))
    assert len(rep.divergences) == 1
    it, before, after = rep.divergences[0]
    assert it == 24 and after == pytest.approx(0.5 * before)
    assert np.all(np.isfinite(rep.params.to_vector()))


def test_config_validation():
    with pytest.raises(ValueError):
        _small(n=3)
    with pytest.raises(ValueError):
        _small(learning_rate=0)
    with pytest.raises(ValueError):
        _small(variant="lstm")


def test_curve_logging(tmp_path):
    rep = train(_small())
    rep.write_log(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "iteration,train_loss,lr,grad_norm"
    assert len(lines) == 1 + len(rep.curve)
