import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from orthosep.inr import (
    AdamAMSGrad,
    FourierEncoding,
    NonFiniteActivationError,
    OrthogonalSirenRegressor,
    PlateauScheduler,
    SirenModel,
    TrainConfig,
    backward,
    build_model,
    forward,
    fourier_encode,
    init_state,
    load_checkpoint,
    loss_and_grad,
    make_batches,
    predict_and_decompose,
    save_checkpoint,
    siren_init,
    train,
    write_history_csv,
)
from orthosep.projection import ProjectorSpec, gram_factorize, project_parallel

TOY = dict(n_fourier=4, hidden=6, n_hidden=1)


def _toy_config(**kw):
    base = dict(epochs=3, batch_size=64, lr=1e-3, n_fourier=8, hidden=16, n_hidden=1, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def _toy_data(rows=200, n=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((rows, n))
    y = np.sin(X @ np.arange(1, n + 1)) + 0.1 * rng.normal(size=rows)
    return X, y


# --- encoding ---------------------------------------------------------------

def test_encoding_zero_input():
    enc = FourierEncoding.random(3, 5, seed=1)
    out = enc(np.zeros(3))
    np.testing.assert_array_equal(out[:5], 0.0)
    np.testing.assert_array_equal(out[5:], 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_encoding_matches_scalar_loop(seed):
    rng = np.random.default_rng(seed)
    enc = FourierEncoding.random(4, 6, sigma=rng.uniform(0.1, 3), seed=seed)
    X = rng.normal(size=(5, 4))
    out = fourier_encode(enc, X)
    for i in range(5):
        for j in range(6):
            arg = 2 * math.pi * sum(enc.B[j, k] * X[i, k] for k in range(4))
            assert out[i, j] == pytest.approx(math.sin(arg), abs=1e-12)
            assert out[i, 6 + j] == pytest.approx(math.cos(arg), abs=1e-12)
    np.testing.assert_allclose(out[:, :6] ** 2 + out[:, 6:] ** 2, 1.0, atol=1e-12)
    assert np.all(np.abs(out) <= 1)


def test_encoding_dimension_mismatch():
    with pytest.raises(ValueError):
        FourierEncoding.random(3, 2)(np.zeros(4))


def test_bandwidth_statistics():
    enc = FourierEncoding.random(7, 128, sigma=1.0, seed=0)
    assert enc.out_dim == 256
    assert abs(enc.B.std() - 1.0) < 0.05


# --- initialisation ---------------------------------------------------------

def test_siren_init_bounds_and_determinism():
    widths = (256, 512, 512, 512, 512, 1)
    w1, b1 = siren_init(widths, 30.0, seed=9)
    w2, _ = siren_init(widths, 30.0, seed=9)
    assert all(np.array_equal(a, b) for a, b in zip(w1, w2))
    assert all(np.all(b == 0) for b in b1)
    assert np.abs(w1[0]).max() <= 1 / 256
    bound = math.sqrt(6 / 512) / 30
    assert bound == pytest.approx(3.6084e-3, abs=1e-7)
    hidden = np.concatenate([w.ravel() for w in w1[1:4]])
    assert hidden.size > 7.8e5
    assert np.abs(hidden).max() <= bound
    # uniform on [-b, b]: sd = b / sqrt(3)
    se = bound / math.sqrt(3) / math.sqrt(hidden.size)
    assert abs(hidden.mean()) <= 3 * se


def test_build_model_default_widths():
    m = build_model(7)
    assert m.widths == (256, 512, 512, 512, 512, 1)
    assert m.omega0 == 30.0


# --- forward / backward -----------------------------------------------------

def test_zero_network_outputs_zero():
    m = build_model(3, **TOY, seed=0)
    for w in m.weights:
        w[:] = 0
    np.testing.assert_array_equal(m.predict(np.random.default_rng(0).random((10, 3))), 0.0)


def test_single_unit_chain_by_hand():
    enc = FourierEncoding(np.array([[0.25]]))
    w = [np.array([[0.3], [-0.2]]), np.array([[0.7]]), np.array([[1.5]])]
    b = [np.array([0.1]), np.array([-0.05]), np.array([0.2])]
    m = SirenModel(enc, w, b, omega0=2.0)
    x = 0.6
    s, c = math.sin(2 * math.pi * 0.25 * x), math.cos(2 * math.pi * 0.25 * x)
    h1 = math.sin(2.0 * (0.3 * s - 0.2 * c + 0.1))
    h2 = math.sin(2.0 * (0.7 * h1 - 0.05))
    assert m.predict([[x]])[0] == pytest.approx(1.5 * h2 + 0.2, abs=1e-15)


def test_hidden_activations_bounded():
    m = build_model(3, n_fourier=8, hidden=32, n_hidden=2, seed=1)
    X = np.random.default_rng(1).normal(size=(50, 3)) * 5
    _, (hs, _) = forward(m, m.encoding(X), cache=True)
    assert all(np.all(np.abs(h) <= 1) for h in hs)


def test_non_finite_activation_names_layer():
    m = build_model(3, **TOY, seed=0)
    m.weights[1][0, 0] = np.inf
    with pytest.raises(NonFiniteActivationError) as err:
        m.predict(np.ones((2, 3)))
    assert err.value.layer == 1


def _fd_check(model, X, y, fact, lam, h=1e-6):
    def loss():
        return loss_and_grad(model, X, y, fact, lam)[0].total

    _, grads = loss_and_grad(model, X, y, fact, lam)
    worst = 0.0
    for p, g in zip(model.params, grads):
        fd = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            lp = loss()
            p[i] = old - h
            lm = loss()
            p[i] = old
            fd[i] = (lp - lm) / (2 * h)
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    return worst


@pytest.mark.parametrize("spec,lam,scope", [
    (ProjectorSpec.ridge(), 1.0, "batch"),
    (ProjectorSpec.pinv(), 1.0, "batch"),
    (ProjectorSpec.ridge(), 0.0, "batch"),
    (ProjectorSpec.ridge(), 2.5, "global"),
])
def test_gradients_match_finite_differences(spec, lam, scope):
    rng = np.random.default_rng(7)
    model = build_model(3, **TOY, seed=5)
    X_all = rng.random((96, 3))
    y_all = rng.random(96)
    X, y = X_all[:32], y_all[:32]
    fact = gram_factorize(X_all if scope == "global" else X, spec)
    assert _fd_check(model, X, y, fact, lam) <= 1e-4


def test_output_gradient_identities():
    rng = np.random.default_rng(2)
    model = build_model(3, **TOY, seed=2)
    X, y = rng.random((40, 3)), rng.random(40)
    e = model.predict(X) - y
    probe = lambda g: backward(model, forward(model, model.encoding(X), cache=True)[1], g)  # noqa: E731

    fact = gram_factorize(X, ProjectorSpec.pinv())
    _, grads = loss_and_grad(model, X, y, fact, 1.0)
    r_par = project_parallel(X, fact, e)
    # P^2 e and P e agree in pinv mode
    np.testing.assert_allclose(project_parallel(X, fact, r_par), r_par, rtol=1e-10, atol=1e-14)
    for a, b in zip(grads, probe((2 / 40) * (e + r_par))):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-15)

    _, grads0 = loss_and_grad(model, X, y, gram_factorize(X), 0.0)
    for a, b in zip(grads0, probe((2 / 40) * e)):
        np.testing.assert_array_equal(a, b)


def test_loss_breakdown_identity():
    rng = np.random.default_rng(3)
    model = build_model(3, **TOY, seed=3)
    X, y = rng.random((30, 3)), rng.random(30)
    loss, _ = loss_and_grad(model, X, y, gram_factorize(X), 0.7)
    e = model.predict(X) - y
    assert loss.mse_e == pytest.approx(float(e @ e) / 30, rel=1e-13)
    assert loss.total == loss.mse_e + 0.7 * loss.mse_par
    assert min(loss.mse_e, loss.mse_par) >= 0


def test_batch_smaller_than_features_rejected():
    with pytest.raises(ValueError):
        train(*_toy_data(rows=50, n=3), _toy_config(batch_size=2))


# --- optimiser and scheduler -------------------------------------------------

def test_adam_first_step_scalar_oracle():
    p = [np.array([0.5])]
    opt = AdamAMSGrad(p)
    opt.step(p, [np.array([1.0])], 1e-5)
    m = (1 - 0.9) * 1.0
    v = (1 - 0.999) * 1.0
    m_hat = m / (1 - 0.9)
    v_hat = v / (1 - 0.999)
    expected = 0.5 - 1e-5 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert p[0][0] == expected
    assert p[0][0] - 0.5 == pytest.approx(-1e-5, rel=1e-7)


def test_adam_multi_step_scalar_oracle():
    rng = np.random.default_rng(0)
    gs = rng.normal(size=25)
    p = [np.array([1.0])]
    opt = AdamAMSGrad(p)
    x, m, v, vmax = 1.0, 0.0, 0.0, 0.0
    for t, g in enumerate(gs, start=1):
        opt.step(p, [np.array([g])], 1e-3)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        vmax = max(vmax, v / (1 - 0.999**t))
        x -= 1e-3 * (m / (1 - 0.9**t)) / (math.sqrt(vmax) + 1e-8)
        assert p[0][0] == pytest.approx(x, rel=1e-14)


def test_adam_zero_gradient_and_monotone_vmax():
    rng = np.random.default_rng(1)
    p = [rng.normal(size=(3, 2)), rng.normal(size=2)]
    before = [a.copy() for a in p]
    opt = AdamAMSGrad(p)
    for _ in range(10):
        opt.step(p, [np.zeros((3, 2)), np.zeros(2)], 1e-2)
    assert all(np.array_equal(a, b) for a, b in zip(p, before))
    prev = [v.copy() for v in opt.v_hat_max]
    for _ in range(100):
        opt.step(p, [rng.normal(size=(3, 2)) * rng.uniform(0, 3), rng.normal(size=2)], 1e-3)
        assert all(np.all(v >= q) for v, q in zip(opt.v_hat_max, prev))
        prev = [v.copy() for v in opt.v_hat_max]
    with pytest.raises(FloatingPointError):
        opt.step(p, [np.full((3, 2), np.nan), np.zeros(2)], 1e-3)


def _scheduler_oracle(losses, lr, factor=0.5, patience=5, thr=1e-4, min_lr=1e-8):
    best, bad, out = math.inf, 0, []
    for x in losses:
        if x < best * (1 - thr):
            best, bad = x, 0
        else:
            bad += 1
        if bad > patience:
            lr, bad = max(lr * factor, min_lr), 0
        out.append(lr)
    return out


def test_scheduler_traces():
    s = PlateauScheduler(1e-5)
    assert [s.step(x) for x in np.linspace(1, 0.1, 30)] == [1e-5] * 30
    s = PlateauScheduler(1e-5)
    trace = [s.step(1.0) for _ in range(7)]
    assert trace == [1e-5] * 6 + [5e-6]
    s = PlateauScheduler(1e-7, min_lr=1e-8)
    assert min(s.step(1.0) for _ in range(200)) == 1e-8


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=1, max_size=60))
def test_scheduler_matches_state_machine(losses):
    s = PlateauScheduler(1e-3, min_lr=1e-6)
    assert [s.step(x) for x in losses] == _scheduler_oracle(losses, 1e-3, min_lr=1e-6)


# --- batching and training --------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(1, 500), st.integers(1, 128), st.integers(0, 1000), st.integers(0, 100), st.integers(1, 8))
def test_batches_partition_rows(n_rows, batch, seed, epoch, min_rows):
    batch = max(batch, min_rows)  # train() rejects batches smaller than the feature count
    a = make_batches(n_rows, batch, seed, epoch, min_rows)
    b = make_batches(n_rows, batch, seed, epoch, min_rows)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    flat = np.concatenate(a)
    assert sorted(flat.tolist()) == list(range(n_rows))
    if len(a) > 1:
        assert all(x.size >= min_rows for x in a)


def test_batches_differ_between_epochs():
    assert not np.array_equal(make_batches(100, 100, 0, 0)[0], make_batches(100, 100, 0, 1)[0])


def test_train_is_deterministic():
    X, y = _toy_data()
    h1 = train(X, y, _toy_config()).history
    h2 = train(X, y, _toy_config()).history
    assert h1 == h2
    assert len(h1) == 3 and h1[-1].total < h1[0].total


def test_lambda_zero_equals_plain_mse_loop():
    X, y = _toy_data()
    cfg = _toy_config(lam=0.0)
    hist = train(X, y, cfg).history

    state = init_state(3, cfg)
    model, params = state.model, state.model.params
    X_enc = model.encoding(X)
    for epoch in range(cfg.epochs):
        tot = 0.0
        for idx in make_batches(len(y), cfg.batch_size, cfg.seed, epoch, min_rows=3):
            y_hat, acts = forward(model, X_enc[idx], cache=True)
            e = y_hat - y[idx]
            state.optimizer.step(params, backward(model, acts, (2.0 / idx.size) * e), cfg.lr)
            tot += idx.size * (float(e @ e) / idx.size)
        assert hist[epoch].total == hist[epoch].mse_e
        assert hist[epoch].total == pytest.approx(tot / len(y), rel=1e-15)
    for a, b in zip(model.params, train(X, y, cfg).model.params):
        np.testing.assert_array_equal(a, b)


def test_resume_reproduces_uninterrupted_run(tmp_path):
    X, y = _toy_data()
    cfg = _toy_config(epochs=4)
    full = train(X, y, cfg)
    part = train(X, y, cfg, epochs=2)
    save_checkpoint(part, cfg, tmp_path / "ck", feature_names=["a", "b", "c"])
    state, cfg2, manifest = load_checkpoint(tmp_path / "ck.json")
    assert cfg2 == cfg and manifest["feature_names"] == ["a", "b", "c"]
    resumed = train(X, y, cfg2, state=state)
    assert resumed.history == full.history
    for a, b in zip(resumed.model.params, full.model.params):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_blob_layout(tmp_path):
    X, y = _toy_data()
    cfg = _toy_config(epochs=1)
    st_ = train(X, y, cfg)
    path = save_checkpoint(st_, cfg, tmp_path / "m")
    raw = np.frombuffer((tmp_path / "m.bin").read_bytes(), dtype="<f8")
    np.testing.assert_array_equal(raw[: st_.model.encoding.B.size], st_.model.encoding.B.ravel())
    w0 = st_.model.weights[0]
    start = st_.model.encoding.B.size
    np.testing.assert_array_equal(raw[start:start + w0.size], w0.ravel())
    assert path.name == "m.json"
    write_history_csv(st_.history, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,mse_e,mse_par,total,lr" and len(lines) == 2


def test_checkpoint_rejects_truncated_blob(tmp_path):
    X, y = _toy_data()
    cfg = _toy_config(epochs=1)
    save_checkpoint(train(X, y, cfg), cfg, tmp_path / "m")
    blob = tmp_path / "m.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "m")


def test_predict_and_decompose_edge_cases():
    X, y = _toy_data(rows=60)
    model = build_model(3, **TOY, seed=0)
    for w in model.weights:
        w[:] = 0
    d = predict_and_decompose(model, X, y, ProjectorSpec.pinv())
    np.testing.assert_array_equal(d.e, -y)
    np.testing.assert_allclose(d.r_par + d.r_perp, d.e, rtol=1e-12, atol=1e-15)
    perfect = predict_and_decompose(model, X, np.zeros(60))
    assert not perfect.e.any() and not perfect.r_par.any() and not perfect.r_perp.any()
    with pytest.raises(ValueError):
        predict_and_decompose(model, X[:, :2], y)


def test_estimator_api():
    X, y = _toy_data()
    est = OrthogonalSirenRegressor(epochs=2, batch_size=64, lr=1e-3, n_fourier=8, hidden=16, n_hidden=1,
                                   random_state=1)
    assert clone(est).get_params() == est.get_params()
    est.fit(X, y)
    assert est.n_features_in_ == 3 and len(est.history_) == 2
    pred = est.predict(X)
    assert pred.shape == (200,)
    d = est.decompose(X, y, ProjectorSpec.pinv())
    np.testing.assert_allclose(d.e, pred - y, rtol=1e-15)
    assert isinstance(est.score(X, y), float)
    with pytest.raises(ValueError):
        est.predict(X[:, :2])
