import numpy as np
import pytest
from scipy.stats import spearmanr

from predsearch import tensor as T
from predsearch.errors import CheckpointError, MembershipError
from predsearch.predictor import (
    GCNNet,
    NormStats,
    Predictor,
    PredictorSpec,
    TrainingSample,
    gcn_layer,
    gcn_layer_backward,
    gcn_layer_forward,
    load_checkpoint,
    loss_and_grads,
    save_checkpoint,
    train,
)
from predsearch.space import DiscreteArch, build_anynet_space, encode, sample_random


def make_predictor(space, seed=0, **kw):
    spec = PredictorSpec.for_space(space, **kw)
    p = Predictor(spec, space, {}, NormStats(0.0, 1.0))
    p.params = p.net.init(np.random.default_rng(seed))
    return p


# -- graph layer --------------------------------------------------------------


def test_gcn_layer_zero_adjacency(rng):
    V, W = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    assert not gcn_layer(np.zeros((3, 3)), V, W, W).any()


def test_gcn_layer_identity(rng):
    V = np.abs(rng.normal(size=(4, 4)))
    assert np.allclose(gcn_layer(np.eye(4), V, np.eye(4), np.eye(4)), V)


def test_gcn_layer_two_node_example():
    J = np.array([[1.0, 1.0], [0.0, 1.0]])
    out = gcn_layer(J, np.eye(2), np.eye(2), np.eye(2))
    assert np.array_equal(out, [[1.0, 0.5], [0.5, 1.0]])


def test_gcn_layer_backward(rng):
    J = (rng.random((5, 5)) < 0.4).astype(float) + np.eye(5)
    V, W1, W2 = rng.normal(size=(2, 5, 3)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    w = rng.normal(size=(2, 5, 4))
    _, cache = gcn_layer_forward(J, V, W1, W2)
    dV, dW1, dW2 = gcn_layer_backward(w, cache)
    f = lambda _: float((gcn_layer(J, V, W1, W2) * w).sum())
    for x, g in ((V, dV), (W1, dW1), (W2, dW2)):
        assert T.grad_check(f, x, g) < 1e-6


# -- architecture ------------------------------------------------------------------


def test_mlp_parameter_count(anynet):
    p = make_predictor(anynet)
    d = 16
    assert p.n_params() == d * 1000 + 2 * 1000**2 + 1000 + 3 * 1000 + 1


def test_gcn_parameter_count(nb201):
    p = make_predictor(nb201)
    assert p.n_params() == 2 * (7 * 144 + 2 * 144 * 144) + 144 * 128 + 128 + 128 + 1
    assert np.array_equal(p.net.J, np.array(nb201.adjacency) + np.eye(8))


def test_eval_forward_is_pure(anynet, nb201):
    for space in (anynet, nb201):
        p = make_predictor(space)
        enc = encode(space, sample_random(space, 1))
        a, b = p.forward(enc), p.forward(enc.copy())
        assert np.array_equal(a, b)


@pytest.mark.parametrize("which", ["anynet", "nb201"])
def test_score_gradient_wrt_encoding(which, request):
    space = request.getfixturevalue(which)
    p = make_predictor(space, seed=3)
    enc = encode(space, sample_random(space, 5)).astype(np.float64)
    if space.kind == "TSS":
        # move interior logits off the one-hot point; frozen rows stay fixed
        enc[1:7] += np.random.default_rng(0).normal(size=(6, 7))
    _, g = p.value_and_grad(enc)
    rows = slice(None) if space.kind == "SSS" else slice(1, 7)
    x = enc[rows].copy()

    def f(z):
        e = enc.copy()
        e[rows] = z
        return float(p.forward(e))

    assert T.grad_check(f, x, g[rows]) < 1e-4


@pytest.mark.parametrize("which", ["anynet", "nb201"])
def test_loss_gradient_wrt_weights(which, request):
    space = request.getfixturevalue(which)
    p = make_predictor(space, seed=4)
    rng = np.random.default_rng(0)
    X = np.stack([encode(space, sample_random(space, rng)) for _ in range(6)])
    y = rng.normal(size=6)
    _, grads = loss_and_grads(p.net, p.params, X, y)
    for name, W in p.params.items():
        f = lambda _: loss_and_grads(p.net, p.params, X, y)[0]
        assert T.grad_check(f, W, grads[name], n_coords=20, rng=1) < 1e-4, name


def test_frozen_rows_get_no_gradient(nb201):
    p = make_predictor(nb201)
    _, g = p.value_and_grad(encode(nb201, sample_random(nb201, 0)))
    assert not g[0].any() and not g[7].any()


def test_gcn_option_permutation_symmetry(nb201):
    p = make_predictor(nb201, seed=2)
    enc = encode(nb201, DiscreteArch((0, 1, 2, 3, 4, 1))) + np.random.default_rng(1).normal(size=(8, 7))
    i, j = 1, 3
    perm = np.arange(7)
    perm[[i, j]] = perm[[j, i]]
    q = make_predictor(nb201, seed=2)
    for name in ("gcn0.W1", "gcn0.W2"):
        q.params[name] = p.params[name][perm]
    assert p.forward(enc) == pytest.approx(q.forward(enc[:, perm]), rel=1e-12)


# -- training ------------------------------------------------------------------------


def small_spec(space):
    return PredictorSpec.for_space(space, mlp_width=64, gcn_width=32, fc_width=32)


def test_train_deterministic(anynet):
    rng = np.random.default_rng(0)
    samples = [TrainingSample(sample_random(anynet, rng), float(i), 1.0 + i) for i in range(8)]
    spec = small_spec(anynet)
    a, _, ha = train(spec, anynet, samples, seed=5, epochs=20)
    b, _, hb = train(spec, anynet, samples, seed=5, epochs=20)
    assert ha == hb
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_train_constant_targets(anynet):
    rng = np.random.default_rng(0)
    samples = [TrainingSample(sample_random(anynet, rng), 42.0, 1.0) for _ in range(10)]
    pred, stats, hist = train(small_spec(anynet), anynet, samples, seed=0, epochs=50)
    assert stats.constant
    out = pred.predict_archs([sample_random(anynet, s) for s in range(5)])
    assert np.allclose(out, 42.0, atol=0.5)
    assert hist[-1] < 1e-2


def test_train_rejects_bad_inputs(anynet):
    a = sample_random(anynet, 0)
    with pytest.raises(ValueError):
        train(small_spec(anynet), anynet, [TrainingSample(a, 1.0, 1.0)], seed=0)
    with pytest.raises(ValueError):
        train(small_spec(anynet), anynet, [TrainingSample(a, 1.0, 1.0)] * 2, seed=0, role="other")
    bad = DiscreteArch((1,) * 16)
    with pytest.raises(MembershipError):
        train(small_spec(anynet), anynet, [TrainingSample(bad, 1.0, 1.0)] * 2, seed=0)


def test_training_sample_validation():
    with pytest.raises(ValueError):
        TrainingSample(None, float("nan"), 1.0)
    with pytest.raises(ValueError):
        TrainingSample(None, 1.0, 0.0)


def test_linear_target_ranking(anynet):
    w = np.random.default_rng(11).normal(size=16)
    rng = np.random.default_rng(12)
    train_archs = [sample_random(anynet, rng) for _ in range(40)]
    test_archs = [sample_random(anynet, rng) for _ in range(200)]
    f = lambda a: float(encode(anynet, a) @ w)
    samples = [TrainingSample(a, f(a), 1.0) for a in train_archs]
    pred, _, hist = train(PredictorSpec.for_space(anynet), anynet, samples, seed=0)
    assert hist[-1] < hist[0]
    rho = spearmanr(pred.predict_archs(test_archs), [f(a) for a in test_archs]).statistic
    assert rho > 0.9


def test_nb201_training_converges(nb201, nb201_oracle):
    rng = np.random.default_rng(0)
    archs = [sample_random(nb201, rng) for _ in range(30)]
    samples = [TrainingSample(a, nb201_oracle.performance(a), nb201_oracle.cost(a)) for a in archs]
    _, _, hist = train(PredictorSpec.for_space(nb201), nb201, samples, seed=0)
    assert np.all(np.isfinite(hist))
    assert hist[-1] < 0.5 * hist[0]
    # monotone trend: every tenth of the run ends lower than it starts
    chunks = np.array_split(np.array(hist), 10)
    assert np.mean([c[-1] <= c[0] for c in chunks]) >= 0.8


# -- normalisation and checkpoints ---------------------------------------------------


def test_norm_stats():
    s = NormStats(70.0, 5.0)
    assert s.denormalize(0.0) == 70.0
    assert s.denormalize(1.0) == 75.0
    x = np.random.default_rng(0).normal(size=50)
    assert np.allclose(s.normalize(s.denormalize(x)), x, atol=1e-12)


def test_checkpoint_roundtrip(anynet, tmp_path):
    p = make_predictor(anynet, seed=9)
    p.stats = NormStats(3.0, 2.0)
    path = tmp_path / "p.npz"
    save_checkpoint(p, path)
    q = load_checkpoint(path, anynet)
    enc = encode(anynet, sample_random(anynet, 0))
    assert q.predict_denorm(enc) == p.predict_denorm(enc)
    assert q.stats == p.stats and q.spec == p.spec


def test_checkpoint_space_mismatch(anynet, nb201, tmp_path):
    path = tmp_path / "p.npz"
    save_checkpoint(make_predictor(anynet), path)
    with pytest.raises(CheckpointError, match="trained for space"):
        load_checkpoint(path, nb201)


def test_checkpoint_missing_or_corrupt(tmp_path):
    with pytest.raises(CheckpointError, match="nope.npz"):
        load_checkpoint(tmp_path / "nope.npz")
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not an archive")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
