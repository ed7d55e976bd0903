import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import MODEL_BUILDERS, central_diff_grad, random_params, rel_err
from nghf.loss import ce_loss_and_grad
from nghf.model import (DivergenceError, LayerSpec, ModelError, ModelSpec, backprop, forward,
                        load_checkpoint, r_forward, r_hadamard, save_checkpoint,
                        share_counts)

SETTINGS = settings(max_examples=25, deadline=None)


def _sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


# --------------------------------------------------------------------------
# forward


def test_fc_identity_direct_substitution():
    model = ModelSpec((LayerSpec("fc", 1, "identity"),), 2, 1)
    params = np.array([1.0, 2.0, 0.0])  # W = [[1, 2]], b = [0]
    tape = forward(model, params, np.array([[1.0, 1.0]]))
    assert tape.logits.tolist() == [[3.0]]


def test_recurrent_with_zero_recurrence_equals_fc():
    rng = np.random.default_rng(3)
    rnn = ModelSpec((LayerSpec("rnn", 4, "tanh", unfold_steps=3),
                     LayerSpec("fc", 2, "identity")), 3, 2)
    fc = ModelSpec((LayerSpec("fc", 4, "tanh"), LayerSpec("fc", 2, "identity")), 3, 2)
    p_rnn = random_params(rnn, 1)
    W = rnn.unpack(p_rnn)[0]["W"]
    W[:, 3:] = 0.0
    p_fc = np.concatenate([W[:, :3].ravel(), rnn.unpack(p_rnn)[0]["b"],
                           p_rnn[rnn.layer_slices()[1]]])
    X = rng.normal(size=(7, 3))
    np.testing.assert_allclose(forward(rnn, p_rnn, X).logits, forward(fc, p_fc, X).logits,
                               rtol=0, atol=1e-14)


def test_two_layer_sigmoid_matches_reference_loops():
    rng = np.random.default_rng(0)
    model = ModelSpec((LayerSpec("fc", 6, "sigmoid"), LayerSpec("fc", 4, "identity")), 3, 4)
    params = random_params(model, 5)
    X = rng.normal(size=(5, 3))
    (W1, b1), (W2, b2) = [(d["W"], d["b"]) for d in model.unpack(params)]
    ref = np.zeros((5, 4))
    for t in range(5):
        h = [_sigmoid(sum(W1[j, i] * X[t, i] for i in range(3)) + b1[j]) for j in range(6)]
        for k in range(4):
            ref[t, k] = sum(W2[k, j] * h[j] for j in range(6)) + b2[k]
    assert rel_err(forward(model, params, X).logits, ref) < 1e-12


def test_tdnn_replicates_edge_frames():
    rng = np.random.default_rng(1)
    model = ModelSpec((LayerSpec("tdnn", 2, "identity", (-2, 0, 1)),), 3, 2)
    params = random_params(model, 2)
    X = rng.normal(size=(4, 3))
    W, b = model.unpack(params)[0]["W"], model.unpack(params)[0]["b"]
    ref = []
    for t in range(4):
        ctx = np.concatenate([X[min(max(t + o, 0), 3)] for o in (-2, 0, 1)])
        ref.append(W @ ctx + b)
    np.testing.assert_allclose(forward(model, params, X).logits, ref, rtol=1e-13)


@pytest.mark.parametrize("kind", ["rnn", "lstm"])
def test_unfolding_window_ignores_older_frames(kind):
    u = 3
    model = MODEL_BUILDERS[kind](u=u)
    params = random_params(model, 4)
    X = np.random.default_rng(0).normal(size=(8, 3))
    Y = X.copy()
    Y[0] += 5.0
    a, b = forward(model, params, X).logits, forward(model, params, Y).logits
    assert np.array_equal(a[u:], b[u:])
    assert not np.allclose(a[:u], b[:u])


def test_forward_rejects_bad_inputs():
    model = MODEL_BUILDERS["fc"]()
    params = random_params(model)
    with pytest.raises(ModelError):
        forward(model, params, np.zeros((4, 7)))
    with pytest.raises(ModelError):
        forward(model, params[:-1], np.zeros((4, 3)))
    with pytest.raises(DivergenceError):
        with np.errstate(invalid="ignore"):
            forward(model, params * np.inf, np.ones((2, 3)))


def test_layer_spec_invariants():
    with pytest.raises(ModelError):
        LayerSpec("tdnn", 3, "sigmoid", (0, -1))
    with pytest.raises(ModelError):
        LayerSpec("rnn", 3, "tanh", unfold_steps=0)
    with pytest.raises(ModelError):
        ModelSpec((LayerSpec("fc", 3, "sigmoid"),), 2, 3)  # output must be identity
    with pytest.raises(ModelError):
        ModelSpec((LayerSpec("fc", 4, "identity"),), 2, 3)  # output dim mismatch


def test_relu_derivative_at_zero_is_zero():
    model = ModelSpec((LayerSpec("fc", 1, "relu"), LayerSpec("fc", 1, "identity")), 1, 1)
    params = np.array([1.0, 0.0, 1.0, 0.0])
    tape = forward(model, params, np.zeros((1, 1)))
    g = backprop(model, params, tape, np.ones((1, 1)))
    assert g[0] == 0.0 and g[1] == 0.0


# --------------------------------------------------------------------------
# backprop


def test_backprop_zero_output_grads():
    model = MODEL_BUILDERS["lstm"]()
    params = random_params(model)
    tape = forward(model, params, np.ones((4, 3)))
    assert not np.any(backprop(model, params, tape, np.zeros((4, 5))))


@pytest.mark.parametrize("kind", sorted(MODEL_BUILDERS))
def test_backprop_matches_finite_differences_ce(kind):
    model = MODEL_BUILDERS[kind]()
    assert model.num_params <= 120
    params = random_params(model, 7)
    rng = np.random.default_rng(8)
    X = rng.normal(size=(6, 3))
    labels = rng.integers(0, 5, size=6)

    def loss(p):
        return ce_loss_and_grad(forward(model, p, X).logits, labels)[0]

    tape = forward(model, params, X)
    g = backprop(model, params, tape, ce_loss_and_grad(tape.logits, labels)[1])
    assert rel_err(g, central_diff_grad(loss, params, 1e-5)) < 1e-6


def test_share_normalisation_over_twenty_unfold_steps():
    model = ModelSpec((LayerSpec("rnn", 2, "tanh", unfold_steps=20),
                       LayerSpec("fc", 2, "identity")), 2, 2)
    params = random_params(model)
    X = np.random.default_rng(0).normal(size=(25, 2))
    tape = forward(model, params, X)
    G = np.random.default_rng(1).normal(size=(25, 2))
    raw = backprop(model, params, tape, G)
    norm = backprop(model, params, tape, G, normalize_by_share=True)
    rnn = model.layer_slices()[0]
    np.testing.assert_array_equal(norm[rnn], raw[rnn] / 20)
    np.testing.assert_array_equal(norm[model.layer_slices()[1]], raw[model.layer_slices()[1]])


def test_backprop_shape_errors():
    model = MODEL_BUILDERS["fc"]()
    params = random_params(model)
    tape = forward(model, params, np.ones((3, 3)))
    with pytest.raises(ModelError):
        backprop(model, params, tape, np.zeros((2, 5)))
    other = MODEL_BUILDERS["tdnn"]()
    with pytest.raises(ModelError):
        backprop(other, random_params(other), tape, np.zeros((3, 5)))


# --------------------------------------------------------------------------
# r_forward


def test_r_forward_fc_substitution():
    model = ModelSpec((LayerSpec("fc", 1, "identity"),), 2, 1)
    params = np.array([1.0, 2.0, 0.0])
    tape = forward(model, params, np.array([[1.0, 1.0]]))
    R = r_forward(model, params, tape, np.array([0.1, 0.2, 0.0]))
    assert R[0, 0] == pytest.approx(0.3, abs=1e-15)


def test_gating_rule_substitution():
    out = r_hadamard(np.array([0.5]), np.array([0.1]), np.array([2.0]), np.array([1.0]))
    assert out[0] == pytest.approx(0.7, abs=1e-15)


@pytest.mark.parametrize("kind", sorted(MODEL_BUILDERS))
def test_r_forward_matches_central_differences(kind):
    model = MODEL_BUILDERS[kind]()
    params = random_params(model, 11)
    rng = np.random.default_rng(12)
    X = rng.normal(size=(6, 3))
    v = rng.normal(size=model.num_params)
    eps = 1e-4
    fd = (forward(model, params + eps * v, X).logits
          - forward(model, params - eps * v, X).logits) / (2 * eps)
    assert rel_err(r_forward(model, params, forward(model, params, X), v), fd) < 1e-5


def test_r_forward_rejects_wrong_length():
    model = MODEL_BUILDERS["fc"]()
    params = random_params(model)
    tape = forward(model, params, np.ones((2, 3)))
    with pytest.raises(ModelError):
        r_forward(model, params, tape, np.ones(3))


# --------------------------------------------------------------------------
# share counts


def test_share_counts_plain_fc():
    assert np.all(share_counts(MODEL_BUILDERS["fc"]()) == 1)


def test_share_counts_recurrent_unfolded_twenty():
    model = ModelSpec((LayerSpec("rnn", 3, "tanh", unfold_steps=20),
                       LayerSpec("fc", 2, "identity")), 2, 2)
    c = share_counts(model)
    assert np.all(c[model.layer_slices()[0]] == 20)
    assert np.all(c[model.layer_slices()[1]] == 1)


def test_share_counts_tdnn_consumed_at_two_offsets():
    model = ModelSpec((LayerSpec("tdnn", 3, "sigmoid", (0,)),
                       LayerSpec("tdnn", 2, "identity", (-1, 1))), 2, 2)
    c = share_counts(model)
    assert np.all(c[model.layer_slices()[0]] == 2)
    assert np.all(c[model.layer_slices()[1]] == 1)
    assert np.array_equal(c, share_counts(model))


# --------------------------------------------------------------------------
# properties


@SETTINGS
@given(kind=st.sampled_from(sorted(MODEL_BUILDERS)), seed=st.integers(0, 10_000),
       c=st.floats(-1e3, 1e3).filter(lambda x: abs(x) > 1e-3))
def test_r_forward_is_linear_in_direction(kind, seed, c):
    model = MODEL_BUILDERS[kind]()
    rng = np.random.default_rng(seed)
    params = random_params(model, seed)
    tape = forward(model, params, rng.normal(size=(5, 3)))
    v = rng.normal(size=model.num_params)
    assert rel_err(r_forward(model, params, tape, c * v),
                   c * r_forward(model, params, tape, v)) < 1e-12


@SETTINGS
@given(kind=st.sampled_from(sorted(MODEL_BUILDERS)), seed=st.integers(0, 10_000))
def test_r_forward_and_backprop_are_adjoint(kind, seed):
    model = MODEL_BUILDERS[kind]()
    rng = np.random.default_rng(seed)
    params = random_params(model, seed)
    tape = forward(model, params, rng.normal(size=(5, 3)))
    u = rng.normal(size=(5, model.output_dim))
    v = rng.normal(size=model.num_params)
    lhs = float(np.sum(u * r_forward(model, params, tape, v)))
    rhs = float(backprop(model, params, tape, u) @ v)
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs), 1e-12)


@SETTINGS
@given(kind=st.sampled_from(sorted(MODEL_BUILDERS)), seed=st.integers(0, 10_000))
def test_share_normalisation_is_elementwise_quotient(kind, seed):
    model = MODEL_BUILDERS[kind]()
    rng = np.random.default_rng(seed)
    params = random_params(model, seed)
    tape = forward(model, params, rng.normal(size=(5, 3)))
    G = rng.normal(size=(5, model.output_dim))
    raw = backprop(model, params, tape, G)
    assert rel_err(backprop(model, params, tape, G, normalize_by_share=True),
                   raw / share_counts(model)) < 1e-12


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("kind", sorted(MODEL_BUILDERS))
def test_passes_are_pure(kind, dtype):
    model = MODEL_BUILDERS[kind]()
    rng = np.random.default_rng(0)
    params = random_params(model, 3, dtype=dtype)
    X = rng.normal(size=(5, 3))
    v = rng.normal(size=model.num_params)
    G = rng.normal(size=(5, model.output_dim))
    outs = []
    for _ in range(2):
        tape = forward(model, params, X)
        outs.append((tape.logits, backprop(model, params, tape, G),
                     r_forward(model, params, tape, v)))
    for a, b in zip(*outs):
        assert a.dtype == b.dtype and np.array_equal(a, b)
    assert outs[0][0].dtype == dtype and outs[0][1].dtype == np.float64


# --------------------------------------------------------------------------
# checkpoints


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, dtype):
    model = MODEL_BUILDERS["lstm"]()
    params = random_params(model, 9, dtype=dtype)
    save_checkpoint(tmp_path / "m.npz", model, params, {"epoch": 3})
    model2, params2, extra = load_checkpoint(tmp_path / "m.npz")
    assert model2 == model and extra == {"epoch": 3}
    assert params2.dtype == dtype and params2.tobytes() == params.tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, header=np.frombuffer(b'{"format": "other"}', dtype=np.uint8),
             params=np.zeros(3))
    with pytest.raises(ModelError):
        load_checkpoint(path)
