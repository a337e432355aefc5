"""Reverse-mode engine: finite-difference oracles, hand-worked gradients,
optimizer arithmetic, checkpoint format."""

import numpy as np
import pytest
from numpy.random import SeedSequence, default_rng

import meldlab.autodiff as ad
from meldlab.autodiff import (AdamW, CheckpointError, NumericError, ParamStore,
                              ShapeError, Tensor, backward, load_checkpoint,
                              save_checkpoint)
from meldlab.gradcheck import check_gradients, numeric_gradient

from fd_cases import OP_CASES, full_model_loss_case


@pytest.mark.parametrize("name,build", OP_CASES, ids=[n for n, _ in OP_CASES])
def test_op_gradients_match_finite_differences(name, build):
    f, tensors = build(default_rng(SeedSequence([41, hash(name) % 2**31])))
    check_gradients(f, tensors, rtol=1e-3, atol=1e-6)


def test_full_model_gradients_match_finite_differences():
    f, tensors = full_model_loss_case()
    check_gradients(f, tensors, rtol=1e-3, atol=1e-6)


# -- hand-worked gradients ---------------------------------------------------


def test_matmul_gradient_hand_case():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
    b = Tensor(np.array([[5.0], [6.0]]), requires_grad=True)
    backward(ad.reduce_sum(ad.matmul(a, b)))
    # d(sum(ab))/da = 1 b^T, /db = a^T 1
    np.testing.assert_array_equal(a.grad, [[5.0, 6.0], [5.0, 6.0]])
    np.testing.assert_array_equal(b.grad, [[4.0], [6.0]])


def test_sigmoid_gradient_at_zero_is_quarter():
    x = Tensor(np.zeros(3), requires_grad=True)
    backward(ad.reduce_sum(ad.sigmoid(x)))
    np.testing.assert_allclose(x.grad, 0.25)


def test_chain_rule_through_composition():
    # d/dx sum((2x)^2) = 8x
    x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    backward(ad.l2_sq(ad.scale(x, 2.0)))
    np.testing.assert_allclose(x.grad, 8.0 * x.data)


def test_gradient_accumulates_across_branches():
    x = Tensor(np.array([3.0]), requires_grad=True)
    backward(ad.reduce_sum(ad.add(ad.mul(x, x), ad.scale(x, 5.0))))
    np.testing.assert_allclose(x.grad, [2.0 * 3.0 + 5.0])


def test_layer_norm_output_is_standardized():
    rng = default_rng(3)
    x = Tensor(rng.normal(2.0, 3.0, size=(4, 8)))
    out = ad.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
    np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose((out.data ** 2).mean(axis=-1), 1.0, atol=1e-9)


def test_softmax_rows_sum_to_one():
    rng = default_rng(4)
    y = ad.softmax(Tensor(rng.normal(size=(5, 7))), axis=-1).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    assert (y > 0).all()


def test_stop_gradient_blocks_backward():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = Tensor(np.array([3.0, 4.0]), requires_grad=True)
    backward(ad.l2_sq(ad.mul(x, ad.stop_gradient(y))))
    np.testing.assert_allclose(x.grad, 2.0 * x.data * y.data ** 2)
    assert y.grad is None


def test_no_grad_builds_constant_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.scale(x, 2.0)
    assert not y.requires_grad
    assert y._grad_fn is None


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(ad.scale(x, 1.0))


def test_backward_zero_fills_unreached_params():
    store = ParamStore()
    a = store.add("a", np.ones(2))
    store.add("b", np.ones(3))
    backward(ad.l2_sq(a), params=store)
    np.testing.assert_array_equal(store["b"].grad, np.zeros(3))


def test_log_rejects_non_positive_input():
    with pytest.raises(NumericError):
        ad.log(Tensor(np.array([1.0, 0.0])))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_raises():
    x = Tensor(np.array([1e308, 1e308]), requires_grad=True)
    with pytest.raises(NumericError):
        backward(ad.reduce_sum(ad.mul(ad.exp(x), x)))


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_numeric_gradient_matches_closed_form():
    # oracle sanity: d/dx sum(x^3) = 3x^2 via central differences
    x = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
    g = numeric_gradient(lambda: ad.reduce_sum(ad.mul(ad.mul(x, x), x)), x)
    np.testing.assert_allclose(g, 3.0 * x.data ** 2, rtol=1e-6)


# -- parameter store ----------------------------------------------------------


def test_param_store_iterates_lexicographically():
    store = ParamStore()
    for name in ["w/2", "a", "w/10"]:
        store.add(name, np.zeros(1))
    assert store.names() == ["a", "w/10", "w/2"]
    assert [n for n, _ in store.items()] == ["a", "w/10", "w/2"]


def test_param_store_rejects_duplicates():
    store = ParamStore()
    store.add("w", np.zeros(1))
    with pytest.raises(ValueError):
        store.add("w", np.zeros(1))


def test_param_store_copy_is_deep():
    store = ParamStore()
    store.add("w", np.ones(2))
    store.step_count = 7
    dup = store.copy()
    dup["w"].data[0] = 99.0
    assert store["w"].data[0] == 1.0
    assert dup.step_count == 7


def test_glorot_uniform_bounds():
    rng = default_rng(0)
    w = ad.glorot_uniform(rng, (20, 30))
    a = np.sqrt(6.0 / 50.0)
    assert np.abs(w).max() <= a
    assert w.shape == (20, 30)


# -- optimizer -----------------------------------------------------------------


def test_adamw_first_step_matches_hand_computation():
    store = ParamStore()
    store.add("w", np.array([1.0, -2.0]))
    opt = AdamW(store, lr=0.1, weight_decay=0.01)
    g = np.array([0.3, -0.7])
    store["w"].grad = g.copy()
    opt.step()
    # after one step mhat = g and vhat = g^2, so the Adam update is
    # sign(g) / (1 + eps/|g|); decay applies to the pre-step weights
    expected = (np.array([1.0, -2.0])
                - 0.1 * g / (np.abs(g) + 1e-8)
                - 0.1 * 0.01 * np.array([1.0, -2.0]))
    np.testing.assert_allclose(store["w"].data, expected, rtol=0, atol=1e-12)
    assert store.step_count == 1
    assert store["w"].grad is None


def test_adamw_two_steps_match_reference_recurrence():
    store = ParamStore()
    w0 = np.array([0.5, 1.5, -1.0])
    store.add("w", w0.copy())
    opt = AdamW(store, lr=0.05, weight_decay=0.1)
    grads = [np.array([0.2, -0.1, 0.4]), np.array([-0.3, 0.2, 0.1])]

    ref = w0.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    for t, g in enumerate(grads, start=1):
        store["w"].grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1.0 - 0.9 ** t)
        vhat = v / (1.0 - 0.999 ** t)
        ref = ref - 0.05 * mhat / (np.sqrt(vhat) + 1e-8) - 0.05 * 0.1 * ref
    np.testing.assert_allclose(store["w"].data, ref, rtol=0, atol=1e-15)


def test_adamw_weight_decay_is_decoupled():
    # zero gradient: Adam term vanishes, only the decay shrinks the weight
    store = ParamStore()
    store.add("w", np.array([2.0]))
    opt = AdamW(store, lr=0.5, weight_decay=0.1)
    store["w"].grad = np.zeros(1)
    opt.step()
    np.testing.assert_allclose(store["w"].data, [2.0 - 0.5 * 0.1 * 2.0])


def test_adamw_restricted_names_leave_others_untouched():
    store = ParamStore()
    store.add("enc/w", np.ones(2))
    store.add("head/w", np.ones(2))
    opt = AdamW(store, lr=0.1, names=["head/w"])
    store["head/w"].grad = np.ones(2)
    opt.step()
    np.testing.assert_array_equal(store["enc/w"].data, np.ones(2))
    assert not np.array_equal(store["head/w"].data, np.ones(2))


def test_adamw_missing_gradient_raises():
    store = ParamStore()
    store.add("w", np.ones(1))
    opt = AdamW(store)
    with pytest.raises(ValueError):
        opt.step()


def test_adamw_unknown_name_raises():
    store = ParamStore()
    store.add("w", np.ones(1))
    with pytest.raises(ValueError):
        AdamW(store, names=["nope"])


# -- checkpoints ----------------------------------------------------------------


def _sample_store():
    rng = default_rng(12)
    store = ParamStore()
    store.add("enc/w", rng.normal(size=(3, 4)))
    store.add("enc/b", rng.normal(size=4))
    store.add("head/w", rng.normal(size=(4, 2)))
    store.step_count = 123
    return store


def test_checkpoint_round_trip_is_exact(tmp_path):
    store = _sample_store()
    path = tmp_path / "model.ckpt"
    save_checkpoint(store, path)
    loaded = load_checkpoint(path)
    assert loaded.names() == store.names()
    assert loaded.step_count == 123
    for name in store.names():
        np.testing.assert_array_equal(loaded[name].data, store[name].data)


def test_checkpoint_save_is_deterministic(tmp_path):
    store = _sample_store()
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(store, p1)
    save_checkpoint(store, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_detects_payload_corruption(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(_sample_store(), path)
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path)


def test_checkpoint_rejects_unknown_version(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(_sample_store(), path)
    raw = bytearray(path.read_bytes())
    raw[4] = 99  # little-endian version word
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_rejects_truncated_file(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(_sample_store(), path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 16])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
