import numpy as np
import pytest

from tdsm_lab import nn_core as nn


def _store(rng, **shapes):
    store = nn.ParamStore()
    for name, shape in shapes.items():
        store.add(name, rng.standard_normal(shape))
    return store


PRIMITIVES = {
    "add_broadcast": (dict(a=(4, 3), b=(3,)), lambda p: nn.sum_(nn.square(p["a"] + p["b"]))),
    "sub_broadcast": (dict(a=(4, 3), b=(1, 3)), lambda p: nn.sum_(nn.square(p["a"] - p["b"]))),
    "mul": (dict(a=(4, 3), b=(4, 3)), lambda p: nn.sum_(p["a"] * p["b"] * p["a"])),
    "matmul": (dict(a=(4, 3), b=(3, 2)), lambda p: nn.sum_(nn.tanh(p["a"] @ p["b"]))),
    "dense": (dict(x=(5, 3), w=(3, 4), b=(4,)), lambda p: nn.sum_(nn.square(nn.dense(p["x"], p["w"], p["b"])))),
    "silu": (dict(a=(6, 2)), lambda p: nn.sum_(nn.silu(p["a"]) * nn.silu(p["a"]))),
    "tanh": (dict(a=(6, 2)), lambda p: nn.mean(nn.tanh(p["a"]))),
    "log": (dict(a=(6, 2)), lambda p: nn.sum_(nn.log(p["a"] * p["a"] + 1.0))),
    "concat": (dict(a=(3, 2), b=(3, 4)), lambda p: nn.sum_(nn.tanh(nn.concat([p["a"], p["b"]])))),
    "take_rows": (dict(a=(4, 3)), lambda p: nn.sum_(nn.square(nn.take_rows(p["a"], [0, 2, 2, 3])))),
    "sum_axis": (dict(a=(4, 3)), lambda p: nn.sum_(nn.square(nn.sum_(p["a"], axis=0)))),
    "mean_axis": (dict(a=(4, 3)), lambda p: nn.sum_(nn.square(nn.mean(p["a"], axis=1)))),
    "softmax": (dict(a=(4, 3)), lambda p: nn.sum_(nn.square(nn.softmax(p["a"])) * np.arange(3.0))),
    "log_softmax": (dict(a=(4, 3)), lambda p: nn.sum_(nn.log_softmax(p["a"]) * np.arange(1.0, 4.0))),
    "softmax_ce": (dict(a=(5, 3)), lambda p: nn.softmax_cross_entropy(p["a"], np.eye(3)[[0, 1, 2, 2, 0]])),
    "soft_target_ce": (dict(a=(5, 3)), lambda p: nn.softmax_cross_entropy(p["a"], np.full((5, 3), 1 / 3))),
    "nll_of_probs": (dict(a=(5, 3)), lambda p: nn.nll_of_probs(nn.softmax(p["a"]), np.eye(3)[[0, 1, 2, 2, 1]])),
    "logabsdet": (dict(a=(3, 3)), lambda p: nn.logabsdet(p["a"] + 3.0 * np.eye(3))),
}


@pytest.mark.parametrize("name", list(PRIMITIVES))
def test_primitive_gradients(name):
    shapes, fn = PRIMITIVES[name]
    store = _store(np.random.default_rng(0), **shapes)
    assert nn.grad_check(fn, store) < 1e-6


def test_grad_check_catches_a_wrong_backward(monkeypatch):
    def bad_tanh(x):
        x = nn._as_tensor(x)
        y = np.tanh(x.value)
        return nn._record(y, (x,), lambda g: x._accumulate(g * (1.0 - y)))   # wrong

    store = _store(np.random.default_rng(1), a=(4, 3))
    assert nn.grad_check(lambda p: nn.sum_(bad_tanh(p["a"])), store) > 1e-2


def test_gradients_accumulate_over_reuse():
    store = nn.ParamStore()
    store.add("a", [2.0])
    with nn.Tape() as tape:
        x = store["a"]
        out = nn.sum_(x * x + x * 3.0)
    tape.backward(out)
    np.testing.assert_allclose(store.grads["a"], [7.0])


def test_no_grad_and_detach_stop_recording():
    store = nn.ParamStore()
    store.add("a", [1.0, 2.0])
    with nn.Tape() as tape:
        with nn.no_grad():
            y = store["a"] * 2.0
        z = nn.detach(store["a"]) * store["a"]
        assert len(tape.nodes) == 1
        out = nn.sum_(z)
    assert not y.requires_grad
    tape.backward(out)
    np.testing.assert_allclose(store.grads["a"], [1.0, 2.0])


def test_outside_tape_nothing_is_recorded():
    store = nn.ParamStore()
    store.add("a", [1.0])
    assert not (store["a"] * 2.0).requires_grad


def test_unbroadcast_into_scalar_like_shapes():
    store = nn.ParamStore()
    store.add("s", np.ones((1, 1)))
    with nn.Tape() as tape:
        out = nn.sum_(store["s"] * np.ones((3, 4)))
    tape.backward(out)
    assert store.grads["s"].shape == (1, 1)
    assert store.grads["s"][0, 0] == 12.0


def test_dense_shape_mismatch():
    with pytest.raises(ValueError):
        nn.dense(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))


def test_softmax_ce_shape_mismatch():
    with pytest.raises(ValueError):
        nn.softmax_cross_entropy(np.zeros((2, 3)), np.zeros((2, 2)))


def test_log_softmax_is_stable_for_large_logits():
    out = nn.log_softmax(np.array([[1000.0, 0.0], [-1000.0, 1000.0]])).value
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[0.0, -1000.0], [-2000.0, 0.0]])


def test_param_store_round_trip(tmp_path):
    store = _store(np.random.default_rng(3), w=(3, 2), b=(2,))
    path = tmp_path / "p.json"
    store.save(path, header={"kind": "test", "note": 7})
    back, header = nn.ParamStore.load(path)
    assert header == {"kind": "test", "note": 7}
    for k in store.names():
        np.testing.assert_array_equal(back.params[k], store.params[k])   # bit exact via %.17g


def test_param_store_errors(tmp_path):
    store = nn.ParamStore()
    store.add("a", [1.0])
    with pytest.raises(KeyError):
        store.add("a", [2.0])
    store.params["a"][0] = np.nan
    with pytest.raises(FloatingPointError):
        store.assert_finite()
    with pytest.raises(ValueError):
        nn.ParamStore.from_dict({"format_version": 99, "shapes": {}, "arrays": {}})


def _quadratic_fit(opt_cls, frozen=None, steps=300, **kw):
    store = nn.ParamStore()
    store.add("a", [5.0, -3.0])
    store.add("b", [1.0])
    opt = opt_cls(store, frozen=frozen, **kw)
    for _ in range(steps):
        store.zero_grad()
        with nn.Tape() as tape:
            loss = nn.sum_(nn.square(store["a"])) + nn.sum_(nn.square(store["b"]))
        tape.backward(loss)
        opt.step()
    return store


def test_adam_minimises_and_respects_frozen():
    store = _quadratic_fit(nn.Adam, frozen={"b"}, lr=0.1)
    assert np.abs(store.params["a"]).max() < 1e-2
    assert store.params["b"][0] == 1.0


def test_adam_is_deterministic():
    a = _quadratic_fit(nn.Adam, lr=0.05, steps=50)
    b = _quadratic_fit(nn.Adam, lr=0.05, steps=50)
    np.testing.assert_array_equal(a.params["a"], b.params["a"])


def test_sgd_step_size():
    store = _quadratic_fit(nn.SGD, lr=0.1, steps=1)
    np.testing.assert_allclose(store.params["a"], [4.0, -2.4])


def test_init_dense_bounds():
    store = nn.ParamStore()
    nn.init_dense(store, "l", 16, 8, np.random.default_rng(0))
    assert np.abs(store.params["l.w"]).max() <= 0.25
    assert not store.params["l.b"].any()
