"""Parameter store, Adam, and the binary weight format."""

import struct

import numpy as np
import pytest

from dgupr.params import ParamStore, adam_step, load_weights, save_weights, store_from_weights


def small_store():
    store = ParamStore()
    store.add("w", np.array([[1.0, 2.0], [3.0, 4.0]]))
    store.add("b", np.array([[0.5, -0.5]]))
    return store


def test_duplicate_name_rejected():
    store = small_store()
    with pytest.raises(ValueError):
        store.add("w", np.zeros((1, 1)))


def test_adam_zero_grads_keep_values():
    store = small_store()
    before = {k: e.value.copy() for k, e in store.entries.items()}
    adam_step(store, lr=0.1)
    assert store.step_count == 1
    for k, e in store.entries.items():
        np.testing.assert_array_equal(e.value, before[k])


def test_adam_single_step_hand_oracle():
    lr, b1, b2, eps = 1e-3, 0.5, 0.98, 1e-8
    g = 0.3
    store = ParamStore()
    store.add("w", np.array([[2.0]]))
    store.accumulate("w", np.array([[g]]))
    adam_step(store, lr, b1, b2, eps)
    # fresh state: m_hat = g, v_hat = g^2 -> update = lr * g / (|g| + eps)
    expect = 2.0 - lr * g / (abs(g) + eps)
    assert store.value("w")[0, 0] == pytest.approx(expect, rel=1e-12)
    np.testing.assert_array_equal(store.entries["w"].grad, np.zeros((1, 1)))


def test_adam_constant_grad_approaches_sign_step():
    lr = 1e-3
    store = ParamStore()
    store.add("w", np.array([[0.0]]))
    prev = 0.0
    for _ in range(200):
        store.accumulate("w", np.array([[-2.5]]))
        adam_step(store, lr)
        delta = store.value("w")[0, 0] - prev
        prev = store.value("w")[0, 0]
    assert delta == pytest.approx(lr, rel=1e-3)  # moving against a negative grad


def test_weight_file_layout_and_roundtrip(tmp_path):
    store = small_store()
    path = tmp_path / "w.bin"
    save_weights(path, store)
    raw = path.read_bytes()
    assert raw[:4] == b"DGUW"
    version, count = struct.unpack("<II", raw[4:12])
    assert version == 1 and count == 2
    (nlen,) = struct.unpack("<I", raw[12:16])
    assert raw[16 : 16 + nlen].decode() == "w"

    loaded = load_weights(path)
    assert set(loaded) == {"w", "b"}
    np.testing.assert_allclose(loaded["w"], store.value("w"), atol=1e-6)

    store2 = store_from_weights(loaded)
    assert store2.entries["w"].value.shape == (2, 2)


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 8)
    with pytest.raises(ValueError):
        load_weights(path)


def test_state_hash_tracks_values():
    store = small_store()
    h0 = store.state_hash()
    adam_step(store, lr=0.1)  # zero grads: unchanged
    assert store.state_hash() == h0
    store.accumulate("w", np.ones((2, 2)))
    adam_step(store, lr=0.1)
    assert store.state_hash() != h0
