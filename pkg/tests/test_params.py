import numpy as np
import pytest

from mgmicro.params import ParamStore, adam_step, load_mgf, load_store, make_rng, save_mgf, save_store


def test_rng_streams_are_keyed():
    a = make_rng(7, 3).random(5)
    np.testing.assert_array_equal(a, make_rng(7, 3).random(5))
    assert not np.array_equal(a, make_rng(7, 4).random(5))
    assert not np.array_equal(a, make_rng(8, 3).random(5))


def test_mgf_round_trip_is_exact(tmp_path, rng):
    arrays = {"a.w": rng.standard_normal((2, 3, 4)), "b": np.array(3.5), "ünï": rng.standard_normal(7)}
    path = tmp_path / "w.mgf"
    save_mgf(path, arrays)
    back = load_mgf(path)
    assert list(back) == list(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
        assert back[k].shape == np.shape(arrays[k])


def test_mgf_layout(tmp_path):
    path = tmp_path / "w.mgf"
    save_mgf(path, {"x": np.array([1.0, 2.0])})
    raw = path.read_bytes()
    assert raw[:4] == b"MGF1"
    assert int.from_bytes(raw[4:12], "little") == 1
    assert len(raw) == 4 + 8 + 8 + 1 + 8 + 8 + 16


def test_mgf_rejects_garbage(tmp_path):
    p = tmp_path / "bad.mgf"
    p.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError):
        load_mgf(p)
    save_mgf(p, {"x": np.ones(2)})
    p.write_bytes(p.read_bytes() + b"\0")
    with pytest.raises(ValueError):
        load_mgf(p)


def test_store_load_strict(tmp_path):
    s = ParamStore()
    s.add("w", np.ones((2, 2)))
    s.add_buffer("rm", np.zeros(2))
    save_store(tmp_path / "s.mgf", s)
    t = ParamStore()
    t.add("w", np.zeros((2, 2)))
    t.add_buffer("rm", np.ones(2))
    load_store(tmp_path / "s.mgf", t)
    np.testing.assert_array_equal(t["w"].data, 1.0)
    np.testing.assert_array_equal(t.buffers["rm"], 0.0)
    u = ParamStore()
    u.add("w", np.zeros((3, 2)))
    with pytest.raises(ValueError):
        load_store(tmp_path / "s.mgf", u)


def test_duplicate_names_rejected():
    s = ParamStore()
    s.add("w", 1.0)
    with pytest.raises(KeyError):
        s.add("w", 2.0)
    with pytest.raises(KeyError):
        s.add_buffer("w", 2.0)


def test_adam_needs_all_gradients():
    s = ParamStore()
    s.add("w", np.ones(2))
    with pytest.raises(RuntimeError):
        adam_step(s)


def test_pack_keeps_params_live():
    s = ParamStore()
    s.add("a", np.ones(3))
    s.add("b", np.full((2, 2), 2.0))
    for t in s.params.values():
        t.grad = np.ones_like(t.data)
    adam_step(s, lr=0.5)
    flat = s.pack()
    assert np.shares_memory(flat["p"], s["a"].data)
    np.testing.assert_allclose(s["a"].data, 0.5)
    np.testing.assert_allclose(s["b"].data, 1.5)


def test_flat_adam_matches_per_tensor_reference(rng):
    shapes = {"a": (3, 4), "b": (5,), "c": (2, 1, 3)}
    s = ParamStore()
    ref = {}
    for k, sh in shapes.items():
        init = rng.standard_normal(sh)
        s.add(k, init.copy())
        ref[k] = [init.copy(), np.zeros(sh), np.zeros(sh)]
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    for step in range(1, 6):
        for k, sh in shapes.items():
            g = rng.standard_normal(sh)
            s[k].grad = g
            p, m, v = ref[k]
            m[...] = b1 * m + (1 - b1) * g
            v[...] = b2 * v + (1 - b2) * g * g
            p -= lr * (m / (1 - b1 ** step)) / (np.sqrt(v / (1 - b2 ** step)) + eps)
        adam_step(s, lr=lr, beta1=b1, beta2=b2, eps=eps)
        for k in shapes:
            np.testing.assert_allclose(s[k].data, ref[k][0], rtol=1e-12, atol=1e-14)
