import numpy as np
import pytest

from oceangnn._binio import FormatError
from oceangnn.diff_core import (
    AdamW,
    Index,
    MlpSpec,
    ParamStore,
    Tape,
    TapeError,
    global_norm,
    init_mlp,
    load_checkpoint,
    mlp_forward,
    save_checkpoint,
    segment_sum,
    truncated_normal,
)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_op(build, shapes, seed=0, tol=1e-6):
    """Compare tape gradients of sum(w * build(...)) with central differences."""
    rng = np.random.default_rng(seed)
    store = ParamStore(np.float64)
    for i, s in enumerate(shapes):
        store.add(f"p{i}", rng.standard_normal(s))
    probe = None

    def value(record):
        nonlocal probe
        tape = Tape(store, record=record)
        out = build(tape, *[tape.param(f"p{i}") for i in range(len(shapes))])
        if probe is None:
            probe = rng.standard_normal(out.value.shape)
        return tape, out

    tape, out = value(True)
    grads = tape.backward(out, seed=probe)
    for i in range(len(shapes)):
        name = f"p{i}"
        num = numeric_grad(lambda: float(np.sum(probe * value(False)[1].value)), store[name])
        np.testing.assert_allclose(grads[name], num, atol=tol, rtol=tol)


class TestPrimitiveGradients:
    def test_matmul(self):
        check_op(lambda t, x, w: t.matmul(x, w), [(4, 3), (3, 5)])

    def test_matmul_row_slice(self):
        check_op(lambda t, x, w: t.matmul(x, w, rows=slice(1, 3)), [(4, 2), (5, 3)])

    def test_add_bias(self):
        check_op(lambda t, x, b: t.add_bias(x, b), [(4, 3), (3,)])

    def test_add(self):
        check_op(lambda t, a, b, c: t.add(a, b, c), [(2, 3)] * 3)

    def test_silu(self):
        check_op(lambda t, x: t.silu(x), [(5, 4)])

    def test_layer_norm(self):
        check_op(lambda t, x, g, b: t.layer_norm(x, g, b), [(6, 5), (5,), (5,)])

    def test_gather(self):
        idx = Index([0, 2, 2, 1, 0], 3)
        check_op(lambda t, x: t.gather(x, idx), [(3, 4)])

    def test_segment_sum(self):
        idx = Index([0, 2, 2, 1, 0, 2], 4)
        check_op(lambda t, x: t.segment_sum(x, idx), [(6, 3)])

    def test_concat(self):
        check_op(lambda t, a, b: t.concat([a, b]), [(3, 2), (3, 4)])

    def test_affine(self):
        check_op(lambda t, x: t.affine(x, np.array([2.0, -0.5]), np.array([1.0, 0.0])), [(3, 2)])

    def test_mse(self):
        target = np.arange(6.0).reshape(3, 2)
        check_op(lambda t, x: t.mse(x, target, [1.0, 3.0]), [(3, 2)])

    def test_scale_sum(self):
        check_op(lambda t, a, b: t.scale_sum([t.mse(a, 0.0), t.mse(b, 1.0)], 0.5), [(2, 2), (2, 2)])

    def test_reused_param(self):
        check_op(lambda t, x: t.add(t.silu(x), t.matmul(x, x), t.affine(x, 2.0)), [(3, 3)])

    def test_mlp_with_gathered_inputs(self):
        rng = np.random.default_rng(3)
        spec = MlpSpec(in_width=5, hidden=6, out=4)
        store = ParamStore(np.float64)
        init_mlp(store, spec, "m", rng)
        nodes = rng.standard_normal((4, 3))
        edges = rng.standard_normal((7, 2))
        idx = Index([0, 1, 3, 3, 2, 0, 1], 4)

        def run(record):
            t = Tape(store, record)
            return t, mlp_forward(spec, "m", [(t.const(nodes), idx), t.const(edges)], t)

        tape, out = run(True)
        probe = rng.standard_normal(out.value.shape)
        grads = tape.backward(out, seed=probe)
        for name in store.names():
            num = numeric_grad(lambda: float(np.sum(probe * run(False)[1].value)), store[name])
            np.testing.assert_allclose(grads[name], num, atol=1e-6, rtol=1e-6)

    def test_gather_then_matmul_equals_matmul_then_gather(self):
        rng = np.random.default_rng(4)
        spec = MlpSpec(in_width=3, hidden=4, out=2, layer_norm=False)
        store = ParamStore(np.float64)
        init_mlp(store, spec, "m", rng)
        x = rng.standard_normal((5, 3))
        idx = Index([4, 0, 0, 2], 5)
        t = Tape(store, False)
        a = mlp_forward(spec, "m", [(t.const(x), idx)], t).value
        b = mlp_forward(spec, "m", [t.const(x[idx.ids])], t).value
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestTape:
    def test_untouched_params_get_zero_grads(self):
        store = ParamStore(np.float64)
        store.add("a", np.ones((2, 2)))
        store.add("b", np.ones(3))
        t = Tape(store)
        g = t.backward(t.mse(t.param("a"), 0.0))
        assert np.all(g["b"] == 0) and np.all(g["a"] == 0.5)

    def test_backward_without_record(self):
        store = ParamStore(np.float64)
        store.add("a", np.ones((2, 2)))
        t = Tape(store, record=False)
        with pytest.raises(TapeError):
            t.backward(t.mse(t.param("a"), 0.0))

    def test_shape_mismatch(self):
        store = ParamStore(np.float64)
        store.add("a", np.ones((2, 2)))
        t = Tape(store)
        with pytest.raises(ValueError):
            t.matmul(t.param("a"), t.const(np.ones((3, 1))))

    def test_sigmoid_extremes_finite(self):
        store = ParamStore(np.float32)
        store.add("a", np.array([[-1e4, 0.0, 1e4]]))
        t = Tape(store)
        y = t.silu(t.param("a"))
        np.testing.assert_array_equal(y.value, [[-0.0, 0.0, 1e4]])
        g = t.backward(y)
        assert np.all(np.isfinite(g["a"]))

    def test_truncated_normal_bounds(self):
        x = truncated_normal(np.random.default_rng(0), (10000,), 0.5)
        assert np.abs(x).max() <= 1.0
        assert 0.4 < x.std() < 0.5


class TestSegmentSum:
    @pytest.mark.parametrize("seed", range(20))
    def test_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n_nodes = int(rng.integers(1, 8))
        ids = rng.integers(0, n_nodes, int(rng.integers(0, 20)))
        v = rng.standard_normal((len(ids), 3))
        want = np.zeros((n_nodes, 3))
        for e, r in enumerate(ids):
            want[r] += v[e]
        np.testing.assert_allclose(segment_sum(v, ids, n_nodes), want, atol=1e-12)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            Index([0, 3], 3)


class TestAdamW:
    def manual(self, p, grads, lr, b1, b2, eps, wd):
        m = np.zeros_like(p)
        v = np.zeros_like(p)
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p = p - lr * wd * p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        return p

    @pytest.mark.parametrize("wd", [0.0, 0.1])
    def test_manual_formula(self, wd):
        rng = np.random.default_rng(0)
        p0 = rng.standard_normal((3, 2))
        grads = [rng.standard_normal((3, 2)) for _ in range(5)]
        store = ParamStore(np.float64)
        store.add("p", p0)
        opt = AdamW(lr=1e-2, weight_decay=wd)
        for g in grads:
            opt.update(store, {"p": g})
        np.testing.assert_allclose(store["p"], self.manual(p0, grads, 1e-2, 0.9, 0.95, 1e-8, wd), rtol=1e-12)
        assert opt.step == 5

    def test_defaults(self):
        opt = AdamW()
        assert (opt.beta1, opt.beta2, opt.eps, opt.weight_decay) == (0.9, 0.95, 1e-8, 0.0)

    def test_zero_gradient_fixed_point(self):
        store = ParamStore(np.float32)
        store.add("p", np.arange(4.0))
        opt = AdamW()
        for _ in range(3):
            opt.update(store, {"p": np.zeros(4)})
        np.testing.assert_array_equal(store["p"], np.arange(4.0))

    def test_first_step_magnitude(self):
        store = ParamStore(np.float64)
        store.add("p", np.zeros(3))
        AdamW(lr=0.1).update(store, {"p": np.array([5.0, -0.01, 1e3])})
        np.testing.assert_allclose(store["p"], [-0.1, 0.1, -0.1], rtol=1e-6)

    def test_global_norm(self):
        assert global_norm({"a": np.array([3.0]), "b": np.array([[4.0]])}) == 5.0


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        store = ParamStore(np.float32, seed=7)
        store.add("w", rng.standard_normal((3, 4)))
        store.add("b", rng.standard_normal(4))
        opt = AdamW(lr=3e-4, weight_decay=0.01)
        opt.update(store, {"w": np.ones((3, 4)), "b": np.ones(4)})
        save_checkpoint(tmp_path / "c.ockp", store, opt, {"hello": [1, 2]})
        p, o, cfg = load_checkpoint(tmp_path / "c.ockp")
        assert p.equal(store) and p.seed == 7
        assert o.step == 1 and o.hyper() == opt.hyper()
        np.testing.assert_array_equal(o.m["w"], opt.m["w"])
        assert cfg == {"hello": [1, 2]}

    def test_without_optimizer(self, tmp_path):
        store = ParamStore(np.float32)
        store.add("s", np.array(2.0))
        save_checkpoint(tmp_path / "c.ockp", store)
        p, o, cfg = load_checkpoint(tmp_path / "c.ockp")
        assert o is None and cfg == {} and p["s"] == 2.0

    def test_truncated_file(self, tmp_path):
        store = ParamStore(np.float32)
        store.add("w", np.ones((10, 10)))
        save_checkpoint(tmp_path / "c.ockp", store)
        raw = (tmp_path / "c.ockp").read_bytes()
        (tmp_path / "c.ockp").write_bytes(raw[:40])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "c.ockp")
