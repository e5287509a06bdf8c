import numpy as np
import pytest

from helpers import perturb, tiny_model, tiny_world
from oceangnn.diff_core import Index, MlpSpec, ParamStore, Tape, init_mlp
from oceangnn.gnn_model import EdgeIndex, ModelConfig, NumericalError, gnn_block, zero_all_output_layers, zero_output_layer


def np_silu(x):
    return x / (1 + np.exp(-x))


def np_mlp(store, spec, name, x):
    h = x
    n = len(spec.layer_shapes())
    for i in range(n):
        h = h @ store[f"{name}.w{i}"] + store[f"{name}.b{i}"]
        if i < n - 1:
            h = np_silu(h)
    if spec.layer_norm:
        mu = h.mean()
        var = ((h - mu) ** 2).mean()
        h = (h - mu) / np.sqrt(var + 1e-5) * store[f"{name}.ln_gain"] + store[f"{name}.ln_offset"]
    return h


@pytest.fixture(scope="module")
def world():
    return tiny_world()


@pytest.fixture(scope="module")
def model(world):
    gen, _, stats = world
    return tiny_model(gen, stats)


def inputs(data, t=10):
    return [data.ocean(t - 1), data.ocean(t), data.forcing(t - 1), data.forcing(t), data.forcing(t + 1)]


class TestGnnBlock:
    def test_loop_oracle(self):
        rng = np.random.default_rng(0)
        L = 4
        edge_spec, node_spec = MlpSpec(3 * L, 5, L), MlpSpec(2 * L, 5, L)
        store = ParamStore(np.float64)
        init_mlp(store, edge_spec, "b.edge", rng)
        init_mlp(store, node_spec, "b.node", rng)
        perturb(store)
        n_s, n_r, n_e = 5, 4, 9
        vs, vr, e = rng.standard_normal((n_s, L)), rng.standard_normal((n_r, L)), rng.standard_normal((n_e, L))
        snd, rcv = rng.integers(0, n_s, n_e), rng.integers(0, n_r - 1, n_e)  # receiver n_r-1 gets nothing
        t = Tape(store, record=False)
        idx = EdgeIndex(Index(snd, n_s), Index(rcv, n_r))
        e_new, v_new = gnn_block(t, "b", edge_spec, node_spec, t.const(vs), t.const(vr), t.const(e), idx)

        want_e = np.array([e[k] + np_mlp(store, edge_spec, "b.edge", np.concatenate([e[k], vs[snd[k]], vr[rcv[k]]])) for k in range(n_e)])
        agg = np.zeros((n_r, L))
        for k in range(n_e):
            agg[rcv[k]] += want_e[k]
        want_v = np.array([vr[r] + np_mlp(store, node_spec, "b.node", np.concatenate([vr[r], agg[r]])) for r in range(n_r)])
        np.testing.assert_allclose(e_new.value, want_e, atol=1e-10)
        np.testing.assert_allclose(v_new.value, want_v, atol=1e-10)


class TestModel:
    def test_output_shape_and_day(self, world, model):
        _, data, _ = world
        params = model.init_params(0)
        out = model.step(params, *inputs(data))
        assert out.day == 11 and out.channels == model.schema.ocean
        assert out.values.shape == (model.schema.c_x, *model.grid.shape)
        assert np.all(np.isnan(out.values[:, ~model.grid.mask]))
        assert np.all(np.isfinite(out.values[:, model.grid.mask]))

    def test_zero_output_layer_is_persistence(self, world, model):
        _, data, _ = world
        params = zero_output_layer(model, perturb(model.init_params(0)))
        out = model.step(params, *inputs(data))
        x = inputs(data)[1]
        m = model.grid.mask
        np.testing.assert_array_equal(out.values[:, m], x.values[:, m])

    def test_zero_all_output_layers_is_persistence(self, world, model):
        _, data, _ = world
        params = zero_all_output_layers(model, model.init_params(3))
        out = model.step(params, *inputs(data))
        np.testing.assert_array_equal(out.rows(), inputs(data)[1].rows())

    def test_land_values_ignored(self, world, model):
        _, data, _ = world
        params = perturb(model.init_params(0))
        base = model.step(params, *inputs(data))
        xs = inputs(data)
        v = xs[1].values.copy()
        v[:, ~model.grid.mask] = 1e6
        xs[1] = xs[1].replace(values=v)
        np.testing.assert_array_equal(model.step(params, *xs).rows(), base.rows())

    def test_seed_determines_init(self, model):
        assert model.init_params(5).equal(model.init_params(5))
        assert not model.init_params(5).equal(model.init_params(6))

    def test_param_count_matches_mlp_shapes(self, model):
        params = model.init_params(0)
        want = 0
        for spec in model.mlp_names().values():
            want += sum(a * b + b for a, b in spec.layer_shapes()) + (2 * spec.out if spec.layer_norm else 0)
        assert params.size() == want

    def test_sharing_reduces_params(self, world):
        gen, _, stats = world
        base = tiny_model(gen, stats).init_params(0).size()
        it = tiny_model(gen, stats, share_iterations=True).init_params(0).size()
        both = tiny_model(gen, stats, share_iterations=True, share_meshes=True).init_params(0).size()
        assert base > it > both

    def test_decode_order_matters(self, world):
        gen, data, stats = world
        a = tiny_model(gen, stats)
        b = tiny_model(gen, stats, decode_order=("fine", "coarse"))
        params = perturb(a.init_params(0))
        assert not np.allclose(a.step(params, *inputs(data)).rows(), b.step(params, *inputs(data)).rows())

    def test_non_consecutive_inputs(self, world, model):
        _, data, _ = world
        xs = inputs(data)
        xs[0] = data.ocean(5)
        with pytest.raises(ValueError):
            model.step(model.init_params(0), *xs)

    def test_nan_input_raises_with_stage(self, world, model):
        _, data, _ = world
        xs = inputs(data)
        v = xs[2].values.copy()
        v[0, model.grid.mask] = np.nan
        xs[2] = xs[2].replace(values=v)
        with pytest.raises(NumericalError, match="preprocess"):
            model.step(model.init_params(0), *xs)

    def test_float32_matches_float64(self, world):
        gen, data, stats = world
        m64 = tiny_model(gen, stats)
        m32 = tiny_model(gen, stats, dtype="float32")
        p = m64.init_params(0)
        a = m64.step(p, *inputs(data)).rows()
        b = m32.step(p.astype(np.float32), *inputs(data)).rows()
        np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-4)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            ModelConfig(processor_steps=0)
        with pytest.raises(ValueError):
            ModelConfig(decode_order=("fine", "fine"))

    def test_gradient_spot_check(self, world, model):
        _, data, _ = world
        params = perturb(model.init_params(0))
        xs = inputs(data)
        target = data.ocean(11).rows()

        def loss(record):
            t = Tape(params, record)
            out = model.forward(t, t.const(xs[0].rows()), t.const(xs[1].rows()), *(x.rows() for x in xs[2:]))
            return t, t.mse(t.affine(out, 1 / model.x_std), target / model.x_std)

        t, out = loss(True)
        grads = t.backward(out)
        rng = np.random.default_rng(0)
        for name in ("embed.grid.w0", "proc.fine.1.node.w1", "dec.out.b1", "embed.m2m.ln_gain"):
            arr = params[name]
            for _ in range(3):
                i = tuple(rng.integers(0, s) for s in arr.shape)
                old = arr[i]
                arr[i] = old + 1e-6
                fp = float(loss(False)[1].value)
                arr[i] = old - 1e-6
                fm = float(loss(False)[1].value)
                arr[i] = old
                num = (fp - fm) / 2e-6
                assert abs(grads[name][i] - num) <= 1e-4 * max(abs(num), 1e-3)
