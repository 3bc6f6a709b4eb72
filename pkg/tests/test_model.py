import numpy as np
import pytest

from pinco import autodiff as ad
from pinco.autodiff import Tensor
from pinco.cases import parse_case
from pinco.grid import (
    build_features,
    replicate_graph,
    split_generators,
    stack_loadings,
    to_per_unit,
)
from pinco.model import (
    ModelConfig,
    ModelParams,
    apply_output_bounds,
    attention_layer_forward,
    load_checkpoint,
    message_edges,
    network_state,
    pinco_forward,
    save_checkpoint,
    tie_artificial_nodes,
)
from pinco.physics import constraint_residuals, violation_report
from tests.test_grid import ONE_BUS_THREE_GENS


def small_config(**kw):
    defaults = dict(depth=2, hidden=8, heads=2)
    defaults.update(kw)
    return ModelConfig(**defaults)


def brute_force_attention(x, src, dst, flag, params, layer, heads, hidden):
    """Independent per-node loop implementing the layer semantics."""
    n, d = x.shape
    d_head = hidden // heads
    out = x @ params[f"layer{layer}.w_skip"].values + params[f"layer{layer}.b_skip"].values
    per_head = []
    for h in range(heads):
        p = f"layer{layer}.head{h}"
        wq, bq = params[f"{p}.w_q"].values, params[f"{p}.b_q"].values
        wk, bk = params[f"{p}.w_k"].values, params[f"{p}.b_k"].values
        wv, bv = params[f"{p}.w_v"].values, params[f"{p}.b_v"].values
        head_out = np.zeros((n, d_head))
        for i in range(n):
            incoming = [e for e in range(len(src)) if dst[e] == i]
            q_i = x[i] @ wq + bq
            scores = []
            values = []
            for e in incoming:
                kv = np.concatenate([x[src[e]], [flag[e]]])
                scores.append(q_i @ (kv @ wk + bk) / np.sqrt(d_head))
                values.append(kv @ wv + bv)
            scores = np.array(scores)
            weights = np.exp(scores - scores.max())
            weights /= weights.sum()
            head_out[i] = sum(w * v for w, v in zip(weights, values))
        per_head.append(head_out)
    return out + np.concatenate(per_head, axis=1)


class TestAttentionLayer:
    def test_single_isolated_node(self, rng):
        """One node with only a self-loop: weight 1, output skip + value."""
        cfg = small_config(feature_dim=8)
        params = ModelParams.init(cfg, seed=0)
        x = Tensor(rng.normal(size=(1, 8)))
        src = dst = np.array([0])
        flag = np.zeros(1)
        out = attention_layer_forward(x, src, dst, flag, params, layer=1)
        kv = np.concatenate([x.values[0], [0.0]])
        expected = x.values @ params["layer1.w_skip"].values + params["layer1.b_skip"].values
        vals = []
        for h in range(cfg.heads):
            p = f"layer1.head{h}"
            vals.append(kv @ params[f"{p}.w_v"].values + params[f"{p}.b_v"].values)
        expected = expected + np.concatenate(vals)[None, :]
        assert np.allclose(out.values, expected)

    def test_identical_nodes_get_identical_outputs(self, rng):
        cfg = small_config(feature_dim=8)
        params = ModelParams.init(cfg, seed=1)
        row = rng.normal(size=8)
        x = Tensor(np.stack([row, row]))
        src = np.array([0, 1, 0, 1])
        dst = np.array([1, 0, 0, 1])
        flag = np.zeros(4)
        out = attention_layer_forward(x, src, dst, flag, params, layer=0).values
        assert np.allclose(out[0], out[1])

    def test_random_graph_matches_bruteforce(self, rng):
        """Direct per-node loop oracle on a random 5-node graph."""
        cfg = small_config(feature_dim=6)
        params = ModelParams.init(cfg, seed=2)
        n = 5
        x = rng.normal(size=(n, 6))
        edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 3)]
        src = np.array([a for a, b in edges] + [b for a, b in edges] + list(range(n)))
        dst = np.array([b for a, b in edges] + [a for a, b in edges] + list(range(n)))
        flag = (rng.random(len(src)) < 0.3).astype(float)
        out = attention_layer_forward(Tensor(x), src, dst, flag, params, layer=0).values
        expected = brute_force_attention(x, src, dst, flag, params, 0, cfg.heads, cfg.hidden)
        assert np.allclose(out, expected, atol=1e-12)


class TestForward:
    def test_zero_weights_zero_outputs(self, ieee9_graph):
        cfg = small_config()
        params = ModelParams.init(cfg, seed=0)
        for t in params.tensors():
            t.values[:] = 0.0
        x = build_features(ieee9_graph, ieee9_graph.ncase.reference_loading())
        raw = pinco_forward(x, ieee9_graph, params)
        assert np.abs(raw.values).max() == 0.0

    def test_output_shape_default_architecture(self, ncases):
        """Width 24, 4 heads, depth 5 on the unsplit 9-node graph gives 9x4."""
        graph = split_generators(ncases["ieee9"], policy="per-extra-gen")
        params = ModelParams.init(ModelConfig(depth=5, hidden=24, heads=4), seed=0)
        x = build_features(graph, graph.ncase.reference_loading())
        raw = pinco_forward(x, graph, params)
        assert raw.shape == (9, 4)

    def test_disconnected_copies_match_single(self, ieee9_graph, rng):
        """Evaluating two stacked copies equals two independent evaluations."""
        cfg = small_config()
        params = ModelParams.init(cfg, seed=3)
        ld = ieee9_graph.ncase.reference_loading()
        single = pinco_forward(build_features(ieee9_graph, ld), ieee9_graph, params).values

        twice = replicate_graph(ieee9_graph, 2)
        stacked = stack_loadings([ld, ld])
        both = pinco_forward(build_features(twice, stacked), twice, params).values
        n, nb = ieee9_graph.n_nodes, ieee9_graph.n_bus
        # copy 0: physical rows then its artificial rows
        copy0 = np.concatenate([both[:nb], both[2 * nb : 2 * nb + n - nb]])
        copy1 = np.concatenate([both[nb : 2 * nb], both[2 * nb + n - nb :]])
        assert np.allclose(copy0, single, atol=1e-12)
        assert np.allclose(copy1, single, atol=1e-12)

    def test_permutation_equivariance(self, rng):
        """Relabeling nodes permutes outputs identically."""
        ncase = to_per_unit(parse_case(ONE_BUS_THREE_GENS))
        graph = split_generators(ncase, "per-gen")
        cfg = small_config()
        params = ModelParams.init(cfg, seed=4)
        x = build_features(graph, ncase.reference_loading())
        src, dst, flag = message_edges(graph)
        out = pinco_forward(x, graph, params).values

        perm = rng.permutation(graph.n_nodes)
        xp = np.empty_like(x)
        xp[perm] = x
        src_p, dst_p = perm[src], perm[dst]
        layer_in = Tensor(xp)
        for layer in range(cfg.depth):
            layer_in = attention_layer_forward(layer_in, src_p, dst_p, flag, params, layer)
        hidden = ad.tanhshrink(ad.add(ad.matmul(layer_in, params["head.w1"]), params["head.b1"]))
        out_p = ad.add(ad.matmul(hidden, params["head.w2"]), params["head.b2"]).values
        assert np.allclose(out_p[perm], out, atol=1e-12)

    def test_forward_deterministic(self, ieee9_graph):
        params = ModelParams.init(small_config(), seed=5)
        x = build_features(ieee9_graph, ieee9_graph.ncase.reference_loading())
        a = pinco_forward(x, ieee9_graph, params).values
        b = pinco_forward(x, ieee9_graph, params).values
        assert np.array_equal(a, b)


class TestBounding:
    def test_sigmoid_saturation_hits_limits(self, ieee9_graph):
        cfg = ModelConfig(depth=1, hidden=8, heads=2)
        n = ieee9_graph.n_nodes
        ncase = ieee9_graph.ncase
        raw = Tensor(np.full((n, 4), -50.0))
        low = tie_artificial_nodes(apply_output_bounds(raw, ieee9_graph, cfg), ieee9_graph)
        assert np.allclose(low.p_g.values, ncase.p_min[ncase.active_gens])
        raw_hi = Tensor(np.full((n, 4), 50.0))
        high = tie_artificial_nodes(apply_output_bounds(raw_hi, ieee9_graph, cfg), ieee9_graph)
        assert np.allclose(high.p_g.values, ncase.p_max[ncase.active_gens])
        assert np.allclose(high.v.values, ncase.v_max)

    def test_finite_raw_strictly_inside(self, ieee9_graph, rng):
        cfg = ModelConfig(depth=1, hidden=8, heads=2)
        ncase = ieee9_graph.ncase
        raw = Tensor(rng.normal(scale=5.0, size=(ieee9_graph.n_nodes, 4)))
        state = tie_artificial_nodes(apply_output_bounds(raw, ieee9_graph, cfg), ieee9_graph)
        act = ncase.active_gens
        assert (state.p_g.values > ncase.p_min[act]).all()
        assert (state.p_g.values < ncase.p_max[act]).all()
        assert (state.q_g.values > ncase.q_min[act]).all()
        assert (state.v.values < ncase.v_max).all()

    def test_box_violations_zero_for_random_raw(self, ieee9_graph, rng):
        """Squashed outputs never violate box families, whatever the raw values."""
        cfg = ModelConfig(depth=1, hidden=8, heads=2)
        for _ in range(25):
            raw = Tensor(rng.normal(scale=10.0, size=(ieee9_graph.n_nodes, 4)))
            state = tie_artificial_nodes(
                apply_output_bounds(raw, ieee9_graph, cfg), ieee9_graph
            )
            rep = violation_report(constraint_residuals(state, ieee9_graph.ncase))
            assert rep.counts["G_P"] == 0
            assert rep.counts["G_Q"] == 0
            assert rep.counts["G_V"] == 0

    def test_penalty_mode_passes_raw_through(self, ieee9_graph, rng):
        cfg = ModelConfig(depth=1, hidden=8, heads=2, bounding="penalty")
        raw_np = rng.normal(size=(ieee9_graph.n_nodes, 4))
        out = apply_output_bounds(Tensor(raw_np), ieee9_graph, cfg)
        assert np.array_equal(out.p.values, raw_np[:, 0])
        assert np.array_equal(out.v.values, raw_np[:, 2])

    def test_reference_angle_pinned(self, ieee9_graph, rng):
        cfg = ModelConfig(depth=1, hidden=8, heads=2)
        raw = Tensor(rng.normal(size=(ieee9_graph.n_nodes, 4)))
        state = tie_artificial_nodes(apply_output_bounds(raw, ieee9_graph, cfg), ieee9_graph)
        assert state.theta.values[ieee9_graph.ncase.ref_bus] == 0.0


class TestTying:
    def test_no_artificial_nodes_identity(self, ncases, rng):
        graph = split_generators(ncases["ieee9"], "per-extra-gen")
        cfg = ModelConfig(depth=1, hidden=8, heads=2, bounding="penalty")
        raw_np = rng.normal(size=(graph.n_nodes, 4))
        state = tie_artificial_nodes(apply_output_bounds(Tensor(raw_np), graph, cfg), graph)
        assert np.array_equal(state.v.values, raw_np[:, 2])
        assert np.array_equal(state.p_g.values, raw_np[graph.gen_of, 0])

    def test_one_bus_three_gens_counts(self, rng):
        ncase = to_per_unit(parse_case(ONE_BUS_THREE_GENS))
        graph = split_generators(ncase, "per-extra-gen")
        cfg = ModelConfig(depth=1, hidden=8, heads=2)
        raw = Tensor(rng.normal(size=(graph.n_nodes, 4)))
        state = tie_artificial_nodes(apply_output_bounds(raw, graph, cfg), graph)
        assert state.v.size == 1 and state.theta.size == 1
        assert state.p_g.size == 3 and state.q_g.size == 3

    def test_ieee24_per_gen_lengths(self, ncases, rng):
        graph = split_generators(ncases["ieee24"], "per-gen")
        cfg = ModelConfig(depth=1, hidden=8, heads=2)
        raw = Tensor(rng.normal(size=(graph.n_nodes, 4)))
        state = tie_artificial_nodes(apply_output_bounds(raw, graph, cfg), graph)
        assert state.v.size == 24
        assert state.p_g.size == 32


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, ieee9_graph):
        params = ModelParams.init(small_config(), seed=7)
        path = tmp_path / "model.json"
        save_checkpoint(path, params, extra={"note": "test"})
        loaded, extra = load_checkpoint(path)
        assert extra["note"] == "test"
        assert loaded.config == params.config
        for a, b in zip(params.tensors(), loaded.tensors()):
            assert np.array_equal(a.values, b.values)

    def test_loaded_model_same_forward(self, tmp_path, ieee9_graph):
        params = ModelParams.init(small_config(), seed=8)
        x = build_features(ieee9_graph, ieee9_graph.ncase.reference_loading())
        before = pinco_forward(x, ieee9_graph, params).values
        save_checkpoint(tmp_path / "m.json", params)
        loaded, _ = load_checkpoint(tmp_path / "m.json")
        assert np.array_equal(pinco_forward(x, ieee9_graph, loaded).values, before)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(depth=0)
    with pytest.raises(ValueError):
        ModelConfig(hidden=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(bounding="magic")


def test_gradient_through_network_and_physics(ieee9_graph):
    """check_grad over a physics-loss of the network output."""
    cfg = ModelConfig(depth=1, hidden=8, heads=2)
    params = ModelParams.init(cfg, seed=11)
    x = build_features(ieee9_graph, ieee9_graph.ncase.reference_loading())
    ncase = ieee9_graph.ncase

    def loss():
        state = network_state(x, ieee9_graph, params)
        res = constraint_residuals(state, ncase)
        return ad.tsum(ad.square(res.equalities()))

    subset = [params["layer0.head0.w_q"], params["head.w2"], params["layer0.b_skip"]]
    assert ad.check_grad(loss, subset) <= 1e-5
