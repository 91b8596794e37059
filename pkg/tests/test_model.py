import numpy as np
import pytest

import tailflow.model as model_mod
from tailflow.datagen import ClassSpec, generate_corpus, tail8_specs
from tailflow.errors import ContractViolationError, UnknownSampleError
from tailflow.model import (
    AdapterParams,
    BackboneConfig,
    ModelState,
    adapter_forward,
    backbone_forward,
    block_forward,
    cfg_sample,
    flow_matching_loss,
    init_adapters,
    init_backbone,
    load_checkpoint,
    model_forward,
    resolve_placement,
    route,
    sample_batch,
    sample_conditional,
    sample_unconditional,
    save_checkpoint,
    sgd_step,
)
from tailflow.partition import random_partition, single_partition
from tailflow.seeding import rng_for
from tailflow.training import TrainBatch, assemble_batch


def small_state(num_experts=2, adapter_dim=6, placement="all", nonlinearity="gelu",
                hidden=8, blocks=2, data_dim=3, cond_dim=4, zero_w2=True, seed=1):
    cfg = BackboneConfig(data_dim=data_dim, hidden_dim=hidden, num_blocks=blocks,
                         cond_dim=cond_dim, time_embed_dim=4)
    state = ModelState(
        config=cfg,
        backbone=init_backbone(cfg, seed),
        adapters=init_adapters(cfg, num_experts, adapter_dim, placement, nonlinearity, seed),
        frozen=True,
    )
    # a fresh backbone has a zero output head (nothing to backpropagate
    # through); give it pretrained-like weights
    rng = rng_for(seed, "test-head")
    state.backbone["w_out"] = rng.standard_normal((data_dim, hidden)) / np.sqrt(hidden)
    if not zero_w2:
        rng = rng_for(seed, "test-w2")
        for p in state.adapters.params.values():
            p.w2 = rng.standard_normal(p.w2.shape) * 0.2
    return state


def small_batch(state, n=5, seed=3):
    specs = [
        ClassSpec(0, (0.0,) * state.config.data_dim, 1.0, 4, True),
        ClassSpec(1, (2.0,) + (0.0,) * (state.config.data_dim - 1), 1.0, 4),
    ]
    corpus = generate_corpus(specs, state.config.data_dim, 5,
                             embedding_dim=state.config.cond_dim, noise_scale=0.1)
    part = random_partition(corpus, state.adapters.num_experts, seed=2)
    return assemble_batch(corpus, part, n, False, 0, rng_for(seed, "batch"))


class TestBackboneForward:
    def test_deterministic_and_shaped(self):
        state = small_state()
        x = rng_for(0, "x").standard_normal(3)
        c = rng_for(0, "c").standard_normal(4)
        a = backbone_forward(state, x, 0.4, c)
        b = backbone_forward(state, x, 0.4, c)
        assert np.array_equal(a, b)
        assert a.shape == (3,)

    def test_shape_and_range_errors(self):
        state = small_state()
        with pytest.raises(ValueError):
            backbone_forward(state, np.zeros(2), 0.5, np.zeros(4))
        with pytest.raises(ValueError):
            backbone_forward(state, np.zeros(3), 0.5, np.zeros(3))
        with pytest.raises(ValueError):
            backbone_forward(state, np.zeros(3), 1.5, np.zeros(4))

    def test_input_jacobian_matches_finite_differences(self):
        # VJP against central differences of a scalar probe w^T f(x)
        state = small_state(zero_w2=False)
        cfg = state.config
        rng = rng_for(7, "jvp")
        x = rng.standard_normal(cfg.data_dim)
        c = rng.standard_normal(cfg.cond_dim)
        w = rng.standard_normal(cfg.data_dim)
        t = 0.3

        bare = ModelState(config=cfg, backbone=state.backbone, adapters=None, frozen=True)
        out, cache = model_mod._forward_group(
            bare, x[None, :], np.array([t]), c[None, :], None, keep_cache=True
        )
        dx = model_mod._backward_group(bare, cache, w[None, :], None, None, want_input_grad=True)
        h = 1e-5
        worst = 0.0
        for i in range(cfg.data_dim):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd = (backbone_forward(state, xp, t, c) @ w - backbone_forward(state, xm, t, c) @ w) / (2 * h)
            rel = abs(fd - dx[0, i]) / max(abs(fd), abs(dx[0, i]), 1e-12)
            worst = max(worst, rel)
        assert worst < 1e-4


class TestAdapterForward:
    def test_zero_up_projection(self):
        ad = AdapterParams(w1=np.ones((4, 3)), w2=np.zeros((3, 4)), expert_id=0, block_id=0)
        assert np.array_equal(adapter_forward(ad, np.array([1.0, -2.0, 0.5])), np.zeros(3))

    def test_relu_hand_computation(self):
        ad = AdapterParams(w1=np.eye(2), w2=np.eye(2), expert_id=0, block_id=0)
        out = adapter_forward(ad, np.array([-1.0, 2.0]), nonlinearity="relu")
        assert np.array_equal(out, np.array([0.0, 2.0]))

    def test_matches_naive_matmul_oracle(self):
        rng = rng_for(11, "adapter")
        w1 = rng.standard_normal((6, 4))
        w2 = rng.standard_normal((4, 6))
        h = rng.standard_normal(4)
        ad = AdapterParams(w1=w1, w2=w2, expert_id=0, block_id=0)
        out = adapter_forward(ad, h, nonlinearity="relu")
        # naive double loop; agreement up to accumulation-order rounding
        y = [sum(w1[i][j] * h[j] for j in range(4)) for i in range(6)]
        z = [max(v, 0.0) for v in y]
        expected = [sum(w2[i][j] * z[j] for j in range(6)) for i in range(4)]
        assert np.allclose(out, expected, rtol=1e-13, atol=1e-13)

    def test_shape_mismatch(self):
        ad = AdapterParams(w1=np.ones((4, 3)), w2=np.zeros((3, 4)), expert_id=0, block_id=0)
        with pytest.raises(ValueError):
            adapter_forward(ad, np.zeros(5))


class TestBlockForward:
    def test_zero_init_identity_bit_exact(self):
        state = small_state(zero_w2=True)
        bare = ModelState(config=state.config, backbone=state.backbone, adapters=None)
        h = rng_for(1, "h").standard_normal(state.config.hidden_dim)
        for l in range(state.config.num_blocks):
            for k in range(2):
                assert np.array_equal(
                    block_forward(state, l, h, expert_id=k), block_forward(bare, l, h)
                )

    def test_unadapted_block_ignores_expert(self):
        state = small_state(placement="last:1", zero_w2=False)
        h = rng_for(2, "h").standard_normal(state.config.hidden_dim)
        assert np.array_equal(
            block_forward(state, 0, h, expert_id=0), block_forward(state, 0, h, expert_id=1)
        )

    def test_compositional_oracle_per_expert(self):
        state = small_state(zero_w2=False)
        bare = ModelState(config=state.config, backbone=state.backbone, adapters=None)
        h = rng_for(3, "h").standard_normal(state.config.hidden_dim)
        base = block_forward(bare, 1, h)
        outs = []
        for k in range(2):
            got = block_forward(state, 1, h, expert_id=k)
            expected = base + adapter_forward(
                state.adapters.params[(k, 1)], h, state.adapters.nonlinearity
            )
            assert np.allclose(got, expected, rtol=0, atol=0)
            outs.append(got)
        assert not np.array_equal(outs[0], outs[1])

    def test_expert_out_of_range_on_adapted_block(self):
        state = small_state()
        h = np.zeros(state.config.hidden_dim)
        with pytest.raises(ValueError):
            block_forward(state, 0, h, expert_id=7)


class TestRoute:
    def test_lookup_and_stability(self):
        corpus = generate_corpus(tail8_specs(100), 2, seed=4)
        part = random_partition(corpus, 4, seed=1)
        sample = corpus.samples[10]
        expected = int(part.assignments[10])
        assert route(sample, part) == expected
        assert all(route(sample, part) == expected for _ in range(100))

    def test_single_expert_always_zero(self):
        corpus = generate_corpus(tail8_specs(50), 2, seed=4)
        part = single_partition(corpus)
        assert all(route(s, part) == 0 for s in corpus.samples)

    def test_unknown_sample(self):
        corpus = generate_corpus(tail8_specs(50), 2, seed=4)
        part = single_partition(corpus)
        with pytest.raises(UnknownSampleError):
            route(corpus.samples[0].__class__(sample_id=999, x=np.zeros(2), class_id=0,
                                              embedding=np.zeros(16)), part)


class TestFlowMatchingLoss:
    def test_perfect_predictor_gives_zero_loss(self, monkeypatch):
        # stub the network with an exact-target predictor reconstructed from
        # the documented draw order (t first, then x0)
        state = small_state()
        batch = small_batch(state, n=6)
        seed = 99
        rng = rng_for(seed, "flow-loss")
        n = batch.batch_size
        t_all = rng.uniform(0.0, 1.0, size=n)
        x0_all = rng.standard_normal((n, state.config.data_dim))
        x1_all = np.stack([s.x for s, _ in batch.samples])
        v_star = x1_all - x0_all
        xt_all = (1.0 - t_all)[:, None] * x0_all + t_all[:, None] * x1_all

        real_forward = model_mod._forward_group

        def perfect(state_, X, T, C, expert_id, keep_cache=False):
            rows = [int(np.flatnonzero(np.isclose(xt_all, x).all(axis=1))[0]) for x in X]
            out = v_star[rows]
            if keep_cache:
                _, cache = real_forward(state_, X, T, C, expert_id, keep_cache=True)
                return out, cache
            return out

        monkeypatch.setattr(model_mod, "_forward_group", perfect)
        loss, _ = flow_matching_loss(state, batch, seed=seed)
        assert loss == 0.0

    def test_loss_matches_independent_recomputation(self):
        state = small_state(zero_w2=False)
        batch = small_batch(state, n=6)
        seed = 123
        loss, _ = flow_matching_loss(state, batch, seed=seed)

        rng = rng_for(seed, "flow-loss")
        n = batch.batch_size
        t = rng.uniform(0.0, 1.0, size=n)
        x0 = rng.standard_normal((n, state.config.data_dim))
        x1 = np.stack([s.x for s, _ in batch.samples])
        cond = np.stack([s.embedding for s, _ in batch.samples])
        xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
        v = model_forward(state, xt, t, cond, np.array([k for _, k in batch.samples]))
        assert loss == pytest.approx(float(((v - (x1 - x0)) ** 2).mean()), rel=1e-12)

    def test_gradient_isolation_for_absent_expert(self):
        state = small_state(num_experts=3, zero_w2=False)
        batch = small_batch(state, n=5)
        # force every sample onto expert 0
        forced = TrainBatch(
            samples=[(s, 0) for s, _ in batch.samples],
            resampled_flags=batch.resampled_flags,
            batch_size=batch.batch_size,
        )
        _, grads = flow_matching_loss(state, forced, seed=5)
        for k in (1, 2):
            for l in state.adapters.placement:
                assert np.all(grads.adapters[(k, l)]["w1"] == 0.0)
                assert np.all(grads.adapters[(k, l)]["w2"] == 0.0)
        assert grads.backbone is None
        assert any(np.any(grads.adapters[(0, l)]["w2"] != 0.0) for l in state.adapters.placement)

    def test_analytic_gradients_match_finite_differences(self):
        # d = 8, two blocks, adapter width 6 (also acceptance criterion 4)
        state = small_state(hidden=8, adapter_dim=6, zero_w2=False, seed=21)
        batch = small_batch(state, n=4)
        seed = 31
        _, grads = flow_matching_loss(state, batch, seed=seed)
        h = 1e-5
        worst = 0.0
        for key, g in grads.adapters.items():
            for name in ("w1", "w2"):
                p = getattr(state.adapters.params[key], name)
                analytic = g[name]
                for idx in [(0, 0), (1, 2), (p.shape[0] - 1, p.shape[1] - 1)]:
                    orig = p[idx]
                    p[idx] = orig + h
                    lp, _ = flow_matching_loss(state, batch, seed=seed)
                    p[idx] = orig - h
                    lm, _ = flow_matching_loss(state, batch, seed=seed)
                    p[idx] = orig
                    fd = (lp - lm) / (2 * h)
                    if max(abs(fd), abs(analytic[idx])) > 1e-12:
                        rel = abs(fd - analytic[idx]) / max(abs(fd), abs(analytic[idx]))
                        worst = max(worst, rel)
        assert worst < 1e-4

    def test_unfrozen_backbone_with_adapters_rejected(self):
        state = small_state()
        state.frozen = False
        with pytest.raises(ContractViolationError):
            flow_matching_loss(state, small_batch(state), seed=0)

    def test_routing_purity(self):
        # outputs depend on the partition only through the sample's own expert
        state = small_state(zero_w2=False)
        batch = small_batch(state, n=4)
        records = [s for s, _ in batch.samples]
        x = np.stack([s.x for s in records])
        t = np.full(len(records), 0.5)
        c = np.stack([s.embedding for s in records])
        experts_a = np.array([0, 1, 0, 1])
        experts_b = np.array([0, 0, 1, 1])
        out_a = model_forward(state, x, t, c, experts_a)
        out_b = model_forward(state, x, t, c, experts_b)
        assert np.array_equal(out_a[0], out_b[0])
        assert np.array_equal(out_a[3], out_b[3])


class TestSgd:
    def test_updates_only_adapters(self):
        state = small_state(zero_w2=False)
        before = {k: v.copy() for k, v in state.backbone.items()}
        batch = small_batch(state)
        _, grads = flow_matching_loss(state, batch, seed=1)
        sgd_step(state, grads, lr=0.1)
        for k, v in state.backbone.items():
            assert np.array_equal(before[k], v)

    def test_backbone_update_requires_unfrozen(self):
        cfg = BackboneConfig(data_dim=3, hidden_dim=8, num_blocks=1, cond_dim=4,
                             time_embed_dim=4)
        state = ModelState(config=cfg, backbone=init_backbone(cfg, 0), adapters=None,
                           frozen=False)
        batch = small_batch(small_state())
        _, grads = flow_matching_loss(state, batch, seed=2)
        assert grads.backbone is not None
        before = state.backbone["w_out"].copy()
        sgd_step(state, grads, lr=0.1)
        assert not np.array_equal(before, state.backbone["w_out"])


class TestSampling:
    def test_scale_one_collapses_to_conditional(self):
        state = small_state(zero_w2=False)
        cond = rng_for(5, "cond").standard_normal(4)
        got = cfg_sample(state, cond, 0, guidance_scale=1.0, steps=6, seed=9)
        ref = sample_conditional(state, cond, 0, steps=6, seed=9)
        assert np.array_equal(got, ref)

    def test_scale_zero_collapses_to_unconditional(self):
        state = small_state(zero_w2=False)
        cond = rng_for(5, "cond").standard_normal(4)
        got = cfg_sample(state, cond, 0, guidance_scale=0.0, steps=6, seed=9)
        ref = sample_unconditional(state, 0, steps=6, seed=9)
        assert np.array_equal(got, ref)

    def test_single_euler_step_oracle(self):
        state = small_state(zero_w2=False)
        cond = rng_for(6, "cond").standard_normal(4)
        s = 5.0
        seed = 17
        x0 = rng_for(seed, "sample-noise").standard_normal((1, 3))
        null = np.zeros(4)
        vu = model_forward(state, x0, np.array([0.0]), null[None, :], np.array([0]))
        vc = model_forward(state, x0, np.array([0.0]), cond[None, :], np.array([0]))
        expected = x0[0] + (vu[0] + s * (vc[0] - vu[0]))
        got = cfg_sample(state, cond, 0, guidance_scale=s, steps=1, seed=seed)
        assert np.allclose(got, expected, rtol=0, atol=0)

    def test_deterministic_per_seed(self):
        state = small_state(zero_w2=False)
        cond = np.ones(4)
        a = sample_batch(state, cond, 1, 2.0, 5, 7, seed=3)
        b = sample_batch(state, cond, 1, 2.0, 5, 7, seed=3)
        c = sample_batch(state, cond, 1, 2.0, 5, 7, seed=4)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_invalid_arguments(self):
        state = small_state()
        with pytest.raises(ValueError):
            cfg_sample(state, np.zeros(4), 0, 1.0, steps=0, seed=0)
        with pytest.raises(ValueError):
            cfg_sample(state, np.zeros(4), 0, -1.0, steps=4, seed=0)


class TestPlacementParity:
    def test_both_tradeoff_configs_use_one_code_path(self):
        # all-blocks small width vs last-block large width: same stack type,
        # no branching beyond the placement set and width
        cfg = BackboneConfig(data_dim=2, hidden_dim=8, num_blocks=4, cond_dim=4,
                             time_embed_dim=4)
        wide_last = init_adapters(cfg, 2, 32, "last:1", "gelu", 0)
        slim_all = init_adapters(cfg, 2, 4, "all", "gelu", 0)
        assert type(wide_last) is type(slim_all)
        assert wide_last.placement == (3,)
        assert slim_all.placement == (0, 1, 2, 3)
        assert wide_last.parameter_count() == 2 * (32 * 8 + 8 * 32)
        assert slim_all.parameter_count() == 2 * 4 * (4 * 8 + 8 * 4)
        for stack in (wide_last, slim_all):
            state = ModelState(config=cfg, backbone=init_backbone(cfg, 0), adapters=stack)
            out = model_forward(state, np.zeros((2, 2)), np.array([0.1, 0.2]),
                                np.zeros((2, 4)), np.array([0, 1]))
            assert out.shape == (2, 2)

    def test_resolve_placement_forms(self):
        assert resolve_placement(4, "all") == (0, 1, 2, 3)
        assert resolve_placement(4, "none") == ()
        assert resolve_placement(4, "last:2") == (2, 3)
        assert resolve_placement(4, "0,2") == (0, 2)
        assert resolve_placement(4, [3, 1]) == (1, 3)
        with pytest.raises(ValueError):
            resolve_placement(4, "last:9")
        with pytest.raises(ValueError):
            resolve_placement(4, "5")


def test_checkpoint_round_trip(tmp_path):
    state = small_state(zero_w2=False, placement="last:1")
    path = tmp_path / "model.npz"
    save_checkpoint(state, path)
    loaded = load_checkpoint(path)
    assert loaded.config == state.config
    assert loaded.frozen == state.frozen
    for name in state.backbone:
        assert np.array_equal(state.backbone[name], loaded.backbone[name])
    assert loaded.adapters.placement == state.adapters.placement
    for key in state.adapters.params:
        assert np.array_equal(state.adapters.params[key].w1, loaded.adapters.params[key].w1)
        assert np.array_equal(state.adapters.params[key].w2, loaded.adapters.params[key].w2)
    x = np.zeros(3)
    c = np.zeros(4)
    assert np.array_equal(backbone_forward(state, x, 0.5, c), backbone_forward(loaded, x, 0.5, c))
