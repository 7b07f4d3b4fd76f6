"""Adapter injection, identity/merge behavior, and parameter accounting."""

import numpy as np
import pytest

from seglora.backbone import DecoderConfig, EncoderConfig, PromptSet, build_model
from seglora.layers import Linear
from seglora.lora import (LoraConfig, LoraConfigError, LoraLinear, LoraStateError,
                          adapter_parameter_count, inject, load_adapters,
                          merge_adapters, save_adapters, trainable_fraction)
from seglora.numerics import Tensor


def expected_adapter_count(enc_cfg: EncoderConfig, dec_cfg: DecoderConfig,
                           targets: int = 4) -> int:
    encoder_attn = sum(enc_cfg.stage_depths)
    decoder_attn = 3 * dec_cfg.num_attention_blocks + 1  # self, t2i, i2t per block + final
    return targets * (encoder_attn + decoder_attn)


class TestInjection:
    def test_adapter_count_from_configs(self):
        model = build_model(seed=0)
        registry = inject(model, LoraConfig(rank=8), seed=0)
        assert len(registry) == expected_adapter_count(model.encoder_cfg,
                                                       model.decoder_cfg)
        assert len(registry) == 48

    def test_double_injection_rejected(self):
        model = build_model(seed=0)
        inject(model, LoraConfig(rank=8), seed=0)
        with pytest.raises(LoraStateError, match="already"):
            inject(model, LoraConfig(rank=8), seed=0)

    def test_encoder_only_leaves_decoder_untouched(self):
        model = build_model(seed=0)
        registry = inject(model, LoraConfig(rank=8, apply_to_decoder=False), seed=0)
        assert registry and all(k.startswith("encoder.") for k in registry)
        assert not any(isinstance(m, LoraLinear)
                       for n, m in model.decoder.named_modules())

    def test_decoder_only(self):
        model = build_model(seed=0)
        registry = inject(model, LoraConfig(rank=8, apply_to_encoder=False), seed=0)
        assert registry and all(k.startswith("decoder.") for k in registry)

    def test_no_placement_is_config_error(self):
        with pytest.raises(LoraConfigError):
            LoraConfig(rank=8, apply_to_encoder=False, apply_to_decoder=False)

    def test_alpha_defaults_to_twice_rank(self):
        assert LoraConfig(rank=16).alpha == 32.0
        assert LoraConfig(rank=16).scale == 2.0
        assert LoraConfig(rank=16, alpha=16.0).scale == 1.0

    def test_everything_frozen_but_adapters(self):
        model = build_model(seed=0)
        registry = inject(model, LoraConfig(rank=8), seed=0)
        adapters = {id(t) for ad in registry.values() for t in (ad.A, ad.B)}
        for name, p in model.named_parameters():
            if id(p) in adapters:
                assert p.requires_grad, name
            else:
                assert not p.requires_grad, name
        # prompt encoder is frozen in particular
        assert all(not p.requires_grad for _, p in model.prompt_encoder.named_parameters())


class TestForwardIdentity:
    def test_zero_init_is_bitwise_identity(self):
        img = np.random.default_rng(0).normal(size=(3, 64, 64)).astype(np.float32)
        prompts = PromptSet(positive_points=((8.0, 8.0),))
        base = build_model(seed=3)
        before = base(Tensor(img), prompts).data.copy()
        inject(base, LoraConfig(rank=16), seed=5)
        after = base(Tensor(img), prompts).data
        assert np.array_equal(before, after)

    def test_full_rank_matches_dense_delta(self):
        rng = np.random.default_rng(1)
        base = Linear(4, 4, rng).astype(np.float64)
        adapter = LoraLinear(base, rank=4, alpha=8.0, rng=rng).astype(np.float64)
        adapter.A.data = rng.normal(size=(4, 4))
        adapter.B.data = rng.normal(size=(4, 4))
        x = rng.normal(size=(10, 4))
        dense = (base.weight.data + adapter.delta_weight()) @ x.T
        got = adapter(Tensor(x)).data.T - base.bias.data[:, None]
        assert np.abs(got - dense).max() < 1e-12

    def test_scale_doubling_doubles_delta(self):
        rng = np.random.default_rng(2)
        base = Linear(6, 6, rng)
        x = Tensor(rng.normal(size=(5, 6)).astype(np.float32))
        a2 = LoraLinear(base, rank=3, alpha=6.0, rng=np.random.default_rng(9))
        a4 = LoraLinear(base, rank=3, alpha=12.0, rng=np.random.default_rng(9))
        a2.B.data = rng.normal(size=a2.B.data.shape).astype(np.float32)
        a4.B.data = a2.B.data.copy()
        # scale is a power-of-two multiple, so the weight delta doubles bitwise
        assert np.array_equal(2.0 * a2.delta_weight(), a4.delta_weight())
        base_out = base(x).data.astype(np.float64)
        d2 = a2(x).data.astype(np.float64) - base_out
        d4 = a4(x).data.astype(np.float64) - base_out
        assert np.abs(2.0 * d2 - d4).max() < 1e-6


class TestMerge:
    def test_zero_delta_merge_keeps_weight(self):
        rng = np.random.default_rng(3)
        base = Linear(5, 7, rng)
        w_before = base.weight.data.copy()
        LoraLinear(base, rank=2, alpha=4.0, rng=rng).merge()
        assert np.array_equal(base.weight.data, w_before)

    @pytest.mark.parametrize("rank", [8, 16, 32, 64])
    def test_merged_matches_unmerged_100_inputs(self, rank):
        # Checked in 64-bit, same policy as the gradient checks: precision
        # noise stays at ~1e-15, so 1e-6 headroom is purely algorithmic.
        rng = np.random.default_rng(rank)
        base = Linear(64, 64, rng).astype(np.float64)
        adapter = LoraLinear(base, rank=rank, alpha=2.0 * rank, rng=rng).astype(np.float64)
        adapter.B.data = rng.normal(0, 0.02, size=adapter.B.data.shape)
        xs = rng.normal(size=(100, 64))
        unmerged = adapter(Tensor(xs)).data.copy()
        adapter.merge()
        merged = base(Tensor(xs)).data
        assert np.abs(merged - unmerged).max() < 1e-6

    def test_merge_twice_rejected(self):
        rng = np.random.default_rng(4)
        adapter = LoraLinear(Linear(4, 4, rng), rank=2, alpha=4.0, rng=rng)
        adapter.merge()
        with pytest.raises(LoraStateError, match="merged"):
            adapter.merge()

    def test_model_merge_detaches_and_allows_reinjection(self):
        img = np.random.default_rng(5).normal(size=(3, 64, 64)).astype(np.float32)
        model = build_model(seed=6)
        registry = inject(model, LoraConfig(rank=8), seed=7)
        rng = np.random.default_rng(8)
        for ad in registry.values():
            ad.B.data = rng.normal(0, 0.01, size=ad.B.data.shape).astype(np.float32)
        adapted = model(Tensor(img)).data.copy()
        n = merge_adapters(model)
        assert n == len(registry)
        assert not any(isinstance(m, LoraLinear) for _, m in model.named_modules())
        merged_out = model(Tensor(img)).data
        # float32 end-to-end; logit magnitudes are O(10)
        assert np.abs(merged_out - adapted).max() < 2e-4

        fresh = inject(model, LoraConfig(rank=8), seed=9)  # resume training
        assert len(fresh) == len(registry)
        assert np.array_equal(model(Tensor(img)).data, merged_out)

    def test_merge_without_adapters_rejected(self):
        with pytest.raises(LoraStateError):
            merge_adapters(build_model(seed=0))


class TestGradientIsolation:
    def test_only_adapters_receive_grads(self):
        from seglora import numerics as nm
        from seglora.losses import composite_loss

        model = build_model(seed=10)
        registry = inject(model, LoraConfig(rank=8), seed=11)
        img = np.random.default_rng(12).normal(size=(3, 64, 64)).astype(np.float32)
        target = (np.random.default_rng(13).random((64, 64)) > 0.8).astype(np.float32)
        logits = model(Tensor(img))
        probs = nm.sigmoid(nm.reshape(logits, (64, 64)))
        loss, _ = composite_loss(probs, Tensor(target))
        loss.backward()
        adapters = {id(t) for ad in registry.values() for t in (ad.A, ad.B)}
        for name, p in model.named_parameters():
            if id(p) in adapters:
                assert p.grad is not None, name
            else:
                assert p.grad is None, name


class TestParameterAccounting:
    def test_fraction_below_five_percent_and_monotone(self):
        fractions = {}
        for rank in (8, 16, 32, 64):
            model = build_model(seed=0)
            inject(model, LoraConfig(rank=rank), seed=0)
            fractions[rank] = trainable_fraction(model)
        assert fractions[8] < 0.05 and fractions[16] < 0.05
        assert fractions[8] < fractions[16] < fractions[32] < fractions[64]
        # adapter parameters scale linearly in rank against a fixed base
        assert abs(fractions[64] / fractions[8] - 8.0) < 0.08

    def test_no_adapters_all_frozen_gives_zero(self):
        model = build_model(seed=0).freeze()
        assert trainable_fraction(model) == 0.0

    def test_adapter_parameter_count_formula(self):
        model = build_model(seed=0)
        registry = inject(model, LoraConfig(rank=8), seed=0)
        expected = sum(8 * (ad.base.d_in + ad.base.d_out) for ad in registry.values())
        assert adapter_parameter_count(model) == expected


class TestAdapterCheckpoints:
    def test_roundtrip(self, tmp_path):
        model = build_model(seed=20)
        cfg = LoraConfig(rank=8, apply_to_encoder=False)
        registry = inject(model, cfg, seed=21)
        rng = np.random.default_rng(22)
        for ad in registry.values():
            ad.B.data = rng.normal(size=ad.B.data.shape).astype(np.float32)
        path = tmp_path / "adapters.sl2l"
        save_adapters(path, model, cfg)

        fresh = build_model(seed=20)
        restored = load_adapters(fresh, path)
        assert set(restored) == set(registry)
        for key in registry:
            assert np.array_equal(registry[key].A.data, restored[key].A.data)
            assert np.array_equal(registry[key].B.data, restored[key].B.data)
        assert restored[next(iter(restored))].rank == 8

    def test_save_without_adapters_rejected(self, tmp_path):
        with pytest.raises(LoraStateError):
            save_adapters(tmp_path / "a.sl2l", build_model(seed=0), LoraConfig(rank=8))
