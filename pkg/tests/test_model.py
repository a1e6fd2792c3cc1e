import math
from collections import OrderedDict

import numpy as np
import pytest

from htnet.checkpoint import (
    CheckpointFormatError,
    checkpoint_bytes,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from htnet.model import (
    ConfigError,
    HTNet,
    ModelConfig,
    attention_weights,
    block_aggregate,
    from_blocks,
    init_params,
    local_msa,
    parameter_shapes,
    patch_embed,
    to_blocks,
    transformer_layer,
)
from htnet.tensor import GeometryError, Tensor
from oracles import attention_loops, transformer_layer_loops

TINY = ModelConfig(dims=(8, 12, 16), heads=(2, 2, 2), head_dim=4, layers=(1, 1, 1), head_hidden=8)


def random_params(cfg, rng):
    return OrderedDict(
        (k, Tensor(rng.normal(size=s) * 0.3, requires_grad=True))
        for k, s in parameter_shapes(cfg).items()
    )


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.levels == 3 and cfg.grid == 4 and cfg.tokens_per_block == 49
        assert cfg.dims == (64, 128, 256) and cfg.layers == (2, 2, 8)

    def test_geometry_progression(self):
        cfg = ModelConfig()
        assert [cfg.grid_at(l) for l in range(3)] == [4, 2, 1]
        assert [cfg.side_at(l) for l in range(3)] == [28, 14, 7]

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"bottom_block": 6},
            {"patch_size": 2},
            {"dims": (64, 64, 128)},
            {"heads": (3, 3)},
            {"head_dim": None},
            {"image_size": 56},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            ModelConfig(**kwargs)

    def test_derived_head_width(self):
        cfg = ModelConfig(dims=(6, 12, 24), heads=(3, 3, 3), head_dim=None)
        assert [cfg.head_width(l) for l in range(3)] == [2, 4, 8]

    def test_dict_round_trip(self):
        assert ModelConfig.from_dict(TINY.to_dict()) == TINY
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"depth": 3})

    def test_two_level_model(self):
        cfg = ModelConfig(image_size=14, dims=(4, 8), heads=(1, 1), head_dim=4, layers=(1, 1), head_hidden=4)
        assert HTNet(cfg)(np.zeros((14, 14, 3))).shape == (1, 3)


class TestPatchEmbed:
    def test_counts_patch_one(self, rng):
        cfg = ModelConfig()
        tokens = patch_embed(Tensor(rng.normal(size=(2, 28, 28, 3))), cfg, init_params(cfg))
        assert tokens.shape == (2, 16, 49, 64)

    def test_counts_patch_seven(self, rng):
        cfg = ModelConfig(patch_size=7)
        tokens = patch_embed(Tensor(rng.normal(size=(1, 28, 28, 3))), cfg, init_params(cfg))
        assert tokens.shape == (1, 16, 1, 64)

    def test_zero_input_gives_positions(self, rng):
        params = init_params(TINY)
        params["patch.bias"] = Tensor(np.zeros(8))
        zero = patch_embed(Tensor(np.zeros((1, 28, 28, 3))), TINY, params)
        assert not zero.data.any()
        params["level0.pos"] = Tensor(rng.normal(size=(49, 8)))
        out = patch_embed(Tensor(np.zeros((1, 28, 28, 3))), TINY, params)
        np.testing.assert_array_equal(out.data, np.broadcast_to(params["level0.pos"].data, (1, 16, 49, 8)))

    def test_block_layout(self, rng):
        img = rng.normal(size=(1, 28, 28, 3))
        cfg = ModelConfig(dims=(3, 6, 9), heads=(1, 1, 1), head_dim=3, layers=(0, 0, 0))
        params = init_params(cfg)
        params["patch.weight"] = Tensor(np.eye(3))
        tokens = patch_embed(Tensor(img), cfg, params).data
        # block 5 is row 1, column 1; token 10 is row 1, column 3 within it
        np.testing.assert_array_equal(tokens[0, 5, 10], img[0, 8, 10])

    def test_blocks_round_trip(self, rng):
        x = rng.normal(size=(2, 14, 14, 5))
        np.testing.assert_array_equal(from_blocks(to_blocks(Tensor(x), 2), 2).data, x)

    def test_wrong_size(self):
        with pytest.raises(ConfigError):
            patch_embed(Tensor(np.zeros((1, 27, 27, 3))), TINY, init_params(TINY))


class TestAttention:
    def params(self, rng, d, heads, head_dim):
        inner = heads * head_dim
        return {
            "a.wq": Tensor(rng.normal(size=(d, inner))),
            "a.wk": Tensor(rng.normal(size=(d, inner))),
            "a.wv": Tensor(rng.normal(size=(d, inner))),
            "a.wo": Tensor(rng.normal(size=(inner, d))),
        }

    @pytest.mark.parametrize("heads,head_dim", [(1, 6), (2, 3), (3, 4)])
    def test_matches_loop_oracle(self, rng, heads, head_dim):
        x = rng.normal(size=(4, 6))
        p = self.params(rng, 6, heads, head_dim)
        out = local_msa(Tensor(x), heads, head_dim, p, "a").data
        ref = attention_loops(x, *(p[f"a.w{k}"].data for k in "qkvo"), heads, head_dim)
        np.testing.assert_allclose(out, ref, atol=1e-10)

    def test_single_token(self, rng):
        x = rng.normal(size=(1, 5))
        p = self.params(rng, 5, 1, 5)
        out = local_msa(Tensor(x), 1, 5, p, "a").data
        np.testing.assert_allclose(out, x @ p["a.wv"].data @ p["a.wo"].data, atol=1e-12)

    def test_identical_tokens(self, rng):
        x = np.tile(rng.normal(size=(1, 6)), (5, 1))
        p = self.params(rng, 6, 2, 3)
        q = Tensor(x @ p["a.wq"].data)
        k = Tensor(x @ p["a.wk"].data)
        np.testing.assert_allclose(attention_weights(q, k).data, np.full((5, 5), 0.2), atol=1e-15)
        out = local_msa(Tensor(x), 2, 3, p, "a").data
        np.testing.assert_allclose(out, np.tile(out[:1], (5, 1)), atol=1e-12)

    def test_blocks_are_independent(self, rng):
        x = rng.normal(size=(3, 4, 6))
        p = self.params(rng, 6, 2, 3)
        batched = local_msa(Tensor(x), 2, 3, p, "a").data
        for b in range(3):
            np.testing.assert_allclose(batched[b], local_msa(Tensor(x[b]), 2, 3, p, "a").data, atol=1e-14)

    def test_rows_sum_to_one_at_every_level(self, rng):
        model = HTNet(TINY, random_params(TINY, rng))
        x = Tensor(rng.normal(size=(2, 28, 28, 3)))
        cfg = model.cfg
        for lvl in range(cfg.levels):
            tokens = model.level_tokens(x, lvl)
            if cfg.layers[lvl]:
                p = f"level{lvl}.layer0.attn"
                hd, h = cfg.head_width(lvl), cfg.heads[lvl]
                q = (tokens @ model.params[f"{p}.wq"]).reshape(*tokens.shape[:-1], h, hd).swapaxes(-2, -3)
                k = (tokens @ model.params[f"{p}.wk"]).reshape(*tokens.shape[:-1], h, hd).swapaxes(-2, -3)
                rows = attention_weights(q, k).data.sum(axis=-1)
                assert np.abs(rows - 1.0).max() < 1e-12


class TestTransformerLayer:
    def test_matches_composed_oracle(self, rng):
        cfg = ModelConfig(dims=(6, 8, 10), heads=(2, 2, 2), head_dim=3, layers=(1, 1, 1), ffn_expansion=2)
        params = random_params(cfg, rng)
        x = rng.normal(size=(4, 6))
        out = transformer_layer(Tensor(x), cfg, params, 0, 0).data
        p = {k.split(".", 2)[2]: v.data for k, v in params.items() if k.startswith("level0.layer0.")}
        np.testing.assert_allclose(out, transformer_layer_loops(x, p, 2, 3, cfg.ln_eps), atol=1e-10)

    def test_zero_weights_pass_through(self, rng):
        params = OrderedDict((k, Tensor(np.zeros(s))) for k, s in parameter_shapes(TINY).items())
        x = rng.normal(size=(2, 16, 49, 8))
        np.testing.assert_array_equal(transformer_layer(Tensor(x), TINY, params, 0, 0).data, x)

    @pytest.mark.parametrize("level", [0, 1, 2])
    def test_shape_preserved(self, rng, level):
        params = random_params(TINY, rng)
        d = TINY.dims[level]
        x = Tensor(rng.normal(size=(2, TINY.grid_at(level) ** 2, 49, d)))
        assert transformer_layer(x, TINY, params, level, 0).shape == x.shape


class TestAggregation:
    def test_geometry(self, rng):
        params = random_params(TINY, rng)
        out = block_aggregate(Tensor(rng.normal(size=(2, 28, 28, 8))), TINY, params, 0)
        assert out.shape == (2, 14, 14, 12)
        out = block_aggregate(out, TINY, params, 1)
        assert out.shape == (2, 7, 7, 16)

    def test_default_grids(self, rng):
        model = HTNet(ModelConfig(), seed=0)
        x = rng.normal(size=(1, 28, 28, 3))
        grids = [model.level_tokens(x, l).shape for l in range(3)]
        assert grids == [(1, 16, 49, 64), (1, 4, 49, 128), (1, 1, 49, 256)]

    def test_odd_map_rejected(self, rng):
        with pytest.raises(GeometryError):
            block_aggregate(Tensor(rng.normal(size=(1, 7, 7, 8))), TINY, random_params(TINY, rng), 0)


class TestForward:
    def test_output_shape(self, rng):
        model = HTNet(TINY, seed=3)
        assert model(rng.normal(size=(28, 28, 3))).shape == (1, 3)
        assert model(rng.normal(size=(5, 28, 28, 3))).shape == (5, 3)
        assert model.predict(rng.normal(size=(5, 28, 28, 3))).shape == (5,)

    def test_deterministic(self, rng):
        x = rng.normal(size=(2, 28, 28, 3))
        a = HTNet(TINY, seed=11)(x).data
        b = HTNet(TINY, seed=11)(x).data
        assert a.tobytes() == b.tobytes()

    def test_batch_consistent(self, rng):
        model = HTNet(TINY, seed=2)
        x = rng.normal(size=(3, 28, 28, 3))
        full = model(x).data
        for i in range(3):
            np.testing.assert_allclose(model(x[i]).data[0], full[i], atol=1e-12)

    def test_locality_before_first_aggregation(self, rng):
        model = HTNet(ModelConfig(), random_params(ModelConfig(), rng))
        for _ in range(5):
            x = rng.normal(size=(1, 28, 28, 3))
            block = int(rng.integers(16))
            r, c = divmod(block, 4)
            y = x.copy()
            y[0, 7 * r : 7 * r + 7, 7 * c : 7 * c + 7] += rng.normal(size=(7, 7, 3))
            a, b = model.level_tokens(x, 0).data, model.level_tokens(y, 0).data
            others = [i for i in range(16) if i != block]
            assert np.abs(a[0, others] - b[0, others]).max() == 0.0
            assert np.abs(a[0, block] - b[0, block]).max() > 0.0

    def test_parameter_sharing(self, rng):
        params = random_params(TINY, rng)
        tokens = np.tile(rng.normal(size=(1, 1, 49, 8)), (1, 16, 1, 1))
        params["level0.layer0.attn.wv"] = Tensor(params["level0.layer0.attn.wv"].data + 0.5)
        out = transformer_layer(Tensor(tokens), TINY, params, 0, 0).data
        for b in range(1, 16):
            np.testing.assert_array_equal(out[0, b], out[0, 0])

    def test_params_validated(self):
        params = init_params(TINY)
        params.popitem()
        with pytest.raises(ConfigError):
            HTNet(TINY, params)

    def test_init_scheme(self):
        params = init_params(ModelConfig(), seed=0)
        assert np.abs(params["patch.weight"].data).max() <= 1 / math.sqrt(3)
        assert np.abs(params["agg0.conv.weight"].data).max() <= 1 / math.sqrt(64 * 9)
        assert (params["level1.layer0.ln1.gamma"].data == 1).all()
        assert not params["level2.pos"].data.any()

    def test_parameter_count(self):
        assert HTNet(ModelConfig()).num_parameters() == 6_870_211


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        model = HTNet(TINY, random_params(TINY, rng))
        save_checkpoint(model, tmp_path / "m.htck")
        back = load_checkpoint(tmp_path / "m.htck")
        assert back.cfg == TINY
        assert list(back.params) == list(model.params)
        for k in model.params:
            assert back.params[k].data.tobytes() == model.params[k].data.tobytes()
        assert checkpoint_bytes(back) == checkpoint_bytes(model)

    def test_bad_magic(self):
        raw = bytearray(checkpoint_bytes(HTNet(TINY)))
        raw[:4] = b"NOPE"
        with pytest.raises(CheckpointFormatError) as info:
            parse_checkpoint(bytes(raw))
        assert info.value.offset == 0

    def test_truncated(self):
        raw = checkpoint_bytes(HTNet(TINY))
        with pytest.raises(CheckpointFormatError, match="truncated"):
            parse_checkpoint(raw[:-3])

    def test_trailing(self):
        with pytest.raises(CheckpointFormatError, match="trailing"):
            parse_checkpoint(checkpoint_bytes(HTNet(TINY)) + b"\0\0")

    def test_shape_mismatch(self):
        raw = checkpoint_bytes(HTNet(TINY))
        cfg_len = int.from_bytes(raw[8:12], "little")
        at = 12 + cfg_len + 4 + len(b"patch.weight") + 4
        bad = raw[:at] + (4).to_bytes(4, "little") + raw[at + 4 :]
        with pytest.raises(CheckpointFormatError, match="shape") as info:
            parse_checkpoint(bad)
        assert info.value.offset == at
