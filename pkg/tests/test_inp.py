import itertools

import numpy as np
import pytest

from inpforge import nn
from inpforge import tensor as T
from inpforge.config import ModelConfig
from inpforge.inp import (
    INPFormer, bottleneck, coherence_loss, decode, decoder_layer, extract_inps, init_decoder_layer,
    init_params, inp_guided_attention,
)
from inpforge.errors import ConfigError
from inpforge.tensor import Tensor

from conftest import tiny_config


def _extractor_store(rng, c, m, identity=False, zero_ffn=False):
    store = nn.ParamStore()
    store.add("inp.tokens", rng.standard_normal((m, c)))
    for name in ("wq", "wk", "wv"):
        store.add(f"extractor.{name}", np.eye(c) if identity else nn.xavier(rng, c, c))
    nn.init_ln(store.scope("extractor.ln"), c)
    nn.init_ln(store.scope("extractor.lnk"), c)
    nn.init_ffn(store.scope("extractor.ffn"), rng, c, 4 * c, zero_out=zero_ffn)
    return store


def test_extractor_shapes_default(rng):
    cfg = ModelConfig()
    p = init_params(cfg)
    inps = extract_inps(Tensor(rng.standard_normal((64, 64))), p["inp.tokens"], p)
    assert inps.prototypes.shape == (6, 64)
    assert inps.attention_over_patches.shape == (6, 64)
    np.testing.assert_allclose(inps.attention_over_patches.data.sum(-1), 1.0, atol=1e-6)


def test_extractor_identical_patches_give_value_plus_token(rng):
    c, m = 8, 3
    store = _extractor_store(rng, c, m, identity=True, zero_ffn=True)
    v = rng.standard_normal(c)
    fused = Tensor(np.tile(v, (10, 1)))
    inps = extract_inps(fused, store["inp.tokens"], store)
    # FFN output is bias-only (zero), so P = T' = v + t_m
    np.testing.assert_allclose(inps.prototypes.data, v + store["inp.tokens"].data, rtol=1e-5, atol=1e-6)


def test_extractor_warns_when_more_prototypes_than_patches(rng):
    store = _extractor_store(rng, 4, 5)
    with pytest.warns(UserWarning, match="prototypes"):
        extract_inps(Tensor(rng.standard_normal((3, 4))), store["inp.tokens"], store)


def test_prototypes_are_dynamic_tokens_shared(rng):
    cfg = tiny_config()
    model = INPFormer(cfg)
    imgs = rng.uniform(size=(2, 16, 16, 1)).astype(np.float32)
    enc = model.encode(imgs)
    fwd = model.forward(enc)
    p = fwd.inps.prototypes.data
    assert p.shape == (2, 3, 16)
    assert not np.allclose(p[0], p[1])
    assert fwd.inps.seed_tokens is model.params["inp.tokens"]


def test_coherence_loss_examples(rng):
    f = Tensor(rng.standard_normal((5, 4)))
    protos = Tensor(np.vstack([f.data, rng.standard_normal((2, 4))]))
    loss, _ = coherence_loss(f, protos)
    assert loss.item() == pytest.approx(0.0, abs=1e-6)
    loss, dmap = coherence_loss(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[1.0, 0.0]]))
    np.testing.assert_allclose(dmap.d.data, [0.0, 1.0])
    assert loss.item() == pytest.approx(0.5)


def test_coherence_loss_matches_double_loop(rng, f64):
    f, p = rng.standard_normal((10, 6)), rng.standard_normal((3, 6))
    ref = []
    for i in range(10):
        best = min(1 - f[i] @ p[m] / (np.linalg.norm(f[i]) * np.linalg.norm(p[m])) for m in range(3))
        ref.append(best)
    loss, dmap = coherence_loss(Tensor(f), Tensor(p), grid=None)
    np.testing.assert_allclose(dmap.d.data, ref, rtol=1e-12)
    assert loss.item() == pytest.approx(np.mean(ref), rel=1e-12)
    assert ((dmap.d.data >= 0) & (dmap.d.data <= 2)).all()


def test_coherence_loss_permutation_invariant(rng):
    f, p = rng.standard_normal((9, 5)), rng.standard_normal((4, 5))
    ref = coherence_loss(Tensor(f), Tensor(p))[0].item()
    for perm in itertools.permutations(range(4)):
        assert coherence_loss(Tensor(f), Tensor(p[list(perm)]))[0].item() == ref


def test_coherence_gradient_reaches_winner_only():
    f = Tensor([[1.0, 0.1]])
    p = Tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], requires_grad=True)  # rows 0 and 2 tie
    loss, _ = coherence_loss(f, p)
    loss.backward()
    assert np.abs(p.grad[0]).sum() > 0
    assert not p.grad[1].any() and not p.grad[2].any()


def test_spatial_view_is_raster_reshape(rng):
    _, dmap = coherence_loss(Tensor(rng.standard_normal((16, 4))), Tensor(rng.standard_normal((2, 4))))
    np.testing.assert_array_equal(dmap.spatial, dmap.d.data.reshape(4, 4))


def test_bottleneck_examples(rng):
    store = nn.ParamStore()
    nn.init_ffn(store.scope("bottleneck.ffn"), rng, 8, 32, zero_out=True)
    nn.init_ln(store.scope("bottleneck.ln"), 8)
    groups = [Tensor(rng.standard_normal((5, 8))) for _ in range(2)]
    out = bottleneck(groups, store, skip=False)
    assert out.shape == (5, 8)
    assert not out.data.any()
    np.testing.assert_allclose(bottleneck(groups, store, skip=True).data, groups[0].data + groups[1].data)


def _decoder_store(rng, c, zero_ffn=False):
    store = nn.ParamStore()
    init_decoder_layer(store.scope("d"), rng, c)
    if zero_ffn:
        store["d.ffn.w2"].data[...] = 0
    return store


def test_relu_attention_kill_case(rng):
    store = _decoder_store(rng, 4)
    f = Tensor(np.ones((3, 4)))
    protos = Tensor(-np.ones((2, 4)))
    for name in ("wq", "wk", "wv"):
        store[f"d.{name}"].data = np.eye(4)
    out, attn = inp_guided_attention(f, protos, store.scope("d"), return_attention=True)
    assert not attn.data.any() and not out.data.any()


def test_attention_nonnegative_every_layer(rng):
    cfg = tiny_config()
    model = INPFormer(cfg)
    for name in ("wq", "wk"):
        for i in range(cfg.decoder_depth):
            model.params[f"decoder{i}.{name}"].data = nn.xavier(rng, 16, 16, gain=2.0)
    log = []
    model.forward(model.encode(rng.uniform(size=(2, 16, 16, 1)).astype(np.float32)), attention_log=log)
    assert len(log) == cfg.decoder_depth
    assert all((a.data >= 0).all() for a in log)
    assert any((a.data == 0).any() for a in log)


def test_decoder_zero_ffn_returns_attention_output(rng):
    store = _decoder_store(rng, 6, zero_ffn=True)
    f, p = Tensor(rng.standard_normal((4, 6))), Tensor(rng.standard_normal((3, 6)))
    out = decoder_layer(f, p, store.scope("d"))
    kv = nn.ln(p, store.scope("d.lnp"))
    f1 = inp_guided_attention(nn.ln(f, store.scope("d.ln1")), kv, store.scope("d"))
    np.testing.assert_array_equal(out.data, f1.data)


def test_decoder_has_no_first_residual(rng):
    """Zeroed attention: output is FFN(ln(0)) and carries no copy of f_prev."""
    store = _decoder_store(rng, 6)
    for name in ("wq", "wk", "wv"):
        store[f"d.{name}"].data[...] = 0
    p = Tensor(rng.standard_normal((3, 6)))
    a = decoder_layer(Tensor(rng.standard_normal((4, 6))), p, store.scope("d")).data
    b = decoder_layer(Tensor(rng.standard_normal((4, 6)) * 10), p, store.scope("d")).data
    np.testing.assert_array_equal(a, b)
    ffn_zero = nn.ffn(nn.ln(Tensor(np.zeros((1, 6))), store.scope("d.ln2")), store.scope("d.ffn")).data
    np.testing.assert_allclose(a, np.repeat(ffn_zero, 4, axis=0), rtol=1e-6)
    # a standard block, by contrast, passes f_prev through its first residual
    blk = nn.ParamStore()
    nn.init_block(blk.scope("b"), rng, 6)
    blk["b.attn.wo"].data[...] = 0
    x1, x2 = Tensor(rng.standard_normal((4, 6))), Tensor(rng.standard_normal((4, 6)))
    assert not np.allclose(nn.transformer_block(x1, blk.scope("b"), 2).data,
                           nn.transformer_block(x2, blk.scope("b"), 2).data)


def test_decode_groups_recompute_exactly(rng):
    cfg = ModelConfig()
    model = INPFormer(cfg)
    enc = model.encode(rng.uniform(size=(64, 64, 1)).astype(np.float32))
    with T.no_grad():
        fwd = model.forward(enc)
    assert len(fwd.decoder_groups) == len(enc.groups) == 2
    lo = [x.data for x in fwd.layer_outputs]
    np.testing.assert_array_equal(fwd.decoder_groups[0].data, lo[0] + lo[1])
    np.testing.assert_array_equal(fwd.decoder_groups[1].data, lo[2] + lo[3])


def test_decode_group_count_mismatch():
    cfg = tiny_config()
    bad = object.__new__(ModelConfig)
    object.__setattr__(bad, "__dict__", dict(cfg.__dict__, decoder_group_ranges=((0, 1),)))
    with pytest.raises(ConfigError):
        decode(Tensor(np.ones((16, 16))), Tensor(np.ones((3, 16))), init_params(cfg), bad)


def test_full_forward_deterministic(rng):
    cfg = tiny_config()
    img = rng.uniform(size=(2, 16, 16, 1)).astype(np.float32)

    def run():
        m = INPFormer(cfg)
        with T.no_grad():
            f = m.forward(m.encode(img))
        return b"".join(g.data.tobytes() for g in f.decoder_groups) + f.inps.prototypes.data.tobytes()

    assert run() == run()


def test_baseline_without_inps_uses_standard_blocks(rng):
    cfg = tiny_config(use_inp=False)
    model = INPFormer(cfg)
    assert "inp.tokens" not in model.params and "decoder0.attn.wq" in model.params
    with T.no_grad():
        fwd = model.forward(model.encode(rng.uniform(size=(16, 16, 1)).astype(np.float32)))
    assert fwd.inps is None and fwd.decoder_groups[0].shape == (16, 16)


def test_layer_supervision_pairs():
    cfg = ModelConfig(supervision="layer")
    assert cfg.layer_pairs() == [(4, 0), (5, 1), (6, 2), (7, 3)]
