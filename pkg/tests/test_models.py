import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from actnet import tensor as T
from actnet.models import (
    ModelConfig,
    ModelParams,
    _bottleneck,
    auxiliary_forward,
    embed,
    forward,
    init_params,
    primary_forward,
    spatial_attention,
    temporal_attention,
)

CFG = ModelConfig()


def clip_batch(rng, B, frames, cfg=CFG):
    return T.tensor(rng.standard_normal((B, cfg.channels, frames, cfg.spatial_size, cfg.spatial_size)))


def independent_vit_count(cfg: ModelConfig) -> int:
    """Parameter count of the transformer tallied layer by layer."""
    D = cfg.vit_embed
    tokens = (cfg.spatial_size // cfg.vit_patch) ** 2
    total = cfg.channels * cfg.vit_patch**2 * D + D  # patch projection
    total += tokens * D + cfg.clip_frames_auxiliary * D  # positional + temporal embeddings
    for _layer in range(cfg.vit_layers):
        for _attn in ("temporal", "spatial"):
            total += D + D  # layer norm
            total += D * D * 3 + D * 3  # q, k, v
            total += D * D + D  # output projection
        total += D + D
        total += D * cfg.vit_mlp_hidden + cfg.vit_mlp_hidden
        total += cfg.vit_mlp_hidden * D + D
    total += D + D  # final norm
    total += D * cfg.num_classes + cfg.num_classes
    total += D * cfg.embed_dim_out + cfg.embed_dim_out
    return total


# ---------------------------------------------------------------- init


@pytest.mark.parametrize("arch", ["Z", "A"])
def test_init_is_deterministic(arch):
    a, b = init_params(CFG, arch, 7), init_params(CFG, arch, 7)
    assert a.params.keys() == b.params.keys()
    for k in a.params:
        assert a[k].data.tobytes() == b[k].data.tobytes()
    c = init_params(CFG, arch, 8)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a.params)


def test_init_conventions():
    for arch in ("Z", "A"):
        p = init_params(CFG, arch, 0)
        for name, t in p:
            assert t.requires_grad
            if name.endswith(".b"):
                assert not t.data.any(), name
            if name.endswith("ln.g") or name == "norm.g":
                assert np.all(t.data == 1.0), name


def test_vit_param_count_matches_independent_tally():
    p = init_params(CFG, "A", 0)
    assert p.num_parameters() == independent_vit_count(CFG)
    small = ModelConfig(vit_embed=12, vit_heads=3, vit_layers=3, vit_mlp_hidden=20, vit_patch=8, num_classes=5)
    assert init_params(small, "A", 0).num_parameters() == independent_vit_count(small)


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        init_params(ModelConfig(spatial_size=18, vit_patch=4), "A", 0)
    with pytest.raises(ValueError):
        init_params(ModelConfig(vit_embed=30, vit_heads=4), "A", 0)
    with pytest.raises(ValueError):
        init_params(CFG, "B", 0)


# ---------------------------------------------------------------- primary


def test_primary_zero_input_gives_flat_logits():
    p = init_params(CFG, "Z", 0)
    logits, _ = primary_forward(p, T.tensor(np.zeros((2, 3, 4, 16, 16))))
    np.testing.assert_array_equal(logits.data, np.zeros_like(logits.data))


def test_primary_identical_clips_identical_rows():
    p = init_params(CFG, "Z", 1)
    x = np.random.default_rng(0).standard_normal((1, 3, 4, 16, 16))
    logits, emb = primary_forward(p, T.tensor(np.concatenate([x, x])))
    np.testing.assert_array_equal(logits.data[0], logits.data[1])
    np.testing.assert_array_equal(emb.data[0], emb.data[1])


def test_primary_rejects_wrong_frames():
    p = init_params(CFG, "Z", 0)
    with pytest.raises(T.ShapeError):
        primary_forward(p, clip_batch(np.random.default_rng(0), 1, 8))


def test_residual_block_hand_arithmetic(f64):
    """One bottleneck block, 1 channel, 2x4x4 input, hand-set kernels."""
    x = np.arange(32, dtype=float).reshape(1, 1, 2, 4, 4) / 10 - 1.0
    w = {
        "blk.a.w": np.full((1, 1, 1, 1, 1), 2.0), "blk.a.b": np.array([0.5]),
        "blk.b.w": np.zeros((1, 1, 1, 3, 3)), "blk.b.b": np.array([-0.25]),
        "blk.c.w": np.full((1, 1, 1, 1, 1), -1.0), "blk.c.b": np.array([0.1]),
    }
    w["blk.b.w"][0, 0, 0, 1, 1] = 1.0  # centre tap
    w["blk.b.w"][0, 0, 0, 1, 2] = 0.5  # right neighbour
    P = ModelParams({k: T.Tensor(v, requires_grad=True) for k, v in w.items()}, 0, "Z", CFG)
    got = _bottleneck(T.Tensor(x), P, "blk", stride=1, kt=1).data
    a = np.maximum(2.0 * x + 0.5, 0)
    right = np.zeros_like(a)
    right[..., :-1] = a[..., 1:]  # zero padding at the right edge
    b = np.maximum(a + 0.5 * right - 0.25, 0)
    want = np.maximum(-1.0 * b + 0.1 + x, 0)
    np.testing.assert_allclose(got, want, atol=1e-12)


# ---------------------------------------------------------------- auxiliary


def test_auxiliary_batch_permutation_equivariant():
    p = init_params(CFG, "A", 2)
    x = clip_batch(np.random.default_rng(1), 4, 8)
    perm = np.array([2, 0, 3, 1])
    logits, _ = auxiliary_forward(p, x)
    logits_p, _ = auxiliary_forward(p, T.Tensor(x.data[perm]))
    np.testing.assert_allclose(logits_p.data, logits.data[perm], rtol=1e-5, atol=1e-6)


def test_single_token_attention_is_value_projection(f64):
    cfg = ModelConfig(spatial_size=4, vit_patch=4, clip_frames_auxiliary=1)
    p = init_params(cfg, "A", 0)
    x = T.Tensor(np.random.default_rng(0).standard_normal((2, 1, 1, cfg.vit_embed)))
    out = spatial_attention(x, p, "block0.spatial", cfg.vit_heads, cfg.ln_eps).data
    h = T.layer_norm(x, p["block0.spatial.ln.g"], p["block0.spatial.ln.b"], cfg.ln_eps).data
    qkv = h @ p["block0.spatial.qkv.w"].data + p["block0.spatial.qkv.b"].data
    v = qkv[..., 2 * cfg.vit_embed :]
    want = x.data + v @ p["block0.spatial.out.w"].data + p["block0.spatial.out.b"].data
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_two_token_attention_hand_arithmetic(f64):
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    k = np.array([[1.0, 0.0], [1.0, 1.0]])
    v = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = T.attention(T.Tensor(q), T.Tensor(k), T.Tensor(v)).data
    s = 1 / math.sqrt(2)
    # row 0 scores (s, s) -> equal weights; row 1 scores (0, s)
    w1 = math.exp(s) / (1 + math.exp(s))
    want = np.array([[2.0, 3.0], [(1 - w1) * 1 + w1 * 3, (1 - w1) * 2 + w1 * 4]])
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_divided_attention_locality(f64):
    """A perturbed token reaches only its own spatial column through temporal
    attention and only its own frame through spatial attention; joint
    attention over all tokens would reach everything."""
    cfg = ModelConfig(spatial_size=8, vit_patch=4, clip_frames_auxiliary=2)
    p = init_params(cfg, "A", 3)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 4, cfg.vit_embed))
    x2 = x.copy()
    x2[0, 0, 1] += 1.0  # frame 0, patch 1
    args = (p, "block0.temporal", cfg.vit_heads, cfg.ln_eps)
    d = np.abs(temporal_attention(T.Tensor(x2), *args).data - temporal_attention(T.Tensor(x), *args).data).sum(-1)[0]
    assert d[:, 1].min() > 0 and np.all(d[:, [0, 2, 3]] == 0)
    args = (p, "block0.spatial", cfg.vit_heads, cfg.ln_eps)
    d = np.abs(spatial_attention(T.Tensor(x2), *args).data - spatial_attention(T.Tensor(x), *args).data).sum(-1)[0]
    assert d[0].min() > 0 and np.all(d[1] == 0)

    def joint(z):
        flat = T.reshape(T.Tensor(z), (1, 1, 8, cfg.vit_embed))
        return spatial_attention(flat, p, "block0.spatial", cfg.vit_heads, cfg.ln_eps).data

    d = np.abs(joint(x2) - joint(x)).sum(-1)
    assert d.min() > 0


# ---------------------------------------------------------------- shared contracts


@pytest.mark.parametrize("arch", ["Z", "A"])
def test_embed_matches_forward_and_dimension(arch):
    p = init_params(CFG, arch, 4)
    frames = CFG.clip_frames_primary if arch == "Z" else CFG.clip_frames_auxiliary
    x = clip_batch(np.random.default_rng(2), 3, frames)
    _, emb = forward(p, x)
    e = embed(p, x)
    np.testing.assert_array_equal(e.data, emb.data)
    assert e.shape == (3, CFG.embed_dim_out)
    n = T.l2_normalize(e).data
    np.testing.assert_allclose(np.sum(n * n, -1), 1.0, atol=1e-6)


@pytest.mark.parametrize("arch", ["Z", "A"])
def test_eval_forward_bit_deterministic(arch):
    p = init_params(CFG, arch, 5)
    frames = CFG.clip_frames_primary if arch == "Z" else CFG.clip_frames_auxiliary
    x = clip_batch(np.random.default_rng(3), 2, frames)
    a, b = forward(p, x)[0].data, forward(p, x)[0].data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("arch", ["Z", "A"])
def test_every_parameter_receives_gradient(arch):
    p = init_params(CFG, arch, 6)
    frames = CFG.clip_frames_primary if arch == "Z" else CFG.clip_frames_auxiliary
    x = clip_batch(np.random.default_rng(4), 3, frames)
    T.new_tape()
    logits, emb = forward(p, x, train_mode=True, rng=np.random.default_rng(0))
    loss = T.add(T.mean(T.cross_entropy(logits, [0, 1, 2])), T.mean(T.mul(emb, emb)))
    loss.backward()
    for name, t in p:
        assert t.grad is not None and np.any(t.grad != 0), name


def test_train_mode_dropout_changes_primary_logits_only():
    p = init_params(CFG, "Z", 0)
    x = clip_batch(np.random.default_rng(5), 2, 4)
    eval_logits, eval_emb = primary_forward(p, x)
    tr_logits, tr_emb = primary_forward(p, x, train_mode=True, rng=np.random.default_rng(1))
    np.testing.assert_array_equal(eval_emb.data, tr_emb.data)
    assert not np.array_equal(eval_logits.data, tr_logits.data)


@given(
    st.integers(1, 3),
    st.sampled_from([(4, 8), (2, 4)]),
    st.sampled_from([(8, 4), (8, 8), (16, 4)]),
    st.sampled_from([(8, 2), (12, 3), (8, 1)]),
    st.integers(2, 6),
    st.integers(1, 2),
)
def test_shape_contract_over_configs(B, frames, spatial_patch, embed_heads, K, layers):
    cfg = ModelConfig(
        num_classes=K,
        clip_frames_primary=frames[0],
        clip_frames_auxiliary=frames[1],
        spatial_size=spatial_patch[0],
        vit_patch=spatial_patch[1],
        vit_embed=embed_heads[0],
        vit_heads=embed_heads[1],
        vit_layers=layers,
        resnet_widths=(4, 4, 8, 8),
        embed_dim_out=6,
    )
    rng = np.random.default_rng(B)
    for arch, f in (("Z", frames[0]), ("A", frames[1])):
        p = init_params(cfg, arch, 0)
        logits, emb = forward(p, clip_batch(rng, B, f, cfg))
        assert logits.shape == (B, K) and emb.shape == (B, 6)


def test_copy_is_independent():
    p = init_params(CFG, "Z", 0)
    q = p.copy()
    q["head.w"].data[...] = 0
    assert np.any(p["head.w"].data != 0)
    assert dataclasses.asdict(q.config) == dataclasses.asdict(p.config)
