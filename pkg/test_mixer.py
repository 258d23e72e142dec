"""
RankMixer 基準區塊測試
"""
import numpy as np
import pytest
from pydantic import ValidationError

from models.param_models import LayerNormParams, MixerBlockParams, PerTokenFFNParams
from models.ugsep_models import MixerConfig
from services.errors import ConfigurationError, DimensionError
from services.mixer import (
    MixerBlock, init_mixer_block, mixer_block_forward, mixup, mixup_inverse, pffn, split_heads,
)
from services.numeric import GradPair, activation, check_gradient, layer_norm


def _cfg(T, D, H, d_hidden=4, **kwargs):
    return MixerConfig(T=T, D=D, H=H, d_hidden=d_hidden, **kwargs)


def test_split_heads_contiguous():
    cfg = _cfg(1, 4, 2)
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    assert np.array_equal(split_heads(x, cfg)[0], [[1, 2], [3, 4]])

    cfg = _cfg(3, 6, 3)
    x = np.arange(18.0).reshape(3, 6)
    assert np.array_equal(split_heads(x, cfg)[2, 1], x[2, 2:4])


def test_split_heads_single_head():
    x = np.arange(8.0).reshape(2, 4)
    assert np.array_equal(split_heads(x, _cfg(2, 4, 1)), x[:, None, :])


def test_mixup_rows():
    """測試 row h 串接所有 token 的第 h 個 head"""
    x = np.array([[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]])
    assert np.array_equal(mixup(x, _cfg(2, 4, 2)), [[1, 2, 5, 6], [3, 4, 7, 8]])


def test_mixup_single_token_preserves_entries():
    x = np.arange(6.0).reshape(1, 6)
    assert np.array_equal(mixup(x, _cfg(1, 6, 3)), x.reshape(3, 2))


def test_mixup_inverse_permutation():
    rng = np.random.default_rng(0)
    cfg = _cfg(4, 8, 4)
    y = rng.standard_normal((4, 8))
    assert np.array_equal(mixup(mixup_inverse(y, cfg), cfg), y)
    x = rng.standard_normal((3, 4, 8))
    assert np.array_equal(mixup_inverse(mixup(x, cfg), cfg), x)
    assert np.array_equal(np.sort(mixup(x, cfg).ravel()), np.sort(x.ravel()))


def test_mixup_shape_mismatch():
    with pytest.raises(DimensionError):
        mixup(np.ones((3, 4)), _cfg(2, 4, 2))


def test_config_rejects_non_dividing_heads():
    with pytest.raises(ValidationError):
        _cfg(3, 8, 3)


def test_pffn_zero_weights_returns_bias():
    """測試權重全零時每列輸出 b2"""
    ffn = PerTokenFFNParams(W1=np.zeros((2, 4, 3)), b1=np.zeros((2, 3)), W2=np.zeros((2, 3, 5)),
                            b2=np.full((2, 5), 0.25))
    out = pffn(np.random.default_rng(0).standard_normal((2, 4)), ffn)
    assert np.array_equal(out, np.full((2, 5), 0.25))


def test_pffn_single_token_is_mlp():
    rng = np.random.default_rng(1)
    block = init_mixer_block(_cfg(1, 4, 1, d_hidden=3), rng)
    ffn = block.ffn
    p = rng.standard_normal((1, 4))
    expected = activation(p[0] @ ffn.W1[0] + ffn.b1[0]) @ ffn.W2[0] + ffn.b2[0]
    assert np.allclose(pffn(p, ffn)[0], expected, atol=1e-12)


def test_pffn_uses_distinct_weights():
    """測試交換權重組後第 0 列不同，且只改第 t 組權重只影響第 t 列"""
    rng = np.random.default_rng(2)
    ffn = init_mixer_block(_cfg(2, 4, 2, d_hidden=3), rng).ffn
    p = rng.standard_normal((2, 4))
    out = pffn(p, ffn)
    swapped = ffn.model_copy(update={"W1": ffn.W1[::-1].copy(), "b1": ffn.b1[::-1].copy(),
                                     "W2": ffn.W2[::-1].copy(), "b2": ffn.b2[::-1].copy()})
    assert not np.array_equal(out[0], pffn(p, swapped)[0])

    w2 = ffn.W2.copy()
    w2[1] += 1.0
    perturbed = pffn(p, ffn.model_copy(update={"W2": w2}))
    assert np.array_equal(out[0], perturbed[0])
    assert not np.array_equal(out[1], perturbed[1])


def test_pffn_shape_mismatch():
    ffn = init_mixer_block(_cfg(2, 4, 2), np.random.default_rng(0)).ffn
    with pytest.raises(DimensionError):
        pffn(np.ones((3, 4)), ffn)


def test_block_requires_h_equals_t():
    cfg = _cfg(2, 4, 4)
    with pytest.raises(ConfigurationError):
        MixerBlock(cfg)


def test_block_zero_ffn_is_layer_norm_of_input():
    cfg = _cfg(4, 8, 4)
    params = init_mixer_block(cfg, np.random.default_rng(0))
    params = params.model_copy(update={"ffn": params.ffn.model_copy(update={
        "W1": np.zeros_like(params.ffn.W1), "W2": np.zeros_like(params.ffn.W2)})})
    x = np.random.default_rng(1).standard_normal((4, 8))
    out = mixer_block_forward(x, params, cfg).value
    assert np.array_equal(out, layer_norm(x, np.ones(8), np.zeros(8)))


def test_block_matches_straight_line_oracle():
    """測試固定種子下與逐列直線計算位元相同"""
    cfg = _cfg(4, 8, 4, d_hidden=16)
    block = MixerBlock(cfg, seed=7)
    p = block.params
    x = np.random.default_rng(7).standard_normal((4, 8))

    def row_ln(v, gamma, beta):
        n = v.shape[0]
        mean = 0.0
        for e in v:
            mean += e
        mean /= n
        var = 0.0
        for e in v - mean:
            var += e * e
        var /= n
        return gamma * ((v - mean) * (1.0 / np.sqrt(var + cfg.eps))) + beta

    def row_linear(v, w):
        out = np.zeros(w.shape[1])
        for t in range(v.shape[0]):
            out += v[t:t + 1] * w[t]
        return out

    expected = np.zeros_like(x)
    for h in range(4):
        row = np.concatenate([x[t, h * 2:(h + 1) * 2] for t in range(4)])
        row = row_ln(row, p.ln_mix.gamma, p.ln_mix.beta)
        hidden = activation(row_linear(row, p.ffn.W1[h]) + p.ffn.b1[h])
        y = row_linear(hidden, p.ffn.W2[h]) + p.ffn.b2[h]
        expected[h] = row_ln(y + x[h], p.ln_out.gamma, p.ln_out.beta)
    assert np.array_equal(block.forward(x).value, expected)


def test_block_shape_closure():
    cfg = _cfg(3, 6, 3)
    x = np.random.default_rng(0).standard_normal((5, 3, 6))
    for seed in range(3):
        x = MixerBlock(cfg, seed=seed).forward(x).value
    assert x.shape == (5, 3, 6)


@pytest.mark.parametrize("seed", range(20))
def test_block_gradient(seed):
    """測試所有參數與輸入的梯度 (tol 1e-5, f64)"""
    cfg = _cfg(2, 4, 2, d_hidden=3)
    rng = np.random.default_rng(seed)
    params = init_mixer_block(cfg, rng)
    params = params.replace_tensors({
        "ln_mix.gamma": rng.standard_normal(4), "ln_mix.beta": rng.standard_normal(4),
        "ln_out.gamma": rng.standard_normal(4), "ln_out.beta": rng.standard_normal(4),
    })
    names = list(params.named_tensors())
    x = rng.standard_normal((2, 2, 4))
    weights = rng.standard_normal((2, 2, 4))

    def f(ps):
        p = params.replace_tensors(dict(zip(names, ps[1:])))
        pair = mixer_block_forward(ps[0], p, cfg)

        def backward(d):
            dx, grads = pair.backward(d * weights)
            return [dx] + [grads[name] for name in names]

        return GradPair(float(np.sum(pair.value * weights)), backward)

    tensors = params.named_tensors()
    report = check_gradient(f, [x] + [tensors[name] for name in names], names=["x"] + names)
    assert report.passed, report.model_dump()
