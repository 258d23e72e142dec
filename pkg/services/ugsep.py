"""
UG-Sep (User–Group Separation) 區塊
U/G 分區、資訊遮罩、遮罩 mixup、可重用/不可重用逐 token FFN、分離殘差與資訊補償

U 列 [0, c_u) 只由前 n 個輸入 token (U-token) 決定，因此可以每位使用者只計算一次
"""
import logging
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from models.param_models import CompensationParams, ResidualAttentionParams, UGSepBlockParams
from models.report_models import BlockSeparability, Divergence, SeparabilityReport
from models.ugsep_models import BlockOptions, MixerConfig, UGPartition
from services.errors import ConfigurationError, DimensionError
from services.mixer import (
    init_layer_norm, init_per_token_ffn, mixup, mixup_inverse, pffn_grad, prefix_grads,
)
from services.numeric import GradPair, Tensor, layer_norm_grad, matmul_grad, ordered_sum, softmax_rows_grad
from services.quant import linear

logger = logging.getLogger(__name__)


def build_ug_mask(part: UGPartition, d_head: int, T: int) -> np.ndarray:
    """
    H × (T·D′) 二元遮罩：i < c_u 且 j >= n·D′ 為 0，其餘為 1
    """
    if part.T != T:
        raise ConfigurationError(f"分區 n + m = {part.T} 與 T = {T} 不一致")
    if d_head < 1:
        raise ConfigurationError(f"D′ 必須 >= 1: {d_head}")
    mask = np.ones((part.H, T * d_head), dtype=np.uint8)
    mask[:part.c_u, part.n * d_head:] = 0
    return mask


def build_residual_mask(part: UGPartition) -> np.ndarray:
    """H × T token 級遮罩：U 查詢列 i < c_u 不可注意 G 鍵 j >= n"""
    allowed = np.ones((part.H, part.T), dtype=bool)
    allowed[:part.c_u, part.n:] = False
    return allowed


def masked_mixup(x: Tensor, mask: np.ndarray, cfg: MixerConfig) -> Tensor:
    """Mixup(X) 與遮罩逐元素相乘；以選擇實現，遮罩位置恆為 +0.0"""
    mixed = mixup(x, cfg)
    if mask.shape != mixed.shape[-2:]:
        raise DimensionError(f"遮罩形狀 {mask.shape} 與 mixup 輸出 {mixed.shape[-2:]} 不一致")
    return np.where(mask.astype(bool), mixed, 0.0)


def split_pffn_grad(p_masked: Tensor, params: UGSepBlockParams, part: UGPartition, kind: str = "gelu"):
    """
    列 [0, c_u) 經可重用 FFN、列 [c_u, H) 經不可重用 FFN
    回傳 (U 的 GradPair 或 None, G 的 GradPair)
    """
    if p_masked.shape[-2] != part.H:
        raise DimensionError(f"輸入列數 {p_masked.shape[-2]} 與 H = {part.H} 不一致")
    ffn_u_sets = params.ffn_u.num_tokens if params.ffn_u is not None else 0
    if ffn_u_sets != part.c_u or params.ffn_g.num_tokens != part.c_g:
        raise DimensionError(
            f"FFN 權重組數 ({ffn_u_sets}, {params.ffn_g.num_tokens}) 與分區 ({part.c_u}, {part.c_g}) 不一致"
        )
    u_pair = pffn_grad(p_masked[..., :part.c_u, :], params.ffn_u, kind) if part.c_u > 0 else None
    g_pair = pffn_grad(p_masked[..., part.c_u:, :], params.ffn_g, kind)
    return u_pair, g_pair


def split_pffn(p_masked: Tensor, params: UGSepBlockParams, part: UGPartition,
               kind: str = "gelu") -> Tuple[Tensor, Tensor]:
    u_pair, g_pair = split_pffn_grad(p_masked, params, part, kind)
    d_out = g_pair.value.shape[-1]
    u_out = u_pair.value if u_pair is not None else np.zeros(p_masked.shape[:-2] + (0, d_out), g_pair.value.dtype)
    return u_out, g_pair.value


def compensation_delta_grad(u: Tensor, comp: CompensationParams, c_g: int) -> GradPair:
    """Û = Proj(flatten(U))，重塑為 (..., c_g, d)"""
    flat = u.reshape(u.shape[:-2] + (u.shape[-2] * u.shape[-1],))
    d = u.shape[-1]
    if comp.W.shape != (flat.shape[-1], c_g * d):
        raise DimensionError(f"補償投影形狀 {comp.W.shape} 與 U {u.shape} / c_g={c_g} 不一致")
    if isinstance(comp.W, np.ndarray):
        proj = matmul_grad(flat, comp.W)
        delta = proj.value + comp.b
    else:
        proj = None
        delta = linear(flat, comp.W) + comp.b
    value = delta.reshape(u.shape[:-2] + (c_g, d))

    def backward(d_delta: Tensor):
        flat_grad = d_delta.reshape(d_delta.shape[:-2] + (c_g * d,))
        d_flat, dW = proj.backward(flat_grad)
        db = np.sum(flat_grad.reshape(-1, c_g * d), axis=0)
        return d_flat.reshape(u.shape), {"W": dW, "b": db}

    return GradPair(value, backward)


def info_compensation(u: Tensor, g: Tensor, comp: CompensationParams) -> Tensor:
    """G_comp = G + Proj(flatten(U))；U 本身不被修改"""
    if g.shape[:-2] != u.shape[:-2] or g.shape[-1] != u.shape[-1]:
        raise DimensionError(f"U {u.shape} 與 G {g.shape} 形狀不一致")
    if u.shape[-2] == 0:
        return g
    return g + compensation_delta_grad(u, comp, g.shape[-2]).value


def compensation_active(opts: BlockOptions, part: UGPartition) -> bool:
    """c_u = 0 時沒有 U 列可投影，補償整段略過 (Û = 0，參數梯度為零)"""
    return opts.compensation and part.c_u > 0


def attention_logits(q: Tensor, k: Tensor) -> Tensor:
    """S[i][j] = Σ_a Q[i][a]·K[j][a] / √d_a，a 遞增累加"""
    d_attn = q.shape[-1]
    logits = np.zeros(q.shape[:-1] + (k.shape[-2],), dtype=np.result_type(q, k))
    for a in range(d_attn):
        logits += q[..., :, a:a + 1] * k[..., None, :, a]
    return logits * (1.0 / np.sqrt(d_attn))


def attend(weights: Tensor, v: Tensor) -> Tensor:
    """ctx[i] = Σ_j A[i][j]·V[j]，j 遞增累加"""
    ctx = np.zeros(weights.shape[:-1] + (v.shape[-1],), dtype=np.result_type(weights, v))
    for j in range(v.shape[-2]):
        ctx += weights[..., :, j:j + 1] * v[..., None, j, :]
    return ctx


def separated_residual_grad(y: Tensor, x_in: Tensor, attn: ResidualAttentionParams,
                            part: UGPartition) -> GradPair:
    """
    Q = Y·W_Q，K = X_in·W_K，V = X_in·W_V；U 查詢列不可注意 G 鍵 (softmax 前遮罩)
    回傳 Y + (A·V)·W_O；backward(dZ) → (dY, dX_in, grads)
    """
    if attn is None:
        raise ConfigurationError("分離殘差缺少交叉注意力參數")
    if y.shape[-2] != part.H or x_in.shape[-2] != part.T:
        raise DimensionError(f"分離殘差形狀不一致: Y {y.shape}, X {x_in.shape}, 分區 (H={part.H}, T={part.T})")
    allowed = build_residual_mask(part)
    trainable = all(isinstance(w, np.ndarray) for w in (attn.W_Q, attn.W_K, attn.W_V, attn.W_O))

    if not trainable:
        q, k, v = linear(y, attn.W_Q), linear(x_in, attn.W_K), linear(x_in, attn.W_V)
        weights = softmax_rows_grad(attention_logits(q, k), allowed).value
        return GradPair(y + linear(attend(weights, v), attn.W_O), _no_backward)

    q = matmul_grad(y, attn.W_Q)
    k = matmul_grad(x_in, attn.W_K)
    v = matmul_grad(x_in, attn.W_V)
    soft = softmax_rows_grad(attention_logits(q.value, k.value), allowed)
    ctx = attend(soft.value, v.value)
    out = matmul_grad(ctx, attn.W_O)
    scale = 1.0 / np.sqrt(q.value.shape[-1])

    def backward(dz: Tensor):
        d_ctx, dW_O = out.backward(dz)
        d_weights = np.einsum('...ic,...jc->...ij', d_ctx, v.value)
        d_v = np.einsum('...ij,...ic->...jc', soft.value, d_ctx)
        d_logits = soft.backward(d_weights) * scale
        d_q = np.einsum('...ij,...ja->...ia', d_logits, k.value)
        d_k = np.einsum('...ij,...ia->...ja', d_logits, q.value)
        dy_q, dW_Q = q.backward(d_q)
        dx_k, dW_K = k.backward(d_k)
        dx_v, dW_V = v.backward(d_v)
        grads = {"W_Q": dW_Q, "W_K": dW_K, "W_V": dW_V, "W_O": dW_O}
        return dz + dy_q, dx_k + dx_v, grads

    return GradPair(y + out.value, backward)


def separated_residual(y: Tensor, x_in: Tensor, attn: ResidualAttentionParams, part: UGPartition) -> Tensor:
    return separated_residual_grad(y, x_in, attn, part).value


def _no_backward(*_):
    raise ConfigurationError("量化權重不支援反向傳播")


def init_ugsep_block(cfg: MixerConfig, part: UGPartition, opts: BlockOptions,
                     rng: np.random.Generator, dtype=np.float64) -> UGSepBlockParams:
    """依分區初始化；補償投影與偏置零初始化 (起始時 G_comp == G)"""
    ffn_u = init_per_token_ffn(rng, part.c_u, cfg.mixed_dim, cfg.d_hidden, cfg.D, dtype) if part.c_u else None
    ffn_g = init_per_token_ffn(rng, part.c_g, cfg.mixed_dim, cfg.d_hidden, cfg.D, dtype)
    compensation = None
    if opts.compensation:
        compensation = CompensationParams(
            W=np.zeros((part.c_u * cfg.D, part.c_g * cfg.D), dtype=dtype),
            b=np.zeros(part.c_g * cfg.D, dtype=dtype),
        )
    residual_attn = None
    if opts.residual == "separated":
        bound_in, bound_out = 1.0 / np.sqrt(cfg.D), 1.0 / np.sqrt(opts.d_attn)
        residual_attn = ResidualAttentionParams(
            W_Q=rng.uniform(-bound_in, bound_in, size=(cfg.D, opts.d_attn)).astype(dtype),
            W_K=rng.uniform(-bound_in, bound_in, size=(cfg.D, opts.d_attn)).astype(dtype),
            W_V=rng.uniform(-bound_in, bound_in, size=(cfg.D, opts.d_attn)).astype(dtype),
            W_O=rng.uniform(-bound_out, bound_out, size=(opts.d_attn, cfg.D)).astype(dtype),
        )
    return UGSepBlockParams(
        ln_mix=init_layer_norm(cfg.mixed_dim, dtype),
        ffn_u=ffn_u,
        ffn_g=ffn_g,
        ln_out=init_layer_norm(cfg.D, dtype),
        compensation=compensation,
        residual_attn=residual_attn,
    )


def validate_block(cfg: MixerConfig, part: UGPartition, opts: BlockOptions) -> None:
    if part.T != cfg.T or part.H != cfg.H:
        raise ConfigurationError(f"分區 (T={part.T}, H={part.H}) 與配置 (T={cfg.T}, H={cfg.H}) 不一致")
    if opts.residual == "plain" and not part.is_plain:
        raise ConfigurationError(
            f"直接殘差要求 (n, m) == (c_u, c_g)，實際 ({part.n}, {part.m}) 與 ({part.c_u}, {part.c_g})"
        )
    if opts.residual == "separated" and part.c_u > 0 and part.n == 0:
        raise ConfigurationError("分離殘差中 U 查詢列至少需要一個 U 鍵 (n >= 1)")


def ugsep_block_forward(x: Tensor, part: UGPartition, params: UGSepBlockParams, cfg: MixerConfig,
                        opts: BlockOptions, mask: Optional[np.ndarray] = None,
                        trace: Optional[Dict[str, Tensor]] = None) -> GradPair:
    """
    masked_mixup → 逐列 LN → split_pffn → (資訊補償) → 殘差 → LN
    輸出 (..., H, D)，前 c_u 列為下一區塊的 U-token
    backward(dY) → (dX, {參數名稱: 梯度})
    """
    validate_block(cfg, part, opts)
    if opts.compensation and params.compensation is None:
        raise ConfigurationError("啟用補償但缺少補償參數")
    mask = build_ug_mask(part, cfg.d_head, cfg.T) if mask is None else mask
    keep = mask.astype(bool)

    mixed = masked_mixup(x, mask, cfg)
    ln_mix = layer_norm_grad(mixed, params.ln_mix.gamma, params.ln_mix.beta, cfg.eps)
    u_pair, g_pair = split_pffn_grad(ln_mix.value, params, part, cfg.activation)
    u_out = u_pair.value if u_pair is not None else g_pair.value[..., :0, :]

    comp = None
    g_comp = g_pair.value
    if compensation_active(opts, part):
        comp = compensation_delta_grad(u_out, params.compensation, part.c_g)
        g_comp = g_pair.value + comp.value
    y = np.concatenate([u_out, g_comp], axis=-2)

    if opts.residual == "plain":
        res = None
        z = y + x
    else:
        res = separated_residual_grad(y, x, params.residual_attn, part)
        z = res.value
    ln_out = layer_norm_grad(z, params.ln_out.gamma, params.ln_out.beta, cfg.eps)

    if trace is not None:
        trace["u_out"] = u_out
        trace["u_tokens"] = ln_out.value[..., :part.c_u, :]

    def backward(dy_out: Tensor):
        dz, d_gamma_out, d_beta_out = ln_out.backward(dy_out)
        grads: Dict[str, Tensor] = {}
        if res is None:
            dy, dx = dz, dz.copy()
        else:
            dy, dx, attn_grads = res.backward(dz)
            grads.update(prefix_grads("residual_attn", attn_grads))

        du = dy[..., :part.c_u, :]
        dg = dy[..., part.c_u:, :]
        if comp is not None:
            du_comp, comp_grads = comp.backward(dg)
            du = du + du_comp
            grads.update(prefix_grads("compensation", comp_grads))
        elif opts.compensation:
            grads.update({
                "compensation.W": np.zeros(params.compensation.W.shape, dtype=dy.dtype),
                "compensation.b": np.zeros_like(params.compensation.b, dtype=dy.dtype),
            })

        dp_parts = []
        if u_pair is not None:
            dp_u, ffn_u_grads = u_pair.backward(du)
            dp_parts.append(dp_u)
            grads.update(prefix_grads("ffn_u", ffn_u_grads))
        dp_g, ffn_g_grads = g_pair.backward(dg)
        dp_parts.append(dp_g)
        grads.update(prefix_grads("ffn_g", ffn_g_grads))

        d_mixed, d_gamma_mix, d_beta_mix = ln_mix.backward(np.concatenate(dp_parts, axis=-2))
        dx = dx + mixup_inverse(np.where(keep, d_mixed, 0.0), cfg)
        grads.update({
            "ln_mix.gamma": d_gamma_mix,
            "ln_mix.beta": d_beta_mix,
            "ln_out.gamma": d_gamma_out,
            "ln_out.beta": d_beta_out,
        })
        return dx, grads

    return GradPair(ln_out.value, backward)


class UCache(NamedTuple):
    """每位使用者只計算一次的 U 側結果"""
    u_tokens: Tensor                  # (M, c_u, D) 區塊輸出的 U-token
    u_out: Tensor                     # (M, c_u, D) 可重用 FFN 輸出 (殘差前)
    comp_delta: Optional[Tensor]      # (M, c_g, D) 補償增量 Û
    k_u: Optional[Tensor]             # (M, n, d_a) U-token 的鍵
    v_u: Optional[Tensor]             # (M, n, d_a) U-token 的值


class UGSepBlock:
    """UG-Sep 區塊：配置、分區、選項、參數與遮罩"""

    def __init__(self, cfg: MixerConfig, part: UGPartition, opts: BlockOptions,
                 params: Optional[UGSepBlockParams] = None, seed: int = 0, dtype=np.float64,
                 mask: Optional[np.ndarray] = None):
        validate_block(cfg, part, opts)
        self.cfg = cfg
        self.part = part
        self.opts = opts
        self.params = params if params is not None else init_ugsep_block(
            cfg, part, opts, np.random.default_rng(seed), dtype)
        self.mask = mask if mask is not None else build_ug_mask(part, cfg.d_head, cfg.T)

    def inject_mask_fault(self) -> None:
        """翻轉遮罩中的一個 0 (列 0, 欄 n·D′)，用於負向對照"""
        if self.part.c_u == 0:
            raise ConfigurationError("c_u = 0 時遮罩沒有可翻轉的 0")
        self.mask = self.mask.copy()
        self.mask[0, self.part.n * self.cfg.d_head] = 1
        logger.warning("已對遮罩注入故障: row=0 col=%d", self.part.n * self.cfg.d_head)

    def forward(self, x: Tensor, trace: Optional[Dict[str, Tensor]] = None) -> GradPair:
        return ugsep_block_forward(x, self.part, self.params, self.cfg, self.opts, self.mask, trace)

    def forward_u(self, x_u: Tensor) -> UCache:
        """
        只由 U-token (M, n, D) 計算 U 側：G 位置以零填補，其在遮罩後不參與任何 U 列
        """
        part, cfg, params = self.part, self.cfg, self.params
        padding = np.zeros(x_u.shape[:-2] + (part.m, cfg.D), dtype=x_u.dtype)
        x_pad = np.concatenate([x_u, padding], axis=-2)
        mixed_u = masked_mixup(x_pad, self.mask, cfg)[..., :part.c_u, :]
        p_u = layer_norm_grad(mixed_u, params.ln_mix.gamma, params.ln_mix.beta, cfg.eps).value
        if part.c_u > 0:
            u_out = pffn_grad(p_u, params.ffn_u, cfg.activation).value
        else:
            u_out = np.zeros(x_u.shape[:-2] + (0, cfg.D), dtype=x_u.dtype)

        comp_delta = None
        if compensation_active(self.opts, part):
            comp_delta = compensation_delta_grad(u_out, params.compensation, part.c_g).value

        k_u = v_u = None
        if self.opts.residual == "plain":
            z_u = u_out + x_u
        else:
            attn = params.residual_attn
            k_u, v_u = linear(x_u, attn.W_K), linear(x_u, attn.W_V)
            if part.c_u == 0:
                return UCache(u_tokens=u_out, u_out=u_out, comp_delta=comp_delta, k_u=k_u, v_u=v_u)
            q_u = linear(u_out, attn.W_Q)
            allowed = build_residual_mask(part)[:part.c_u, :part.n]
            weights = softmax_rows_grad(attention_logits(q_u, k_u), allowed).value
            z_u = u_out + linear(attend(weights, v_u), attn.W_O)
        u_tokens = layer_norm_grad(z_u, params.ln_out.gamma, params.ln_out.beta, cfg.eps).value
        return UCache(u_tokens=u_tokens, u_out=u_out, comp_delta=comp_delta, k_u=k_u, v_u=v_u)

    def forward_g(self, x_u: Tensor, x_g: Tensor, cache: UCache) -> Tensor:
        """
        不可重用路徑：x_u (N, n, D) 為已重複到每個候選的 U-token，cache 亦已重複
        回傳 G 輸出 token (N, c_g, D)
        """
        part, cfg, params = self.part, self.cfg, self.params
        x_full = np.concatenate([x_u, x_g], axis=-2)
        mixed_g = masked_mixup(x_full, self.mask, cfg)[..., part.c_u:, :]
        p_g = layer_norm_grad(mixed_g, params.ln_mix.gamma, params.ln_mix.beta, cfg.eps).value
        g_out = pffn_grad(p_g, params.ffn_g, cfg.activation).value
        if cache.comp_delta is not None:
            g_out = g_out + cache.comp_delta

        if self.opts.residual == "plain":
            z_g = g_out + x_g
        else:
            attn = params.residual_attn
            k = np.concatenate([cache.k_u, linear(x_g, attn.W_K)], axis=-2)
            v = np.concatenate([cache.v_u, linear(x_g, attn.W_V)], axis=-2)
            q_g = linear(g_out, attn.W_Q)
            weights = softmax_rows_grad(attention_logits(q_g, k)).value
            z_g = g_out + linear(attend(weights, v), attn.W_O)
        return layer_norm_grad(z_g, params.ln_out.gamma, params.ln_out.beta, cfg.eps).value


def verify_separability(blocks: Sequence[UGSepBlock], part: UGPartition, trials: int = 100,
                        seed: int = 0) -> SeparabilityReport:
    """
    固定 U-token、每次試驗重抽 G-token，檢查每個區塊的 U 列 (可重用 FFN 輸出與區塊輸出)
    在所有試驗間完全相同；失敗時回報第一個不一致的位置
    """
    if trials < 1:
        raise ValueError(f"trials 必須 >= 1: {trials}")
    if not blocks:
        return SeparabilityReport(trials=trials, passed=True, blocks=[])
    cfg = blocks[0].cfg
    dtype = blocks[0].params.ln_out.gamma.dtype
    rng = np.random.default_rng(seed)
    x_u = rng.standard_normal((1, part.n, cfg.D)).astype(dtype)
    x_g = rng.standard_normal((trials, part.m, cfg.D)).astype(dtype)
    x = np.concatenate([np.repeat(x_u, trials, axis=0), x_g], axis=-2)

    results: List[BlockSeparability] = []
    for index, block in enumerate(blocks):
        trace: Dict[str, Tensor] = {}
        x = block.forward(x, trace).value
        rows = np.concatenate([trace["u_out"], trace["u_tokens"]], axis=-1)
        divergence = _first_divergence(rows)
        results.append(BlockSeparability(
            block_index=index,
            rows_checked=block.part.c_u,
            trials=trials,
            passed=divergence is None,
            first_divergence=divergence,
        ))
        if divergence is not None:
            logger.warning("區塊 %d 可分離性失敗: %s", index, divergence)

    return SeparabilityReport(trials=trials, passed=all(r.passed for r in results), blocks=results)


def _first_divergence(rows: Tensor) -> Optional[Divergence]:
    """rows: (trials, c_u, width)；與第 0 次試驗比較"""
    reference = rows[0]
    for trial in range(1, rows.shape[0]):
        diff = rows[trial] != reference
        if np.any(diff):
            row, col = (int(i) for i in np.argwhere(diff)[0])
            return Divergence(row=row, col=col, trial=trial)
    return None
