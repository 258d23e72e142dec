"""
請求內 U 側快取服務
    Offset ← Cumsum(candidate_sizes)
    Unique_U ← Gather(INPUT_U, Offset)
    U 路徑每位使用者只算一次，Repeat 回每個候選，G 路徑逐候選計算
並提供完整 (naive) 服務、乘加次數帳本與基準測試
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit

from models.report_models import BenchModeReport, BenchReport, EquivalenceReport, FlopsLedger, WallClock
from models.serving_models import Request, UserRecord
from models.ugsep_models import QuantScheme, WorkloadSpec
from services.errors import ConfigurationError, DimensionError, IntegrityError
from services.model import RankModel, quantize_model
from services.numeric import Tensor
from services.ugsep import UCache, compensation_active

logger = logging.getLogger(__name__)

LATENCY_NOTE = (
    "牆鐘時間為桌面 CPU 上的計算量差異，不可與線上服務延遲數據比較；"
    "W8A16 只改變權重位元組數，不改變乘加次數"
)


class ServingService:
    """請求佈局工具：前綴和、收集與重複"""

    @staticmethod
    def cumsum_offsets(sizes: Sequence[int]) -> np.ndarray:
        """offsets[i] = Σ_{k<i} sizes[k]，即第 i 位使用者第一個複製列的索引"""
        sizes = np.asarray(sizes, dtype=np.int64)
        if sizes.ndim != 1:
            raise DimensionError(f"candidate_sizes 必須為一維: {sizes.shape}")
        if np.any(sizes < 1):
            raise ConfigurationError(f"候選數必須 >= 1: {sizes.tolist()}")
        offsets = np.zeros(len(sizes), dtype=np.int64)
        if len(sizes) > 1:
            offsets[1:] = np.cumsum(sizes)[:-1]
        return offsets

    @staticmethod
    def gather_unique_u(input_u_replicated: Tensor, offsets: Sequence[int]) -> Tensor:
        """第 i 列 = input_u_replicated[offsets[i]]"""
        offsets = np.asarray(offsets, dtype=np.int64)
        rows = input_u_replicated.shape[0]
        if np.any(offsets < 0) or np.any(offsets >= rows):
            raise DimensionError(f"offset 超出範圍 [0, {rows}): {offsets.tolist()}")
        return input_u_replicated[offsets]

    @staticmethod
    def repeat_u_outputs(unique_u_out: Tensor, sizes: Sequence[int]) -> Tensor:
        """第 i 位使用者的輸出重複 sizes[i] 次，保持請求順序"""
        sizes = np.asarray(sizes, dtype=np.int64)
        if unique_u_out.shape[0] != len(sizes):
            raise DimensionError(f"使用者數 {unique_u_out.shape[0]} 與 candidate_sizes 長度 {len(sizes)} 不一致")
        return np.repeat(unique_u_out, sizes, axis=0)

    @staticmethod
    def replicate(req: Request) -> Tuple[Tensor, Tensor]:
        """完整佈局：INPUT_U (N, n, D) 每個候選複製一次使用者 U-token；INPUT_G (N, m, D)"""
        input_u = np.concatenate([
            np.repeat(user.u_tokens[None], user.candidates.shape[0], axis=0) for user in req.users
        ])
        input_g = np.concatenate([user.candidates for user in req.users])
        return input_u, input_g


def _check_request(model: RankModel, req: Request) -> None:
    cfg = model.config
    # Request 驗證器已保證所有使用者的 token 形狀一致，只需檢查第一位
    user = req.users[0]
    if user.u_tokens.shape != (cfg.n, cfg.D) or user.candidates.shape[1:] != (cfg.m, cfg.D):
        raise DimensionError(
            f"請求 token 形狀 U {user.u_tokens.shape}, G {user.candidates.shape[1:]} "
            f"與模型 (n={cfg.n}, m={cfg.m}, D={cfg.D}) 不一致"
        )


def serve_naive(model: RankModel, req: Request) -> Tensor:
    """每個 (使用者, 候選) 對在 concat(U, G) 上跑完整堆疊"""
    _check_request(model, req)
    input_u, input_g = ServingService.replicate(req)
    return model.score(np.concatenate([input_u, input_g], axis=-2))


def _repeat_cache(cache: UCache, sizes: Sequence[int]) -> UCache:
    return UCache(*[
        None if field is None else ServingService.repeat_u_outputs(field, sizes) for field in cache
    ])


def serve_cached(model: RankModel, req: Request, cross_check: bool = False) -> Tensor:
    """
    U 路徑每位使用者只算一次再重複，G 路徑逐候選計算；分數與 serve_naive 位元相同
    cross_check 時每個區塊另跑完整前向比對，不一致則拋出 IntegrityError
    """
    if not model.is_ugsep:
        raise ConfigurationError("快取服務需要 ugsep 變體")
    _check_request(model, req)
    sizes = req.candidate_sizes
    input_u, input_g = ServingService.replicate(req)
    offsets = ServingService.cumsum_offsets(sizes)

    u = ServingService.gather_unique_u(input_u, offsets)
    u_rep, g = input_u, input_g
    for index, block in enumerate(model.blocks):
        cache = block.forward_u(u)
        cache_rep = _repeat_cache(cache, sizes)
        g_next = block.forward_g(u_rep, g, cache_rep)
        if cross_check:
            _cross_check(block, index, u_rep, g, cache_rep.u_tokens, g_next)
        u, u_rep, g = cache.u_tokens, cache_rep.u_tokens, g_next

    tokens = np.concatenate([u_rep, g], axis=-2)
    return expit(model.readout_logits(tokens))


def _cross_check(block, index: int, u_in: Tensor, g_in: Tensor, u_out: Tensor, g_out: Tensor) -> None:
    full = block.forward(np.concatenate([u_in, g_in], axis=-2)).value
    c_u = block.part.c_u
    if not np.array_equal(full[:, :c_u], u_out) or not np.array_equal(full[:, c_u:], g_out):
        diff = np.argwhere(full != np.concatenate([u_out, g_out], axis=-2))[0]
        raise IntegrityError(
            f"區塊 {index} 的快取輸出與完整前向不一致 (候選 {diff[0]}, 列 {diff[1]}, 欄 {diff[2]})",
            block_index=index,
        )


def serve_requests(model: RankModel, requests: Sequence[Request], workers: int = 1,
                   cached: bool = True) -> List[Tensor]:
    """多個獨立請求分派到執行緒池；結果順序與請求順序一致"""
    serve = serve_cached if cached else serve_naive
    if workers <= 1:
        return [serve(model, req) for req in requests]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda req: serve(model, req), requests))


def block_flops(model: RankModel) -> Dict[str, Tuple[int, int]]:
    """
    每個元件的 (每位使用者, 每個候選) 乘加數
    mixup 與逐元素運算為 0；layer norm 每元素計 4；矩陣乘法依形狀計算
    """
    cfg = model.config
    components: Dict[str, Tuple[int, int]] = {}
    for index, block in enumerate(model.blocks):
        bcfg = block.cfg
        if model.is_ugsep:
            n, m, c_u, c_g = block.part.n, block.part.m, block.part.c_u, block.part.c_g
            opts = block.opts
        else:
            n, m, c_u, c_g = 0, bcfg.T, 0, bcfg.H
            opts = None
        width, D = bcfg.mixed_dim, bcfg.D
        per_token_ffn = width * bcfg.d_hidden + bcfg.d_hidden * D
        prefix = f"blocks.{index}"
        components[f"{prefix}.ln_mix"] = (4 * c_u * width, 4 * c_g * width)
        components[f"{prefix}.ffn"] = (c_u * per_token_ffn, c_g * per_token_ffn)
        if opts is not None and compensation_active(opts, block.part):
            components[f"{prefix}.compensation"] = (c_u * D * c_g * D, 0)
        if opts is not None and opts.residual == "separated":
            d_a = opts.d_attn
            u_cost = c_u * D * d_a + 2 * n * D * d_a + 2 * c_u * n * d_a + c_u * d_a * D
            g_cost = c_g * D * d_a + 2 * m * D * d_a + 2 * c_g * (n + m) * d_a + c_g * d_a * D
            components[f"{prefix}.residual_attn"] = (u_cost, g_cost)
        components[f"{prefix}.ln_out"] = (4 * c_u * D, 4 * c_g * D)
    components["readout"] = (0, cfg.D)
    return components


def flops_count(model: RankModel, req: Request, mode: str = "cached") -> FlopsLedger:
    """cached = F_U·M + F_G·N；naive = (F_U + F_G)·N"""
    if mode not in ("naive", "cached", "cached_w8a16"):
        raise ConfigurationError(f"不支援的模式: {mode}")
    components = block_flops(model)
    F_U = sum(u for u, _ in components.values())
    F_G = sum(g for _, g in components.values())
    M, N = req.M, req.N
    naive_total = (F_U + F_G) * N
    cached_total = F_U * M + F_G * N
    ratio = Fraction(cached_total, naive_total)
    ffn_u = sum(u for name, (u, _) in components.items() if name.endswith(".ffn"))
    ffn_all = sum(u + g for name, (u, g) in components.items() if name.endswith(".ffn"))
    return FlopsLedger(
        mode=mode,
        M=M,
        N=N,
        F_U=F_U,
        F_G=F_G,
        components={name: u + g for name, (u, g) in components.items()},
        total=naive_total if mode == "naive" else cached_total,
        naive_total=naive_total,
        cached_total=cached_total,
        ratio=float(ratio),
        ratio_exact=f"{ratio.numerator}/{ratio.denominator}",
        block_ffn_reusable_fraction=float(Fraction(ffn_u, ffn_all)),
    )


def candidate_sizes(spec: WorkloadSpec, rng: np.random.Generator) -> List[int]:
    size = spec.candidate_size
    if size.kind == "fixed":
        return [size.value] * spec.M
    return [int(s) for s in rng.integers(size.low, size.high + 1, size=spec.M)]


def random_request(rng: np.random.Generator, n: int, m: int, D: int, sizes: Sequence[int],
                   dtype=np.float64) -> Request:
    """標準常態分佈的隨機請求"""
    users = [
        UserRecord(
            u_tokens=rng.standard_normal((n, D)).astype(dtype),
            candidates=rng.standard_normal((size, m, D)).astype(dtype),
        )
        for size in sizes
    ]
    return Request(users=users)


def workload_request(model: RankModel, spec: WorkloadSpec) -> Request:
    rng = np.random.default_rng(spec.seed)
    cfg = model.config
    return random_request(rng, cfg.n, cfg.m, cfg.D, candidate_sizes(spec, rng), np.dtype(cfg.dtype))


def verify_equivalence(model: RankModel, requests: int = 50, seed: int = 0, max_users: int = 8,
                       max_candidates: int = 16) -> EquivalenceReport:
    """隨機請求上比對 serve_cached 與 serve_naive (位元相同)"""
    rng = np.random.default_rng(seed)
    cfg = model.config
    failures: List[str] = []
    for index in range(requests):
        M = int(rng.integers(1, max_users + 1))
        sizes = [int(s) for s in rng.integers(1, max_candidates + 1, size=M)]
        req = random_request(rng, cfg.n, cfg.m, cfg.D, sizes, np.dtype(cfg.dtype))
        if np.array_equal(serve_cached(model, req), serve_naive(model, req)):
            continue
        try:
            serve_cached(model, req, cross_check=True)
            failures.append(f"請求 {index}: 分數不一致")
        except IntegrityError as exc:
            failures.append(f"請求 {index}: {exc}")
    if failures:
        logger.warning("等價性驗證失敗 %d / %d", len(failures), requests)
    return EquivalenceReport(requests=requests, passed=not failures, failures=failures)


def _time_ms(fn, repetitions: int) -> WallClock:
    samples = []
    for _ in range(repetitions):
        start = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - start) * 1000.0)
    series = pd.Series(samples)
    return WallClock(p50=float(series.quantile(0.5)), p90=float(series.quantile(0.9)))


def bench(model: RankModel, spec: WorkloadSpec, repetitions: int = 5,
          scheme: Optional[QuantScheme] = None, flops_only: bool = False) -> BenchReport:
    """naive / cached / cached_w8a16 的牆鐘中位數與乘加帳本"""
    if repetitions < 3:
        raise ConfigurationError(f"repetitions 必須 >= 3: {repetitions}")
    req = workload_request(model, spec)
    quantized = quantize_model(model, scheme)
    runners = {
        "naive": (lambda: serve_naive(model, req)),
        "cached": (lambda: serve_cached(model, req)),
        "cached_w8a16": (lambda: serve_cached(quantized, req)),
    }
    references = {
        "naive": None,
        "cached": (lambda: serve_naive(model, req)),
        "cached_w8a16": (lambda: serve_naive(quantized, req)),
    }

    modes = []
    for mode, run in runners.items():
        equivalence = "n/a"
        if references[mode] is not None:
            equivalence = "pass" if np.array_equal(run(), references[mode]()) else "fail"
        modes.append(BenchModeReport(
            mode=mode,
            wallclock_ms=None if flops_only else _time_ms(run, repetitions),
            flops=flops_count(model, req, mode),
            equivalence=equivalence,
        ))
        logger.info("bench %s: equivalence=%s", mode, equivalence)

    return BenchReport(
        workload={**spec.model_dump(), "N": req.N, "candidate_sizes": req.candidate_sizes},
        repetitions=repetitions,
        modes=modes,
        note=LATENCY_NOTE,
    )
