"""Finite-difference gradient check suites for the engine, attention and model.

Every case builds float64 parameters and a scalar objective (a random linear
read-out ``sum(out * R)``, or the density loss for the full model) and hands
the closure to :func:`mafnet.tensor.grad_check`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention as A
from . import model as M
from . import tensor as T
from .density import mse_loss
from .tensor import GradCheckReport, Tensor

F64 = np.float64


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.report} ({self.seconds:.1f}s)"


def _param(rng, shape, name, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, name=name)


def _readout(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    r = Tensor(rng.normal(size=out.shape))
    return lambda y: T.sum(y * r)


def _case(name: str, build, params, rng, tol: float, max_coords=None, eps: float = 1e-5,
          scalar: bool = False) -> CheckResult:
    """Grad-check ``build``; non-scalar outputs get a random linear read-out."""
    if scalar:
        f = build
    else:
        with T.no_grad():
            probe = build()
        read = _readout(probe, rng)
        f = lambda: read(build())  # noqa: E731
    start = time.perf_counter()
    report = T.grad_check(f, params, eps=eps, tol=tol, max_coords=max_coords, rng=rng)
    return CheckResult(name, report, time.perf_counter() - start)


def primitive_cases(seed: int = 0) -> list[tuple[str, Callable, list[Tensor]]]:
    """(name, forward builder, parameters) for every differentiable primitive."""
    rng = np.random.default_rng(seed)
    a, b = _param(rng, (3, 4), "a"), _param(rng, (3, 4), "b")
    m1, m2 = _param(rng, (2, 3, 4), "m1"), _param(rng, (2, 4, 5), "m2")
    w2 = _param(rng, (4, 5), "w2")
    s = _param(rng, (3, 6), "s")
    x = _param(rng, (2, 3, 6, 6), "x")
    k = _param(rng, (4, 3, 3, 3), "k", 0.3)
    bias = _param(rng, (4,), "bias")
    u = _param(rng, (1, 2, 3, 4), "u")
    return [
        ("add", lambda: a + b, [a, b]),
        ("sub", lambda: a - b, [a, b]),
        ("neg", lambda: -a, [a]),
        ("mul", lambda: a * b, [a, b]),
        ("scale", lambda: a * 2.5 + 1.0, [a]),
        ("relu", lambda: T.relu(a), [a]),
        ("sum_axis", lambda: T.sum(m1, axis=1, keepdims=True), [m1]),
        ("sum_all", lambda: T.sum(a * b), [a, b]),
        ("matmul_batched", lambda: T.matmul(m1, m2), [m1, m2]),
        ("matmul_shared", lambda: T.matmul(m1, w2), [m1, w2]),
        ("softmax", lambda: T.softmax(s, axis=-1), [s]),
        ("conv2d", lambda: T.conv2d(x, k, bias, padding=1), [x, k, bias]),
        ("conv2d_dilated", lambda: T.conv2d(x, k, bias, padding=2, dilation=2), [x, k, bias]),
        ("conv2d_valid", lambda: T.conv2d(x, k), [x, k]),
        ("maxpool2d", lambda: T.maxpool2d(x), [x]),
        ("upsample_bilinear", lambda: T.upsample_bilinear(u, 7, 9), [u]),
        ("reshape", lambda: T.reshape(m1, (4, -1)), [m1]),
        ("transpose", lambda: T.transpose(m1, (2, 0, 1)), [m1]),
        ("concat", lambda: T.concat([a, b, a], axis=1), [a, b]),
        ("slice", lambda: T.slice(m1, (slice(None), slice(1, 3))), [m1]),
    ]


def tensor_suite(seed: int = 0, tol: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng(seed + 1)
    return [_case(name, build, params, rng, tol) for name, build, params in primitive_cases(seed)]


def attention_suite(seed: int = 0, tol: float = 1e-5) -> list[CheckResult]:
    """MHA, IMA, CMA, one block and a small two-block module.

    The module uses the unscaled projection init and unit-scale inputs; with a
    shrunken embedding the deeper attention gradients fall to ~1e-8 and central
    differences can no longer resolve them to ``tol``.
    """
    rng = np.random.default_rng(seed)
    n, dim, heads = 5, 8, 2
    mha = A.init_multi_head(rng, dim, heads, F64, "mha")
    mha_params = [t for h in mha.heads for t in (h.wq, h.wk, h.wv)] + [mha.wo]
    zq, zkv = _param(rng, (n, dim), "zq"), _param(rng, (n, dim), "zkv")
    block = A.MafBlockParams(*(A.init_multi_head(rng, dim, heads, F64, k)
                               for k in ("ima_r", "ima_t", "cma_r", "cma_t")))
    block_params = M.parameters(block)
    zr, zt = _param(rng, (n, dim), "zr", 0.5), _param(rng, (n, dim), "zt", 0.5)
    module = A.init_maf_module(rng, channels=2, patch_size=2, dim=dim, num_heads=heads, depth=2,
                               dtype=F64, prefix="maf")
    fr, ft = _param(rng, (2, 4, 4), "fr"), _param(rng, (2, 4, 4), "ft")
    out = [
        _case("multi_head_attention", lambda: A.multi_head_attention(zq, zkv, mha),
              mha_params + [zq, zkv], rng, tol),
        _case("ima", lambda: A.ima(zq, mha), mha_params + [zq], rng, tol),
        _case("cma", lambda: A.cma(zq, zkv, mha), mha_params + [zq, zkv], rng, tol),
        _case("maf_block", lambda: T.concat(list(A.maf_block(zr, zt, block)), axis=0),
              block_params + [zr, zt], rng, tol),
        _case("maf_module", lambda: T.concat(list(A.maf_module(fr, ft, module)), axis=0),
              M.parameters(module) + [fr, ft], rng, tol),
    ]
    return out


def model_suite(seed: int = 0, tol: float = 1e-4, size: int = 64, coords_per_param: int = 2,
                outer_coords_per_param: int = 8) -> list[CheckResult]:
    """End-to-end toy model checks in float64 on one ``size``×``size`` pair,
    reading out the squared error against a random target density.

    A random subset of ``coords_per_param`` entries is perturbed in each
    parameter tensor to keep the runtime in minutes. The first case covers
    every parameter; the second only the backbones and the regression head.
    Attention weights deep inside the MAF stacks can have gradients of order
    1e-9 at initialisation, below what float64 central differences resolve
    through the surrounding skip paths, so the second case isolates the
    wiring of everything else.
    """
    cfg = M.ModelConfig.toy()
    params = M.init_params(cfg, seed=seed, dtype=F64)
    rng = np.random.default_rng(seed)
    rgb = Tensor(rng.uniform(-1, 1, size=(3, size, size)))
    thermal = Tensor(rng.uniform(-1, 1, size=(1, size, size)))
    target = Tensor(rng.uniform(0.0, 0.5, size=(1, 1, size // 8, size // 8)))
    build = lambda: mse_loss(M.model_forward(rgb, thermal, params, cfg), target)  # noqa: E731
    outer = [t for name, t in M.named_tensors(params) if not name.startswith("maf_modules.")]
    return [
        _case(f"toy_model_{size}", build, M.parameters(params), rng, tol, max_coords=coords_per_param, scalar=True),
        _case(f"toy_model_{size}_outside_maf", build, outer, rng, tol, max_coords=outer_coords_per_param,
              scalar=True),
    ]


SUITES = {"tensor": tensor_suite, "attention": attention_suite, "model": model_suite}


def run(module: str | None = None) -> list[CheckResult]:
    names = [module] if module else list(SUITES)
    results = []
    for name in names:
        results.extend(SUITES[name]())
    return results
