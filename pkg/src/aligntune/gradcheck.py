"""Finite-difference verification of the loss gradients.

Each case draws a small random float64 instance, evaluates the loss
through its raw (unnormalized) inputs, and compares the backward pass with
central differences.  The error of a case is
``max|g_analytic - g_fd| / max(max|g_analytic|, max|g_fd|, 1e-8)`` over all
differentiated inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional

import torch

from . import losses as L
from .encoders import normalize

FD_STEP = 1e-5
DEFAULT_TOL = 1e-4

# (loss function over differentiated inputs, list of differentiated inputs)
Case = tuple[Callable[..., torch.Tensor], list[torch.Tensor]]


@dataclass
class CaseResult:
    loss: str
    seed: int
    max_rel_err: float
    passed: bool


def _unit(g, *shape):
    return normalize(torch.randn(*shape, generator=g, dtype=torch.float64))


def _log_tau(g) -> torch.Tensor:
    return torch.empty((), dtype=torch.float64).uniform_(math.log(0.1), 0.0, generator=g)


def case_contrastive(seed: int) -> Case:
    g = torch.Generator().manual_seed(seed)
    d = int(torch.randint(2, 17, (1,), generator=g))
    K = int(torch.randint(1, 9, (1,), generator=g))
    inputs = [torch.randn(d, generator=g, dtype=torch.float64),
              torch.randn(d, generator=g, dtype=torch.float64),
              torch.randn(K, d, generator=g, dtype=torch.float64),
              _log_tau(g)]

    def f(a, p, n, lt):
        return L.contrastive_cl(normalize(a), normalize(p), normalize(n), lt.exp())
    return f, inputs


def _cls_pairs(g):
    B = int(torch.randint(1, 5, (1,), generator=g))
    d = int(torch.randint(2, 17, (1,), generator=g))
    K = int(torch.randint(1, 9, (1,), generator=g))
    return B, d, K


def case_ditc(seed: int, alpha: float = 0.0) -> Case:
    g = torch.Generator().manual_seed(seed)
    B, d, K = _cls_pairs(g)
    mv, mw = _unit(g, B, d), _unit(g, B, d)
    iq, tq = _unit(g, K, d), _unit(g, K, d)
    lt = _log_tau(g)
    target_tau = float(lt.exp())
    inputs = [torch.randn(B, d, generator=g, dtype=torch.float64),
              torch.randn(B, d, generator=g, dtype=torch.float64), lt]

    def f(v, w, lt):
        return L.ditc_loss(normalize(v), normalize(w), mv, mw, iq, tq, lt.exp(),
                           alpha=alpha, target_tau=target_tau)
    return f, inputs


def case_imc(seed: int) -> Case:
    g = torch.Generator().manual_seed(seed)
    B, d, K = _cls_pairs(g)
    vp, wp = _unit(g, B, d), _unit(g, B, d)
    iq, tq = _unit(g, K, d), _unit(g, K, d)
    inputs = [torch.randn(B, d, generator=g, dtype=torch.float64),
              torch.randn(B, d, generator=g, dtype=torch.float64), _log_tau(g)]

    def f(v, w, lt):
        return L.imc_loss(normalize(v), normalize(w), vp, wp, iq, tq, lt.exp())
    return f, inputs


def _random_mask(g, B, n):
    mask = torch.rand(B, n, generator=g) < 0.7
    mask[:, 0] = True
    return mask


def case_glitc(seed: int) -> Case:
    g = torch.Generator().manual_seed(seed)
    B = int(torch.randint(2, 5, (1,), generator=g))
    d = int(torch.randint(2, 17, (1,), generator=g))
    M = int(torch.randint(1, 5, (1,), generator=g))
    n_txt = int(torch.randint(1, 6, (1,), generator=g))
    mv, mw = _unit(g, B, M, d), _unit(g, B, n_txt, d)
    tmask = _random_mask(g, B, n_txt)
    inputs = [torch.randn(B, d, generator=g, dtype=torch.float64),
              torch.randn(B, d, generator=g, dtype=torch.float64), _log_tau(g)]

    def f(v, w, lt):
        return L.glitc_loss(normalize(v), mv, None, normalize(w), mw, tmask, lt.exp())
    return f, inputs


def case_pita(seed: int, pita_fn: Optional[Callable] = None) -> Case:
    g = torch.Generator().manual_seed(seed)
    B = int(torch.randint(1, 5, (1,), generator=g))
    M = int(torch.randint(1, 10, (1,), generator=g))
    d = int(torch.randint(2, 17, (1,), generator=g))
    mask = _random_mask(g, B, M)
    inputs = [torch.randn(B, M, d, generator=g, dtype=torch.float64),
              torch.randn(B, M, d, generator=g, dtype=torch.float64)]
    fn = pita_fn or L.pita_loss

    def f(v, t):
        return fn(v, t, mask)
    return f, inputs


def case_supervised(seed: int) -> Case:
    g = torch.Generator().manual_seed(seed)
    B = int(torch.randint(1, 5, (1,), generator=g))
    n = int(torch.randint(1, 9, (1,), generator=g))
    C = int(torch.randint(2, 10, (1,), generator=g))
    labels = torch.randint(0, C, (B, n), generator=g)
    mask = _random_mask(g, B, n)
    inputs = [torch.randn(B, n, C, generator=g, dtype=torch.float64) * 2]

    def f(logits):
        return L.supervised_loss(logits, labels, mask)
    return f, inputs


CASES: dict[str, Callable[[int], Case]] = {
    "contrastive_cl": case_contrastive,
    "ditc": case_ditc,
    "ditc_alpha": lambda seed: case_ditc(seed, alpha=0.4),
    "imc": case_imc,
    "glitc": case_glitc,
    "pita": case_pita,
    "supervised": case_supervised,
}


def analytic_grads(f, inputs) -> list[torch.Tensor]:
    xs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = f(*xs)
    return list(torch.autograd.grad(out, xs, allow_unused=True, materialize_grads=True))


@torch.no_grad()
def numeric_grads(f, inputs, h: float = FD_STEP) -> list[torch.Tensor]:
    xs = [x.detach().clone() for x in inputs]
    grads = []
    for x in xs:
        gx = torch.zeros_like(x)
        flat, gflat = x.view(-1), gx.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(f(*xs))
            flat[i] = orig - h
            down = float(f(*xs))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(gx)
    return grads


def relative_error(analytic: list[torch.Tensor], numeric: list[torch.Tensor]) -> float:
    diff = max(float((a - n).abs().max()) for a, n in zip(analytic, numeric))
    scale = max(max(float(a.abs().max()), float(n.abs().max())) for a, n in zip(analytic, numeric))
    return diff / max(scale, 1e-8)


def check_case(name: str, seed: int, builder: Callable[[int], Case],
               tol: float = DEFAULT_TOL) -> CaseResult:
    f, inputs = builder(seed)
    err = relative_error(analytic_grads(f, inputs), numeric_grads(f, inputs))
    return CaseResult(name, seed, err, bool(err < tol))


def run_gradcheck(
    names: Optional[Iterable[str]] = None,
    seeds: Iterable[int] = range(20),
    tol: float = DEFAULT_TOL,
    cases: Optional[Mapping[str, Callable[[int], Case]]] = None,
) -> list[CaseResult]:
    registry = dict(CASES) | dict(cases or {})
    names = list(registry) if names is None else list(names)
    for n in names:
        if n not in registry:
            raise KeyError(f"unknown loss family {n!r}; choose from {sorted(registry)}")
    seeds = list(seeds)
    return [check_case(n, s, registry[n], tol) for n in names for s in seeds]


def summarize(results: list[CaseResult]) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for r in results:
        e = out.setdefault(r.loss, {"cases": 0, "failed": 0, "max_rel_err": 0.0})
        e["cases"] += 1
        e["failed"] += int(not r.passed)
        e["max_rel_err"] = max(e["max_rel_err"], r.max_rel_err)
    return out
