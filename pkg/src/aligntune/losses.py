"""Alignment losses, the supervised token-labeling loss and their total.

Two kernels carry hand-derived backward passes: the candidate-set
softmax cross-entropy behind every contrastive loss, and the masked mean
cosine behind patch alignment.  The composite losses are thin tensor
plumbing around them.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional

import torch
import torch.nn.functional as F

LOSS_NAMES = ("so", "ditc", "imc", "glitc", "pita")
COS_EPS = 1e-12


class DegenerateLossWarning(UserWarning):
    """A loss term had nothing to contrast or align and contributed zero."""


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float, context: str = ""):
        self.component = component
        msg = f"non-finite {component} loss ({value})"
        super().__init__(f"{msg}: {context}" if context else msg)


class CandidateSoftmaxCE(torch.autograd.Function):
    """Per-row ``-sum_c y_c log softmax(a . k_c / tau)_c`` over valid candidates.

    anchors (R, d), candidates (R, C, d), tau scalar, targets (R, C),
    valid (R, C) bool.  Targets are constants; their rows need not sum to one.
    """

    @staticmethod
    def forward(ctx, anchors, candidates, tau, targets, valid):
        z = torch.einsum("rd,rcd->rc", anchors, candidates) / tau
        z = z.masked_fill(~valid, float("-inf"))
        logp = torch.log_softmax(z, dim=-1)
        y = targets.masked_fill(~valid, 0.0)
        loss = -(y * logp.masked_fill(~valid, 0.0)).sum(dim=-1)
        ctx.save_for_backward(anchors, candidates, tau, logp.exp(), y, z.masked_fill(~valid, 0.0))
        return loss

    @staticmethod
    def backward(ctx, grad):
        anchors, candidates, tau, p, y, z = ctx.saved_tensors
        # dL/dz_c = (sum y) p_c - y_c
        gz = grad[:, None] * (y.sum(dim=-1, keepdim=True) * p - y)
        g_a = g_k = g_tau = None
        if ctx.needs_input_grad[0]:
            g_a = torch.einsum("rc,rcd->rd", gz, candidates) / tau
        if ctx.needs_input_grad[1]:
            g_k = gz[:, :, None] * anchors[:, None, :] / tau
        if ctx.needs_input_grad[2]:
            g_tau = -(gz * z).sum() / tau
        return g_a, g_k, g_tau, None, None


class MaskedMeanCosine(torch.autograd.Function):
    """``sum_i w_i cos(v_i, t_i)`` with constant weights ``w`` (zero where unmatched)."""

    @staticmethod
    def forward(ctx, v, t, weights):
        nv = v.norm(dim=-1).clamp_min(COS_EPS)
        nt = t.norm(dim=-1).clamp_min(COS_EPS)
        cos = (v * t).sum(dim=-1) / (nv * nt)
        ctx.save_for_backward(v, t, weights, nv, nt, cos)
        return (weights * cos).sum()

    @staticmethod
    def backward(ctx, grad):
        v, t, w, nv, nt, cos = ctx.saved_tensors
        g = (grad * w)[..., None]
        nv_, nt_, cos_ = nv[..., None], nt[..., None], cos[..., None]
        g_v = g * (t / (nv_ * nt_) - cos_ * v / nv_**2)
        g_t = g * (v / (nv_ * nt_) - cos_ * t / nt_**2)
        return g_v, g_t, None


def _check_finite(**tensors):
    for name, t in tensors.items():
        if t is not None and not torch.isfinite(t).all():
            raise ValueError(f"non-finite values in {name}")


def _as_tau(tau, like: torch.Tensor) -> torch.Tensor:
    if isinstance(tau, torch.Tensor):
        return tau.to(like.dtype)
    return torch.tensor(float(tau), dtype=like.dtype)


def contrastive_rows(
    anchors: torch.Tensor,
    positives: torch.Tensor,
    negatives: torch.Tensor,
    tau,
    neg_valid: Optional[torch.Tensor] = None,
    soft_targets: Optional[torch.Tensor] = None,
    alpha: float = 0.0,
    positive_in_denominator: bool = True,
) -> torch.Tensor:
    """Row-wise queue contrastive loss.

    ``negatives`` is shared (K, d) or per-row (R, K, d).  Candidates are the
    positive followed by the negatives; ``soft_targets`` (R, 1 + K) mixes in
    with weight ``alpha``.  Returns (R,) losses.
    """
    R = anchors.shape[0]
    if negatives.dim() == 2:
        negatives = negatives.unsqueeze(0).expand(R, -1, -1)
    K = negatives.shape[1]
    if neg_valid is None:
        neg_valid = torch.ones(R, K, dtype=torch.bool, device=anchors.device)
    if K == 0 or not neg_valid.any(dim=1).all():
        raise ValueError("contrastive loss needs at least one negative per anchor")
    tau = _as_tau(tau, anchors)
    if not positive_in_denominator:
        if soft_targets is not None and alpha:
            raise ValueError("soft targets require the positive in the denominator")
        pos = (anchors * positives).sum(-1) / tau
        neg = torch.einsum("rd,rkd->rk", anchors, negatives) / tau
        neg = neg.masked_fill(~neg_valid, float("-inf"))
        return torch.logsumexp(neg, dim=-1) - pos

    cands = torch.cat([positives.unsqueeze(1), negatives], dim=1)
    valid = torch.cat([torch.ones(R, 1, dtype=torch.bool, device=anchors.device), neg_valid], dim=1)
    targets = torch.zeros(R, K + 1, dtype=anchors.dtype, device=anchors.device)
    targets[:, 0] = 1.0
    if soft_targets is not None:
        targets = (1.0 - alpha) * targets + alpha * soft_targets.detach().to(anchors.dtype)
    return CandidateSoftmaxCE.apply(anchors, cands, tau, targets, valid)


def contrastive_cl(anchor, positive, negs, tau, soft_targets=None, alpha: float = 0.0,
                   positive_in_denominator: bool = True) -> torch.Tensor:
    """Contrastive loss of one anchor against its positive and a negative set.

    ``-log softmax_0([a.p, a.n_1, ..., a.n_K] / tau)``, optionally mixed with a
    soft-target cross entropy.
    """
    negs = torch.as_tensor(negs)
    if negs.numel() == 0:
        raise ValueError("empty negative set")
    anchor, positive = torch.as_tensor(anchor), torch.as_tensor(positive)
    negs = negs.to(anchor.dtype).reshape(-1, anchor.shape[-1])
    _check_finite(anchor=anchor, positive=positive, negatives=negs,
                  tau=tau if isinstance(tau, torch.Tensor) else torch.tensor(float(tau)))
    st = None if soft_targets is None else torch.as_tensor(soft_targets).reshape(1, -1)
    return contrastive_rows(
        anchor.reshape(1, -1), positive.to(anchor.dtype).reshape(1, -1), negs, tau,
        soft_targets=st, alpha=alpha, positive_in_denominator=positive_in_denominator,
    )[0]


def _negative_set(queue: Optional[torch.Tensor], batch_positives: torch.Tensor):
    """Queue rows if any, else the other samples' positives (first-step fallback)."""
    B = batch_positives.shape[0]
    if queue is not None and queue.shape[0] > 0:
        return queue.to(batch_positives.dtype), None
    valid = ~torch.eye(B, dtype=torch.bool, device=batch_positives.device)
    return batch_positives.detach().unsqueeze(0).expand(B, -1, -1), valid


def _soft_targets(m_anchor, positives, negs, valid, tau):
    with torch.no_grad():
        R = m_anchor.shape[0]
        if negs.dim() == 2:
            negs = negs.unsqueeze(0).expand(R, -1, -1)
        cands = torch.cat([positives.unsqueeze(1), negs], dim=1)
        z = torch.einsum("rd,rcd->rc", m_anchor, cands) / tau
        if valid is not None:
            full = torch.cat([torch.ones(R, 1, dtype=torch.bool, device=z.device), valid], dim=1)
            z = z.masked_fill(~full, float("-inf"))
        return z.softmax(dim=-1)


def _one_direction(anchor, positive, m_anchor, queue, tau, alpha, target_tau,
                   positive_in_denominator):
    negs, valid = _negative_set(queue, positive)
    if valid is not None and positive.shape[0] < 2:
        warnings.warn("no negatives available (empty queue and batch of one)",
                      DegenerateLossWarning, stacklevel=3)
        return anchor.new_zeros(())
    soft = None
    if alpha and m_anchor is not None:
        t_tau = target_tau if target_tau is not None else _as_tau(tau, anchor).detach()
        soft = _soft_targets(m_anchor.detach(), positive.detach(), negs, valid, t_tau)
    rows = contrastive_rows(anchor, positive.detach(), negs, tau, neg_valid=valid,
                            soft_targets=soft, alpha=alpha,
                            positive_in_denominator=positive_in_denominator)
    return rows.mean()


def ditc_loss(v_cls, w_cls, mv_cls, mw_cls, img_queue, txt_queue, tau,
              alpha: float = 0.0, target_tau=None, positive_in_denominator: bool = True):
    """Document-level image-text contrastive loss with momentum pseudo-targets.

    ``v_cls``/``w_cls`` are online image/text CLS projections, ``mv_cls``/
    ``mw_cls`` their momentum counterparts.  Image anchors contrast against
    the text queue and vice versa.  Soft targets are the softmax of the
    momentum anchor over the same candidates, taken at ``target_tau``
    (default: the current tau, detached).
    """
    i2t = _one_direction(v_cls, mw_cls, mv_cls, txt_queue, tau, alpha, target_tau,
                         positive_in_denominator)
    t2i = _one_direction(w_cls, mv_cls, mw_cls, img_queue, tau, alpha, target_tau,
                         positive_in_denominator)
    return 0.5 * (i2t + t2i)


def imc_loss(v_cls, w_cls, v_pos, w_pos, img_queue, txt_queue, tau,
             positive_in_denominator: bool = True):
    """Intra-modal contrastive loss; positives come from the momentum encoders."""
    img = _one_direction(v_cls, v_pos, None, img_queue, tau, 0.0, None, positive_in_denominator)
    txt = _one_direction(w_cls, w_pos, None, txt_queue, tau, 0.0, None, positive_in_denominator)
    return 0.5 * (img + txt)


def _global_local_side(cls, locals_, mask, tau, positive_in_denominator):
    """Mean over samples of the mean over valid locals of cl(cls_b, local_bi, other samples' locals)."""
    B, n, d = locals_.shape
    flat = locals_.reshape(B * n, d).detach()
    flat_valid = mask.reshape(B * n)
    owner = torch.arange(B, device=cls.device).repeat_interleave(n)
    rows_b, rows_i = mask.nonzero(as_tuple=True)
    neg_valid = flat_valid[None, :] & (owner[None, :] != rows_b[:, None])
    has_neg = neg_valid.any(dim=1)
    rows_b, rows_i, neg_valid = rows_b[has_neg], rows_i[has_neg], neg_valid[has_neg]
    if rows_b.numel() == 0:
        return None
    per_row = contrastive_rows(
        cls[rows_b], locals_[rows_b, rows_i].detach(), flat, tau, neg_valid=neg_valid,
        positive_in_denominator=positive_in_denominator,
    )
    sums = torch.zeros(B, dtype=per_row.dtype, device=per_row.device).index_add(0, rows_b, per_row)
    counts = torch.zeros(B, dtype=per_row.dtype, device=per_row.device).index_add(
        0, rows_b, torch.ones_like(per_row))
    present = counts > 0
    return (sums[present] / counts[present]).mean()


def glitc_loss(v_cls, mv_locals, img_mask, w_cls, mw_locals, txt_mask, tau,
               positive_in_denominator: bool = True):
    """Global-local contrastive loss.

    Each online CLS projection is contrasted with its own momentum local
    projections (pooled cells / pooled tokens); negatives are all valid
    momentum locals of the other samples in the batch.  Invalid (masked)
    locals neither act as positives nor negatives.
    """
    if v_cls.shape[0] < 2:
        warnings.warn("global-local loss needs a batch of at least 2; skipped",
                      DegenerateLossWarning, stacklevel=2)
        return v_cls.new_zeros(())
    img_mask = torch.ones(mv_locals.shape[:2], dtype=torch.bool) if img_mask is None else img_mask.bool()
    img = _global_local_side(v_cls, mv_locals, img_mask, tau, positive_in_denominator)
    txt = _global_local_side(w_cls, mw_locals, txt_mask.bool(), tau, positive_in_denominator)
    sides = [s for s in (img, txt) if s is not None]
    if not sides:
        warnings.warn("global-local loss found no valid local vectors",
                      DegenerateLossWarning, stacklevel=2)
        return v_cls.new_zeros(())
    # a side with nothing to contrast counts as zero rather than shrinking the 1/2
    return 0.5 * sum(sides)


def pita_loss(patch_img, patch_txt, matched_mask):
    """Negated mean cosine between image cells and their matched text means.

    Accepts (M, d) or (B, M, d).  Averages over matched cells within each
    sample, then over samples that have at least one match.
    """
    mask = torch.as_tensor(matched_mask, dtype=torch.bool)
    if patch_img.dim() == 2:
        patch_img, patch_txt, mask = patch_img[None], patch_txt[None], mask[None]
    counts = mask.sum(dim=1)
    present = counts > 0
    if not present.any():
        warnings.warn("no matched cells for patch alignment; contributes zero",
                      DegenerateLossWarning, stacklevel=2)
        return patch_img.new_zeros(())
    w = mask.to(patch_img.dtype) / counts.clamp_min(1)[:, None].to(patch_img.dtype)
    w = w / present.sum().to(patch_img.dtype)
    return -MaskedMeanCosine.apply(patch_img, patch_txt, w.detach())


def supervised_loss(logits, labels, mask):
    """Mean token cross entropy over unmasked positions."""
    mask = mask.bool()
    n = mask.sum()
    if n == 0:
        raise ValueError("supervised loss: every position is masked")
    ce = F.cross_entropy(logits[mask], labels[mask].long(), reduction="sum")
    return ce / n


@dataclass
class LossBundle:
    so: float
    ditc: float
    imc: float
    glitc: float
    pita: float
    total: float
    tau: float = float("nan")
    diagnostics: dict = field(default_factory=dict)
    total_tensor: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def as_row(self, step: int) -> dict:
        return {"step": step, "so": self.so, "ditc": self.ditc, "imc": self.imc,
                "glitc": self.glitc, "pita": self.pita, "total": self.total, "tau": self.tau}


def total_loss(components: Mapping[str, torch.Tensor | float],
               weights: Optional[Mapping[str, float]] = None,
               tau: float = float("nan"),
               diagnostics: Optional[dict] = None,
               context: str = "") -> LossBundle:
    """Weighted sum of the five loss components (unit weights by default).

    The sum is carried out in float64 in the fixed order so, ditc, imc,
    glitc, pita, which makes ``total`` exactly the float sum of the weighted
    component values.
    """
    weights = {k: 1.0 for k in LOSS_NAMES} | dict(weights or {})
    unknown = set(components) - set(LOSS_NAMES)
    if unknown:
        raise KeyError(f"unknown loss components: {sorted(unknown)}")
    values, total_t, total = {}, None, 0.0
    for name in LOSS_NAMES:
        c = components.get(name, 0.0)
        t = c if isinstance(c, torch.Tensor) else torch.tensor(float(c))
        val = float(t.detach())
        if not math.isfinite(val):
            raise NonFiniteLossError(name, val, context)
        values[name] = val
        w = float(weights[name])
        total += w * val
        term = t.double() * w if w != 1.0 else t.double()
        total_t = term if total_t is None else total_t + term
    return LossBundle(
        **values, total=total, tau=float(tau), diagnostics=dict(diagnostics or {}),
        total_tensor=total_t,
    )
