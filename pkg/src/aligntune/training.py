"""The joint supervised and alignment training loop.

One training step, in order:

1. momentum forward (no grad) on the image, the augmented image and the text
2. online forward through both alignment branches and the fusion encoder
3. patch pooling and token-to-cell matching
4. the five losses and their weighted total
5. optimizer step
6. EMA update of both momentum twins
7. enqueue of the momentum CLS projections from step 1
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import default_config
from .data import CorpusConfig, DocumentSample, generate_corpus, num_label_ids
from .encoders import AlignmentTuningModel, EncoderConfig, parameter_count
from .geometry import (
    assignment_tensors,
    build_patch_grid,
    build_pooled_grid,
    pool_sequence,
    pool_vectors,
)
from .losses import (
    LOSS_NAMES,
    DegenerateLossWarning,
    LossBundle,
    ditc_loss,
    glitc_loss,
    imc_loss,
    pita_loss,
    supervised_loss,
    total_loss,
)
from .metrics import entity_scores
from .momentum import MomentumPair, QueueState, enqueue, ema_update, init_momentum, negatives

log = logging.getLogger(__name__)

METRIC_FIELDS = ["step", "so", "ditc", "imc", "glitc", "pita", "total", "tau"]
EVAL_FIELDS = ["step", "split", "entity_f1", "token_acc"]
CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_frac: float = 0.05
    weight_decay: float = 0.02
    grad_clip: float = 1.0
    seed: int = 0
    momentum: float = 0.995
    queue_size: int = 256
    alpha: float = 0.4
    tau_init: float = 0.07
    positive_in_denominator: bool = True
    pool_kernel: int = 1
    pool_stride: int = 1
    eval_every: int = 0
    checkpoint_every: int = 0
    stop_after: Optional[int] = None
    max_params: int = 50_000_000
    lr_image: Optional[float] = None
    lr_text: Optional[float] = None
    lr_fusion: Optional[float] = None
    lr_temperature: Optional[float] = None
    losses: dict = field(default_factory=lambda: {k: 1.0 for k in LOSS_NAMES})

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.losses.get("glitc", 0) > 0 and self.batch_size < 2:
            raise ValueError("the global-local loss needs batch_size >= 2 for in-batch negatives")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if set(self.losses) != set(LOSS_NAMES):
            raise ValueError(f"loss weights must name exactly {LOSS_NAMES}")


def configs_from_dict(cfg: dict) -> tuple[CorpusConfig, int, EncoderConfig, TrainConfig]:
    """Split a run config into (corpus config, dev doc count, encoder config, train config)."""
    c = dict(cfg["corpus"])
    num_dev = int(c.pop("num_dev"))
    corpus_cfg = CorpusConfig(num_docs=int(c.pop("num_train")) + num_dev, **c)
    enc = EncoderConfig(
        **cfg["model"],
        image_size=corpus_cfg.image_size,
        vocab_size=corpus_cfg.vocab_size,
        max_tokens=corpus_cfg.max_tokens,
        num_labels=num_label_ids(corpus_cfg.num_labels),
    )
    train_cfg = TrainConfig(**cfg["train"], losses={k: float(v) for k, v in cfg["losses"].items()})
    return corpus_cfg, num_dev, enc, train_cfg


def build_corpora(cfg: dict) -> tuple[list[DocumentSample], list[DocumentSample]]:
    corpus_cfg, num_dev, _, _ = configs_from_dict(cfg)
    docs = generate_corpus(corpus_cfg)
    split = corpus_cfg.num_docs - num_dev
    return docs[:split], docs[split:]


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    doc_ids: list[str]
    pixels: torch.Tensor  # (B, H, W, 3)
    token_ids: torch.Tensor  # (B, L)
    mask: torch.Tensor  # (B, L) bool
    boxes: torch.Tensor  # (B, L, 4)
    labels: torch.Tensor  # (B, L)
    assign: torch.Tensor  # (B, M, L) text-to-cell averaging
    matched: torch.Tensor  # (B, M) bool

    def __len__(self):
        return len(self.doc_ids)


class BatchBuilder:
    """Turns documents into padded tensors; per-document work is cached."""

    def __init__(self, enc: EncoderConfig, pool_kernel: int, pool_stride: int):
        self.enc = enc
        self.grid = build_patch_grid(enc.image_size, enc.patch_size)
        self.pooled = build_pooled_grid(self.grid, pool_kernel, pool_stride)
        self._cache: dict[str, tuple] = {}

    def _prepare(self, s: DocumentSample) -> tuple:
        L = self.enc.max_tokens
        n = len(s)
        if n > L:
            raise ValueError(f"{s.doc_id}: {n} tokens exceed max_tokens {L}")
        ids = np.zeros(L, dtype=np.int64)
        ids[:n] = s.tokens
        mask = np.zeros(L, dtype=bool)
        mask[:n] = True
        boxes = np.zeros((L, 4), dtype=np.int64)
        if n:
            boxes[:n] = s.boxes
        labels = np.zeros(L, dtype=np.int64)
        labels[:n] = s.labels
        A, matched = assignment_tensors([s.boxes], self.pooled, self.enc.image_size, L)
        return (torch.from_numpy(np.array(s.image, dtype=np.float32)), torch.from_numpy(ids),
                torch.from_numpy(mask), torch.from_numpy(boxes), torch.from_numpy(labels),
                torch.from_numpy(A[0]).float(), torch.from_numpy(matched[0]))

    def warm(self, docs: Sequence[DocumentSample]) -> None:
        todo = [d for d in docs if d.doc_id not in self._cache]
        workers = max(1, int(os.environ.get("AET_NUM_WORKERS", "1")))
        if workers == 1:
            prepared = [self._prepare(d) for d in todo]
        else:
            with ThreadPoolExecutor(workers) as ex:
                prepared = list(ex.map(self._prepare, todo))
        for d, p in zip(todo, prepared):
            self._cache[d.doc_id] = p

    def __call__(self, docs: Sequence[DocumentSample]) -> Batch:
        self.warm(docs)
        parts = list(zip(*(self._cache[d.doc_id] for d in docs)))
        return Batch([d.doc_id for d in docs], *(torch.stack(p) for p in parts))


def batch_order(n: int, seed: int, epoch: int) -> list[int]:
    g = torch.Generator().manual_seed(seed * 100_003 + epoch)
    return torch.randperm(n, generator=g).tolist()


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    order = batch_order(n, seed, epoch)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def augment_images(pixels: torch.Tensor, g: torch.Generator) -> torch.Tensor:
    """Random crop to 90-100% of the area, resized back, and brightness +-10%."""
    B, H, W, _ = pixels.shape
    out = []
    for b in range(B):
        frac = float(torch.empty(()).uniform_(0.9, 1.0, generator=g))
        ch, cw = max(1, round(H * math.sqrt(frac))), max(1, round(W * math.sqrt(frac)))
        y0 = int(torch.randint(0, H - ch + 1, (1,), generator=g))
        x0 = int(torch.randint(0, W - cw + 1, (1,), generator=g))
        bright = float(torch.empty(()).uniform_(0.9, 1.1, generator=g))
        crop = pixels[b, y0:y0 + ch, x0:x0 + cw].permute(2, 0, 1)[None]
        img = F.interpolate(crop, size=(H, W), mode="bilinear", align_corners=False)[0]
        out.append((img.permute(1, 2, 0) * bright).clamp(0.0, 1.0))
    return torch.stack(out)


# ---------------------------------------------------------------------------
# state

@dataclass
class TrainState:
    run_config: dict
    enc: EncoderConfig
    train_cfg: TrainConfig
    model: AlignmentTuningModel
    momentum_image: MomentumPair
    momentum_text: MomentumPair
    image_queue: QueueState
    text_queue: QueueState
    optimizer: torch.optim.Optimizer
    augment_gen: torch.Generator
    builder: BatchBuilder
    total_steps: int = 0
    step: int = 0
    epoch: int = 0
    best_f1: float = -1.0
    trace: Optional[list] = None


_NO_DECAY = ("bias", "cls_token", "pos_embed", "patch_pos", "log_tau")


def param_groups(model: AlignmentTuningModel, tc: TrainConfig) -> list[dict]:
    groups = []
    for part in ("image", "text", "fusion", "temperature"):
        lr = getattr(tc, f"lr_{part}") or tc.lr
        decay, no_decay = [], []
        for name, p in getattr(model, part).named_parameters():
            if p.dim() < 2 or name.endswith(_NO_DECAY) or "norm" in name:
                no_decay.append(p)
            else:
                decay.append(p)
        for params, wd in ((decay, tc.weight_decay), (no_decay, 0.0)):
            if params:
                groups.append({"params": params, "weight_decay": wd, "base_lr": lr,
                               "name": f"{part}{'' if wd else '_no_decay'}"})
    return groups


def lr_factor(step: int, total_steps: int, tc: TrainConfig) -> float:
    """Multiplier on the base lr: linear warmup, then cosine down to ``min_lr / lr``."""
    warm = int(round(tc.warmup_frac * total_steps))
    if warm and step < warm:
        return (step + 1) / warm
    span = max(total_steps - warm, 1)
    progress = min(max(step - warm, 0) / span, 1.0)
    floor = tc.min_lr / tc.lr
    return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def build_state(cfg: dict, num_train_docs: int) -> TrainState:
    _, _, enc, tc = configs_from_dict(cfg)
    n_params = parameter_count(enc)
    if n_params > tc.max_params:
        raise ValueError(f"model has {n_params} parameters, above the max_params ceiling {tc.max_params}")
    torch.manual_seed(tc.seed)
    model = AlignmentTuningModel(enc, tau_init=tc.tau_init)
    mom_img = init_momentum(model.image, tc.momentum)
    mom_txt = init_momentum(model.text, tc.momentum)
    opt = torch.optim.AdamW(param_groups(model, tc), lr=tc.lr, betas=(0.9, 0.999))
    steps_per_epoch = math.ceil(num_train_docs / tc.batch_size)
    return TrainState(
        run_config=cfg, enc=enc, train_cfg=tc, model=model,
        momentum_image=mom_img, momentum_text=mom_txt,
        image_queue=QueueState(tc.queue_size, enc.proj_dim),
        text_queue=QueueState(tc.queue_size, enc.proj_dim),
        optimizer=opt,
        augment_gen=torch.Generator().manual_seed(tc.seed + 1),
        builder=BatchBuilder(enc, tc.pool_kernel, tc.pool_stride),
        total_steps=steps_per_epoch * tc.epochs,
    )


def _mark(state: TrainState, phase: str) -> None:
    if state.trace is not None:
        state.trace.append(phase)


def _mean_dot(a, b) -> float:
    return float((a * b).sum(-1).mean().detach())


def train_step(batch: Batch, state: TrainState) -> tuple[TrainState, LossBundle]:
    tc, model = state.train_cfg, state.model
    w = tc.losses
    need_align = any(w[k] > 0 for k in ("ditc", "imc", "glitc"))
    pooled = state.builder.pooled
    model.train()

    mom_i, mom_t = state.momentum_image.momentum, state.momentum_text.momentum
    if need_align:
        _mark(state, "momentum_forward")
        with torch.no_grad():
            m_img = mom_i(batch.pixels, is_momentum=True)
            m_txt = mom_t(batch.token_ids, batch.mask, is_momentum=True)
            mv_cls, mw_cls = mom_i.project(m_img.cls), mom_t.project(m_txt.cls)
            v_plus = None
            if w["imc"] > 0:
                aug = augment_images(batch.pixels, state.augment_gen)
                v_plus = mom_i.project(mom_i(aug, is_momentum=True).cls)

    _mark(state, "online_forward")
    img = model.image(batch.pixels)
    txt = model.text(batch.token_ids, batch.mask)
    logits = model.fuse_and_predict(img, txt, batch.pixels, batch.token_ids, batch.boxes)
    v_cls, w_cls = model.image.project(img.cls), model.text.project(txt.cls)

    _mark(state, "geometry")
    if w["glitc"] > 0:
        with torch.no_grad():
            mv_loc = mom_i.project(pool_vectors(m_img.locals, pooled))
            mw_pool, mw_valid = pool_sequence(m_txt.locals, batch.mask, tc.pool_kernel, tc.pool_stride)
            mw_loc = mom_t.project(mw_pool)
    if w["pita"] > 0:
        patch_img = pool_vectors(img.locals, pooled)
        patch_txt = batch.assign @ txt.locals

    _mark(state, "losses")
    tau = model.temperature.tau
    img_negs = negatives(state.image_queue)
    txt_negs = negatives(state.text_queue)
    comps: dict[str, torch.Tensor] = {"so": supervised_loss(logits, batch.labels, batch.mask)}
    diag: dict[str, float] = {}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateLossWarning)
        if w["ditc"] > 0:
            comps["ditc"] = ditc_loss(v_cls, w_cls, mv_cls, mw_cls, img_negs, txt_negs, tau,
                                      alpha=tc.alpha,
                                      positive_in_denominator=tc.positive_in_denominator)
            diag["ditc_pos_sim"] = 0.5 * (_mean_dot(v_cls, mw_cls) + _mean_dot(w_cls, mv_cls))
        if w["imc"] > 0:
            comps["imc"] = imc_loss(v_cls, w_cls, v_plus, mw_cls, img_negs, txt_negs, tau,
                                    positive_in_denominator=tc.positive_in_denominator)
            diag["imc_pos_sim"] = 0.5 * (_mean_dot(v_cls, v_plus) + _mean_dot(w_cls, mw_cls))
        if w["glitc"] > 0:
            comps["glitc"] = glitc_loss(v_cls, mv_loc, None, w_cls, mw_loc, mw_valid, tau,
                                        positive_in_denominator=tc.positive_in_denominator)
            diag["glitc_pos_sim"] = _mean_dot(v_cls.unsqueeze(1), mv_loc)
        if w["pita"] > 0:
            comps["pita"] = pita_loss(patch_img, patch_txt, batch.matched)
            diag["pita_mean_cos"] = -float(comps["pita"].detach())
    for wmsg in caught:
        if issubclass(wmsg.category, DegenerateLossWarning):
            diag.setdefault("degenerate", []).append(str(wmsg.message))
        else:
            warnings.warn_explicit(wmsg.message, wmsg.category, wmsg.filename, wmsg.lineno)
    bundle = total_loss(comps, tc.losses, tau=float(tau.detach()), diagnostics=diag,
                        context=f"batch {batch.doc_ids}")

    _mark(state, "optimizer_step")
    factor = lr_factor(state.step, state.total_steps, tc)
    for g in state.optimizer.param_groups:
        g["lr"] = g["base_lr"] * factor
    state.optimizer.zero_grad(set_to_none=True)
    bundle.total_tensor.backward()
    if tc.grad_clip:
        norm = torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
        bundle.diagnostics["grad_norm"] = float(norm)
    state.optimizer.step()

    if need_align:
        _mark(state, "ema_update")
        ema_update(state.momentum_image)
        ema_update(state.momentum_text)
        _mark(state, "enqueue")
        enqueue(state.image_queue, mv_cls)
        enqueue(state.text_queue, mw_cls)
    state.step += 1
    return state, bundle


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(state: TrainState, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "encoder_config": state.enc.to_json(),
        "run_config": json.dumps(state.run_config, sort_keys=True),
        "model": state.model.state_dict(),
        "momentum_image": state.momentum_image.momentum.state_dict(),
        "momentum_text": state.momentum_text.momentum.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "queues": {"image": state.image_queue.state_dict(), "text": state.text_queue.state_dict()},
        "rng": {"augment": state.augment_gen.get_state(), "torch": torch.get_rng_state()},
        "step": state.step,
        "epoch": state.epoch,
        "best_f1": state.best_f1,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def read_checkpoint(path: str | Path) -> dict:
    return torch.load(Path(path), map_location="cpu", weights_only=True)


def restore_state(state: TrainState, payload: dict) -> TrainState:
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')}")
    state.model.load_state_dict(payload["model"])
    state.momentum_image.momentum.load_state_dict(payload["momentum_image"])
    state.momentum_text.momentum.load_state_dict(payload["momentum_text"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.image_queue.load_state_dict(payload["queues"]["image"])
    state.text_queue.load_state_dict(payload["queues"]["text"])
    state.augment_gen.set_state(payload["rng"]["augment"])
    torch.set_rng_state(payload["rng"]["torch"])
    state.step = int(payload["step"])
    state.epoch = int(payload["epoch"])
    state.best_f1 = float(payload["best_f1"])
    return state


def load_model(path: str | Path) -> AlignmentTuningModel:
    payload = read_checkpoint(path)
    enc = EncoderConfig.from_json(payload["encoder_config"])
    model = AlignmentTuningModel(enc)
    model.load_state_dict(payload["model"])
    model.eval()
    return model


# ---------------------------------------------------------------------------
# evaluation

@torch.no_grad()
def predict(model: AlignmentTuningModel, docs: Sequence[DocumentSample],
            batch_size: int = 16, builder: Optional[BatchBuilder] = None) -> list[list[int]]:
    builder = builder or BatchBuilder(model.cfg, 1, 1)
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(docs), batch_size):
        chunk = docs[i:i + batch_size]
        b = builder(chunk)
        logits, _, _ = model(b.pixels, b.token_ids, b.mask, b.boxes)
        pred = logits.argmax(-1)
        out += [pred[j, :len(d)].tolist() for j, d in enumerate(chunk)]
    model.train(was_training)
    return out


def evaluate(model_or_checkpoint, docs: Sequence[DocumentSample], batch_size: int = 16) -> dict:
    """Entity-level P/R/F1, token accuracy and per-class F1 of the online model."""
    if not docs:
        raise ValueError("cannot evaluate an empty split")
    model = model_or_checkpoint
    if not isinstance(model, AlignmentTuningModel):
        model = load_model(model_or_checkpoint)
    preds = predict(model, docs, batch_size)
    return entity_scores([list(d.labels) for d in docs], preds)


# ---------------------------------------------------------------------------
# loop

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _truncate_csv(path: Path, fields: list[str], max_step: int) -> None:
    rows = []
    if path.exists():
        with open(path, newline="") as f:
            rows = [r for r in csv.DictReader(f) if int(r["step"]) <= max_step]
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=fields)
        wr.writeheader()
        wr.writerows(rows)


def _append_csv(path: Path, fields: list[str], row: dict) -> None:
    with open(path, "a", newline="") as f:
        csv.DictWriter(f, fieldnames=fields).writerow({k: _fmt(row[k]) for k in fields})


def train(
    cfg: Optional[dict] = None,
    train_docs: Optional[Sequence[DocumentSample]] = None,
    dev_docs: Optional[Sequence[DocumentSample]] = None,
    out_dir: str | Path = "runs/latest",
    resume: str | Path | None = None,
    trace: Optional[list] = None,
) -> dict:
    """Train end to end; writes ``metrics.csv``, ``eval.csv``, ``last.pt`` and ``best.pt``.

    Returns a summary with the final step and the best dev entity F1.
    """
    cfg = cfg or default_config()
    if train_docs is None:
        gen_train, gen_dev = build_corpora(cfg)
        train_docs = gen_train
        dev_docs = gen_dev if dev_docs is None else dev_docs
    train_docs = list(train_docs)
    dev_docs = list(dev_docs or [])
    if not train_docs:
        raise ValueError("empty training corpus")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = build_state(cfg, len(train_docs))
    state.trace = trace
    tc = state.train_cfg
    metrics_path, eval_path = out / "metrics.csv", out / "eval.csv"
    if resume is not None:
        restore_state(state, read_checkpoint(resume))
        log.info("resumed from %s at step %d", resume, state.step)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    _truncate_csv(metrics_path, METRIC_FIELDS, state.step)
    _truncate_csv(eval_path, EVAL_FIELDS, state.step)

    def run_eval():
        if not dev_docs:
            return None
        res = evaluate(state.model, dev_docs)
        _append_csv(eval_path, EVAL_FIELDS, {"step": state.step, "split": "dev",
                                             "entity_f1": res["entity_f1"],
                                             "token_acc": res["token_accuracy"]})
        if res["entity_f1"] > state.best_f1:
            state.best_f1 = res["entity_f1"]
            save_checkpoint(state, out / "best.pt")
        return res

    state.builder.warm(train_docs)
    steps_per_epoch = math.ceil(len(train_docs) / tc.batch_size)
    stopped = False
    last_eval_step = -1
    while state.epoch < tc.epochs and not stopped:
        batches = epoch_batches(len(train_docs), tc.batch_size, tc.seed, state.epoch)
        for idx in batches[state.step - state.epoch * steps_per_epoch:]:
            batch = state.builder([train_docs[i] for i in idx])
            _, bundle = train_step(batch, state)
            _append_csv(metrics_path, METRIC_FIELDS, bundle.as_row(state.step))
            if tc.eval_every and state.step % tc.eval_every == 0:
                run_eval()
                last_eval_step = state.step
            if tc.checkpoint_every and state.step % tc.checkpoint_every == 0:
                save_checkpoint(state, out / "last.pt")
            if tc.stop_after is not None and state.step >= tc.stop_after:
                stopped = True
                break
        if stopped:
            break
        state.epoch += 1
        if not tc.eval_every and last_eval_step != state.step:
            run_eval()
            last_eval_step = state.step
        save_checkpoint(state, out / "last.pt")

    if stopped:
        save_checkpoint(state, out / "last.pt")
    elif last_eval_step != state.step:
        run_eval()
        save_checkpoint(state, out / "last.pt")
    final = evaluate(state.model, dev_docs) if dev_docs else None
    return {
        "step": state.step,
        "epoch": state.epoch,
        "best_dev_f1": state.best_f1,
        "final_dev": final,
        "out_dir": str(out),
        "stopped_early": stopped,
    }
