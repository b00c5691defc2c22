import math

import pytest
import torch

from aligntune import losses as L
from aligntune import training as T
from aligntune.config import load_config
from aligntune.encoders import AlignmentTuningModel
from aligntune.momentum import negatives

PHASES = ["momentum_forward", "online_forward", "geometry", "losses", "optimizer_step",
          "ema_update", "enqueue"]


def tiny_cfg(preset="full", *overrides):
    base = [
        "corpus.num_train=8", "corpus.num_dev=4", "corpus.image_size=32", "corpus.max_tokens=6",
        "corpus.vocab_size=20", "corpus.num_labels=2",
        "model.hidden_size=16", "model.num_heads=2", "model.proj_dim=8",
        "model.num_layers_img=1", "model.num_layers_txt=1", "model.num_layers_fusion=1",
        "train.epochs=2", "train.batch_size=4", "train.queue_size=16",
    ]
    return load_config(preset=preset, overrides=base + list(overrides))


def _batches(cfg, n=3):
    train_docs, _ = T.build_corpora(cfg)
    state = T.build_state(cfg, len(train_docs))
    out = [state.builder(train_docs[i:i + 4]) for i in range(0, 4 * n, 4)
           if train_docs[i:i + 4]]
    return state, out, train_docs


def test_two_seeded_runs_write_identical_csvs(tmp_path):
    cfg = tiny_cfg("full")
    T.train(cfg, out_dir=tmp_path / "a")
    T.train(cfg, out_dir=tmp_path / "b")
    for name in ("metrics.csv", "eval.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_one_epoch_writes_ceil_rows(tmp_path):
    cfg = tiny_cfg("full", "train.epochs=1", "train.batch_size=3")
    T.train(cfg, out_dir=tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(T.METRIC_FIELDS)
    assert len(lines) - 1 == math.ceil(8 / 3)
    eval_lines = (tmp_path / "eval.csv").read_text().splitlines()
    assert eval_lines[0] == "step,split,entity_f1,token_acc" and len(eval_lines) == 2


def test_metrics_rows_decompose_exactly(tmp_path):
    T.train(tiny_cfg("full", "train.epochs=1"), out_dir=tmp_path)
    import csv
    for row in csv.DictReader(open(tmp_path / "metrics.csv")):
        parts = [float(row[k]) for k in ("so", "ditc", "imc", "glitc", "pita")]
        assert float(row["total"]) == parts[0] + parts[1] + parts[2] + parts[3] + parts[4]


def test_so_only_matches_plain_supervised_loop():
    cfg = tiny_cfg("so_only")
    state, batches, _ = _batches(cfg)
    for b in batches:
        state, _ = T.train_step(b, state)

    tc = state.train_cfg
    torch.manual_seed(tc.seed)
    model = AlignmentTuningModel(state.enc, tau_init=tc.tau_init)
    opt = torch.optim.AdamW(T.param_groups(model, tc), lr=tc.lr, betas=(0.9, 0.999))
    for step, b in enumerate(batches):
        for g in opt.param_groups:
            g["lr"] = g["base_lr"] * T.lr_factor(step, state.total_steps, tc)
        logits, _, _ = model(b.pixels, b.token_ids, b.mask, b.boxes)
        loss = torch.nn.functional.cross_entropy(logits[b.mask], b.labels[b.mask])
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
        opt.step()

    for (name, a), (_, b) in zip(state.model.named_parameters(), model.named_parameters()):
        assert torch.equal(a, b), name


def test_queue_fills_by_batch_size_until_capacity():
    cfg = tiny_cfg("full", "train.queue_size=10")
    state, batches, docs = _batches(cfg, n=2)
    batches += batches[:1]
    fills = []
    for b in batches:
        state, _ = T.train_step(b, state)
        fills.append(state.image_queue.filled)
        assert state.text_queue.filled == state.image_queue.filled
    assert fills == [4, 8, 10]


def test_step_trace_order():
    state, batches, _ = _batches(tiny_cfg("full"), n=1)
    state.trace = []
    T.train_step(batches[0], state)
    assert state.trace == PHASES


def test_so_only_skips_momentum_work():
    state, batches, _ = _batches(tiny_cfg("so_only"), n=1)
    state.trace = []
    state, bundle = T.train_step(batches[0], state)
    assert state.trace == ["online_forward", "geometry", "losses", "optimizer_step"]
    assert state.image_queue.filled == 0
    assert bundle.ditc == bundle.imc == bundle.glitc == bundle.pita == 0.0


def test_graph_isolation():
    state, batches, _ = _batches(tiny_cfg("full"), n=2)
    state, _ = T.train_step(batches[0], state)
    mom_params = list(state.momentum_image.momentum.parameters()) + list(
        state.momentum_text.momentum.parameters())
    opt_ids = {id(p) for g in state.optimizer.param_groups for p in g["params"]}
    assert not any(id(p) in opt_ids for p in mom_params)
    assert all(not p.requires_grad and p.grad is None for p in mom_params)
    assert not state.image_queue.entries.requires_grad

    # perturbing the queue changes the loss but gradients stay out of the momentum side
    model, b = state.model, batches[1]
    img = model.image(b.pixels)
    txt = model.text(b.token_ids, b.mask)
    v, w = model.image.project(img.cls), model.text.project(txt.cls)
    with torch.no_grad():
        mv = state.momentum_image.momentum.project(state.momentum_image.momentum(b.pixels).cls)
        mw = state.momentum_text.momentum.project(
            state.momentum_text.momentum(b.token_ids, b.mask).cls)
    iq, tq = negatives(state.image_queue), negatives(state.text_queue)
    tau = model.temperature.tau
    base = L.ditc_loss(v, w, mv, mw, iq, tq, tau, alpha=0.4)
    shifted = L.ditc_loss(v, w, mv, mw, iq.flip(1), tq.flip(1), tau, alpha=0.4)
    assert float(base.detach()) != float(shifted.detach())
    model.zero_grad()
    base.backward()
    assert all(p.grad is None for p in mom_params)
    assert model.image.head.linear.weight.grad is not None


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cfg = tiny_cfg("full", "train.epochs=3")
    T.train(cfg, out_dir=tmp_path / "full")
    interrupted = tiny_cfg("full", "train.epochs=3", "train.stop_after=3")
    summary = T.train(interrupted, out_dir=tmp_path / "part")
    assert summary["stopped_early"] and summary["step"] == 3
    T.train(cfg, out_dir=tmp_path / "part", resume=tmp_path / "part" / "last.pt")
    for name in ("metrics.csv", "eval.csv"):
        assert (tmp_path / "part" / name).read_text() == (tmp_path / "full" / name).read_text()


def test_resume_reproduces_next_bundle_bitwise(tmp_path):
    cfg = tiny_cfg("full")
    state, batches, _ = _batches(cfg, n=2)
    state, _ = T.train_step(batches[0], state)
    T.save_checkpoint(state, tmp_path / "ck.pt")
    _, expected = T.train_step(batches[1], state)
    fresh, _, _ = _batches(cfg, n=0)
    T.restore_state(fresh, T.read_checkpoint(tmp_path / "ck.pt"))
    _, got = T.train_step(batches[1], fresh)
    assert got.as_row(0) == expected.as_row(0)


def test_parameter_ceiling():
    cfg = tiny_cfg("full", "train.max_params=1000")
    with pytest.raises(ValueError, match="max_params"):
        T.build_state(cfg, 8)


def test_glitc_needs_batch_of_two():
    with pytest.raises(ValueError, match="batch_size"):
        T.configs_from_dict(tiny_cfg("full", "train.batch_size=1"))
    T.configs_from_dict(tiny_cfg("+pita", "train.batch_size=1"))


def test_non_finite_loss_aborts_with_batch_ids(monkeypatch):
    state, batches, _ = _batches(tiny_cfg("so_only"), n=1)
    before = [p.detach().clone() for p in state.model.parameters()]
    monkeypatch.setattr(T, "supervised_loss", lambda *a: torch.tensor(float("nan")))
    with pytest.raises(L.NonFiniteLossError, match=batches[0].doc_ids[0]):
        T.train_step(batches[0], state)
    assert all(torch.equal(a, b) for a, b in zip(before, state.model.parameters()))
    assert state.step == 0


def test_lr_schedule_shape():
    tc = T.TrainConfig(lr=1e-3, min_lr=1e-5, warmup_frac=0.1)
    total = 100
    assert T.lr_factor(0, total, tc) == pytest.approx(0.1)
    assert T.lr_factor(9, total, tc) == pytest.approx(1.0)
    assert T.lr_factor(10, total, tc) == pytest.approx(1.0)
    assert T.lr_factor(100, total, tc) == pytest.approx(1e-2)
    vals = [T.lr_factor(s, total, tc) for s in range(10, 101)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_batch_order_is_seeded_permutation():
    a = T.batch_order(10, 3, 1)
    assert sorted(a) == list(range(10))
    assert a == T.batch_order(10, 3, 1) and a != T.batch_order(10, 3, 2)


def test_worker_pool_builds_same_batches(monkeypatch):
    cfg = tiny_cfg("full")
    train_docs, _ = T.build_corpora(cfg)
    _, _, enc, tc = T.configs_from_dict(cfg)
    serial = T.BatchBuilder(enc, 1, 1)(train_docs)
    monkeypatch.setenv("AET_NUM_WORKERS", "3")
    pooled = T.BatchBuilder(enc, 1, 1)(train_docs)
    for name in ("pixels", "token_ids", "mask", "boxes", "labels", "assign", "matched"):
        assert torch.equal(getattr(serial, name), getattr(pooled, name))


def test_augmentation_stays_in_range_and_is_seeded():
    x = torch.rand(2, 32, 32, 3)
    a = T.augment_images(x, torch.Generator().manual_seed(0))
    b = T.augment_images(x, torch.Generator().manual_seed(0))
    assert torch.equal(a, b) and a.shape == x.shape
    assert a.min() >= 0 and a.max() <= 1


def test_evaluate_checkpoint_matches_model(tmp_path):
    cfg = tiny_cfg("so_only", "train.epochs=1")
    T.train(cfg, out_dir=tmp_path)
    _, dev = T.build_corpora(cfg)
    model = T.load_model(tmp_path / "last.pt")
    assert T.evaluate(tmp_path / "last.pt", dev) == T.evaluate(model, dev)
    with pytest.raises(ValueError, match="empty"):
        T.evaluate(model, [])


def test_pooled_geometry_runs():
    cfg = load_config(preset="full", overrides=[
        "corpus.num_train=4", "corpus.num_dev=2", "model.hidden_size=16", "model.num_heads=2",
        "model.proj_dim=8", "model.patch_size=8", "train.pool_kernel=3", "train.pool_stride=2",
        "train.epochs=1"])
    state, batches, _ = _batches(cfg, n=1)
    assert state.builder.pooled.M == 9
    _, bundle = T.train_step(batches[0], state)
    assert all(math.isfinite(v) for v in bundle.as_row(0).values())
