"""Entity-level scoring for BIO label sequences."""

from __future__ import annotations

from collections import Counter
from typing import Sequence


def bio_class(label: int) -> tuple[str, int | None]:
    """Split a BIO id into ``("O"|"B"|"I", class)``."""
    if label <= 0:
        return "O", None
    return ("B" if label % 2 == 1 else "I"), (label - 1) // 2


def bio_spans(labels: Sequence[int]) -> set[tuple[int, int, int]]:
    """Entity spans ``(class, start, end_exclusive)``.

    An ``I`` that does not continue a chunk of its own class opens a new
    chunk, the usual conlleval reading of IOB2.
    """
    spans, start, cur = set(), None, None
    for i, lab in enumerate(list(labels) + [0]):
        tag, c = bio_class(lab)
        continues = tag == "I" and c == cur
        if cur is not None and not continues:
            spans.add((cur, start, i))
            cur = None
        if tag != "O" and not continues:
            start, cur = i, c
    return spans


def _prf(tp: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def entity_scores(gold: Sequence[Sequence[int]], pred: Sequence[Sequence[int]]) -> dict:
    """Micro-averaged entity precision/recall/F1, token accuracy, per-class F1."""
    if len(gold) != len(pred):
        raise ValueError("gold and predicted sequence counts differ")
    if not gold:
        raise ValueError("cannot score an empty split")
    tp, n_pred, n_gold = Counter(), Counter(), Counter()
    correct = total = 0
    for g, p in zip(gold, pred):
        if len(g) != len(p):
            raise ValueError("gold and predicted lengths differ")
        gs, ps = bio_spans(g), bio_spans(p)
        for c, *_ in gs:
            n_gold[c] += 1
        for c, *_ in ps:
            n_pred[c] += 1
        for c, *_ in gs & ps:
            tp[c] += 1
        correct += sum(int(a == b) for a, b in zip(g, p))
        total += len(g)
    prec, rec, f1 = _prf(sum(tp.values()), sum(n_pred.values()), sum(n_gold.values()))
    classes = sorted(set(n_gold) | set(n_pred))
    return {
        "entity_precision": prec,
        "entity_recall": rec,
        "entity_f1": f1,
        "token_accuracy": correct / total if total else 0.0,
        "per_class_f1": {str(c): _prf(tp[c], n_pred[c], n_gold[c])[2] for c in classes},
    }
