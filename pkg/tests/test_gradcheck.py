import time

import pytest
import torch

from aligntune import gradcheck as gc
from aligntune import losses as L

FAMILIES = ["contrastive_cl", "ditc", "ditc_alpha", "imc", "glitc", "pita", "supervised"]


def test_registry_covers_every_family():
    assert sorted(gc.CASES) == sorted(FAMILIES)


@pytest.mark.parametrize("name", FAMILIES)
def test_family_passes_on_20_seeds(name):
    results = gc.run_gradcheck([name], range(20))
    worst = max(r.max_rel_err for r in results)
    assert all(r.passed for r in results), worst
    assert worst < 1e-4


def _flipped_pita(v, t, mask):
    """pita_loss whose backward pass has the wrong sign."""

    class Flip(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x.clone()

        @staticmethod
        def backward(ctx, g):
            return -g

    return L.pita_loss(Flip.apply(v), Flip.apply(t), mask)


def test_sign_flip_is_caught_and_named():
    bad = {"pita": lambda seed: gc.case_pita(seed, pita_fn=_flipped_pita)}
    results = gc.run_gradcheck(["pita"], range(5), cases=bad)
    assert not any(r.passed for r in results)
    summary = gc.summarize(results)
    assert list(summary) == ["pita"] and summary["pita"]["failed"] == 5


def test_unknown_family_rejected():
    with pytest.raises(KeyError, match="unknown loss family"):
        gc.run_gradcheck(["nope"], [0])


def test_relative_error_definition():
    a = [torch.tensor([1.0, 2.0])]
    n = [torch.tensor([1.0, 2.2])]
    assert gc.relative_error(a, n) == pytest.approx(0.2 / 2.2)


def test_full_suite_under_two_minutes():
    t0 = time.process_time()
    results = gc.run_gradcheck(seeds=range(20))
    assert len(results) == 20 * len(FAMILIES)
    assert time.process_time() - t0 < 120
