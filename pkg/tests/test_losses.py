import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mtcyp.losses import (
    LossWeights,
    combined_loss,
    dice_loss,
    dice_per_class,
    masked_mse,
    tcl_loss,
)
from mtcyp.network import StageFeatures

from .oracles import dice_loop, mse_loop, tcl_loop


def _stage(regf, segf, tclf):
    z = torch.zeros_like(tclf)
    return StageFeatures(reg=z, seg=z, tcl=z, tclf=tclf, regf=regf, segf=segf)


def _hard_logits(classes, n_classes=6, scale=100.0):
    classes = torch.as_tensor(classes)
    return scale * torch.nn.functional.one_hot(classes, n_classes).permute(0, 3, 1, 2).double()


class TestMaskedMSE:
    def test_perfect_fit(self):
        vals = torch.rand(1, 8, 8)
        lab = torch.rand(1, 8, 8) > 0.5
        assert masked_mse(vals[:, None].clone(), vals, lab) == 0

    def test_two_points(self):
        vals = torch.zeros(1, 4, 4)
        pred = torch.full((1, 1, 4, 4), 9.0)
        lab = torch.zeros(1, 4, 4, dtype=torch.bool)
        vals[0, 0, 0], vals[0, 2, 3] = 0.2, 0.8
        pred[0, 0, 0, 0], pred[0, 0, 2, 3] = 0.2, 0.4
        lab[0, 0, 0] = lab[0, 2, 3] = True
        assert masked_mse(pred, vals, lab).item() == pytest.approx(0.08)

    def test_no_points(self):
        pred = torch.randn(2, 1, 4, 4, requires_grad=True)
        loss = masked_mse(pred, torch.rand(2, 4, 4), torch.zeros(2, 4, 4, dtype=torch.bool))
        loss.backward()
        assert loss.item() == 0
        assert torch.count_nonzero(pred.grad) == 0

    def test_nan_in_unlabeled_targets_is_harmless(self):
        vals = torch.full((1, 4, 4), float("nan"))
        vals[0, 1, 1] = 0.5
        lab = torch.zeros(1, 4, 4, dtype=torch.bool)
        lab[0, 1, 1] = True
        pred = torch.zeros(1, 1, 4, 4, requires_grad=True)
        loss = masked_mse(pred, vals, lab)
        loss.backward()
        assert loss.item() == 0.25
        assert torch.isfinite(pred.grad).all()


class TestDice:
    def test_perfect_overlap(self):
        mask = torch.randint(0, 5, (2, 8, 8))
        assert dice_loss(_hard_logits(mask), mask).item() <= 1e-6

    def test_disjoint_single_class(self):
        mask = torch.zeros(1, 8, 8, dtype=torch.long)  # all rice
        logits = _hard_logits(torch.full((1, 8, 8), 2))
        for eps, bound in [(1.0, 1 / 65 + 1e-9), (1e-3, 2e-5)]:
            assert 1 - dice_loss(logits, mask, smooth=eps).item() <= bound

    def test_half_overlap(self):
        # class 0 on 4 pixels, class 1 on 2; prediction puts class 0 on 2 of
        # its own pixels and on both class-1 pixels
        mask = torch.tensor([[[0, 0, 0, 0, 1, 1]]])
        pred = torch.tensor([[[0, 0, 1, 1, 0, 0]]])
        probs = torch.softmax(_hard_logits(pred), 1)
        dice, present = dice_per_class(probs, mask, smooth=0.0)
        assert dice[0].item() == pytest.approx(0.5)
        assert present.tolist() == [True, True, False, False, False]
        assert dice_loss(_hard_logits(pred), mask, smooth=0.0).item() == pytest.approx(0.75)

    def test_all_unlabeled(self, caplog):
        logits = torch.randn(1, 6, 4, 4, requires_grad=True)
        loss = dice_loss(logits, torch.full((1, 4, 4), 5))
        loss.backward()
        assert loss.item() == 0
        assert torch.count_nonzero(logits.grad) == 0
        assert "no labeled" in caplog.text

    def test_unlabeled_pixels_ignored(self):
        rng = np.random.default_rng(0)
        mask = torch.from_numpy(rng.integers(0, 6, (2, 16, 16)))
        logits = torch.randn(2, 6, 16, 16, dtype=torch.float64, requires_grad=True)
        base = dice_loss(logits, mask)
        base.backward()
        unl = mask == 5
        assert unl.any()
        assert torch.count_nonzero(logits.grad.permute(0, 2, 3, 1)[unl]) == 0
        with torch.no_grad():
            bumped = logits.detach().clone()
            bumped.permute(0, 2, 3, 1)[unl] += torch.randn(int(unl.sum()), 6, dtype=torch.float64) * 5
        assert dice_loss(bumped, mask).item() == base.item()


class TestTCL:
    def test_coincident(self):
        x = torch.randn(1, 4, 8, 8)
        assert tcl_loss([_stage(x, x, x)] * 5).item() == 0

    def test_single_stage(self):
        tclf = torch.zeros(1, 2, 1, 1)
        regf = torch.tensor([1.0, -1.0]).reshape(1, 2, 1, 1)
        assert tcl_loss([_stage(regf, tclf.clone(), tclf)]).item() == 2.0

    def test_additive(self):
        tclf = torch.zeros(1, 1, 1, 1)
        one = torch.ones(1, 1, 1, 1)
        assert tcl_loss([_stage(one, one, tclf)] * 5).item() == 10.0

    def test_empty(self):
        assert tcl_loss([]) is None

    def test_mean_reduction(self):
        tclf = torch.zeros(1, 2, 2, 2)
        regf = torch.ones(1, 2, 2, 2)
        assert tcl_loss([_stage(regf, tclf, tclf)], reduction="mean").item() == 1.0
        assert tcl_loss([_stage(regf, tclf, tclf)], reduction="sum").item() == 8.0

    def test_gradients_reach_all_operands(self):
        a, b, c = (torch.randn(1, 2, 3, 3, requires_grad=True) for _ in range(3))
        tcl_loss([_stage(a, b, c)]).backward()
        assert all(t.grad is not None and t.grad.abs().sum() > 0 for t in (a, b, c))
        c.grad = None
        tcl_loss([_stage(a, b, c)], detach_shared=True).backward()
        assert c.grad is None


class TestCombined:
    def test_paper_weights(self):
        r = combined_loss(LossWeights(5, 1, 0.1), torch.tensor(0.1), torch.tensor(0.2), torch.tensor(1.0))
        assert r.L_MTL.item() == pytest.approx(0.8)

    def test_zero_terms(self):
        z = torch.tensor(0.0)
        assert combined_loss(LossWeights(), z, z, z).L_MTL.item() == 0

    def test_projection(self):
        r = combined_loss(LossWeights(1, 0, 0), torch.tensor(0.3), torch.tensor(0.7), torch.tensor(9.0))
        assert r.L_MTL.item() == pytest.approx(0.3)

    def test_absent_terms(self):
        r = combined_loss(LossWeights(), mse=torch.tensor(0.5))
        assert r.L_MTL.item() == 2.5
        assert "L_Dice" not in r.as_log() and "L_TCL" not in r.as_log()

    def test_doubling_c(self):
        m, d, t = torch.tensor(0.3), torch.tensor(0.2), torch.tensor(1.7, dtype=torch.float64)
        base = combined_loss(LossWeights(5, 1, 0.1), m.double(), d.double(), t).L_MTL
        doubled = combined_loss(LossWeights(5, 1, 0.2), m.double(), d.double(), t).L_MTL
        assert (doubled - base).item() == pytest.approx(0.1 * 1.7, rel=1e-12)

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            LossWeights(-1, 1, 0.1)
        with pytest.raises(ValueError):
            LossWeights(0, 0, 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 24), st.integers(1, 24))
def test_losses_non_negative(seed, h, w):
    g = torch.Generator().manual_seed(seed)
    pred = torch.randn(2, 1, h, w, generator=g)
    vals = torch.rand(2, h, w, generator=g)
    lab = torch.rand(2, h, w, generator=g) > 0.7
    mask = torch.randint(0, 6, (2, h, w), generator=g)
    logits = torch.randn(2, 6, h, w, generator=g)
    assert masked_mse(pred, vals, lab) >= 0
    assert dice_loss(logits, mask) >= 0
    s = _stage(torch.randn(1, 3, h, w, generator=g), torch.randn(1, 3, h, w, generator=g), torch.randn(1, 3, h, w, generator=g))
    assert tcl_loss([s]) >= 0


def test_against_loops_small():
    rng = np.random.default_rng(11)
    pred = rng.normal(size=(1, 1, 6, 7))
    vals = rng.random((1, 6, 7))
    lab = rng.random((1, 6, 7)) > 0.6
    assert masked_mse(torch.from_numpy(pred), torch.from_numpy(vals), torch.from_numpy(lab)).item() == pytest.approx(
        mse_loop(pred[:, 0], vals, lab), rel=1e-12
    )
    logits = rng.normal(size=(2, 6, 5, 4))
    mask = rng.integers(0, 6, (2, 5, 4))
    assert dice_loss(torch.from_numpy(logits), torch.from_numpy(mask)).item() == pytest.approx(
        dice_loop(logits, mask), rel=1e-12
    )
    st_ = [tuple(rng.normal(size=(1, 2, 3, 3)) for _ in range(3)) for _ in range(3)]
    stages = [_stage(*(torch.from_numpy(a) for a in s)) for s in st_]
    assert tcl_loss(stages).item() == pytest.approx(tcl_loop(st_), rel=1e-12)
