import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semiseg.losses import (LossWeights, ce_loss, consistency_loss, contrastive_loss, dice_loss,
                            supervised_loss, total_loss)
from semiseg.patching import crop_aligned

from .oracles import ce_oracle, consistency_oracle, contrastive_oracle


def unit_rows(shape, seed, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    t = torch.randn(*shape, generator=gen, dtype=dtype)
    return torch.nn.functional.normalize(t, dim=-1)


# ---------------------------------------------------------------- contrastive

def test_contrastive_identity_all_equal_vectors():
    v = torch.zeros(16, dtype=torch.float64)
    v[3] = 1.0
    grid = v.repeat(4, 4, 1)
    vecs = v.repeat(16, 1)
    loss = contrastive_loss(grid, vecs, tau=0.1)
    assert abs(float(loss) - math.log(16)) < 1e-6
    # temperature drops out when every logit is equal
    assert abs(float(contrastive_loss(grid, vecs, tau=2.0)) - math.log(16)) < 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_contrastive_matches_bruteforce_oracle(seed):
    grid = unit_rows((4, 4, 16), seed)
    vecs = unit_rows((16, 16), 1000 + seed)
    ours = float(contrastive_loss(grid, vecs, tau=0.1))
    ref = contrastive_oracle(grid.numpy(), vecs.numpy(), 0.1)
    assert abs(ours - ref) < 1e-6


def test_contrastive_accepts_list_of_vectors():
    grid = unit_rows((2, 2, 8), 7)
    vecs = [unit_rows((8,), 70 + i) for i in range(4)]
    a = float(contrastive_loss(grid, vecs, tau=0.5))
    b = float(contrastive_loss(grid, torch.stack(vecs), tau=0.5))
    assert a == b


def test_contrastive_batched_equals_mean_of_singles():
    grids = unit_rows((3, 2, 2, 8), 11)
    vecs = unit_rows((3, 4, 8), 12)
    batched = float(contrastive_loss(grids, vecs, tau=0.2))
    singles = [float(contrastive_loss(grids[b], vecs[b], tau=0.2)) for b in range(3)]
    assert batched == pytest.approx(sum(singles) / 3, abs=1e-12)


def test_contrastive_permutation_invariance():
    grid = unit_rows((3, 3, 8), 21)
    vecs = unit_rows((9, 8), 22)
    perm = torch.randperm(9, generator=torch.Generator().manual_seed(5))
    grid_p = grid.reshape(9, 8)[perm].reshape(3, 3, 8)
    vecs_p = vecs[perm]
    a = float(contrastive_loss(grid, vecs, tau=0.1))
    b = float(contrastive_loss(grid_p, vecs_p, tau=0.1))
    assert a == pytest.approx(b, abs=1e-9)


def test_contrastive_monotone_in_positive_similarity():
    # two positives along the same direction, everything else fixed
    grid = unit_rows((2, 2, 8), 31)
    base = unit_rows((4, 8), 32)
    closer = torch.nn.functional.normalize(base + 0.5 * grid.reshape(4, 8), dim=-1)
    far_loss = float(contrastive_loss(grid, base, tau=0.1))
    near_loss = float(contrastive_loss(grid, closer, tau=0.1))
    assert near_loss < far_loss


def test_contrastive_count_mismatch_and_bad_tau():
    grid = unit_rows((2, 2, 8), 41)
    with pytest.raises(ValueError, match="patch vectors"):
        contrastive_loss(grid, unit_rows((3, 8), 42), tau=0.1)
    with pytest.raises(ValueError, match="tau"):
        contrastive_loss(grid, unit_rows((4, 8), 43), tau=0.0)


def test_contrastive_negative_subsampling():
    grid = unit_rows((4, 4, 8), 51)
    vecs = unit_rows((16, 8), 52)
    gen = torch.Generator().manual_seed(0)
    sub = float(contrastive_loss(grid, vecs, tau=0.1, num_negatives=5, generator=gen))
    full = float(contrastive_loss(grid, vecs, tau=0.1))
    assert math.isfinite(sub)
    assert sub != full  # fewer denominator terms
    gen2 = torch.Generator().manual_seed(0)
    again = float(contrastive_loss(grid, vecs, tau=0.1, num_negatives=5, generator=gen2))
    assert sub == again
    # subsampling >= available negatives reduces to the full loss
    all_negs = float(contrastive_loss(grid, vecs, tau=0.1, num_negatives=15,
                                      generator=torch.Generator().manual_seed(1)))
    assert all_negs == pytest.approx(full, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), tau=st.floats(1e-3, 10.0))
def test_contrastive_finite_for_finite_inputs(seed, tau):
    grid = unit_rows((2, 2, 4), seed)
    vecs = unit_rows((4, 4), seed + 1)
    assert math.isfinite(float(contrastive_loss(grid, vecs, tau=tau)))


# ---------------------------------------------------------------- consistency

def test_consistency_zero_when_patches_match_crops():
    global_pred = torch.randn(2, 16, 16, dtype=torch.float64)
    patches = torch.stack([crop_aligned(global_pred, i, 4) for i in range(16)])
    assert float(consistency_loss(global_pred, patches, 4)) == 0.0


def test_consistency_saturated_disagreement_is_one():
    global_pred = torch.zeros(2, 8, 8)
    global_pred[0] = 60.0   # softmax -> (1, 0) everywhere
    patches = torch.zeros(4, 2, 4, 4)
    patches[:, 1] = 60.0    # softmax -> (0, 1) everywhere
    assert float(consistency_loss(global_pred, patches, 2)) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_consistency_matches_pixel_loop_oracle(seed):
    gen = torch.Generator().manual_seed(seed)
    global_pred = torch.randn(2, 8, 8, generator=gen, dtype=torch.float64)
    patches = torch.randn(4, 2, 4, 4, generator=gen, dtype=torch.float64)
    ours = float(consistency_loss(global_pred, patches, 2))
    ref = consistency_oracle(global_pred.numpy(), patches.numpy(), 2)
    assert abs(ours - ref) < 1e-6


def test_consistency_non_negative_and_shape_errors():
    gen = torch.Generator().manual_seed(3)
    global_pred = torch.randn(2, 8, 8, generator=gen)
    patches = torch.randn(4, 2, 4, 4, generator=gen)
    assert float(consistency_loss(global_pred, patches, 2)) >= 0.0
    with pytest.raises(ValueError, match="patch predictions"):
        consistency_loss(global_pred, patches[:3], 2)
    with pytest.raises(ValueError, match="patch predictions"):
        consistency_loss(global_pred, torch.randn(4, 2, 3, 4), 2)


# ----------------------------------------------------------------------- dice

def saturated_logits(fg_mask, magnitude=60.0):
    """Logits whose softmax is (effectively) 1 on the given class per pixel."""
    fg = fg_mask.float()
    return torch.stack([(1 - fg) * magnitude, fg * magnitude])


def test_dice_perfect_overlap_near_zero():
    mask = torch.zeros(8, 8)
    mask[2:6, 2:6] = 1.0
    loss = float(dice_loss(saturated_logits(mask), mask))
    assert loss == pytest.approx(0.0, abs=1e-6)


def test_dice_both_empty_exact_zero():
    mask = torch.zeros(4, 4)
    logits = torch.zeros(2, 4, 4)
    logits[1] = float("-inf")  # foreground probability exactly 0
    assert float(dice_loss(logits, mask)) == 0.0


def test_dice_half_overlap():
    # |pred| = |gt| = 100, intersection 50 -> dice 0.5 -> loss 0.5
    pred_fg = torch.zeros(20, 20)
    pred_fg.reshape(-1)[:100] = 1.0
    gt = torch.zeros(20, 20)
    gt.reshape(-1)[50:150] = 1.0
    loss = float(dice_loss(saturated_logits(pred_fg), gt))
    assert loss == pytest.approx(0.5, abs=1e-4)


def test_dice_shape_mismatch():
    with pytest.raises(ValueError, match="mask shape"):
        dice_loss(torch.zeros(2, 4, 4), torch.zeros(5, 4))


# ------------------------------------------------------------------------- ce

def test_ce_perfect_prediction_zero():
    # -inf on the wrong class makes the softmax exactly one-hot
    mask = (torch.rand(6, 6) > 0.5).float()
    fg = mask.bool()
    neg_inf = torch.tensor(float("-inf"))
    zero = torch.tensor(0.0)
    logits = torch.stack([torch.where(fg, neg_inf, zero), torch.where(fg, zero, neg_inf)])
    assert float(ce_loss(logits, mask)) == 0.0


def test_ce_uniform_is_log2():
    mask = (torch.rand(8, 8) > 0.3).float()
    logits = torch.zeros(2, 8, 8)
    assert float(ce_loss(logits, mask)) == pytest.approx(math.log(2), abs=1e-6)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ce_matches_pixel_loop_oracle(seed):
    gen = torch.Generator().manual_seed(seed)
    logits = torch.randn(2, 8, 8, generator=gen, dtype=torch.float64)
    mask = (torch.rand(8, 8, generator=gen) > 0.5).float()
    ours = float(ce_loss(logits, mask.double()))
    ref = ce_oracle(logits.numpy(), mask.numpy())
    assert abs(ours - ref) < 1e-6


def test_ce_rejects_non_binary_mask():
    with pytest.raises(ValueError, match="mask values"):
        ce_loss(torch.zeros(2, 4, 4), torch.full((4, 4), 0.5))


# ---------------------------------------------------------------- supervised

def test_supervised_is_half_dice_plus_half_ce():
    gen = torch.Generator().manual_seed(9)
    logits = torch.randn(2, 8, 8, generator=gen, dtype=torch.float64)
    mask = (torch.rand(8, 8, generator=gen) > 0.5).double()
    combo = float(supervised_loss(logits, mask))
    parts = 0.5 * (float(dice_loss(logits, mask)) + float(ce_loss(logits, mask)))
    assert combo == pytest.approx(parts, abs=1e-9)


def test_supervised_worked_example():
    # uniform logits give ce = ln 2 exactly; half-covered foreground of equal
    # size gives dice loss ~ 0.5, so the combination sits near 0.59657
    mask = torch.zeros(16, 16)
    mask.reshape(-1)[:128] = 1.0
    logits = torch.zeros(2, 16, 16)
    val = float(supervised_loss(logits, mask))
    assert val == pytest.approx(0.5 * (0.5 + math.log(2)), abs=1e-4)


# --------------------------------------------------------------------- total

def test_total_loss_stage_weightings():
    assert total_loss(1.0, 2.0, 3.0, LossWeights(1.0, 0.0, 0.1)) == pytest.approx(3.0)
    assert total_loss(1.0, 2.0, 3.0, LossWeights(0.0, 1.0, 0.1)) == pytest.approx(4.0)
    assert total_loss(7.5, 0.0, 0.0, LossWeights(0.3, 0.9, 0.1)) == pytest.approx(7.5)


def test_total_loss_rejects_non_finite_terms():
    w = LossWeights(1.0, 1.0, 0.1)
    with pytest.raises(ValueError, match="contrastive"):
        total_loss(1.0, float("nan"), 0.0, w)
    with pytest.raises(ValueError, match="consistency"):
        total_loss(1.0, 0.0, float("inf"), w)
    with pytest.raises(ValueError, match="supervised"):
        total_loss(torch.tensor(float("nan")), 0.0, 0.0, w)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(-0.1, 0.0, 0.1)
    with pytest.raises(ValueError):
        LossWeights(0.0, 0.0, 0.0)


# ------------------------------------------------------------ gradient checks

def _grad_check(build, step=1e-4, tol=1e-3, trials=5):
    from .oracles import finite_difference_grads, max_relative_error
    for trial in range(trials):
        fn, tensors = build(trial)
        loss = fn()
        loss.backward()
        analytic = [t.grad.clone() for t in tensors]
        for t in tensors:
            t.grad = None
        numeric = finite_difference_grads(fn, tensors, step=step)
        assert max_relative_error(analytic, numeric) < tol


def test_contrastive_gradients_match_finite_differences():
    def build(trial):
        gen = torch.Generator().manual_seed(trial)
        grid = torch.randn(2, 2, 4, generator=gen, dtype=torch.float64, requires_grad=True)
        vecs = torch.randn(4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
        return (lambda: contrastive_loss(grid, vecs, tau=0.5)), [grid, vecs]
    _grad_check(build)


def test_consistency_gradients_match_finite_differences():
    def build(trial):
        gen = torch.Generator().manual_seed(100 + trial)
        gp = torch.randn(2, 8, 8, generator=gen, dtype=torch.float64, requires_grad=True)
        pp = torch.randn(4, 2, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
        return (lambda: consistency_loss(gp, pp, 2)), [gp, pp]
    _grad_check(build)


def test_dice_gradients_match_finite_differences():
    def build(trial):
        gen = torch.Generator().manual_seed(200 + trial)
        pred = torch.randn(2, 8, 8, generator=gen, dtype=torch.float64, requires_grad=True)
        mask = (torch.rand(8, 8, generator=gen) > 0.5).double()
        return (lambda: dice_loss(pred, mask)), [pred]
    _grad_check(build)


def test_ce_gradients_match_finite_differences():
    def build(trial):
        gen = torch.Generator().manual_seed(300 + trial)
        pred = torch.randn(2, 8, 8, generator=gen, dtype=torch.float64, requires_grad=True)
        mask = (torch.rand(8, 8, generator=gen) > 0.5).double()
        return (lambda: ce_loss(pred, mask)), [pred]
    _grad_check(build)
