import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from medsnet.losses import (LossWeights, bernoulli_kl, dice_loss, feature_loss, kl_loss, loss1,
                            total_loss)
from medsnet.model import DetectorOutputSet


def outputs(main, aux, main_feat=None, aux_feat=None):
    main_feat = main_feat if main_feat is not None else torch.zeros(1, 2, 2, 2)
    aux_feat = aux_feat if aux_feat is not None else [main_feat.clone() for _ in aux]
    return DetectorOutputSet(main, main_feat, list(aux), list(aux_feat))


def test_dice_perfect_overlap():
    t = torch.tensor([[1.0, 0.0], [1.0, 1.0]])
    assert dice_loss(t, t) <= 1e-5


def test_dice_all_wrong_closed_form():
    n = 16
    pred, target = torch.ones(n), torch.zeros(n)
    assert dice_loss(pred, target, epsilon=1.0).item() == pytest.approx(1 - 1 / (n + 1))


def test_dice_half():
    pred = torch.full((4,), 0.5)
    target = torch.tensor([1.0, 1.0, 0.0, 0.0])
    eps = 1e-5
    assert dice_loss(pred, target, eps).item() == pytest.approx(1 - (2 * 1 + eps) / (2 + 2 + eps))
    assert dice_loss(pred, target, eps).item() == pytest.approx(0.5, abs=1e-5)


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        dice_loss(torch.zeros(3), torch.zeros(4))


def test_loss1_perfect_and_alpha_one():
    y = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]])
    out = outputs(y.clone(), [y.clone() for _ in range(4)])
    assert loss1(out, y, LossWeights()).item() <= 5e-5
    wrong = 1 - y
    out = outputs(wrong, [y.clone(), wrong])
    w = LossWeights(alpha=1.0)
    assert loss1(out, y, w).item() == pytest.approx(dice_loss(wrong, y).item())


def test_loss1_arithmetic():
    # maps with dice 0.1 (main), 0.2 and 0.3 (aux); eps tiny so dice = 1 - 2I/(P+T)
    y = torch.ones(10)

    def with_dice(d):
        # all-ones target, pred = c everywhere: dice = 1 - 2c*10/(10c + 10) = 1 - 2c/(c+1)
        c = (1 - d) / (1 + d)
        return torch.full((10,), c)

    out = outputs(with_dice(0.1), [with_dice(0.2), with_dice(0.3)])
    w = LossWeights(alpha=0.5, dice_epsilon=1e-12)
    assert loss1(out, y, w).item() == pytest.approx(0.05 + 0.5, abs=1e-6)


def test_kl_scalar():
    p, q = torch.tensor([0.8]), torch.tensor([0.5])
    expected = 0.8 * math.log(1.6) + 0.2 * math.log(0.4)
    assert bernoulli_kl(p, q).item() == pytest.approx(expected, abs=1e-6)
    assert expected == pytest.approx(0.1927, abs=1e-4)
    out = outputs(q, [p])
    assert kl_loss(out, LossWeights(alpha=1.0)).item() == pytest.approx(expected, abs=1e-6)


def test_kl_zero_cases():
    m = torch.rand(2, 4, 4)
    assert kl_loss(outputs(m, [m.clone(), m.clone()]), LossWeights()).item() == pytest.approx(0, abs=1e-7)
    assert kl_loss(outputs(m, [torch.rand(2, 4, 4)]), LossWeights(alpha=0.0)).item() == 0.0


def test_feature_loss_arithmetic():
    fm = torch.zeros(1, 1, 2, 2)
    fa = torch.tensor([1.0, -1.0, 0.0, 0.0]).reshape(1, 1, 2, 2)
    out = outputs(torch.rand(1, 2, 2), [torch.rand(1, 2, 2)], fm, [fa])
    assert feature_loss(out, LossWeights(lambda_feat=2.0)).item() == pytest.approx(1.0)
    assert feature_loss(out, LossWeights(lambda_feat=0.0)).item() == 0.0


def test_feature_loss_shape_mismatch():
    out = outputs(torch.rand(1, 2, 2), [torch.rand(1, 2, 2)], torch.zeros(1, 1, 2, 2),
                  [torch.zeros(1, 2, 2, 2)])
    with pytest.raises(ValueError):
        feature_loss(out, LossWeights())


def test_total_is_sum_and_ablation_identity():
    torch.manual_seed(0)
    y = (torch.rand(2, 4, 4) > 0.5).float()
    out = outputs(torch.rand(2, 4, 4), [torch.rand(2, 4, 4) for _ in range(3)],
                  torch.rand(2, 3, 4, 4), [torch.rand(2, 3, 4, 4) for _ in range(3)])
    b = total_loss(out, y, LossWeights())
    assert b.total.item() == (b.loss1 + b.loss2 + b.loss3).item()
    plain = total_loss(out, y, LossWeights(alpha=0.0, lambda_feat=0.0))
    assert plain.total.item() == plain.loss1.item()


def test_perfect_outputs_total_near_zero():
    y = (torch.rand(2, 4, 4) > 0.5).float()
    y[0, 0, 0] = 1
    f = torch.rand(2, 3, 4, 4)
    out = outputs(y.clone(), [y.clone() for _ in range(4)], f, [f.clone() for _ in range(4)])
    assert total_loss(out, y).total.item() < 1e-4


def test_combined_toy_additivity():
    fm = torch.zeros(1, 1, 2, 2)
    fa = torch.tensor([1.0, -1.0, 0.0, 0.0]).reshape(1, 1, 2, 2)
    main, aux = torch.tensor([0.5]), torch.tensor([0.8])
    y = torch.tensor([1.0])
    w = LossWeights(alpha=1.0, lambda_feat=2.0)
    b = total_loss(outputs(main, [aux], fm, [fa]), y, w)
    expected = dice_loss(aux, y).item() + (0.8 * math.log(1.6) + 0.2 * math.log(0.4)) + 1.0
    assert b.total.item() == pytest.approx(expected, abs=1e-6)


def test_teacher_is_detached():
    main = torch.rand(1, 4, 4, requires_grad=True)
    fm = torch.rand(1, 2, 4, 4, requires_grad=True)
    aux = torch.rand(1, 4, 4, requires_grad=True)
    fa = torch.rand(1, 2, 4, 4, requires_grad=True)
    out = outputs(main, [aux], fm, [fa])
    (kl_loss(out, LossWeights()) + feature_loss(out, LossWeights())).backward()
    assert main.grad is None and fm.grad is None
    assert aux.grad is not None and fa.grad is not None


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(alpha=1.5)
    with pytest.raises(ValueError):
        LossWeights(lambda_feat=-1)
    with pytest.raises(ValueError):
        LossWeights(dice_epsilon=0)


probs = st.floats(0.0, 1.0)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(probs, probs, st.booleans()), min_size=1, max_size=20),
       st.floats(0, 1), st.floats(0, 2))
def test_losses_nonnegative(vals, alpha, lam):
    p = torch.tensor([v[0] for v in vals], dtype=torch.float64)
    q = torch.tensor([v[1] for v in vals], dtype=torch.float64)
    t = torch.tensor([float(v[2]) for v in vals], dtype=torch.float64)
    w = LossWeights(alpha=alpha, lambda_feat=lam)
    out = outputs(q, [p], q.reshape(1, 1, 1, -1), [p.reshape(1, 1, 1, -1)])
    b = total_loss(out, t, w)
    assert b.loss1.item() >= 0 and b.loss2.item() >= -1e-12 and b.loss3.item() >= 0
    d = dice_loss(p, t).item()
    assert 0 <= d < 1 + 1e-12
    assert bernoulli_kl(p, p).item() == pytest.approx(0.0, abs=1e-12)
