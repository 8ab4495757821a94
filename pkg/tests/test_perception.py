"""Routing decisions, mask predictors, and BCE supervision.

LN2 and LN10_9 were frozen from high-precision evaluation of ln 2 and
-ln(0.9); the gradient oracle is central finite differences.
"""

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose

from clip_rpn import perception, vlm
from tests.conftest import random_image

LN2 = 0.6931471805599453
NEG_LN_0_9 = 0.10536051565782628

torch.manual_seed(0)


class FakeGateway:
    """Encoder double returning scripted embeddings keyed by prompt text."""

    def __init__(self, image_logits):
        self.image_logits = dict(image_logits)

    def encode_image(self, img):
        vec = np.zeros(vlm.EMBED_DIM)
        vec[0] = 1.0
        return vlm.Embedding(vector=vec, modality="image")

    def encode_prompts(self, prompt_set):
        out = []
        for text in prompt_set.prompts:
            vec = np.zeros(vlm.EMBED_DIM)
            vec[0] = self.image_logits[text]
            out.append(vlm.Embedding(vector=vec, modality="text"))
        return out


# ---------------------------------------------------------------------------
# routing


def test_route_picks_highest_similarity(rng):
    prompts = vlm.PromptSet(name="t", prompts=("sparse", "moderate", "dense"))
    gateway = FakeGateway({"sparse": -1.0, "moderate": 3.0, "dense": 0.5})
    decision = perception.route(random_image(rng), prompts, gateway)
    assert decision.selected == 1
    assert decision.scores[1] == max(decision.scores)
    assert abs(sum(decision.scores) - 1.0) < 1e-6


def test_route_tie_breaks_to_lowest_index(rng):
    prompts = vlm.PromptSet(name="t", prompts=("a", "b"))
    gateway = FakeGateway({"a": 0.7, "b": 0.7})
    decision = perception.route(random_image(rng), prompts, gateway)
    assert decision.scores[0] == pytest.approx(decision.scores[1])
    assert decision.selected == 0


def test_route_three_way_tie(rng):
    prompts = vlm.PromptSet(name="t", prompts=("a", "b", "c"))
    gateway = FakeGateway({"a": 0.2, "b": 0.2, "c": 0.2})
    assert perception.route(random_image(rng), prompts, gateway).selected == 0


def test_route_permutation_equivariant(rng):
    img = random_image(rng)
    logits = {"a": 0.1, "b": 2.0, "c": -0.4}
    gateway = FakeGateway(logits)
    fwd = perception.route(img, vlm.PromptSet(name="t", prompts=("a", "b", "c")), gateway)
    rev = perception.route(img, vlm.PromptSet(name="t", prompts=("c", "b", "a")), gateway)
    assert fwd.selected == 1 and rev.selected == 1
    assert_allclose(fwd.scores, rev.scores[::-1], atol=1e-12)


def test_route_is_pure(rng):
    img = random_image(rng)
    prompts = vlm.PromptSet(name="t", prompts=("a", "b"))
    gateway = FakeGateway({"a": 0.3, "b": 0.9})
    first = perception.route(img, prompts, gateway)
    second = perception.route(img, prompts, gateway)
    assert first.scores == second.scores
    assert first.selected == second.selected


def test_route_from_embeddings_monotone_invariance(rng):
    # argmax survives any strictly increasing transform of the logits
    img = vlm.Embedding(vector=np.eye(1, vlm.EMBED_DIM, 0)[0], modality="image")

    def embs(logits):
        out = []
        for z in logits:
            vec = np.zeros(vlm.EMBED_DIM)
            vec[0] = z
            out.append(vlm.Embedding(vector=vec, modality="text"))
        return out

    for _ in range(50):
        logits = rng.normal(size=int(rng.integers(2, 6)))
        base = perception.route_from_embeddings(img, embs(logits)).selected
        affine = perception.route_from_embeddings(img, embs(2.0 * logits + 1.0)).selected
        expd = perception.route_from_embeddings(img, embs(np.exp(logits) * 0.1)).selected
        assert base == affine == expd == int(np.argmax(logits))


def test_routing_decision_validates_scores():
    with pytest.raises(ValueError):
        perception.RoutingDecision(scores=[0.9, 0.3], selected=0)
    with pytest.raises(ValueError):
        perception.RoutingDecision(scores=[0.7, 0.3], selected=1)
    perception.RoutingDecision(scores=[0.7, 0.3], selected=0)


def test_route_with_stub_encoder_end_to_end(rng):
    # stub backend produces legal decisions for builtin prompts
    enc = vlm.StubEncoder(seed=0)
    prompts = vlm.builtin_prompt_set("p3")
    decision = perception.route(random_image(rng), prompts, enc)
    assert decision.selected in (0, 1)


# ---------------------------------------------------------------------------
# mask predictor


@pytest.mark.parametrize("channels", [8, 16, 24])
def test_mask_predictor_shapes(channels):
    head = perception.MaskPredictor(channels)
    x = torch.randn(2, channels, 12, 16)
    out = head(x)
    assert out.shape == (2, 1, 12, 16)
    assert out.min() > 0.0 and out.max() < 1.0


def test_mask_predictor_zero_weights_give_half():
    head = perception.MaskPredictor(4)
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
    out = head(torch.randn(1, 4, 8, 8))
    assert_allclose(out.detach().numpy(), 0.5, atol=1e-7)


def test_mask_predictor_gradient_matches_finite_differences():
    torch.manual_seed(1)
    head = perception.MaskPredictor(2).double()
    x = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    gt = (torch.rand(1, 1, 4, 4, dtype=torch.float64) > 0.5).double()

    loss = perception.bce_mask_loss(head(x), gt)
    loss.backward()

    h = 1e-6
    checked = 0
    for param in head.parameters():
        flat = param.detach().view(-1)
        grad = param.grad.view(-1)
        for idx in range(0, flat.numel(), max(1, flat.numel() // 3)):
            with torch.no_grad():
                orig = flat[idx].item()
                flat[idx] = orig + h
                up = perception.bce_mask_loss(head(x), gt).item()
                flat[idx] = orig - h
                down = perception.bce_mask_loss(head(x), gt).item()
                flat[idx] = orig
            numeric = (up - down) / (2 * h)
            denom = max(abs(numeric), 1e-8)
            assert abs(grad[idx].item() - numeric) / denom <= 1e-4
            checked += 1
    assert checked >= 6


# ---------------------------------------------------------------------------
# BCE supervision


def test_bce_all_half_is_ln2():
    pred = torch.full((1, 1, 8, 8), 0.5, dtype=torch.float64)
    gt = (torch.rand(1, 1, 8, 8, dtype=torch.float64) > 0.3).double()
    loss = perception.bce_mask_loss(pred, gt)
    assert abs(loss.item() - LN2) <= 1e-9


def test_bce_single_pixel_oracle():
    pred = torch.tensor([[[[0.9]]]], dtype=torch.float64)
    gt = torch.ones(1, 1, 1, 1, dtype=torch.float64)
    assert abs(perception.bce_mask_loss(pred, gt).item() - NEG_LN_0_9) <= 1e-9


def test_bce_perfect_prediction_hits_clamp_floor():
    gt = (torch.rand(1, 1, 8, 8, dtype=torch.float64) > 0.5).double()
    loss = perception.bce_mask_loss(gt.clone(), gt)
    assert 0.0 < loss.item() <= 1.2e-7


def test_bce_nonnegative_and_increasing_with_error():
    gt = torch.ones(1, 1, 4, 4, dtype=torch.float64)
    losses = [
        perception.bce_mask_loss(torch.full_like(gt, p), gt).item()
        for p in (0.9, 0.7, 0.5, 0.3, 0.1)
    ]
    assert all(l >= 0 for l in losses)
    assert all(a < b for a, b in zip(losses, losses[1:]))


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        perception.bce_mask_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 8, 8))


def test_multilevel_losses_order_and_pooling():
    torch.manual_seed(2)
    gt = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    gt[0, 0, 3, 5] = 1.0
    preds = [gt.clone()]
    for factor in (2, 4):
        pooled = torch.nn.functional.max_pool2d(gt, factor)
        preds.append(pooled)
    losses = perception.multilevel_mask_losses(preds, gt)
    assert len(losses) == 3
    for loss in losses:
        assert loss.item() <= 1.2e-7  # clamp floor, perfect predictions


def test_multilevel_all_half_gives_ln2_each():
    gt = (torch.rand(2, 1, 16, 16, dtype=torch.float64) > 0.5).double()
    preds = [
        torch.full((2, 1, 16 // f, 16 // f), 0.5, dtype=torch.float64)
        for f in perception.MASK_LEVEL_FACTORS
    ]
    losses = perception.multilevel_mask_losses(preds, gt)
    for loss in losses:
        assert abs(loss.item() - LN2) <= 1e-9


def test_multilevel_rejects_bad_shapes_and_counts():
    gt = torch.zeros(1, 1, 8, 8)
    with pytest.raises(ValueError):
        perception.multilevel_mask_losses([gt, gt], gt)
    bad = [torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 2, 2)]
    with pytest.raises(ValueError):
        perception.multilevel_mask_losses(bad, gt)


def test_multilevel_pooling_keeps_thin_streaks():
    # one rainy pixel must stay rainy at every scale through max pooling
    gt = torch.zeros(1, 1, 16, 16, dtype=torch.float64)
    gt[0, 0, 9, 9] = 1.0
    confident = []
    for factor in perception.MASK_LEVEL_FACTORS:
        size = 16 // factor
        pred = torch.full((1, 1, size, size), 0.01, dtype=torch.float64)
        confident.append(pred)
    losses = perception.multilevel_mask_losses(confident, gt)
    # the pooled gt keeps exactly one positive cell per level, so a confident
    # all-negative prediction pays a visible penalty everywhere
    for loss in losses:
        assert loss.item() > 0.01
