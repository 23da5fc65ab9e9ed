import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from medovd.detector.losses import (
    contrastive_loss,
    dfl_loss,
    iou_loss,
    similarity,
    similarity_matrix,
    total_loss,
)

from oracles import central_difference, softmax_ce

vec = hnp.arrays(np.float64, 6, elements=st.floats(-5, 5)).filter(lambda v: np.linalg.norm(v) > 1e-3)


def rel_error(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def grad_check(fn, x):
    """Relative error between autograd and central differences of scalar fn at x (float64)."""
    t = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    fn(t).backward()
    shape = t.shape
    numeric = central_difference(
        lambda flat: float(fn(torch.tensor(flat, dtype=torch.float64).reshape(shape))),
        t.detach().reshape(-1).tolist(),
    )
    return rel_error(t.grad.reshape(-1).numpy(), numeric)


# ---- similarity


def test_similarity_hand_values():
    assert similarity([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert similarity([1, 0], [0, 3], alpha=2, beta=0.5) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        similarity([0, 0], [1, 0])


@given(vec, vec, st.floats(0.1, 20), st.floats(-3, 3))
def test_similarity_matches_direct_cosine(e, w, a, b):
    want = a * float(e @ w) / (np.linalg.norm(e) * np.linalg.norm(w)) + b
    assert similarity(e, w, a, b) == pytest.approx(want, abs=1e-6)


@given(vec, vec, st.floats(0.01, 100))
def test_similarity_scale_invariant(e, w, c):
    assert similarity(c * e, w) == pytest.approx(similarity(e, w), abs=1e-9)


@given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-5, 5)), hnp.arrays(np.float64, (5, 6), elements=st.floats(-5, 5)),
       st.floats(0.1, 50), st.floats(-5, 5))
def test_argmax_invariant_to_common_affine(e, w, a, b):
    base = similarity_matrix(torch.tensor(e), torch.tensor(w), 1.0, 0.0).numpy()
    moved = similarity_matrix(torch.tensor(e), torch.tensor(w), a, b).numpy()
    np.testing.assert_allclose(moved, a * base + b, atol=1e-9)
    for row_b, row_m in zip(base, moved):
        # only compare rows with a unique maximum
        if np.sort(row_b)[-1] - np.sort(row_b)[-2] > 1e-9:
            assert np.argmax(row_b) == np.argmax(row_m)


# ---- contrastive


def test_contrastive_hand_case():
    sims = [[1.0, 2.0, 3.0], [0.0, 0.0, 1.0], [5.0, 5.0, 5.0]]
    got = contrastive_loss(torch.tensor(sims, dtype=torch.float64), torch.tensor([2, 0, -1]))
    want = (softmax_ce(sims[0], 2) + softmax_ce(sims[1], 0)) / 2
    assert float(got) == pytest.approx(want, abs=1e-12)


def test_contrastive_uniform_and_peaked():
    assert float(contrastive_loss(torch.zeros(3, 8), torch.tensor([0, 4, 7]))) == pytest.approx(math.log(8))
    peaked = torch.tensor([[50.0, 0.0, 0.0]])
    assert float(contrastive_loss(peaked, torch.tensor([0]))) < 1e-12


def test_contrastive_no_assignment_flag():
    stats = {}
    sims = torch.randn(4, 3, requires_grad=True)
    loss = contrastive_loss(sims, torch.full((4,), -1), stats=stats)
    assert float(loss.detach()) == 0.0 and stats["no_assigned"] == 1
    loss.backward()
    assert sims.grad is not None


def test_objectness_term():
    obj = torch.tensor([0.0, 0.0])
    got = contrastive_loss(torch.zeros(2, 4), torch.tensor([1, -1]), obj, objectness_weight=2.0)
    assert float(got) == pytest.approx(math.log(4) + 2 * math.log(2))


# ---- IoU


def B(*rows):
    return torch.tensor(rows, dtype=torch.float64)


def test_iou_loss_hand_values():
    assert float(iou_loss(B([0, 0, 10, 10]), B([5, 0, 15, 10]), "iou")) == pytest.approx(2 / 3)
    assert float(iou_loss(B([0, 0, 1, 1]), B([5, 5, 6, 6]), "iou")) == pytest.approx(1.0)
    assert float(iou_loss(B([0, 0, 4, 4]), B([0, 0, 4, 4]), "iou")) == pytest.approx(0.0, abs=1e-9)
    assert float(iou_loss(B([0, 0, 4, 4]), B([0, 0, 4, 4]), "ciou")) == pytest.approx(0.0, abs=1e-9)
    assert float(iou_loss(torch.zeros(0, 4), torch.zeros(0, 4))) == 0.0
    with pytest.raises(ValueError):
        iou_loss(B([0, 0, 1, 1]), B([0, 0, 1, 1]), "giou")


def test_ciou_penalizes_center_distance():
    near = iou_loss(B([0, 0, 10, 10]), B([1, 0, 11, 10]))
    far = iou_loss(B([0, 0, 10, 10]), B([20, 0, 30, 10]))
    assert float(far) > 1.0 > float(near) > 0


# ---- DFL


def test_dfl_fractional_target():
    logits = torch.randn(1, 4, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    got = dfl_loss(logits, torch.full((1, 4), 2.3, dtype=torch.float64))
    want = np.mean([0.7 * softmax_ce(logits[0, s].tolist(), 2) + 0.3 * softmax_ce(logits[0, s].tolist(), 3)
                    for s in range(4)])
    assert float(got) == pytest.approx(want, abs=1e-12)


def test_dfl_uniform_and_peaked():
    assert float(dfl_loss(torch.zeros(2, 4, 16), torch.full((2, 4), 7.5))) == pytest.approx(math.log(16), abs=1e-6)
    peaked = torch.full((1, 4, 16), -50.0)
    peaked[..., 5] = 50.0
    assert float(dfl_loss(peaked, torch.full((1, 4), 5.0))) < 1e-9


def test_dfl_top_bin_and_clamping():
    logits = torch.randn(1, 4, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    stats = {}
    got = dfl_loss(logits, torch.tensor([[15.0, 16.5, -1.0, 3.0]], dtype=torch.float64), stats)
    rows = [logits[0, s].tolist() for s in range(4)]
    want = np.mean([softmax_ce(rows[0], 15), softmax_ce(rows[1], 15), softmax_ce(rows[2], 0), softmax_ce(rows[3], 3)])
    assert float(got) == pytest.approx(want, abs=1e-12)
    assert stats["dfl_clamped"] == 2


# ---- total


def test_total_loss_formula():
    c, i, d = (torch.tensor(v) for v in (0.5, 0.2, 0.3))
    assert float(total_loss(c, i, d, 1).total) == pytest.approx(1.0)
    assert float(total_loss(c, i, d, 0).total) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        total_loss(c, i, d, 2)


@given(st.integers(0, 10_000))
def test_components_non_negative(seed):
    g = torch.Generator().manual_seed(seed)
    sims = torch.randn(8, 8, generator=g, dtype=torch.float64) * 5
    tgt = torch.randint(-1, 8, (8,), generator=g)
    obj = torch.randn(8, generator=g, dtype=torch.float64)
    xy = torch.rand(8, 2, generator=g, dtype=torch.float64) * 50
    p = torch.cat([xy, xy + 1 + torch.rand(8, 2, generator=g, dtype=torch.float64) * 20], 1)
    t = p + torch.randn(8, 4, generator=g, dtype=torch.float64)
    t[:, 2:] = torch.maximum(t[:, 2:], t[:, :2] + 0.5)
    out = total_loss(contrastive_loss(sims, tgt, obj), iou_loss(p, t), dfl_loss(torch.randn(8, 4, 16, generator=g), torch.rand(8, 4, generator=g) * 15))
    assert float(out.contrastive) >= 0 and float(out.iou_loss) >= 0 and float(out.dfl) >= 0


# ---- gradients (8 regions x 8 entries, float64)


def _fixture(seed=0):
    g = torch.Generator().manual_seed(seed)
    sims = (torch.randn(8, 8, generator=g, dtype=torch.float64) * 2).numpy()
    obj = torch.randn(8, generator=g, dtype=torch.float64).numpy()
    xy = torch.rand(8, 2, generator=g, dtype=torch.float64) * 40
    pred = torch.cat([xy, xy + 5 + torch.rand(8, 2, generator=g, dtype=torch.float64) * 10], 1).numpy()
    tgt = pred + torch.randn(8, 4, generator=g, dtype=torch.float64).numpy() * 2
    logits = torch.randn(8, 4, 16, generator=g, dtype=torch.float64).numpy()
    offs = (torch.rand(8, 4, generator=g, dtype=torch.float64) * 14 + 0.25).numpy()
    return sims, obj, pred, torch.tensor(tgt), logits, torch.tensor(offs)


TARGETS = torch.tensor([0, 3, -1, 7, 2, -1, 5, 1])


def test_grad_contrastive():
    sims, obj, *_ = _fixture()
    assert grad_check(lambda s: contrastive_loss(s, TARGETS, torch.tensor(obj)), sims) < 1e-4
    assert grad_check(lambda o: contrastive_loss(torch.tensor(sims), TARGETS, o), obj) < 1e-4


@pytest.mark.parametrize("kind", ["ciou", "iou"])
def test_grad_iou(kind):
    _, _, pred, tgt, _, _ = _fixture()
    assert grad_check(lambda p: iou_loss(p, tgt, kind), pred) < 1e-4


def test_grad_dfl():
    *_, logits, offs = _fixture()
    assert grad_check(lambda l: dfl_loss(l, offs), logits) < 1e-4


def test_grad_total():
    sims, obj, pred, tgt, logits, offs = _fixture(3)
    n_s, n_p = sims.size, pred.size
    flat = np.concatenate([sims.ravel(), pred.ravel(), logits.ravel()])

    def fn(x):
        s = x[:n_s].reshape(8, 8)
        p = x[n_s:n_s + n_p].reshape(8, 4)
        l = x[n_s + n_p:].reshape(8, 4, 16)
        return total_loss(contrastive_loss(s, TARGETS, torch.tensor(obj)), iou_loss(p, tgt), dfl_loss(l, offs), 1).total

    assert grad_check(fn, flat) < 1e-4
