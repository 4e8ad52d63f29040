import math

import numpy as np
import pytest

from mcinpaint import autodiff as ad
from mcinpaint import losses as ls
from mcinpaint.autodiff import Tensor4
from mcinpaint.losses import LossWeights
from mcinpaint.optim import AdamState, adam_step

from helpers import finite_difference, rel_err


def leaf(arr, requires_grad=False, dtype=np.float64):
    return Tensor4(np.asarray(arr, dtype=dtype), requires_grad=requires_grad)


def scores(vals, dtype=np.float64):
    return leaf(np.asarray(vals, dtype=dtype).reshape(-1, 1, 1, 1))


# ------------------------------------------------------------ reconstruction


def test_reconstruction_zero_when_output_matches():
    rng = np.random.default_rng(0)
    y = leaf(rng.standard_normal((2, 4, 4, 3)))
    m_w = rng.random((2, 4, 4))
    assert ls.reconstruction_loss(y, y, m_w).item() == 0.0


def test_reconstruction_zero_weights_annihilate():
    rng = np.random.default_rng(1)
    y = leaf(rng.standard_normal((1, 4, 4, 3)))
    g = leaf(rng.standard_normal((1, 4, 4, 3)))
    assert ls.reconstruction_loss(y, g, np.zeros((4, 4))).item() == 0.0


def test_reconstruction_hand_expanded_case():
    y = leaf(np.array([[1.0, 0.0], [0.0, 0.0]]).reshape(1, 2, 2, 1))
    g = leaf(np.zeros((1, 2, 2, 1)))
    m_w = np.array([[0.5, 0.0], [0.0, 0.0]])
    assert ls.reconstruction_loss(y, g, m_w).item() == 0.5


def test_reconstruction_ignores_output_at_zero_weight_pixels():
    rng = np.random.default_rng(2)
    y = leaf(rng.standard_normal((1, 4, 4, 3)))
    m_w = np.zeros((4, 4))
    m_w[1:3, 1:3] = rng.random((2, 2))
    g1 = rng.standard_normal((1, 4, 4, 3))
    g2 = g1.copy()
    g2[0, 0, :, :] += 100.0  # a zero-weight row
    l1 = ls.reconstruction_loss(y, leaf(g1), m_w).item()
    l2 = ls.reconstruction_loss(y, leaf(g2), m_w).item()
    assert l1 == l2 and l1 > 0.0


def test_reconstruction_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    y_data = rng.standard_normal((1, 4, 4, 2))
    g_data = rng.standard_normal((1, 4, 4, 2))
    m_w = rng.random((4, 4))

    def value():
        return ls.reconstruction_loss(Tensor4(y_data), Tensor4(g_data), m_w).item()

    g = Tensor4(g_data, requires_grad=True)
    ad.backward(ls.reconstruction_loss(Tensor4(y_data), g, m_w))
    fd = finite_difference(value, g_data)
    assert rel_err(g.grad, fd) <= 1e-4


def test_reconstruction_rejects_shape_mismatch():
    with pytest.raises(ls.LossError):
        ls.reconstruction_loss(leaf(np.zeros((1, 4, 4, 3))),
                               leaf(np.zeros((1, 4, 4, 1))), np.zeros((4, 4)))


def test_reconstruction_mean_reduction_switch():
    rng = np.random.default_rng(4)
    y = leaf(rng.standard_normal((1, 2, 2, 1)))
    g = leaf(rng.standard_normal((1, 2, 2, 1)))
    m_w = np.ones((2, 2))
    total = ls.reconstruction_loss(y, g, m_w, reduction="sum").item()
    mean = ls.reconstruction_loss(y, g, m_w, reduction="mean").item()
    assert abs(mean - total / 4.0) <= 1e-15


# ------------------------------------------------------------ adversarial


def test_generator_adv_loss_cases():
    assert ls.generator_adv_loss(scores([0.0, 0.0])).item() == 0.0
    assert ls.generator_adv_loss(scores([1.0, 3.0])).item() == -2.0
    rng = np.random.default_rng(5)
    vals = rng.standard_normal(16)
    got = ls.generator_adv_loss(scores(vals)).item()
    want = -math.fsum(vals.tolist()) / 16
    assert abs(got - want) <= 1e-12


def _linear_critic(u):
    u_const = ad.constant(u)

    def critic(x):
        return ad.sum_axis(ad.sum_axis(ad.sum_axis(ad.mul(x, u_const), 3), 2), 1)

    return critic


def test_gradient_penalty_unit_norm_linear_critic():
    rng = np.random.default_rng(6)
    m_w = rng.random((4, 4)) * 0.8 + 0.1
    norm = np.sqrt((m_w ** 2).sum() * 3)           # broadcast across 3 channels
    u = np.full((1, 4, 4, 3), 1.0) / norm
    critic = _linear_critic(u)
    y = leaf(rng.standard_normal((2, 4, 4, 3)))
    g = leaf(rng.standard_normal((2, 4, 4, 3)))
    pen = ls.gradient_penalty(critic, y, g, m_w, np.random.default_rng(0))
    assert abs(pen.item()) <= 1e-12


def test_gradient_penalty_constant_gradient_norm_three():
    rng = np.random.default_rng(7)
    m_w = rng.random((4, 4)) * 0.8 + 0.1
    norm = np.sqrt((m_w ** 2).sum() * 3)
    u = np.full((1, 4, 4, 3), 3.0) / norm          # ||u (.) m_w||_2 = 3
    critic = _linear_critic(u)
    y = leaf(rng.standard_normal((1, 4, 4, 3)))
    g = leaf(rng.standard_normal((1, 4, 4, 3)))
    pen = ls.gradient_penalty(critic, y, g, m_w, np.random.default_rng(1))
    assert abs(pen.item() - 4.0) <= 1e-9


def test_gradient_penalty_matches_finite_difference_gradient_oracle():
    rng = np.random.default_rng(8)
    w1 = rng.standard_normal((3, 3, 2, 3)) * 0.4
    w2 = rng.standard_normal((1, 1, 3, 1)) * 0.4
    spec1 = ad.ConvSpec(3, 3, 2, 3)
    spec2 = ad.ConvSpec(1, 1, 3, 1)

    def critic(x):
        hidden = ad.leaky_relu(ad.conv2d(x, spec1, ad.constant(w1.astype(x.dtype))), 0.2)
        out = ad.conv2d(hidden, spec2, ad.constant(w2.astype(x.dtype)))
        return ad.sum_axis(ad.sum_axis(ad.sum_axis(out, 3), 2), 1)

    m_w = rng.random((4, 4))
    y = rng.standard_normal((1, 4, 4, 2))
    g = rng.standard_normal((1, 4, 4, 2))
    pen = ls.gradient_penalty(critic, leaf(y), leaf(g), m_w, np.random.default_rng(11))

    t = np.random.default_rng(11).uniform(size=(1, 1, 1, 1))
    x_hat = (t * g + (1 - t) * y).astype(np.float64)

    def score():
        return critic(Tensor4(x_hat)).item()

    fd_grad = finite_difference(score, x_hat, step=1e-5)
    norm = np.sqrt(((fd_grad * m_w[None, :, :, None]) ** 2).sum())
    want = (norm - 1.0) ** 2
    assert abs(pen.item() - want) / max(abs(want), 1e-3) <= 1e-3


def test_gradient_penalty_invariant_to_critic_shift():
    rng = np.random.default_rng(9)
    w1 = rng.standard_normal((3, 3, 1, 2)) * 0.4
    spec1 = ad.ConvSpec(3, 3, 1, 2)

    def base(x):
        return ad.sum_axis(ad.sum_axis(ad.sum_axis(
            ad.leaky_relu(ad.conv2d(x, spec1, ad.constant(w1)), 0.2), 3), 2), 1)

    def shifted(x):
        return ad.add_scalar(base(x), 123.0)

    m_w = rng.random((5, 5))
    y = leaf(rng.standard_normal((2, 5, 5, 1)))
    g = leaf(rng.standard_normal((2, 5, 5, 1)))
    a = ls.gradient_penalty(base, y, g, m_w, np.random.default_rng(2)).item()
    b = ls.gradient_penalty(shifted, y, g, m_w, np.random.default_rng(2)).item()
    assert a == b


def test_gradient_penalty_flows_into_generator_output():
    rng = np.random.default_rng(10)
    w1 = rng.standard_normal((3, 3, 1, 2)) * 0.4
    spec1 = ad.ConvSpec(3, 3, 1, 2)

    def critic(x):
        return ad.sum_axis(ad.sum_axis(ad.sum_axis(
            ad.tanh(ad.conv2d(x, spec1, ad.constant(w1))), 3), 2), 1)

    m_w = rng.random((5, 5))
    y_data = rng.standard_normal((1, 5, 5, 1))
    g_data = rng.standard_normal((1, 5, 5, 1))

    def value():
        return ls.gradient_penalty(critic, Tensor4(y_data), Tensor4(g_data),
                                   m_w, np.random.default_rng(3)).item()

    g = Tensor4(g_data, requires_grad=True)
    pen = ls.gradient_penalty(critic, Tensor4(y_data), g, m_w, np.random.default_rng(3))
    ad.backward(pen)
    fd = finite_difference(value, g_data, step=1e-5)
    assert rel_err(g.grad, fd) <= 1e-3


def test_gradient_penalty_rejects_non_graph_critic():
    def critic(x):
        out = ad.sum_axis(ad.sum_axis(ad.sum_axis(ad.mul(x, x), 3), 2), 1)
        out._graph_vjp = False
        return out

    y = leaf(np.ones((1, 2, 2, 1)))
    g = leaf(np.zeros((1, 2, 2, 1)))
    with pytest.raises(ad.GraphError):
        ls.gradient_penalty(critic, y, g, np.ones((2, 2)), np.random.default_rng(0))


# ------------------------------------------------------------ critic loss


def test_critic_loss_cases():
    assert ls.critic_loss(scores([1.0, -1.0]), scores([1.0, -1.0]), 0.0).item() == 0.0
    got = ls.critic_loss(scores([2.0, 2.0]), scores([0.0, 0.0]), 4.0).item()
    assert got == -2.0 + 4.0
    rng = np.random.default_rng(11)
    real, fake = rng.standard_normal(8), rng.standard_normal(8)
    pen = 0.37
    got = ls.critic_loss(scores(real), scores(fake), pen).item()
    want = math.fsum(fake.tolist()) / 8 - math.fsum(real.tolist()) / 8 + pen
    assert abs(got - want) <= 1e-12


def test_critic_loss_rejects_batch_mismatch():
    with pytest.raises(ls.LossError):
        ls.critic_loss(scores([1.0]), scores([1.0, 2.0]), 0.0)


# ------------------------------------------------------------ total objective


def test_total_objective_phase1_weights():
    l_c = leaf(np.full((1, 1, 1, 1), 7.25))
    l_mrf = leaf(np.full((1, 1, 1, 1), 3.0))
    l_adv = leaf(np.full((1, 1, 1, 1), -2.0))
    total = ls.total_objective(l_c, l_mrf, l_adv, LossWeights(0.0, 0.0))
    assert total.item() == 7.25


def test_total_objective_fine_tune_weights():
    l_c = leaf(np.full((1, 1, 1, 1), 1.0))
    l_mrf = leaf(np.full((1, 1, 1, 1), 2.0))
    l_adv = leaf(np.full((1, 1, 1, 1), 3.0))
    total = ls.total_objective(l_c, l_mrf, l_adv, LossWeights(0.05, 0.001))
    assert abs(total.item() - 1.103) <= 1e-12


def test_total_objective_random_triples_match_formula():
    rng = np.random.default_rng(12)
    for _ in range(10):
        c, m, a = rng.standard_normal(3)
        lm, la = rng.random(2)
        got = ls.total_objective(leaf(np.full((1, 1, 1, 1), c)),
                                 leaf(np.full((1, 1, 1, 1), m)),
                                 leaf(np.full((1, 1, 1, 1), a)),
                                 LossWeights(lm, la)).item()
        assert abs(got - (c + lm * m + la * a)) <= 1e-12


def test_total_objective_rejects_non_finite():
    bad = leaf(np.full((1, 1, 1, 1), np.nan))
    ok = leaf(np.ones((1, 1, 1, 1)))
    with pytest.raises(ls.LossError):
        ls.total_objective(bad, ok, ok, LossWeights())


def test_weights_reject_negative():
    with pytest.raises(ls.LossError):
        LossWeights(lambda_mrf=-0.1)


# ------------------------------------------------------------ adam


def test_adam_zero_gradient_keeps_params():
    p = Tensor4(np.full((1, 1, 1, 1), 2.5, dtype=np.float64))
    state = AdamState(lr=1e-4)
    adam_step({"p": p}, {"p": np.zeros((1, 1, 1, 1))}, state)
    assert p.item() == 2.5


def test_adam_single_step_hand_computed():
    p = Tensor4(np.full((1, 1, 1, 1), 1.0, dtype=np.float64))
    state = AdamState(lr=1e-4, beta1=0.5, beta2=0.9, eps=1e-8)
    adam_step({"p": p}, {"p": np.ones((1, 1, 1, 1))}, state)
    # bias-corrected m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps)
    want = 1.0 - 1e-4 / (1.0 + 1e-8)
    assert abs(p.item() - want) <= 1e-15


def test_adam_two_steps_match_extended_precision_reference():
    grad = 0.75
    p = Tensor4(np.full((1, 1, 1, 1), 0.2, dtype=np.float64))
    state = AdamState(lr=1e-3, beta1=0.5, beta2=0.9, eps=1e-8)
    for _ in range(2):
        adam_step({"p": p}, {"p": np.full((1, 1, 1, 1), grad)}, state)

    theta = np.longdouble(0.2)
    m = np.longdouble(0.0)
    v = np.longdouble(0.0)
    g = np.longdouble(grad)
    for t in (1, 2):
        m = np.longdouble(0.5) * m + np.longdouble(0.5) * g
        v = np.longdouble(0.9) * v + np.longdouble(0.1) * g * g
        m_hat = m / (1 - np.longdouble(0.5) ** t)
        v_hat = v / (1 - np.longdouble(0.9) ** t)
        theta = theta - np.longdouble(1e-3) * m_hat / (np.sqrt(v_hat) + np.longdouble(1e-8))
    assert abs(p.item() - float(theta)) <= 1e-12


def test_adam_zero_lr_is_identity():
    rng = np.random.default_rng(13)
    data = rng.standard_normal((2, 3, 3, 1))
    p = Tensor4(data.copy())
    adam_step({"p": p}, {"p": rng.standard_normal((2, 3, 3, 1))}, AdamState(lr=0.0))
    np.testing.assert_array_equal(p.data, data)


def test_adam_rejects_shape_mismatch():
    p = Tensor4(np.zeros((1, 2, 2, 1)))
    with pytest.raises(Exception):
        adam_step({"p": p}, {"p": np.zeros((1, 3, 2, 1))}, AdamState())


def test_adam_step_count_increases():
    p = Tensor4(np.zeros((1, 1, 1, 1)))
    state = AdamState()
    for want in (1, 2, 3):
        adam_step({"p": p}, {"p": np.ones((1, 1, 1, 1))}, state)
        assert state.step == want
