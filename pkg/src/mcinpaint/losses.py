"""Training losses: confidence-weighted reconstruction, adversarial terms,
the critic gradient penalty, and their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mcinpaint import autodiff as ad
from mcinpaint.autodiff import Tensor4
from mcinpaint.masks import WeightMask


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    """Relative weights of the objective terms.

    Phase-1 training runs with lambda_mrf = lambda_adv = 0; the fine-tune
    defaults are 0.05 and 0.001.  lambda_gp scales the critic gradient
    penalty (the usual improved-Wasserstein value is 10).
    """

    lambda_mrf: float = 0.05
    lambda_adv: float = 0.001
    lambda_gp: float = 10.0

    def __post_init__(self):
        if self.lambda_mrf < 0 or self.lambda_adv < 0 or self.lambda_gp < 0:
            raise LossError("loss weights must be nonnegative")


def weight_tensor(m_w, batch: int, dtype) -> Tensor4:
    """Lift a weight mask into a (n, h, w, 1) constant tensor."""
    if isinstance(m_w, Tensor4):
        return m_w
    if isinstance(m_w, WeightMask):
        arr = m_w.values
    else:
        arr = np.asarray(m_w)
    if arr.ndim == 2:
        arr = arr[None, :, :, None]
    elif arr.ndim == 3:
        arr = arr[:, :, :, None]
    if arr.ndim != 4 or arr.shape[3] != 1 or arr.shape[0] not in (1, batch):
        raise LossError(f"weight mask shape {arr.shape} does not fit batch {batch}")
    return ad.constant(arr.astype(dtype))


def reconstruction_loss(y: Tensor4, g_out: Tensor4, m_w, reduction: str = "sum") -> Tensor4:
    """L1 of the prediction error modulated by the confidence weights.

    The weight mask is single-channel and broadcast across image channels.
    ``reduction`` is "sum" (the default norm reading) or "mean".
    """
    if y.dims != g_out.dims:
        raise LossError(f"shape mismatch: target {y.dims} vs output {g_out.dims}")
    weights = weight_tensor(m_w, y.dims[0], y.dtype)
    if weights.dims[1:3] != y.dims[1:3]:
        raise LossError(f"weight mask dims {weights.dims} do not match image {y.dims}")
    weighted = ad.mul(ad.sub(y, g_out), weights)
    loss = ad.reduce(weighted, "l1_norm")
    if reduction == "mean":
        return ad.scale(loss, 1.0 / y.size)
    if reduction != "sum":
        raise LossError(f"unknown reduction {reduction!r}")
    return loss


def generator_adv_loss(critic_scores_fake: Tensor4) -> Tensor4:
    """Negative mean critic score of generated samples."""
    return ad.scale(ad.reduce_mean(critic_scores_fake), -1.0)


def gradient_penalty(critic, y: Tensor4, g_out: Tensor4, m_w, rng) -> Tensor4:
    """Unit-gradient-norm penalty at random interpolates.

    Per batch element b, with t_b uniform in [0, 1]:

        x_hat = t * g_out + (1 - t) * y
        penalty = mean_b (|| grad_{x_hat} critic(x_hat) (.) weights ||_2 - 1)^2

    The critic must process batch elements independently and its operation
    graph must support differentiating the gradient again (the returned
    penalty participates in further backward passes).  The caller scales by
    lambda_gp.
    """
    if y.dims != g_out.dims:
        raise LossError(f"shape mismatch: target {y.dims} vs output {g_out.dims}")
    n = y.dims[0]
    t = rng.uniform(size=(n, 1, 1, 1)).astype(y.dtype)
    x_hat = ad.add(ad.mul(ad.constant(t), g_out),
                   ad.mul(ad.constant(1.0 - t), y))
    if not x_hat.requires_grad:
        x_hat = Tensor4(x_hat.data, requires_grad=True)
    scores = critic(x_hat)
    if scores.dims != (n, 1, 1, 1):
        raise LossError(f"critic must return one score per sample, got {scores.dims}")
    (gx,) = ad.grad(ad.reduce_sum(scores), [x_hat], create_graph=True)
    weights = weight_tensor(m_w, n, y.dtype)
    gm = ad.mul(gx, weights)
    per_sample = ad.sum_axis(ad.sum_axis(ad.sum_axis(ad.square(gm), 3), 2), 1)
    deviation = ad.add_scalar(ad.sqrt(per_sample), -1.0)
    return ad.reduce_mean(ad.square(deviation))


def critic_loss(critic_scores_real: Tensor4, critic_scores_fake: Tensor4,
                penalty) -> Tensor4:
    """mean(fake) - mean(real) + penalty, with the penalty already scaled."""
    if critic_scores_real.dims != critic_scores_fake.dims:
        raise LossError(f"batch mismatch: real {critic_scores_real.dims} vs "
                        f"fake {critic_scores_fake.dims}")
    if not isinstance(penalty, Tensor4):
        penalty = ad.scalar(float(penalty), critic_scores_real.dtype)
    return ad.add(ad.sub(ad.reduce_mean(critic_scores_fake),
                         ad.reduce_mean(critic_scores_real)), penalty)


def total_objective(l_c: Tensor4, l_mrf: Tensor4, l_adv: Tensor4,
                    weights: LossWeights) -> Tensor4:
    """l_c + lambda_mrf * l_mrf + lambda_adv * l_adv."""
    for name, term in (("l_c", l_c), ("l_mrf", l_mrf), ("l_adv", l_adv)):
        if not np.isfinite(term.data).all():
            raise LossError(f"{name} is not finite")
    return ad.add(ad.add(l_c, ad.scale(l_mrf, weights.lambda_mrf)),
                  ad.scale(l_adv, weights.lambda_adv))
