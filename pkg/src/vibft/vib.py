"""Variational information bottleneck head.

Features are compressed by a three-layer ReLU MLP, projected to the mean and
(softplus) standard deviation of a diagonal Gaussian over a ``K``-dimensional
code ``z``, and ``z`` is classified by a single linear layer.  Training
minimises cross-entropy on reparameterised samples plus ``beta`` times the
KL divergence to a Gaussian prior; at test time the mean code is classified.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numkit as nk
from .numkit import ContractError, DimensionError, NonFiniteError, Rng, Tensor

DEFAULT_NUM_SAMPLES = 5


def hidden_widths(d: int, k: int) -> tuple[int, int, int]:
    """Widths of the compression MLP for encoder width ``d`` and bottleneck ``k``."""
    return d, (3 * d + k) // 4, (d + k) // 2


@dataclass
class Linear:
    weight: Tensor  # in x out
    bias: Tensor

    @classmethod
    def init(cls, rng: Rng, fan_in: int, fan_out: int, name: str) -> Linear:
        bound = 1.0 / np.sqrt(fan_in)
        w = Tensor(rng.uniform_range(-bound, bound, (fan_in, fan_out)), requires_grad=True, name=f"{name}.weight")
        b = Tensor(rng.uniform_range(-bound, bound, (fan_out,)), requires_grad=True, name=f"{name}.bias")
        return cls(w, b)

    def __call__(self, x: Tensor) -> Tensor:
        return nk.matmul(x, self.weight) + self.bias

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class GaussianPosterior:
    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise DimensionError(f"posterior mu {self.mu.shape} and sigma {self.sigma.shape} differ")
        if np.any(self.sigma.data <= 0):
            raise ContractError("posterior sigma must be strictly positive")


@dataclass
class Prior:
    """Diagonal Gaussian prior, stored as mean and log standard deviation."""

    mu0: Tensor
    log_sigma0: Tensor

    @classmethod
    def standard(cls, k: int, trainable: bool = False) -> Prior:
        return cls(
            Tensor(np.zeros(k), requires_grad=trainable, name="prior.mu0"),
            Tensor(np.zeros(k), requires_grad=trainable, name="prior.log_sigma0"),
        )

    @classmethod
    def from_values(cls, mu0, sigma0, trainable: bool = False) -> Prior:
        sigma0 = np.asarray(sigma0, dtype=np.float64)
        if np.any(sigma0 <= 0):
            raise ContractError("prior sigma0 must be strictly positive")
        return cls(Tensor(mu0, requires_grad=trainable), Tensor(np.log(sigma0), requires_grad=trainable))

    @property
    def k(self) -> int:
        return self.mu0.shape[0]

    @property
    def trainable(self) -> bool:
        return self.mu0.requires_grad

    def sigma0(self) -> Tensor:
        return nk.exp(self.log_sigma0)


@dataclass(frozen=True)
class BetaSchedule:
    beta0: float
    cap: float = 1.0

    def __post_init__(self):
        if self.beta0 < 0:
            raise ContractError(f"beta0 must be nonnegative, got {self.beta0}")


def effective_beta(schedule: BetaSchedule, epoch: int) -> float:
    """Linear annealing: ``min(cap, epoch * beta0)``."""
    if epoch < 1:
        raise ContractError(f"epochs are numbered from 1, got {epoch}")
    return min(schedule.cap, epoch * schedule.beta0)


@dataclass
class VibLossParts:
    prediction_loss: Tensor
    kl_loss: Tensor
    total: Tensor
    effective_beta: float


HiddenHook = Callable[[Tensor], Tensor]


class VibHead:
    """Compression MLP, mean/std projections and the classifier on ``z``."""

    def __init__(self, d: int, k: int, num_classes: int, rng: Rng, prior: Prior | None = None):
        if d < 1 or k < 1 or num_classes < 2:
            raise ContractError(f"invalid head sizes d={d}, K={k}, C={num_classes}")
        self.d, self.k, self.num_classes = d, k, num_classes
        widths = hidden_widths(d, k)
        self.mlp: list[Linear] = []
        fan_in = d
        for i, w in enumerate(widths):
            self.mlp.append(Linear.init(rng, fan_in, w, f"head.mlp.{i}"))
            fan_in = w
        self.mu_layer = Linear.init(rng, fan_in, k, "head.mu")
        self.sigma_layer = Linear.init(rng, fan_in, k, "head.sigma")
        self.classifier = Linear.init(rng, k, num_classes, "head.classifier")
        self.prior = prior if prior is not None else Prior.standard(k)
        if self.prior.k != k:
            raise DimensionError(f"prior has K={self.prior.k}, head has K={k}")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(layer.weight.shape[1] for layer in self.mlp)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.mlp):
            out.update(layer.named(f"head.mlp.{i}"))
        out.update(self.mu_layer.named("head.mu"))
        out.update(self.sigma_layer.named("head.sigma"))
        out.update(self.classifier.named("head.classifier"))
        if self.prior.trainable:
            out["prior.mu0"] = self.prior.mu0
            out["prior.log_sigma0"] = self.prior.log_sigma0
        return out

    def _compress(self, features: Tensor, hook: HiddenHook | None) -> Tensor:
        if features.data.ndim != 2 or features.shape[1] != self.d:
            raise DimensionError(f"head expects features of width {self.d}, got shape {features.shape}")
        h = features
        for layer in self.mlp:
            h = nk.relu(layer(h))
            if hook is not None:
                h = hook(h)
        return h


def posterior(
    head: VibHead,
    features: Tensor,
    hidden_hook: HiddenHook | None = None,
    fixed_sigma: float | None = None,
) -> GaussianPosterior:
    """``p(z|x)``: mean and softplus standard deviation from the compressed features.

    ``fixed_sigma`` replaces the learned standard deviation with a constant,
    which is used to probe the deterministic limit.
    """
    h = head._compress(features, hidden_hook)
    mu = head.mu_layer(h)
    if fixed_sigma is not None:
        sigma = Tensor(np.full(mu.shape, float(fixed_sigma)))
    else:
        sigma = nk.softplus(head.sigma_layer(h))
        if not np.all(sigma.data > 0):
            raise NonFiniteError("posterior sigma underflowed to zero")
    return GaussianPosterior(mu, sigma)


def kl_to_prior(post: GaussianPosterior, prior: Prior) -> Tensor:
    """Batch-mean KL(N(mu, sigma^2) || N(mu0, sigma0^2)) for diagonal Gaussians."""
    k = post.mu.shape[1]
    if prior.k != k:
        raise DimensionError(f"posterior has K={k}, prior has K={prior.k}")
    var0 = nk.exp(prior.log_sigma0 * 2.0)
    var = nk.square(post.sigma)
    per_dim = var / var0 + nk.square(prior.mu0 - post.mu) / var0 - 1.0 + (prior.log_sigma0 * 2.0 - nk.log(var))
    return nk.mean(nk.sum(per_dim, axis=1)) * 0.5


def reparameterize(post: GaussianPosterior, rng: Rng | None = None, eps: np.ndarray | None = None) -> Tensor:
    """``z = mu + sigma * eps`` with ``eps ~ N(0, I)``; ``eps`` is a constant in the graph."""
    if eps is None:
        if rng is None:
            raise ContractError("reparameterize needs an rng or explicit eps")
        eps = rng.gaussian(post.mu.shape)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != post.mu.shape:
        raise DimensionError(f"eps shape {eps.shape} does not match posterior {post.mu.shape}")
    return post.mu + post.sigma * Tensor(eps)


def vib_loss(
    head: VibHead,
    features: Tensor,
    labels,
    epoch: int,
    schedule: BetaSchedule,
    num_samples: int = DEFAULT_NUM_SAMPLES,
    rng: Rng | None = None,
    eps: list[np.ndarray] | None = None,
    hidden_hook: HiddenHook | None = None,
    fixed_sigma: float | None = None,
) -> VibLossParts:
    """Cross-entropy averaged over ``num_samples`` codes plus ``beta_eff * KL``.

    Pass ``eps`` (one array per sample) to freeze the sampling noise, e.g.
    for gradient checks.
    """
    if num_samples < 1:
        raise ContractError(f"num_samples must be >= 1, got {num_samples}")
    if eps is not None and len(eps) != num_samples:
        raise ContractError(f"got {len(eps)} noise arrays for {num_samples} samples")
    post = posterior(head, features, hidden_hook, fixed_sigma)
    ce = None
    for i in range(num_samples):
        z = reparameterize(post, rng, None if eps is None else eps[i])
        term = nk.softmax_cross_entropy(head.classifier(z), labels)
        ce = term if ce is None else ce + term
    prediction = ce * (1.0 / num_samples)
    kl = kl_to_prior(post, head.prior)
    beta = effective_beta(schedule, epoch)
    return VibLossParts(prediction, kl, prediction + kl * beta, beta)


def deterministic_head_forward(head: VibHead, features: Tensor, hidden_hook: HiddenHook | None = None) -> Tensor:
    """Classifier logits on the posterior mean; no sampling and no KL."""
    h = head._compress(features, hidden_hook)
    return head.classifier(head.mu_layer(h))


def predict(
    head: VibHead,
    features: Tensor,
    mode: str = "test",
    num_samples: int = DEFAULT_NUM_SAMPLES,
    rng: Rng | None = None,
) -> np.ndarray:
    """Class probabilities.

    ``test`` classifies the posterior mean; ``train`` averages the softmax
    over ``num_samples`` sampled codes.
    """
    if mode == "test":
        return nk.softmax(deterministic_head_forward(head, features))
    if mode != "train":
        raise ContractError(f"unknown predict mode {mode!r}")
    if num_samples < 1:
        raise ContractError(f"num_samples must be >= 1, got {num_samples}")
    post = posterior(head, features)
    probs = np.zeros((features.shape[0], head.num_classes))
    for _ in range(num_samples):
        probs += nk.softmax(head.classifier(reparameterize(post, rng)))
    return probs / num_samples
