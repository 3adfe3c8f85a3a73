"""Expert routing with auxiliary-loss-free load balancing.

A small MLP maps the image embedding to expert logits. A bias vector is
added before selection and is adjusted only by a closed control loop
driven by an EMA of routing weights, never by gradients: overused experts
get pushed down, underused ones up, and the bias sum is conserved.
Training fuses all experts softly through Gumbel-Softmax weights;
inference picks the argmax expert and evaluates only that one.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_TAU = 1.0
FINAL_TAU = 0.1
DEFAULT_GAMMA = 0.99
DEFAULT_ETA = 0.01


class RouterState:
    """Router MLP weights plus the load-balancing control state.

    ``bias`` and ``usage`` are plain arrays: the control loop owns them
    and the optimizer never sees them. ``trace`` records
    (step, usage, bias) after every state update for balance reports.
    """

    def __init__(
        self,
        in_dim=128,
        num_experts=4,
        hidden=(256, 256),
        tau=DEFAULT_TAU,
        gamma=DEFAULT_GAMMA,
        eta=DEFAULT_ETA,
        seed=0,
    ):
        self.in_dim = in_dim
        self.num_experts = num_experts
        self.tau = tau
        self.gamma = gamma
        self.eta = eta
        rng = np.random.default_rng(seed)
        dims = [in_dim, *hidden, num_experts]
        self.layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = ad.parameter(rng.normal(scale=np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            self.layers.append((w, ad.parameter(np.zeros(fan_out))))
        self.bias = np.zeros(num_experts)
        self.usage = np.full(num_experts, 1.0 / num_experts)
        self.step = 0
        self.trace = []

    def parameters(self):
        return [p for wb in self.layers for p in wb]

    def param_count(self):
        return sum(p.data.size for p in self.parameters())

    def update_state(self, alpha):
        """One EMA + bias control step from routing weights ``alpha``."""
        self.usage = ema_update(self.usage, np.asarray(alpha, dtype=np.float64), self.gamma)
        self.bias = bias_update(self.bias, self.usage, self.eta)
        self.step += 1
        self.trace.append((self.step, self.usage.copy(), self.bias.copy()))


def route_logits(router, x):
    """Raw expert logits from the router MLP; (K,) for a single embedding."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64))
    single = x.data.ndim == 1
    if single:
        x = x.reshape(1, -1)
    if x.data.shape[1] != router.in_dim:
        raise ValueError(
            f"embedding dim {x.data.shape[1]} does not match router input {router.in_dim}"
        )
    h = x
    last = len(router.layers) - 1
    for i, (w, b) in enumerate(router.layers):
        h = h @ w + b
        if i != last:
            h = ad.relu(h)
    return h[0] if single else h


def biased_logits(z, b):
    """Selection logits: raw logits plus the balancing bias."""
    return z + b


def gumbel_softmax(z, tau, noise_source=None):
    """Softmax of (z + g) / tau with g drawn from Gumbel(0, 1).

    ``noise_source`` may be None (no noise: evaluation), a Generator
    (sample fresh noise), or a fixed array matching z. Differentiable in
    ``z``; rejects nonpositive temperature.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if noise_source is None:
        g = 0.0
    elif isinstance(noise_source, np.random.Generator):
        shape = ad.asdata(z).shape
        g = -np.log(-np.log(noise_source.uniform(size=shape)))
    else:
        g = np.asarray(noise_source, dtype=np.float64)
    return ad.softmax((z + g) / tau, axis=-1)


def ema_update(u, alpha, gamma):
    """Exponential moving average of expert usage."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    return gamma * np.asarray(u, dtype=np.float64) + (1.0 - gamma) * np.asarray(
        alpha, dtype=np.float64
    )


def bias_update(b, u, eta):
    """Push bias against usage deviation from the mean; sum-conserving."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    u = np.asarray(u, dtype=np.float64)
    return np.asarray(b, dtype=np.float64) - eta * (u - u.mean())


def moe_forward_train(
    router, embedding, descriptors, bank, noise_source=None, update_state=True
):
    """Soft fusion of all experts for one image, training mode.

    ``embedding`` is the image-level vector the router sees;
    ``descriptors`` (N, D) are the per-pixel features every expert maps
    to coordinates. Returns ``(coords, alpha)`` where coords is the
    (N, 3) Tensor sum over experts weighted by the Gumbel-Softmax alpha
    (K,). Gradients reach the router through alpha and the experts
    through the weighted sum; the usage/bias control step runs as a side
    effect on alpha's values, outside the gradient path.
    """
    if bank.num_experts != router.num_experts:
        raise ValueError("expert bank size does not match router width")
    z = route_logits(router, embedding)
    alpha = gumbel_softmax(biased_logits(z, router.bias), router.tau, noise_source)
    preds = bank.forward_all(descriptors)
    coords = (preds * alpha.reshape(-1, 1, 1)).sum(axis=0)
    if update_state:
        router.update_state(ad.asdata(alpha))
    return coords, alpha


def select_expert_infer(router, embedding):
    """Argmax expert under the biased logits, no noise; ties pick lowest index."""
    if isinstance(embedding, Tensor):
        embedding = embedding.data
    x = np.asarray(embedding, dtype=np.float64)
    h = x[None] if x.ndim == 1 else x
    last = len(router.layers) - 1
    for i, (w, b) in enumerate(router.layers):
        h = h @ w.data + b.data
        if i != last:
            h = np.maximum(h, 0.0)
    zt = h + router.bias
    idx = zt.argmax(axis=1)
    return int(idx[0]) if x.ndim == 1 else idx


def simulate_balance(
    num_steps=10_000,
    arrival_probs=(0.9, 0.1),
    margin=3.0,
    tau=DEFAULT_TAU,
    gamma=DEFAULT_GAMMA,
    eta=DEFAULT_ETA,
    enabled=True,
    seed=0,
    window=5000,
):
    """Closed-loop simulation of the balancing controller.

    Inputs arrive from K regions with skewed probabilities; an input from
    region r produces logits of ``margin`` for expert r and 0 elsewhere
    (a router that has locked onto region identity). Each step samples
    routing weights, counts the argmax selection, and (when ``enabled``)
    runs the usage/bias control step. Returns selection frequencies over
    the trailing ``window`` plus the max/min frequency ratio and the
    total bias-sum drift.
    """
    arrival = np.asarray(arrival_probs, dtype=np.float64)
    k = len(arrival)
    rng = np.random.default_rng(seed)
    bias = np.zeros(k)
    usage = np.full(k, 1.0 / k)
    picks = np.zeros(num_steps, dtype=np.int64)
    bias_sum0 = bias.sum()
    for t in range(num_steps):
        region = rng.choice(k, p=arrival)
        z = np.where(np.arange(k) == region, margin, 0.0)
        alpha = gumbel_softmax(z + bias, tau, noise_source=rng)
        picks[t] = int(np.argmax(alpha))
        if enabled:
            usage = ema_update(usage, alpha, gamma)
            bias = bias_update(bias, usage, eta)
    tail = picks[-window:]
    freqs = np.bincount(tail, minlength=k) / len(tail)
    lo = freqs.min()
    ratio = float("inf") if lo == 0 else float(freqs.max() / lo)
    return {
        "frequencies": freqs,
        "ratio": ratio,
        "bias": bias,
        "bias_sum_drift": abs(bias.sum() - bias_sum0),
    }
