"""Expert coordinate regressors and the cluster-center position decoder.

Each expert is a residual MLP mapping a patch descriptor to logits over
decoder cluster centers plus a metric offset; the decoded position is the
softmax-weighted center average plus that offset. Cluster centers come
from K-Means over training camera positions and are shared scene-wide.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_NUM_CENTERS = 50


def kmeans_centers(positions, k, seed=0, iters=50):
    """Lloyd's algorithm from k-means++ initialization.

    Deterministic for a fixed seed. Clusters that empty out are reseeded
    to the point currently farthest from its assigned center.
    """
    pts = np.asarray(positions, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("positions must be (M, d)")
    m = len(pts)
    if m < k:
        raise ValueError(f"need at least k={k} positions, got {m}")
    if k < 1:
        raise ValueError("k must be at least 1")
    rng = np.random.default_rng(seed)

    centers = np.empty((k, pts.shape[1]))
    centers[0] = pts[rng.integers(m)]
    d2 = ((pts - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = pts[rng.integers(m)]
        else:
            centers[i] = pts[rng.choice(m, p=d2 / total)]
        d2 = np.minimum(d2, ((pts - centers[i]) ** 2).sum(axis=1))

    assign = None
    for _ in range(iters):
        dist = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dist.argmin(axis=1)
        for i in range(k):
            mask = new_assign == i
            if mask.any():
                centers[i] = pts[mask].mean(axis=0)
            else:
                worst = dist[np.arange(m), new_assign].argmax()
                centers[i] = pts[worst]
                new_assign[worst] = i
        if assign is not None and np.array_equal(assign, new_assign):
            break
        assign = new_assign
    return centers


@dataclass(frozen=True, eq=False)
class PositionDecoder:
    """Fixed cluster centers over which experts express positions."""

    centers: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 3 or len(c) < 1:
            raise ValueError("centers must be (k, 3) with k >= 1")
        if not np.isfinite(c).all():
            raise ValueError("centers must be finite")
        object.__setattr__(self, "centers", c)

    @property
    def num_centers(self):
        return len(self.centers)


def decode_position(logits, offset, dec):
    """Softmax-weighted center average plus offset.

    Accepts single vectors or batches, plain arrays or Tensors. The
    softmax subtracts its max, so arbitrarily large logits stay stable;
    NaN logits are rejected.
    """
    raw = ad.asdata(logits)
    if np.isnan(raw).any():
        raise ValueError("NaN logits")
    single = raw.ndim == 1
    if isinstance(logits, Tensor) or isinstance(offset, Tensor):
        lg = logits if isinstance(logits, Tensor) else Tensor(logits)
        off = offset if isinstance(offset, Tensor) else Tensor(offset)
        if single:
            lg = lg.reshape(1, -1)
            off = off.reshape(1, -1)
        out = ad.softmax(lg, axis=1) @ dec.centers + off
        return out[0] if single else out
    w = np.exp(raw - raw.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    return w @ dec.centers + np.asarray(offset, dtype=np.float64)


class ExpertHead:
    """Residual MLP from descriptor to (center logits, metric offset).

    The final layer is zero-initialized so a fresh expert decodes to the
    uniform centroid of the cluster centers, and the offset is scaled by
    a learnable positive factor starting at 1 m.
    """

    def __init__(self, in_dim=128, width=256, blocks=3, num_centers=DEFAULT_NUM_CENTERS, seed=0):
        self.in_dim = in_dim
        self.width = width
        self.blocks = blocks
        self.num_centers = num_centers
        rng = np.random.default_rng(seed)

        def dense(fan_in, fan_out, zero=False):
            if zero:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(scale=np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            return ad.parameter(w), ad.parameter(np.zeros(fan_out))

        self.w_in = dense(in_dim, width)
        self.blocks_w = [
            (dense(width, width), dense(width, width)) for _ in range(blocks)
        ]
        self.w_head = dense(width, width)
        self.w_out = dense(width, num_centers + 3, zero=True)
        self.log_offset_scale = ad.parameter(np.zeros(1))

    def parameters(self):
        out = [*self.w_in]
        for (a, b) in self.blocks_w:
            out.extend([*a, *b])
        out.extend([*self.w_head, *self.w_out, self.log_offset_scale])
        return out

    def param_count(self):
        return sum(p.data.size for p in self.parameters())

    def param_bytes(self, bytes_per_element=2):
        return self.param_count() * bytes_per_element

    def forward(self, f):
        """Logits and offset for descriptors (N, D) or a single (D,) vector."""
        if not isinstance(f, Tensor):
            f = Tensor(np.asarray(f, dtype=np.float64))
        single = f.data.ndim == 1
        if single:
            f = f.reshape(1, -1)
        if f.data.shape[1] != self.in_dim:
            raise ValueError(
                f"descriptor dim {f.data.shape[1]} does not match expert input {self.in_dim}"
            )
        h = ad.relu(f @ self.w_in[0] + self.w_in[1])
        for (w1, b1), (w2, b2) in self.blocks_w:
            h = h + ad.relu(h @ w1 + b1) @ w2 + b2
        g = ad.relu(h @ self.w_head[0] + self.w_head[1])
        out = g @ self.w_out[0] + self.w_out[1]
        logits = out[:, : self.num_centers]
        offset = out[:, self.num_centers :] * ad.exp(self.log_offset_scale)
        if single:
            return logits[0], offset[0]
        return logits, offset


def expert_forward(expert, dec, f):
    """Predicted scene coordinates: decoder applied to the expert's output."""
    if dec.num_centers != expert.num_centers:
        raise ValueError("decoder size does not match expert logit width")
    logits, offset = expert.forward(f)
    return decode_position(logits, offset, dec)


class ExpertBank:
    """A decoder shared across K experts, with activation accounting.

    ``forward_single`` counts one activation per call; the counters are
    how sparse inference is audited (exactly one expert evaluation per
    query regardless of K).
    """

    def __init__(self, experts, decoder):
        if not experts:
            raise ValueError("need at least one expert")
        self.experts = list(experts)
        self.decoder = decoder
        self.reset_counters()

    @property
    def num_experts(self):
        return len(self.experts)

    def reset_counters(self):
        self.activation_counts = np.zeros(len(self.experts), dtype=np.int64)

    def forward_single(self, k, f):
        """One expert's predicted coordinates; increments its counter."""
        self.activation_counts[k] += 1
        return expert_forward(self.experts[k], self.decoder, f)

    def forward_all(self, f):
        """Every expert's predictions stacked (K, N, 3); training-time path."""
        outs = [expert_forward(e, self.decoder, f) for e in self.experts]
        if isinstance(outs[0], Tensor):
            return ad.stack(outs, axis=0)
        return np.stack(outs, axis=0)
