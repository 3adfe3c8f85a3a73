"""Three-stage training protocol for the mixture relocalizer.

Stage 1 (experts): the shared encoder and expert 0 train jointly on
cluster 0's views; the encoder is then frozen and every expert trains on
a shuffled buffer built from its own cluster. Stage 2 (gate): the router
MLP trains with cross-entropy against argmin-loss expert labels, noise
and bias loop off. Stage 3 (joint): soft-fused routing with Gumbel
noise, temperature annealing, and the usage/bias control loop, with
gradients reaching the experts and the router together.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .experts import ExpertBank, ExpertHead, PositionDecoder, expert_forward, kmeans_centers
from .features import Encoder, augment_view, fill_buffer, image_embedding
from .gating import (
    DEFAULT_GAMMA,
    DEFAULT_ETA,
    moe_forward_train,
    route_logits,
    select_expert_infer,
)
from .geometry import (
    batch_reproj_loss,
    distance_to_pseudo_targets,
    reproj_loss_terms,
    robust_reproj_loss,
)
from .optim import AdamW, OneCycleSchedule, linear_anneal
from .splat import (
    GaussianHead,
    GridUpsampler,
    build_dense_grid,
    gaussian_head,
    photometric_loss,
    psnr,
    rasterize,
)

_logger = logging.getLogger(__name__)

STAGES = ("experts", "gate", "joint", "render")


@dataclass
class TrainConfig:
    """Hyperparameters shared by every training stage."""

    stage: str = "experts"
    epochs: int = 16
    batch_size: int = 4096
    buffer_capacity: int = 2**20
    lr_range: tuple = (2e-4, 2e-3)
    clamp_schedule: tuple = (50.0, 1.0)
    tau_schedule: tuple = (1.0, 0.1)
    gamma: float = DEFAULT_GAMMA
    eta: float = DEFAULT_ETA
    num_experts: int = 4
    decoder_k: int = 50
    seed: int = 0
    weight_decay: float = 1e-4
    augment: bool = False
    # Architecture knobs; defaults are the desk-scale preset.
    encoder_channels: tuple = (32, 64, 128)
    descriptor_dim: int = 128
    expert_width: int = 256
    expert_blocks: int = 3
    router_hidden: tuple = (256, 256)
    # Rendering-stage knobs.
    render_factor: int = 4
    render_hidden: int = 64
    render_lr: tuple = (2e-4, 2e-3)
    photo_lambda: float = 0.2
    render_background: float = 0.12
    offset_bound: float | None = None
    coord_noise: float = 0.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        for name in ("epochs", "batch_size", "buffer_capacity", "num_experts", "decoder_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not (0 < self.lr_range[0] <= self.lr_range[1]):
            raise ValueError("learning-rate range must be positive and ordered")
        if min(self.clamp_schedule) <= 0 or min(self.tau_schedule) <= 0:
            raise ValueError("clamp and temperature schedules must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.render_factor not in (1, 2, 4, 8):
            raise ValueError("render_factor must be 1, 2, 4, or 8")
        if self.render_hidden < 1:
            raise ValueError("render_hidden must be positive")
        if not (0 < self.render_lr[0] <= self.render_lr[1]):
            raise ValueError("render learning-rate range must be positive and ordered")
        if not 0.0 <= self.photo_lambda <= 1.0:
            raise ValueError("photo_lambda must lie in [0, 1]")
        if self.offset_bound is not None and self.offset_bound <= 0:
            raise ValueError("offset_bound must be positive when set")
        if self.coord_noise < 0:
            raise ValueError("coord_noise must be nonnegative")


def cluster_scene(poses, k, seed=0):
    """Assign each view to one of ``k`` spatial clusters of camera centers."""
    if len(poses) < k:
        raise ValueError(f"need at least {k} views to form {k} clusters")
    positions = np.array([p.camera_center() for p in poses])
    centers = kmeans_centers(positions, k, seed=seed)
    d = np.linalg.norm(positions[:, None, :] - centers[None], axis=2)
    assignment = d.argmin(axis=1)
    # Nearest-center assignment can strand a cluster if Lloyd stopped on
    # the iteration cap; hand each empty cluster its closest view.
    for j in range(k):
        if not np.any(assignment == j):
            assignment[d[:, j].argmin()] = j
    return assignment


def _cell_candidates(view, grid_shape):
    """Valid-cell mask and pixel centers for one encoded view."""
    gh, gw = grid_shape
    jj, ii = np.meshgrid(np.arange(gw), np.arange(gh))
    pixels = np.stack([8 * jj, 8 * ii], axis=2).reshape(-1, 2).astype(np.float64)
    rows = pixels[:, 1].astype(np.int64)
    cols = pixels[:, 0].astype(np.int64)
    keep = view.gt_valid[rows, cols]
    return keep, pixels


def _encode_cells(encoder, view):
    """Differentiable per-cell descriptors of one view, (gh*gw, D)."""
    img = np.ascontiguousarray(view.image.astype(np.float64).transpose(2, 0, 1))
    out = encoder.forward(Tensor(img[None]))
    _, d, gh, gw = out.data.shape
    cells = out.reshape((d, gh * gw)).transpose((1, 0))
    return cells, (gh, gw)


def _view_loss(encoder, expert, decoder, view, clamp, rng, batch_size):
    """Robust reprojection loss of one view's (subsampled) valid cells."""
    cells, grid = _encode_cells(encoder, view)
    keep, pixels = _cell_candidates(view, grid)
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        return None
    if len(idx) > batch_size:
        idx = rng.choice(idx, size=batch_size, replace=False)
    f = ad.take(cells, idx)
    coords = expert_forward(expert, decoder, f)
    pix = pixels[idx]
    errors, valid = reproj_loss_terms(coords, pix, view.pose, view.intrinsics)
    penalty = distance_to_pseudo_targets(coords, pix, view.pose, view.intrinsics)
    return robust_reproj_loss(errors, valid, clamp, invalid_penalty=penalty)


def _buffer_cameras(buf):
    r = np.array([p.rotation for p in buf.poses])
    t = np.array([p.translation for p in buf.poses])
    fx = np.array([i.fx for i in buf.intrinsics])
    fy = np.array([i.fy for i in buf.intrinsics])
    cx = np.array([i.cx for i in buf.intrinsics])
    cy = np.array([i.cy for i in buf.intrinsics])
    return r, t, fx, fy, cx, cy


def _check_finite(loss, stage, step, extra=""):
    if not np.isfinite(loss):
        raise RuntimeError(f"divergence in {stage} stage at step {step}: loss={loss} {extra}")


def _train_expert_on_buffer(expert, decoder, buf, config, history, tag, seed):
    """Buffer epochs for one expert; returns the trailing mean loss."""
    r, t, fx, fy, cx, cy = _buffer_cameras(buf)
    bs = min(config.batch_size, len(buf))
    steps_per_epoch = max(1, len(buf) // bs)
    total = config.epochs * steps_per_epoch
    opt = AdamW(
        expert.parameters(), lr=config.lr_range[0], weight_decay=config.weight_decay
    )
    sched = OneCycleSchedule(config.lr_range[0], config.lr_range[1], total)
    rng = np.random.default_rng(seed)
    losses = []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(buf))
        for b in range(steps_per_epoch):
            idx = order[b * bs : (b + 1) * bs]
            vidx = buf.view_index[idx]
            clamp = linear_anneal(*config.clamp_schedule, step, total)
            f = Tensor(buf.descriptors[idx].astype(np.float64))
            coords = expert_forward(expert, decoder, f)
            loss = batch_reproj_loss(
                coords, buf.pixels[idx], r[vidx], t[vidx],
                fx[vidx], fy[vidx], cx[vidx], cy[vidx], clamp,
            )
            _check_finite(loss.item(), tag, step)
            opt.lr = sched.lr_at(step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            history.append(
                {"stage": tag, "step": step, "loss": loss.item(),
                 "lr": opt.lr, "clamp": clamp}
            )
            step += 1
    return float(np.mean(losses[-min(100, len(losses)):]))


def pretrain_experts(dataset, assignment, config):
    """Stage 1: build and train encoder, decoder, and all experts.

    Returns ``(encoder, bank, report)``; the encoder comes back frozen
    and ``report['final_loss']`` holds each expert's trailing mean
    training loss.
    """
    assignment = np.asarray(assignment)
    if len(assignment) != len(dataset):
        raise ValueError("assignment must cover every view")
    k_experts = config.num_experts
    counts = np.bincount(assignment, minlength=k_experts)
    if len(counts) > k_experts:
        raise ValueError("assignment labels exceed the configured expert count")
    if counts.min() == 0:
        raise ValueError(f"cluster {int(counts.argmin())} has no views")

    encoder = Encoder(
        channels=config.encoder_channels, out_dim=config.descriptor_dim, seed=config.seed
    )
    cams = np.array([v.pose.camera_center() for v in dataset])
    decoder = PositionDecoder(kmeans_centers(cams, config.decoder_k, seed=config.seed))
    experts = [
        ExpertHead(
            in_dim=config.descriptor_dim,
            width=config.expert_width,
            blocks=config.expert_blocks,
            num_centers=config.decoder_k,
            seed=config.seed + 101 * (k + 1),
        )
        for k in range(k_experts)
    ]
    bank = ExpertBank(experts, decoder)
    history = []

    # Stage 1a: encoder and expert 0 learn jointly on cluster 0's views.
    c0 = [dataset[i] for i in np.flatnonzero(assignment == 0)]
    rng = np.random.default_rng(config.seed)
    steps_a = config.epochs * len(c0)
    opt = AdamW(
        encoder.parameters() + experts[0].parameters(),
        lr=config.lr_range[0],
        weight_decay=config.weight_decay,
    )
    sched = OneCycleSchedule(config.lr_range[0], config.lr_range[1], steps_a)
    step = 0
    for _ in range(config.epochs):
        for vi in rng.permutation(len(c0)):
            clamp = linear_anneal(*config.clamp_schedule, step, steps_a)
            loss = _view_loss(
                encoder, experts[0], decoder, c0[vi], clamp, rng, config.batch_size
            )
            if loss is not None:
                _check_finite(loss.item(), "encoder", step)
                opt.lr = sched.lr_at(step)
                opt.zero_grad()
                loss.backward()
                opt.step()
                history.append(
                    {"stage": "encoder", "step": step, "loss": loss.item(),
                     "lr": opt.lr, "clamp": clamp}
                )
            step += 1

    for p in encoder.parameters():
        p.requires_grad = False

    # Stage 1b: per-cluster buffers, one expert each (expert 0 continues).
    final_loss = np.zeros(k_experts)
    for k in range(k_experts):
        views_k = [dataset[i] for i in np.flatnonzero(assignment == k)]
        buf = fill_buffer(
            views_k,
            encoder,
            config.buffer_capacity,
            augment=config.augment,
            seed=config.seed + 7919 * (k + 1),
        )
        final_loss[k] = _train_expert_on_buffer(
            experts[k], decoder, buf, config, history,
            tag=f"expert{k}", seed=config.seed + 104729 * (k + 1),
        )
        _logger.info("expert %d trailing loss %.4f", k, final_loss[k])
    return encoder, bank, {"history": history, "final_loss": final_loss}


def _view_expert_losses(dataset, encoder, bank, clamp, batch_size, seed):
    """Per-view robust loss of every expert, (V, K), plus embeddings."""
    rng = np.random.default_rng(seed)
    k_experts = bank.num_experts
    losses = np.zeros((len(dataset), k_experts))
    embeddings = np.zeros((len(dataset), encoder.out_dim))
    for v, view in enumerate(dataset):
        fm = encoder.encode(view.image)
        embeddings[v] = image_embedding(fm)
        gh, gw = fm.descriptors.shape[:2]
        desc = fm.descriptors.reshape(-1, fm.descriptors.shape[2])
        keep, pixels = _cell_candidates(view, (gh, gw))
        idx = np.flatnonzero(keep)
        if len(idx) > batch_size:
            idx = rng.choice(idx, size=batch_size, replace=False)
        f = desc[idx]
        pix = pixels[idx]
        for k in range(k_experts):
            coords = ad.asdata(expert_forward(bank.experts[k], bank.decoder, Tensor(f)))
            errors, valid = reproj_loss_terms(coords, pix, view.pose, view.intrinsics)
            pen = distance_to_pseudo_targets(coords, pix, view.pose, view.intrinsics)
            losses[v, k] = ad.asdata(
                robust_reproj_loss(errors, valid, clamp, invalid_penalty=pen)
            )
    return losses, embeddings


def pretrain_gate(dataset, encoder, bank, router, config):
    """Stage 2: cross-entropy router training against argmin-loss labels.

    Expert weights are read, never written; Gumbel noise and the bias
    loop stay off. Returns a report with the labels, per-view expert
    losses, final training accuracy, and loss history.
    """
    losses, embeddings = _view_expert_losses(
        dataset, encoder, bank, config.clamp_schedule[1], config.batch_size, config.seed
    )
    labels = losses.argmin(axis=1)
    rng = np.random.default_rng(config.seed)
    train_emb, train_lab = embeddings, labels
    if config.augment:
        # Rotated/zoomed copies inherit their source view's label; the
        # extra framing variety regularizes the decision boundary.
        extra_emb, extra_lab = [], []
        for _ in range(3):
            for v, view in enumerate(dataset):
                aug = augment_view(view, rng)
                extra_emb.append(image_embedding(encoder.encode(aug.image)))
                extra_lab.append(labels[v])
        train_emb = np.concatenate([embeddings, np.array(extra_emb)])
        train_lab = np.concatenate([labels, np.array(extra_lab)])
    n = len(train_emb)
    bs = min(config.batch_size, n)
    steps_per_epoch = max(1, n // bs)
    total = config.epochs * steps_per_epoch
    opt = AdamW(router.parameters(), lr=config.lr_range[0], weight_decay=config.weight_decay)
    sched = OneCycleSchedule(config.lr_range[0], config.lr_range[1], total)
    history = []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * bs : (b + 1) * bs]
            z = route_logits(router, Tensor(train_emb[idx]))
            lp = ad.log_softmax(z, axis=-1)
            loss = -lp[np.arange(len(idx)), train_lab[idx]].mean()
            _check_finite(loss.item(), "gate", step)
            opt.lr = sched.lr_at(step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(
                {"stage": "gate", "step": step, "loss": loss.item(), "lr": opt.lr}
            )
            step += 1
    pred = ad.asdata(route_logits(router, embeddings)).argmax(axis=1)
    accuracy = float((pred == labels).mean())
    return {
        "labels": labels,
        "expert_losses": losses,
        "accuracy": accuracy,
        "history": history,
    }


def gate_accuracy(dataset, encoder, bank, router, config):
    """Router top-1 accuracy against argmin-loss expert labels.

    Evaluation only; safe to call on held-out views. Returns
    ``(accuracy, labels, predictions)``.
    """
    losses, embeddings = _view_expert_losses(
        dataset, encoder, bank, config.clamp_schedule[1], config.batch_size, config.seed
    )
    labels = losses.argmin(axis=1)
    pred = ad.asdata(route_logits(router, embeddings)).argmax(axis=1)
    return float((pred == labels).mean()), labels, pred


def joint_finetune(dataset, encoder, bank, router, config):
    """Stage 3: end-to-end tuning of experts plus router with routing noise.

    Each step embeds one view, soft-fuses all experts under
    Gumbel-Softmax weights, and backpropagates the robust reprojection
    loss; the usage EMA and bias control loop run as side effects and
    the temperature anneals across the stage. A non-finite loss aborts
    with a state dump in the exception message.
    """
    if any(p.requires_grad for p in encoder.parameters()):
        raise ValueError("encoder must be frozen before joint finetuning")
    params = router.parameters()
    for e in bank.experts:
        params = params + e.parameters()
    opt = AdamW(params, lr=config.lr_range[0], weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    total = config.epochs * n
    sched = OneCycleSchedule(config.lr_range[0], config.lr_range[1], total)
    history = []
    step = 0
    for _ in range(config.epochs):
        for vi in rng.permutation(n):
            view = dataset[vi]
            router.tau = linear_anneal(*config.tau_schedule, step, total)
            clamp = linear_anneal(*config.clamp_schedule, step, total)
            fm = encoder.encode(view.image)
            emb = image_embedding(fm)
            desc = fm.descriptors.reshape(-1, fm.descriptors.shape[2])
            keep, pixels = _cell_candidates(view, fm.descriptors.shape[:2])
            idx = np.flatnonzero(keep)
            if len(idx) == 0:
                step += 1
                continue
            if len(idx) > config.batch_size:
                idx = rng.choice(idx, size=config.batch_size, replace=False)
            coords, alpha = moe_forward_train(
                router, emb, Tensor(desc[idx]), bank, noise_source=rng
            )
            pix = pixels[idx]
            errors, valid = reproj_loss_terms(coords, pix, view.pose, view.intrinsics)
            pen = distance_to_pseudo_targets(coords, pix, view.pose, view.intrinsics)
            loss = robust_reproj_loss(errors, valid, clamp, invalid_penalty=pen)
            if not np.isfinite(loss.item()):
                raise RuntimeError(
                    "divergence in joint stage: "
                    f"step={step} tau={router.tau:.4f} clamp={clamp:.3f} "
                    f"usage={np.array2string(router.usage, precision=4)} "
                    f"bias={np.array2string(router.bias, precision=4)}"
                )
            opt.lr = sched.lr_at(step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(
                {"stage": "joint", "step": step, "loss": loss.item(), "lr": opt.lr,
                 "tau": router.tau, "usage": router.usage.copy(),
                 "bias": router.bias.copy(), "alpha": ad.asdata(alpha).copy()}
            )
            step += 1
    return {"history": history, "bias_sum": float(router.bias.sum())}


def routed_pointmap(image, encoder, bank, router):
    """Frozen-stack features, dense coordinate map, and routed expert.

    Runs the inference path: encode, route by biased mean-pooled logits,
    and predict a coordinate for every grid cell with the one selected
    expert. Nothing here tracks gradients.
    """
    fm = encoder.encode(image)
    k = select_expert_infer(router, image_embedding(fm))
    gh, gw, d = fm.descriptors.shape
    cells = fm.descriptors.reshape(gh * gw, d)
    coords = ad.asdata(bank.forward_single(k, Tensor(cells)))
    return fm.descriptors, coords.reshape(gh, gw, 3), k


def train_render_head(dataset, encoder, bank, router, config):
    """Stage 4: fit the upsampler and Gaussian head at a frozen stack.

    Per step, one view is pushed through the frozen localization path,
    its dense grid and splats are regressed, rasterized at the input
    view, and scored by the photometric loss; only the upsampler and
    head receive gradients. Returns ``(upsampler, head, report)`` where
    ``report['final_psnr']`` averages the last epoch's training PSNR.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    cached = []
    for view in dataset:
        desc, coords, _ = routed_pointmap(view.image, encoder, bank, router)
        if config.coord_noise > 0:
            coords = coords + rng.normal(scale=config.coord_noise, size=coords.shape)
        cached.append((desc, coords))

    upsampler = GridUpsampler(
        encoder.out_dim, config.render_factor, config.render_hidden,
        seed=config.seed + 41,
    )
    head = GaussianHead(config.render_hidden, hidden=config.render_hidden,
                        seed=config.seed + 42)
    opt = AdamW(
        upsampler.parameters() + head.parameters(),
        lr=config.render_lr[0], weight_decay=config.weight_decay,
    )
    total = config.epochs * len(dataset)
    sched = OneCycleSchedule(config.render_lr[0], config.render_lr[1], total)
    history = []
    step = 0
    for _ in range(config.epochs):
        for vi in rng.permutation(len(dataset)):
            desc, coords = cached[vi]
            view = dataset[vi]
            grid = build_dense_grid(desc, coords, upsampler)
            splats = gaussian_head(head, grid, offset_bound=config.offset_bound)
            img = rasterize(
                splats, view.pose, view.intrinsics,
                background=config.render_background,
            )
            target = view.image.astype(np.float64)
            loss = photometric_loss(img, target, config.photo_lambda)
            if not np.isfinite(loss.item()):
                raise RuntimeError(
                    "divergence in render stage: "
                    f"step={step} lr={opt.lr:.3e} "
                    f"mean_log_scale={float(np.mean(ad.asdata(splats.log_scales))):.3f} "
                    f"mean_opacity={float(np.mean(ad.asdata(splats.opacities))):.3f}"
                )
            opt.lr = sched.lr_at(step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(
                {"stage": "render", "step": step, "loss": loss.item(),
                 "lr": opt.lr, "psnr": psnr(ad.asdata(img), target)}
            )
            step += 1
    tail = history[-min(len(dataset), len(history)):]
    final = float(np.mean([h["psnr"] for h in tail]))
    _logger.info("render head final PSNR %.2f dB", final)
    return upsampler, head, {"history": history, "final_psnr": final}


def render_frame(view, encoder, bank, router, upsampler, head,
                 background=0.12, offset_bound=None):
    """Render one posed view through the trained splat head.

    Returns ``(image, splats, expert_index)`` with a plain float array
    image and the concrete splat set behind it.
    """
    desc, coords, k = routed_pointmap(view.image, encoder, bank, router)
    grid = build_dense_grid(desc, coords, upsampler)
    splats = gaussian_head(head, grid, offset_bound=offset_bound).concrete()
    img = rasterize(splats, view.pose, view.intrinsics, background=background)
    return img, splats, k
