"""Patch feature encoding and the shuffled training buffer.

The encoder is a small strided convolutional network (stride 8 overall,
receptive field 31 px) trained from scratch during the first training
stage and frozen afterwards. Buffer construction encodes posed views,
keeps descriptors whose center pixel has scene content, and subsamples
uniformly across all (view, cell) candidates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import CameraIntrinsics, RigidPose
from .synth import ViewRecord

_logger = logging.getLogger(__name__)

STRIDE = 8
RECEPTIVE_FIELD = 31

# Buffer capacity and batch defaults at desk scale.
DEFAULT_CAPACITY = 2**20
DEFAULT_BATCH = 4096


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Dense patch descriptors with their source pixel centers."""

    descriptors: np.ndarray
    pixel_centers: np.ndarray
    stride: int


class Encoder:
    """Four-layer strided conv net mapping H×W×3 images to (H/8)×(W/8)×D.

    Three stride-2 layers then one stride-1 layer, all 3×3 with unit
    padding, ReLU between layers and a linear final output. Output cell
    (i, j) is centered on input pixel (8j, 8i) and sees a 31 px window.
    """

    def __init__(self, channels=(32, 64, 128), out_dim=128, seed=0):
        self.channels = tuple(channels)
        self.out_dim = out_dim
        rng = np.random.default_rng(seed)
        dims = [3, *self.channels, out_dim]
        self.strides = [2] * len(self.channels) + [1]
        self.weights = []
        for cin, cout in zip(dims[:-1], dims[1:]):
            scale = np.sqrt(2.0 / (cin * 9))
            w = ad.parameter(rng.normal(scale=scale, size=(cout, cin, 3, 3)))
            b = ad.parameter(np.zeros(cout))
            self.weights.append((w, b))
        total = 2 ** (len(self.strides) - 1)
        if total != STRIDE:
            raise ValueError("layer strides must multiply to the fixed output stride")

    def parameters(self):
        return [p for wb in self.weights for p in wb]

    def param_count(self):
        return sum(p.data.size for p in self.parameters())

    def forward(self, x):
        """Differentiable forward over an (N, 3, H, W) Tensor."""
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(self.weights):
            h = ad.conv2d(h, w, b, stride=self.strides[i], pad=1)
            if i != last:
                h = ad.relu(h)
        return h

    def encode(self, image):
        """FeatureMap of one H×W×3 image (no gradient tracking)."""
        image = np.asarray(image, dtype=np.float64)
        h, w = image.shape[:2]
        if h % STRIDE or w % STRIDE:
            raise ValueError(f"image dims must be divisible by {STRIDE}")
        x = Tensor(image.transpose(2, 0, 1)[None])
        out = self.forward(x).data[0].transpose(1, 2, 0)
        gh, gw = out.shape[:2]
        jj, ii = np.meshgrid(np.arange(gw), np.arange(gh))
        centers = np.stack([STRIDE * jj, STRIDE * ii], axis=2).astype(np.float64)
        return FeatureMap(descriptors=out, pixel_centers=centers, stride=STRIDE)


def image_embedding(fm):
    """Spatial mean pool of a feature map's descriptors."""
    d = fm.descriptors
    if d.size == 0:
        raise ValueError("empty feature map")
    return d.mean(axis=(0, 1))


def _rotation_about_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def augment_view(view, rng, max_rot_deg=15.0, scale_range=(0.67, 1.5)):
    """In-plane rotation and zoom with matching pose/intrinsics updates.

    Rotating the camera about its principal axis by θ rotates pixels by θ
    around the principal point; zooming scales the focal lengths. The
    returned record renders the same scene geometry, so downstream
    supervision stays exact. Requires fx == fy for the rotation to be an
    exact image-space transform.
    """
    theta = np.radians(rng.uniform(-max_rot_deg, max_rot_deg))
    scale = rng.uniform(*scale_range)
    intr = view.intrinsics
    if abs(intr.fx - intr.fy) > 1e-9:
        raise ValueError("in-plane rotation augmentation needs square pixels")

    # Output-to-input map in (row, col) order for affine_transform.
    c, s = np.cos(theta), np.sin(theta)
    m = np.array([[c, -s], [s, c]]) / scale
    center = np.array([intr.cy, intr.cx])
    offset = center - m @ center

    warp = lambda a, order, cval: ndimage.affine_transform(
        a, m, offset=offset, order=order, mode="constant", cval=cval
    )
    image = np.stack(
        [warp(view.image[..., ch].astype(np.float64), 1, 0.0) for ch in range(3)], axis=2
    )
    valid = warp(view.gt_valid.astype(np.float64), 0, 0.0) > 0.5
    coords = np.stack([warp(view.gt_coords[..., ch], 0, 0.0) for ch in range(3)], axis=2)
    depth = warp(view.depth, 0, 0.0)

    pose = RigidPose(_rotation_about_z(theta), np.zeros(3)).compose(view.pose)
    new_intr = CameraIntrinsics(
        fx=intr.fx * scale,
        fy=intr.fy * scale,
        cx=intr.cx,
        cy=intr.cy,
        width=intr.width,
        height=intr.height,
    )
    return ViewRecord(
        image=image.astype(np.float32),
        pose=pose,
        intrinsics=new_intr,
        gt_coords=coords,
        gt_valid=valid,
        depth=depth,
        region=view.region,
    )


@dataclass(eq=False)
class TrainingBuffer:
    """Flat shuffled pool of (descriptor, pixel, source view) entries.

    Descriptors are stored float32; ``view_index`` points into the
    per-view ``poses``/``intrinsics`` lists (augmented views get their
    own slots). Immutable once built.
    """

    descriptors: np.ndarray
    pixels: np.ndarray
    view_index: np.ndarray
    poses: list
    intrinsics: list
    capacity: int

    def __len__(self):
        return len(self.descriptors)


def _valid_cells(fm, view):
    """Buffer candidates of one encoded view: cells with scene content."""
    gh, gw = fm.descriptors.shape[:2]
    centers = fm.pixel_centers.reshape(-1, 2)
    rows = centers[:, 1].astype(np.int64)
    cols = centers[:, 0].astype(np.int64)
    keep = view.gt_valid[rows, cols]
    return fm.descriptors.reshape(-1, fm.descriptors.shape[2])[keep], centers[keep]


def fill_buffer(dataset, encoder, capacity, augment=False, seed=0, max_passes=16):
    """Encode views and subsample descriptors uniformly to ``capacity``.

    Every (view, valid cell) candidate across the dataset has equal
    selection probability; entries come out in shuffled order. When the
    candidate pool is smaller than ``capacity`` the buffer tops up by
    uniform sampling with replacement, so it always fills. With
    ``augment`` on, additional passes apply fresh rotation/zoom draws per
    view until enough distinct candidates exist.
    """
    if capacity <= 0:
        raise ValueError("capacity must be positive")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)

    desc_parts, pixel_parts, view_parts = [], [], []
    poses, intrinsics = [], []
    total = 0
    passes = max_passes if augment else 1
    for p in range(passes):
        for view in dataset:
            v = augment_view(view, rng) if (augment and p > 0) else view
            fm = encoder.encode(v.image)
            desc, pix = _valid_cells(fm, v)
            if len(desc) == 0:
                continue
            slot = len(poses)
            poses.append(v.pose)
            intrinsics.append(v.intrinsics)
            desc_parts.append(desc.astype(np.float32))
            pixel_parts.append(pix.astype(np.float32))
            view_parts.append(np.full(len(desc), slot, dtype=np.int32))
            total += len(desc)
        if total >= capacity:
            break
    if total == 0:
        raise ValueError("no valid descriptors in dataset")

    desc = np.concatenate(desc_parts)
    pix = np.concatenate(pixel_parts)
    vidx = np.concatenate(view_parts)
    if total >= capacity:
        order = rng.permutation(rng.choice(total, size=capacity, replace=False))
    else:
        _logger.debug("pool %d below capacity %d, sampling with replacement", total, capacity)
        order = rng.integers(0, total, size=capacity)
    return TrainingBuffer(
        descriptors=desc[order],
        pixels=pix[order],
        view_index=vidx[order],
        poses=poses,
        intrinsics=intrinsics,
        capacity=capacity,
    )
