"""Camera geometry: rigid poses, pinhole projection, reprojection losses.

Poses follow the world-to-camera convention throughout: ``pose.apply(x)``
maps world points into the camera frame, with +z looking forward, +x right
and +y down (matching the pixel axes). Anything arriving in camera-to-world
form must be inverted at ingestion time.

The loss functions at the bottom accept either plain ndarrays or autodiff
Tensors, so the same code path serves evaluation and gradient-based training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# Camera-frame depth below this is treated as behind the camera.
MIN_DEPTH = 1e-6

# Depth band outside of which a predicted scene point is considered wild and
# is pulled toward a pseudo target instead of receiving a reprojection term.
VALID_DEPTH_RANGE = (0.1, 1000.0)

# Depth (meters) of the pseudo target placed along each pixel ray.
PSEUDO_TARGET_DEPTH = 10.0

_SQRT_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class RigidPose:
    """World-to-camera rigid transform: x_cam = R @ x_world + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.linalg.norm(r.T @ r - np.eye(3)) >= 1e-6:
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(r) <= 0:
            raise ValueError("rotation has negative determinant (reflection)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        """Build from a 3x4 or 4x4 [R|t] matrix."""
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)):
        """Pose of a camera at ``eye`` whose principal axis points at ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise ValueError("eye and target coincide")
        forward = forward / norm
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            # Degenerate up direction; pick any perpendicular.
            up = np.array([1.0, 0.0, 0.0])
            right = np.cross(forward, up)
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        r = np.stack([right, down, forward])
        return cls(r, -r @ eye)

    def matrix(self):
        """3x4 matrix [R | t]."""
        return np.hstack([self.rotation, self.translation[:, None]])

    def apply(self, points):
        """Map world points (3,) or (N, 3) into the camera frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other):
        """Pose equal to applying ``other`` first, then ``self``."""
        return RigidPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self):
        return RigidPose(self.rotation.T, -self.rotation.T @ self.translation)

    def camera_center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image bounds")

    def matrix(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True, eq=False)
class Correspondence:
    """A 2D observation paired with a candidate 3D scene point."""

    pixel: np.ndarray
    scene_point: np.ndarray
    confidence: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=np.float64).reshape(2))
        object.__setattr__(
            self, "scene_point", np.asarray(self.scene_point, dtype=np.float64).reshape(3)
        )
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


def rotation_angle_deg(r):
    """Rotation angle of a 3x3 rotation matrix, in degrees."""
    cos = (np.trace(np.asarray(r)) - 1.0) / 2.0
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def project(pose, intr, points, min_depth=MIN_DEPTH):
    """Project world points through a pose and pinhole intrinsics.

    Accepts a single (3,) point or an (N, 3) batch. Returns
    ``(pixels, depths, valid)`` with matching leading shape; entries whose
    camera-frame depth falls at or below ``min_depth`` are flagged invalid
    (their pixel values are meaningless, never an exception).
    """
    cam = pose.apply(points)
    single = cam.ndim == 1
    cam = np.atleast_2d(cam)
    z = cam[:, 2]
    valid = z > min_depth
    zsafe = np.where(valid, z, 1.0)
    u = intr.fx * cam[:, 0] / zsafe + intr.cx
    v = intr.fy * cam[:, 1] / zsafe + intr.cy
    pixels = np.stack([u, v], axis=1)
    if single:
        return pixels[0], z[0], valid[0]
    return pixels, z, valid


def backproject(pixels, depths, pose, intr):
    """World points whose projection is ``pixels`` at camera depth ``depths``."""
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    z = np.atleast_1d(np.asarray(depths, dtype=np.float64))
    x = (px[:, 0] - intr.cx) / intr.fx * z
    y = (px[:, 1] - intr.cy) / intr.fy * z
    cam = np.stack([x, y, z], axis=1)
    world = pose.inverse().apply(cam)
    if np.asarray(pixels).ndim == 1:
        return world[0]
    return world


def reprojection_errors(points, pixels, pose, intr, invalid_error=1e6):
    """Per-point Euclidean pixel error of world points against observations.

    Returns ``(errors, valid)``. Behind-camera points are flagged invalid
    and given ``invalid_error`` instead of a geometric residual.
    """
    proj, _, valid = project(pose, intr, points)
    proj = np.atleast_2d(proj)
    obs = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    err = np.linalg.norm(proj - obs, axis=1)
    err = np.where(np.atleast_1d(valid), err, invalid_error)
    if np.asarray(points).ndim == 1:
        return err[0], bool(np.atleast_1d(valid)[0])
    return err, np.atleast_1d(valid)


def reprojection_error(corr, pose, intr, invalid_error=1e6):
    """Scalar form of :func:`reprojection_errors` for one correspondence."""
    return reprojection_errors(corr.scene_point, corr.pixel, pose, intr, invalid_error)


def pseudo_targets(pixels, pose, intr, depth=PSEUDO_TARGET_DEPTH):
    """World points at a fixed depth along each pixel's viewing ray.

    These stand in for ground truth when a predicted point is unusable
    (behind the camera or absurdly far), keeping its gradient informative.
    """
    n = np.atleast_2d(np.asarray(pixels)).shape[0]
    return np.atleast_2d(backproject(pixels, np.full(n, float(depth)), pose, intr))


def reproj_loss_terms(pred, pixels, pose, intr, depth_range=VALID_DEPTH_RANGE):
    """Per-point pixel errors of predicted scene coordinates, on the tape.

    ``pred`` is an (N, 3) Tensor of predicted world points; ``pixels`` the
    (N, 2) observed locations. Returns ``(errors, valid)`` where ``errors``
    is an (N,) Tensor and ``valid`` marks points whose camera-frame depth
    lies inside ``depth_range``. Errors at invalid entries are finite
    placeholders; combine with a penalty via :func:`robust_reproj_loss`.
    """
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    cam = pred @ pose.rotation.T + pose.translation
    z = cam[:, 2]
    lo, hi = depth_range
    valid = (z.data > lo) & (z.data < hi)
    # Divide by 1 where invalid so no inf/nan ever enters the graph.
    zsafe = ad.where(valid, z, np.ones_like(z.data))
    obs = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    du = cam[:, 0] / zsafe * intr.fx + (intr.cx - obs[:, 0])
    dv = cam[:, 1] / zsafe * intr.fy + (intr.cy - obs[:, 1])
    errors = ad.sqrt(du * du + dv * dv + _SQRT_EPS)
    return errors, valid


def distance_to_pseudo_targets(pred, pixels, pose, intr, depth=PSEUDO_TARGET_DEPTH):
    """Euclidean distance (N,) from predictions to their pixel-ray pseudo targets."""
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    targets = pseudo_targets(pixels, pose, intr, depth)
    diff = pred - targets
    return ad.sqrt((diff * diff).sum(axis=1) + _SQRT_EPS)


def batch_reproj_loss(
    pred,
    pixels,
    rotations,
    translations,
    fx,
    fy,
    cx,
    cy,
    clamp,
    depth_range=VALID_DEPTH_RANGE,
    pseudo_depth=PSEUDO_TARGET_DEPTH,
):
    """Robust reprojection loss where every entry has its own camera.

    ``pred`` is (B, 3); ``rotations``/``translations`` and the intrinsic
    arrays give each entry's world-to-camera transform. Functionally the
    per-entry equivalent of :func:`reproj_loss_terms` +
    :func:`distance_to_pseudo_targets` + :func:`robust_reproj_loss`, but
    vectorized across mixed views for buffer training.
    """
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    r = np.asarray(rotations, dtype=np.float64)
    t = np.asarray(translations, dtype=np.float64)
    obs = np.asarray(pixels, dtype=np.float64)
    fx, fy = np.asarray(fx, dtype=np.float64), np.asarray(fy, dtype=np.float64)
    cx, cy = np.asarray(cx, dtype=np.float64), np.asarray(cy, dtype=np.float64)
    if len(ad.asdata(pred)) == 0:
        raise ValueError("no correspondences")

    cam_axes = [(pred * r[:, j, :]).sum(axis=1) + t[:, j] for j in range(3)]
    z = cam_axes[2]
    lo, hi = depth_range
    valid = (z.data > lo) & (z.data < hi)
    zsafe = ad.where(valid, z, np.ones_like(z.data))
    du = cam_axes[0] / zsafe * fx + (cx - obs[:, 0])
    dv = cam_axes[1] / zsafe * fy + (cy - obs[:, 1])
    errors = ad.sqrt(du * du + dv * dv + _SQRT_EPS)

    if valid.all():
        return robust_reproj_loss(errors, valid, clamp)
    # Pseudo targets at fixed depth along each entry's pixel ray.
    d = np.full(len(obs), float(pseudo_depth))
    cam = np.stack(
        [(obs[:, 0] - cx) / fx * d, (obs[:, 1] - cy) / fy * d, d], axis=1
    )
    targets = np.einsum("bij,bj->bi", r.transpose(0, 2, 1), cam - t)
    diff = pred - targets
    penalty = ad.sqrt((diff * diff).sum(axis=1) + _SQRT_EPS)
    return robust_reproj_loss(errors, valid, clamp, invalid_penalty=penalty)


def robust_reproj_loss(errors, valid, clamp, invalid_penalty=None):
    """Soft-clamped mean reprojection loss.

    Each valid term contributes ``clamp * tanh(e / clamp)``, a smooth
    saturating version of the raw error that caps the influence of
    outliers at ``clamp``. Invalid terms (flagged False in ``valid``)
    contribute ``invalid_penalty`` instead, which must be a full-length
    array/Tensor or a callable of the mask producing one. Returns the
    mean over all terms; raises on empty input.
    """
    if clamp <= 0:
        raise ValueError("clamp must be positive")
    n = int(np.asarray(errors.data if isinstance(errors, Tensor) else errors).shape[0])
    if n == 0:
        raise ValueError("no correspondences")
    valid = np.atleast_1d(np.asarray(valid, dtype=bool))
    if callable(invalid_penalty):
        invalid_penalty = invalid_penalty(valid)
    if not valid.all() and invalid_penalty is None:
        raise ValueError("invalid terms present but no penalty provided")

    if isinstance(errors, Tensor) or isinstance(invalid_penalty, Tensor):
        errors = errors if isinstance(errors, Tensor) else Tensor(errors)
        soft = ad.tanh(errors / clamp) * clamp
        if valid.all():
            return soft.mean()
        pen = invalid_penalty if isinstance(invalid_penalty, Tensor) else Tensor(invalid_penalty)
        return ad.where(valid, soft, pen).mean()

    soft = clamp * np.tanh(np.asarray(errors, dtype=np.float64) / clamp)
    if valid.all():
        return float(soft.mean())
    return float(np.where(valid, soft, np.asarray(invalid_penalty, dtype=np.float64)).mean())
