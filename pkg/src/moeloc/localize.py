"""Pose estimation from predicted correspondences, and evaluation metrics.

The solver is RANSAC over minimal 6-point DLT hypotheses with
Levenberg-Marquardt refinement on the inlier set. Localization runs the
sparse inference path: encode, route, evaluate exactly one expert, then
solve for the pose. Reporting covers per-frame errors, medians over
successful frames, and the storage accounting that makes the
one-expert-per-query design measurable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from . import autodiff as ad
from .autodiff import Tensor
from .features import image_embedding
from .gating import select_expert_infer
from .geometry import (
    CameraIntrinsics,
    Correspondence,
    RigidPose,
    reprojection_errors,
    rotation_angle_deg,
)

DEFAULT_THRESHOLD_PX = 10.0
DEFAULT_MAX_ITERS = 10_000
DEFAULT_CONFIDENCE = 0.99
MINIMAL_SAMPLE = 6

# Storage accounting assumes half-precision weights.
BYTES_PER_ELEMENT = 2
MB = 10**6


@dataclass(frozen=True)
class PoseEstimate:
    """Solver output; ``success`` False flags a degenerate or failed solve."""

    pose: RigidPose
    inlier_count: int
    inlier_ratio: float
    iterations: int
    success: bool

    def __post_init__(self):
        if not 0.0 <= self.inlier_ratio <= 1.0:
            raise ValueError("inlier ratio must lie in [0, 1]")


def _failure(iterations=0):
    return PoseEstimate(
        pose=RigidPose.identity(),
        inlier_count=0,
        inlier_ratio=0.0,
        iterations=iterations,
        success=False,
    )


def _corr_arrays(corrs):
    points = np.array([np.asarray(c.scene_point, dtype=np.float64) for c in corrs])
    pixels = np.array([np.asarray(c.pixel, dtype=np.float64) for c in corrs])
    return points, pixels


def _dlt_pose(points, pixels, intr):
    """Direct linear transform for [R|t] from ≥ 6 correspondences.

    Works in normalized camera coordinates; returns None when the system
    is degenerate (near-collinear or otherwise rank-deficient sample).
    """
    mu = points.mean(axis=0)
    centered = points - mu
    scale = np.sqrt((centered**2).sum(axis=1).mean())
    if scale < 1e-9:
        return None
    xn = (pixels[:, 0] - intr.cx) / intr.fx
    yn = (pixels[:, 1] - intr.cy) / intr.fy
    x = centered / scale
    n = len(points)
    a = np.zeros((2 * n, 12))
    a[0::2, 0:3] = x
    a[0::2, 3] = 1.0
    a[0::2, 8:11] = -xn[:, None] * x
    a[0::2, 11] = -xn
    a[1::2, 4:7] = x
    a[1::2, 7] = 1.0
    a[1::2, 8:11] = -yn[:, None] * x
    a[1::2, 11] = -yn
    _, s, vt = np.linalg.svd(a)
    # A unique hypothesis needs a one-dimensional null space.
    if s[-2] < 1e-9 * s[0]:
        return None
    p = vt[-1].reshape(3, 4)
    m = p[:, :3]
    det = np.linalg.det(m)
    if abs(det) < 1e-12:
        return None
    if det < 0:
        p = -p
    u, sv, vtr = np.linalg.svd(p[:, :3])
    r = u @ vtr
    sigma = sv.mean()
    t = p[:, 3] / sigma
    # Undo the world-point normalization: R(X - mu)/scale + t projects
    # like RX + (scale*t - R mu). Forcing det > 0 above fixed the
    # homogeneous sign, so cheirality needs no extra flip.
    return RigidPose(r, t * scale - r @ mu)


def _refine_pose(pose, points, pixels, intr):
    """Levenberg-Marquardt on squared reprojection error of the inliers."""

    def residuals(params):
        r = Rotation.from_rotvec(params[:3]).as_matrix()
        cam = points @ r.T + params[3:]
        z = np.maximum(cam[:, 2], 1e-6)
        u = cam[:, 0] / z * intr.fx + intr.cx
        v = cam[:, 1] / z * intr.fy + intr.cy
        return np.concatenate([u - pixels[:, 0], v - pixels[:, 1]])

    x0 = np.concatenate(
        [Rotation.from_matrix(pose.rotation).as_rotvec(), pose.translation]
    )
    before = float((residuals(x0) ** 2).sum())
    sol = least_squares(residuals, x0, method="lm", max_nfev=200)
    after = float((residuals(sol.x) ** 2).sum())
    if after > before:
        return pose
    return RigidPose(Rotation.from_rotvec(sol.x[:3]).as_matrix(), sol.x[3:])


def _collinear(points, tol=1e-6):
    c = points - points.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    return s[0] < 1e-12 or s[1] < tol * s[0]


def solve_pnp_ransac(
    corrs,
    intr,
    threshold_px=DEFAULT_THRESHOLD_PX,
    max_iters=DEFAULT_MAX_ITERS,
    confidence=DEFAULT_CONFIDENCE,
    seed=0,
):
    """Robust camera pose from 2D-3D correspondences.

    RANSAC samples minimal 6-point sets, scores hypotheses by inliers
    under ``threshold_px`` reprojection error, stops early once the
    best hypothesis explains enough points at the configured confidence,
    and refines the winner on its full inlier set. Fewer than 6
    correspondences, a degenerate (collinear) support set, or no
    hypothesis with at least 6 inliers yield a flagged failure, never an
    exception.
    """
    corrs = list(corrs)
    if len(corrs) < MINIMAL_SAMPLE:
        return _failure()
    points, pixels = _corr_arrays(corrs)
    n = len(points)
    rng = np.random.default_rng(seed)

    best_count = 0
    best_pose = None
    iterations = 0
    for it in range(max_iters):
        iterations = it + 1
        sample = rng.choice(n, size=MINIMAL_SAMPLE, replace=False)
        pose = _dlt_pose(points[sample], pixels[sample], intr)
        if pose is None:
            continue
        errors, _ = reprojection_errors(points, pixels, pose, intr)
        count = int((errors < threshold_px).sum())
        if count > best_count:
            best_count = count
            best_pose = pose
        if best_count >= MINIMAL_SAMPLE:
            ratio = best_count / n
            if ratio >= 1.0:
                break
            # Standard adaptive stopping: enough trials to have seen one
            # all-inlier sample with the requested confidence.
            denom = np.log1p(-min(ratio**MINIMAL_SAMPLE, 1 - 1e-12))
            if iterations >= np.log(1 - confidence) / denom:
                break

    if best_pose is None or best_count < MINIMAL_SAMPLE:
        return _failure(iterations)
    inliers = None
    for _ in range(2):
        errors, _ = reprojection_errors(points, pixels, best_pose, intr)
        inliers = errors < threshold_px
        if inliers.sum() < MINIMAL_SAMPLE:
            return _failure(iterations)
        best_pose = _refine_pose(best_pose, points[inliers], pixels[inliers], intr)
    errors, _ = reprojection_errors(points, pixels, best_pose, intr)
    inliers = errors < threshold_px
    if inliers.sum() < MINIMAL_SAMPLE or _collinear(points[inliers]):
        return _failure(iterations)
    return PoseEstimate(
        pose=best_pose,
        inlier_count=int(inliers.sum()),
        inlier_ratio=float(inliers.mean()),
        iterations=iterations,
        success=True,
    )


def localize_frame(
    image,
    encoder,
    router,
    bank,
    intr,
    threshold_px=DEFAULT_THRESHOLD_PX,
    max_iters=DEFAULT_MAX_ITERS,
    seed=0,
):
    """Sparse-inference localization of one frame.

    Encodes the image, routes its embedding, evaluates exactly one
    expert over all cells (auditable via the bank's activation
    counters), and solves for the pose. A solver failure propagates as a
    flagged estimate.
    """
    fm = encoder.encode(image)
    emb = image_embedding(fm)
    k = select_expert_infer(router, emb)
    desc = fm.descriptors.reshape(-1, fm.descriptors.shape[2])
    pixels = fm.pixel_centers.reshape(-1, 2)
    coords = ad.asdata(bank.forward_single(k, Tensor(desc)))
    corrs = [
        Correspondence(pixel=pixels[i], scene_point=coords[i]) for i in range(len(pixels))
    ]
    return solve_pnp_ransac(
        corrs, intr, threshold_px=threshold_px, max_iters=max_iters, seed=seed
    )


def translation_error_cm(estimate, truth):
    """Distance between camera centers in centimeters."""
    return 100.0 * float(
        np.linalg.norm(estimate.camera_center() - truth.camera_center())
    )


def rotation_error_deg(estimate, truth):
    """Geodesic angle between the two orientations in degrees."""
    return rotation_angle_deg(estimate.rotation.T @ truth.rotation)


def _lower_median(values):
    v = np.sort(np.asarray(values, dtype=np.float64))
    return float(v[(len(v) - 1) // 2])


def median_errors(estimates, ground_truth):
    """Median translation (cm) and rotation (degrees) over successes.

    The median is the lower-middle order statistic for even counts.
    Failed estimates are excluded; callers that need the failure rate
    use :func:`build_report`. All-failure (or empty) input is rejected.
    """
    if len(estimates) != len(ground_truth):
        raise ValueError("estimates and ground truth must have equal length")
    if len(estimates) == 0:
        raise ValueError("no frames to evaluate")
    trans, rot = [], []
    for est, gt in zip(estimates, ground_truth):
        if not est.success:
            continue
        trans.append(translation_error_cm(est.pose, gt))
        rot.append(rotation_error_deg(est.pose, gt))
    if not trans:
        raise ValueError("all frames failed; no median defined")
    return _lower_median(trans), _lower_median(rot)


@dataclass(frozen=True)
class LocalizationReport:
    """Per-frame errors plus the summary row of a benchmark table."""

    translation_cm: np.ndarray
    rotation_deg: np.ndarray
    median_translation_cm: float
    median_rotation_deg: float
    failure_rate: float
    frames: int
    activated_map_bytes: int = 0

    def __post_init__(self):
        if len(self.translation_cm) != self.frames or len(self.rotation_deg) != self.frames:
            raise ValueError("per-frame arrays must cover every frame")


def build_report(estimates, ground_truth, activated_map_bytes=0):
    """Full evaluation report; failed frames carry +inf per-frame errors."""
    med_t, med_r = median_errors(estimates, ground_truth)
    trans = np.full(len(estimates), np.inf)
    rot = np.full(len(estimates), np.inf)
    for i, (est, gt) in enumerate(zip(estimates, ground_truth)):
        if est.success:
            trans[i] = translation_error_cm(est.pose, gt)
            rot[i] = rotation_error_deg(est.pose, gt)
    failures = sum(1 for e in estimates if not e.success)
    return LocalizationReport(
        translation_cm=trans,
        rotation_deg=rot,
        median_translation_cm=med_t,
        median_rotation_deg=med_r,
        failure_rate=failures / len(estimates),
        frames=len(estimates),
        activated_map_bytes=activated_map_bytes,
    )


def activated_map_size(encoder, router, bank, bytes_per_element=BYTES_PER_ELEMENT):
    """Storage accounting for the sparse inference path.

    The activated size covers everything one query touches: encoder, the
    router trunk, shared decoder centers, and exactly one expert. The
    routing head's per-expert logit column (plus its bias and control
    slot) is attributed to per-expert storage, so the activated size is
    exactly independent of how many experts are stored and the total
    grows affinely: total(K) = activated + (K-1) * per-expert bytes.
    """
    head_w, head_b = router.layers[-1]
    hidden = head_w.data.shape[0]
    trunk = router.param_count() - head_w.data.size - head_b.data.size
    # Per expert: one head column, one head bias entry, one control slot.
    slice_elems = hidden + 2
    encoder_b = encoder.param_count() * bytes_per_element
    router_b = trunk * bytes_per_element
    decoder_b = bank.decoder.centers.size * bytes_per_element
    expert_b = (bank.experts[0].param_count() + slice_elems) * bytes_per_element
    activated = encoder_b + router_b + decoder_b + expert_b
    total = activated + (bank.num_experts - 1) * expert_b
    return {
        "activated": activated,
        "total": total,
        "per_expert": expert_b,
        "encoder": encoder_b,
        "router": router_b,
        "decoder": decoder_b,
    }


def paper_scale_models(num_experts=4, seed=0):
    """Full-scale architecture preset used for storage accounting checks."""
    from .experts import ExpertBank, ExpertHead, PositionDecoder
    from .features import Encoder
    from .gating import RouterState

    rng = np.random.default_rng(seed)
    encoder = Encoder(channels=(32, 64, 96), out_dim=512, seed=seed)
    router = RouterState(in_dim=512, num_experts=num_experts, hidden=(256, 256), seed=seed)
    decoder = PositionDecoder(rng.normal(size=(50, 3)))
    experts = [
        ExpertHead(in_dim=512, width=448, blocks=3, num_centers=50, seed=seed + k)
        for k in range(num_experts)
    ]
    return encoder, router, ExpertBank(experts, decoder)


def timed_localization(frames, encoder, router, bank, intr, seed=0, repeats=1):
    """Median wall-clock seconds per frame for the sparse inference path."""
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for i, image in enumerate(frames):
            localize_frame(image, encoder, router, bank, intr, seed=seed + i)
        times.append((time.perf_counter() - t0) / len(frames))
    return float(np.median(times))
