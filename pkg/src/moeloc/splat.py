"""Feed-forward Gaussian-splat prediction and differentiable rendering.

The rendering head turns one localized view into a set of 3D Gaussians:
patch features are upsampled by learned transposed convolutions, the
predicted coordinate map is bilinearly interpolated onto the same grid
as fixed spatial anchors, and a small convolutional head regresses the
per-cell splat parameters around those anchors. The rasterizer does
exact per-pixel front-to-back alpha compositing over every splat within
three standard deviations of the pixel, with no tiling, so it stays
correct and differentiable at desk-scale resolutions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_LAMBDA = 0.2
MIN_SCALE = 1e-4
MAX_SCALE = 10.0
# Isotropic floor added to the 2D covariance diagonal, in px^2. Keeps
# sub-pixel splats visible and every projected covariance invertible.
DILATION_PX2 = 0.3
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SH_C0 = 0.28209479177387814

_QUAT_BASE = np.array([1.0, 0.0, 0.0, 0.0])
_PLY_PROPS = (
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)


def quat_to_rotmat(q):
    """Rotation matrices (..., 3, 3) of unit quaternions (..., 4) wxyz."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


@dataclass(frozen=True, eq=False)
class GaussianSplat:
    """A flat collection of N splats, one row per Gaussian.

    Covariance is parameterized as log-scales plus a unit quaternion;
    `covariances()` materializes R diag(exp(2s)) R^T, which is symmetric
    positive definite by construction.
    """

    centers: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        s = np.asarray(self.log_scales, dtype=np.float64)
        q = np.asarray(self.quats, dtype=np.float64)
        o = np.asarray(self.opacities, dtype=np.float64)
        col = np.asarray(self.colors, dtype=np.float64)
        n = len(c)
        if c.shape != (n, 3) or s.shape != (n, 3) or q.shape != (n, 4):
            raise ValueError("centers/log_scales must be (N, 3), quats (N, 4)")
        if o.shape != (n,) or col.shape != (n, 3):
            raise ValueError("opacities must be (N,), colors (N, 3)")
        for name, a in (("centers", c), ("log_scales", s), ("quats", q)):
            if not np.isfinite(a).all():
                raise ValueError(f"{name} must be finite")
        if n and np.abs(np.linalg.norm(q, axis=1) - 1.0).max() > 1e-6:
            raise ValueError("quaternions must be unit norm within 1e-6")
        if ((o <= 0) | (o >= 1)).any() or ((col <= 0) | (col >= 1)).any():
            raise ValueError("opacities and colors must lie strictly in (0, 1)")
        for name, a in (("centers", c), ("log_scales", s), ("quats", q),
                        ("opacities", o), ("colors", col)):
            object.__setattr__(self, name, a)

    def __len__(self):
        return len(self.centers)

    def covariances(self):
        r = quat_to_rotmat(self.quats)
        s2 = np.exp(2.0 * self.log_scales)
        return np.einsum("nij,nj,nkj->nik", r, s2, r)


@dataclass(eq=False)
class SplatTensors:
    """Differentiable splat fields produced by the Gaussian head."""

    centers: Tensor
    log_scales: Tensor
    quats: Tensor
    opacities: Tensor
    colors: Tensor
    grid_shape: tuple

    def concrete(self):
        """Detached, validated snapshot; squashed fields nudged off 0/1."""
        eps = 1e-7
        return GaussianSplat(
            centers=ad.asdata(self.centers).copy(),
            log_scales=ad.asdata(self.log_scales).copy(),
            quats=ad.asdata(self.quats).copy(),
            opacities=np.clip(ad.asdata(self.opacities), eps, 1 - eps),
            colors=np.clip(ad.asdata(self.colors), eps, 1 - eps),
        )


# --- dense grid ------------------------------------------------------------


class GridUpsampler:
    """Learned feature upsampler: a chain of stride-2 transposed convs.

    Factor must be a power of two; factor 1 degrades to a single 3x3
    convolution so the module always owns trainable weights.
    """

    def __init__(self, in_dim, factor, out_dim=64, seed=0):
        if factor not in (1, 2, 4, 8):
            raise ValueError("upsample factor must be 1, 2, 4, or 8")
        self.in_dim = in_dim
        self.factor = factor
        self.out_dim = out_dim
        rng = np.random.default_rng(seed)
        self.weights = []
        n_layers = max(1, int(round(np.log2(factor))))
        for i in range(n_layers):
            cin = in_dim if i == 0 else out_dim
            k = 3 if factor == 1 else 4
            scale = np.sqrt(2.0 / (cin * k * k))
            if factor == 1:
                w = ad.parameter(rng.normal(scale=scale, size=(out_dim, cin, 3, 3)))
            else:
                w = ad.parameter(rng.normal(scale=scale, size=(cin, out_dim, 4, 4)))
            self.weights.append((w, ad.parameter(np.zeros(out_dim))))

    def parameters(self):
        return [p for wb in self.weights for p in wb]

    def param_count(self):
        return sum(p.data.size for p in self.parameters())

    def forward(self, x):
        """(N, Cin, h, w) -> (N, out_dim, h*factor, w*factor)."""
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(self.weights):
            if self.factor == 1:
                h = ad.conv2d(h, w, b, stride=1, pad=1)
            else:
                h = ad.conv_transpose2d(h, w, b, stride=2, pad=1)
            if i != last:
                h = ad.relu(h)
        return h


def bilinear_upsample_map(src, factor):
    """Upsample an (h, w, C) map so cell (f*i, f*j) equals src[i, j].

    Output cell (I, J) samples the source at (I/f, J/f), clamped at the
    edges, so grid-aligned cells reproduce their source exactly and a
    factor of 1 is the identity.
    """
    src = np.asarray(src, dtype=np.float64)
    if src.ndim != 3:
        raise ValueError("source map must be (h, w, C)")
    if factor == 1:
        return src.copy()
    h, w, _ = src.shape
    yi = np.arange(h * factor) / factor
    xi = np.arange(w * factor) / factor
    y0 = np.minimum(yi.astype(np.int64), h - 1)
    x0 = np.minimum(xi.astype(np.int64), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (yi - y0)[:, None, None]
    fx = (xi - x0)[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


@dataclass(eq=False)
class DenseGrid:
    """Upsampled features with interpolated coordinate anchors."""

    features: Tensor
    anchors: np.ndarray

    @property
    def grid_shape(self):
        return self.anchors.shape[:2]

    def array(self):
        """Concrete H x W x (C+3) feature-anchor volume."""
        f = ad.asdata(self.features)[0].transpose(1, 2, 0)
        return np.concatenate([f, self.anchors], axis=2)


def build_dense_grid(descriptors, coords, upsampler):
    """Upsample features and interpolate coordinates onto one grid.

    `descriptors` is an (h, w, D) patch-feature map (or an object with a
    `.descriptors` field); `coords` the (h, w, 3) predicted point map on
    the same grid.
    """
    desc = getattr(descriptors, "descriptors", descriptors)
    desc = np.asarray(desc, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    if desc.ndim != 3 or coords.ndim != 3 or coords.shape[2] != 3:
        raise ValueError("need (h, w, D) features and (h, w, 3) coordinates")
    if desc.shape[:2] != coords.shape[:2]:
        raise ValueError(
            f"grid mismatch: features {desc.shape[:2]} vs coordinates {coords.shape[:2]}"
        )
    if desc.shape[2] != upsampler.in_dim:
        raise ValueError("feature dim does not match the upsampler")
    feats = upsampler.forward(Tensor(desc.transpose(2, 0, 1)[None]))
    anchors = bilinear_upsample_map(coords, upsampler.factor)
    return DenseGrid(features=feats, anchors=anchors)


# --- Gaussian head ---------------------------------------------------------


def anchor_spacing(anchors):
    """Median world distance between neighboring anchor cells."""
    a = np.asarray(anchors, dtype=np.float64)
    gaps = []
    if a.shape[0] > 1:
        gaps.append(np.linalg.norm(np.diff(a, axis=0), axis=2).ravel())
    if a.shape[1] > 1:
        gaps.append(np.linalg.norm(np.diff(a, axis=1), axis=2).ravel())
    if not gaps:
        return 1.0
    return float(max(np.median(np.concatenate(gaps)), 1e-6))


class GaussianHead:
    """Fully convolutional splat regressor over a dense feature grid.

    Two 3x3 convolutions; the final layer is zero-initialized so a fresh
    head emits identity rotations, mid-gray colors, and anchors exactly,
    with opacity and scale starting at the configured bias.
    """

    def __init__(self, in_dim, hidden=64, seed=0, init_scale=0.03,
                 init_opacity=0.15, allow_offset=True):
        self.in_dim = in_dim
        self.hidden = hidden
        self.allow_offset = allow_offset
        self.init_log_scale = float(np.log(init_scale))
        rng = np.random.default_rng(seed)
        s1 = np.sqrt(2.0 / ((in_dim + 3) * 9))
        self.w1 = ad.parameter(rng.normal(scale=s1, size=(hidden, in_dim + 3, 3, 3)))
        self.b1 = ad.parameter(np.zeros(hidden))
        self.w2 = ad.parameter(np.zeros((14, hidden, 3, 3)))
        b2 = np.zeros(14)
        b2[10] = np.log(init_opacity / (1.0 - init_opacity))
        self.b2 = ad.parameter(b2)

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def param_count(self):
        return sum(p.data.size for p in self.parameters())


def gaussian_head(head, grid, offset_bound=None):
    """Regress one splat per grid cell around the fixed anchors.

    Centers are the anchors plus a tanh-bounded offset (at most
    `offset_bound` meters, default one cell's world extent; zero when
    the head disables offsets). Scales are exp-clamped to
    [MIN_SCALE, MAX_SCALE] meters, opacity and color logistic-squashed,
    quaternions normalized.
    """
    gh, gw = grid.grid_shape
    x = ad.concat(
        [grid.features, Tensor(grid.anchors.transpose(2, 0, 1)[None])], axis=1
    )
    h = ad.relu(ad.conv2d(x, head.w1, head.b1, stride=1, pad=1))
    raw = ad.conv2d(h, head.w2, head.b2, stride=1, pad=1)
    flat = raw.reshape((14, gh * gw)).transpose((1, 0))

    anchors = grid.anchors.reshape(-1, 3)
    if head.allow_offset:
        bound = anchor_spacing(grid.anchors) if offset_bound is None else float(offset_bound)
        centers = Tensor(anchors) + ad.tanh(flat[:, 0:3]) * bound
    else:
        centers = Tensor(anchors) + 0.0 * flat[:, 0:3]
    log_scales = ad.clip(
        flat[:, 3:6] + head.init_log_scale, np.log(MIN_SCALE), np.log(MAX_SCALE)
    )
    q = flat[:, 6:10] + _QUAT_BASE
    quats = q / ad.sqrt((q * q).sum(axis=1, keepdims=True) + 1e-12)
    return SplatTensors(
        centers=centers,
        log_scales=log_scales,
        quats=quats,
        opacities=ad.sigmoid(flat[:, 10]),
        colors=ad.sigmoid(flat[:, 11:14]),
        grid_shape=(gh, gw),
    )


# --- rasterizer ------------------------------------------------------------


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _rot_entries(quats):
    """The nine rotation-matrix entries of (N, 4) quaternions as tensors."""
    w, x, y, z = (quats[:, i] for i in range(4))
    return [
        [1 - (y * y + z * z) * 2, (x * y - w * z) * 2, (x * z + w * y) * 2],
        [(x * y + w * z) * 2, 1 - (x * x + z * z) * 2, (y * z - w * x) * 2],
        [(x * z - w * y) * 2, (y * z + w * x) * 2, 1 - (x * x + y * y) * 2],
    ]


def rasterize(splats, pose, intr, background=0.0, near=0.05, dilation=DILATION_PX2,
              max_radius_px=64.0):
    """Differentiable image of a splat set from one camera.

    Projects centers, maps each 3D covariance through the projection
    Jacobian at its center, and alpha-composites front to back over all
    splats within 3 sigma of each pixel. Pixels no splat reaches show
    the background constant; behind-camera splats are culled, as are
    splats whose projected 3-sigma footprint exceeds ``max_radius_px``
    (degenerate near-camera geometry that would otherwise blanket the
    frame; pass None to keep every splat). Returns a Tensor when any
    splat field is a Tensor, else a plain array.
    """
    hpx, wpx = intr.height, intr.width
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
    fields = ("centers", "log_scales", "quats", "opacities", "colors")
    tensor_in = any(isinstance(getattr(splats, f), Tensor) for f in fields)

    def blank():
        img = np.broadcast_to(bg, (hpx, wpx, 3)).copy()
        if not tensor_in:
            return img
        # Keep the constant image attached to the inputs so a training
        # step where every splat is culled still backpropagates (zeros).
        zero = sum(_t(getattr(splats, f)).sum() for f in fields) * 0.0
        return Tensor(img) + zero

    mu = _t(splats.centers)
    if mu.data.shape[0] == 0:
        return blank()
    cam = mu @ np.asarray(pose.rotation).T + np.asarray(pose.translation)
    keep = np.flatnonzero(cam.data[:, 2] > near)
    if len(keep) == 0:
        return blank()

    cam = ad.take(cam, keep)
    ls = ad.take(_t(splats.log_scales), keep)
    quats = ad.take(_t(splats.quats), keep)
    opac = ad.take(_t(splats.opacities), keep)
    cols = ad.take(_t(splats.colors), keep)

    # World covariance entries: sigma_ij = sum_k s2_k R_ik R_jk, then
    # conjugated by the constant world-to-camera rotation.
    r_ent = _rot_entries(quats)
    s2 = ad.exp(ls * 2.0)
    sig = [[None] * 3 for _ in range(3)]
    for i in range(3):
        for j in range(i, 3):
            acc = None
            for k in range(3):
                term = s2[:, k] * r_ent[i][k] * r_ent[j][k]
                acc = term if acc is None else acc + term
            sig[i][j] = sig[j][i] = acc
    w_rot = np.asarray(pose.rotation)
    sig_cam = [[None] * 3 for _ in range(3)]
    for a in range(3):
        for b in range(a, 3):
            acc = None
            for i in range(3):
                for j in range(3):
                    coeff = w_rot[a, i] * w_rot[b, j]
                    if coeff == 0.0:
                        continue
                    term = sig[i][j] * coeff
                    acc = term if acc is None else acc + term
            sig_cam[a][b] = sig_cam[b][a] = acc

    tx, ty, tz = cam[:, 0], cam[:, 1], cam[:, 2]
    u = tx / tz * intr.fx + intr.cx
    v = ty / tz * intr.fy + intr.cy
    # Projection Jacobian rows j0 = fx/tz * (1, 0, -tx/tz), j1 likewise.
    g0 = intr.fx / tz
    g1 = intr.fy / tz
    h0 = tx / tz
    h1 = ty / tz
    cov_a = g0 * g0 * (
        sig_cam[0][0] - sig_cam[0][2] * (2.0 * h0) + sig_cam[2][2] * h0 * h0
    ) + dilation
    cov_b = g0 * g1 * (
        sig_cam[0][1] - sig_cam[1][2] * h0 - sig_cam[0][2] * h1 + sig_cam[2][2] * h0 * h1
    )
    cov_c = g1 * g1 * (
        sig_cam[1][1] - sig_cam[1][2] * (2.0 * h1) + sig_cam[2][2] * h1 * h1
    ) + dilation
    det = cov_a * cov_c - cov_b * cov_b

    an, bn, cn = cov_a.data, cov_b.data, cov_c.data
    un, vn = u.data, v.data
    detn = det.data
    lam_max = 0.5 * (an + cn) + np.sqrt(np.maximum(0.25 * (an - cn) ** 2 + bn * bn, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(lam_max, 0.0))
    ok = detn > 1e-12
    if max_radius_px is not None:
        ok &= radius <= float(max_radius_px)

    x0 = np.clip(np.floor(un - radius), 0, wpx - 1).astype(np.int64)
    x1 = np.clip(np.ceil(un + radius), 0, wpx - 1).astype(np.int64)
    y0 = np.clip(np.floor(vn - radius), 0, hpx - 1).astype(np.int64)
    y1 = np.clip(np.ceil(vn + radius), 0, hpx - 1).astype(np.int64)
    ok &= (un + radius >= 0) & (un - radius <= wpx - 1)
    ok &= (vn + radius >= 0) & (vn - radius <= hpx - 1)
    widths = np.where(ok, x1 - x0 + 1, 0)
    heights = np.where(ok, y1 - y0 + 1, 0)
    counts = widths * heights
    total = int(counts.sum())
    if total == 0:
        return blank()

    pair_splat = np.repeat(np.arange(len(keep)), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    within = np.arange(total) - np.repeat(starts, counts)
    pw = np.repeat(widths, counts)
    px = np.repeat(x0, counts) + within % np.maximum(pw, 1)
    py = np.repeat(y0, counts) + within // np.maximum(pw, 1)
    pixel = py * wpx + px

    depth_rank = np.empty(len(keep), dtype=np.int64)
    depth_rank[np.argsort(cam.data[:, 2], kind="stable")] = np.arange(len(keep))
    order = np.lexsort((depth_rank[pair_splat], pixel))
    ps = pair_splat[order]
    pixel = pixel[order]
    pxf = px[order].astype(np.float64)
    pyf = py[order].astype(np.float64)

    dx = pxf - ad.take(u, ps)
    dy = pyf - ad.take(v, ps)
    pa = ad.take(cov_a, ps)
    pb = ad.take(cov_b, ps)
    pc = ad.take(cov_c, ps)
    pdet = ad.take(det, ps)
    qform = (pc * dx * dx - pb * (2.0 * dx * dy) + pa * dy * dy) / pdet
    alpha = ad.take(opac, ps) * ad.exp(qform * (-0.5))
    log_tr = ad.log((1.0 - alpha) + 1e-12)

    # Exclusive per-pixel cumulative transmittance in log space.
    run_first = np.flatnonzero(np.diff(pixel, prepend=-1))
    run_id = np.cumsum(np.diff(pixel, prepend=-1) != 0) - 1
    cum = log_tr.cumsum(0)
    excl = cum - log_tr
    base = ad.take(ad.take(excl, run_first), run_id)
    weight = alpha * ad.exp(excl - base)

    n_px = hpx * wpx
    acc = ad.segment_sum(weight.reshape(-1, 1) * ad.take(cols, ps), pixel, n_px)
    t_bg = ad.exp(ad.segment_sum(log_tr, pixel, n_px))
    img = acc + t_bg.reshape(-1, 1) * bg
    img = img.reshape((hpx, wpx, 3))
    return img if tensor_in else ad.asdata(img)


# --- image metrics ---------------------------------------------------------


def _ssim_kernel():
    r = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    g = np.exp(-0.5 * (r / SSIM_SIGMA) ** 2)
    k = np.outer(g, g)
    return (k / k.sum()).reshape(1, 1, SSIM_WINDOW, SSIM_WINDOW)


_SSIM_K = _ssim_kernel()


def _as_planes(img):
    """(H, W) or (H, W, C) image -> (C, 1, H, W) tensor of planes."""
    t = _t(img)
    if t.data.ndim == 2:
        hh, ww = t.data.shape
        return t.reshape((1, 1, hh, ww)), (hh, ww)
    hh, ww, cc = t.data.shape
    return t.transpose((2, 0, 1)).reshape((cc, 1, hh, ww)), (hh, ww)


def ssim(a, b, peak=1.0):
    """Mean structural similarity with an 11x11 Gaussian window.

    Statistics are computed over valid window positions only (no
    padding). Accepts Tensors for use inside the photometric loss; plain
    arrays come back as a float.
    """
    da, db = ad.asdata(a), ad.asdata(b)
    if da.shape != db.shape:
        raise ValueError(f"shape mismatch: {da.shape} vs {db.shape}")
    if da.shape[0] < SSIM_WINDOW or da.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} px on each side")
    xa, _ = _as_planes(a)
    xb, _ = _as_planes(b)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = ad.conv2d(xa, _SSIM_K)
    mu_b = ad.conv2d(xb, _SSIM_K)
    var_a = ad.conv2d(xa * xa, _SSIM_K) - mu_a * mu_a
    var_b = ad.conv2d(xb * xb, _SSIM_K) - mu_b * mu_b
    cov = ad.conv2d(xa * xb, _SSIM_K) - mu_a * mu_b
    num = (mu_a * mu_b * 2.0 + c1) * (cov * 2.0 + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    out = (num / den).mean()
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return out
    return out.item()


def psnr(render, target, peak=1.0):
    """Peak signal-to-noise ratio in dB, capped at 100."""
    r = ad.asdata(render)
    t = ad.asdata(target)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {t.shape}")
    mse = float(np.mean((r.astype(np.float64) - t.astype(np.float64)) ** 2))
    if mse < 1e-10:
        return 100.0
    return min(10.0 * np.log10(peak * peak / mse), 100.0)


def photometric_loss(render, target, lam=DEFAULT_LAMBDA):
    """(1 - lambda) * MSE + lambda * D-SSIM, D-SSIM = (1 - SSIM) / 2."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    dr, dt = ad.asdata(render), ad.asdata(target)
    if dr.shape != dt.shape:
        raise ValueError(f"shape mismatch: {dr.shape} vs {dt.shape}")
    tr = _t(render)
    tt = _t(target)
    diff = tr - tt
    mse = (diff * diff).mean()
    loss = mse * (1.0 - lam)
    if lam > 0.0:
        loss = loss + (1.0 - ssim(tr, tt)) * (0.5 * lam)
    if isinstance(render, Tensor) or isinstance(target, Tensor):
        return loss
    return loss.item()


# --- PLY export ------------------------------------------------------------


def export_splats(splats, path):
    """Write splats as a binary little-endian Gaussian-splat PLY.

    Colors are stored as degree-0 spherical-harmonic coefficients,
    opacity as its pre-sigmoid logit, scales in log space; all fields
    are float32.
    """
    n = len(splats)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in _PLY_PROPS]
    header.append("end_header")
    f_dc = (splats.colors - 0.5) / SH_C0
    logit = np.log(splats.opacities / (1.0 - splats.opacities))
    body = np.concatenate(
        [splats.centers, f_dc, logit[:, None], splats.log_scales, splats.quats],
        axis=1,
    ).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(body.tobytes())


def load_splats(path):
    """Read back a PLY written by `export_splats`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.index(b"end_header\n") + len(b"end_header\n")
    lines = blob[:end].decode("ascii").splitlines()
    if lines[0] != "ply" or "format binary_little_endian 1.0" not in lines[1]:
        raise ValueError("not a binary little-endian PLY")
    n = None
    props = []
    for ln in lines:
        if ln.startswith("element vertex"):
            n = int(ln.split()[-1])
        elif ln.startswith("property float"):
            props.append(ln.split()[-1])
    if n is None or tuple(props) != _PLY_PROPS:
        raise ValueError("unexpected PLY layout")
    data = np.frombuffer(blob[end:], dtype="<f4").reshape(n, len(_PLY_PROPS))
    data = data.astype(np.float64)
    colors = data[:, 3:6] * SH_C0 + 0.5
    opac = 1.0 / (1.0 + np.exp(-data[:, 6]))
    return GaussianSplat(
        centers=data[:, 0:3],
        log_scales=data[:, 7:10],
        quats=data[:, 10:14],
        opacities=opac,
        colors=np.clip(colors, 1e-7, 1 - 1e-7),
    )
