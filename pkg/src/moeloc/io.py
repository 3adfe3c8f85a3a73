"""Dataset manifests, checkpoints, configuration, and metrics files.

The manifest is a plain text file next to the images: one header naming
the pose convention, one line per frame. Checkpoints are a directory of
three files (text index, raw little-endian blob, JSON metadata) whose
round trip is bit-identical. Metrics are JSON with sorted keys so equal
runs produce equal bytes.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, RigidPose
from .synth import ViewRecord

MANIFEST_MAGIC = "# moeloc dataset manifest v1"
MANIFEST_NAME = "manifest.txt"
CHECKPOINT_VERSION = 1
ROTATION_TOL = 1e-3


class UsageError(Exception):
    """Bad invocation: unknown keys, malformed overrides, wrong flags."""


class DataError(Exception):
    """Unreadable or inconsistent files: manifests, images, checkpoints."""


# ---------------------------------------------------------------------------
# dataset manifests


def _fmt(x):
    return repr(float(x))


def save_dataset(views, root, splits=None, image_format="npy"):
    """Write views to ``root`` and return the manifest path.

    ``splits`` tags each view ``map`` or ``query`` (default all map).
    ``npy`` images round-trip float32 exactly; ``png`` quantizes to
    8 bits. Ground-truth coordinate maps and region labels go to one
    compressed sidecar so a reloaded synthetic dataset is complete.
    """
    if image_format not in ("npy", "png"):
        raise UsageError(f"unsupported image format {image_format!r}")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if splits is None:
        splits = ["map"] * len(views)
    if len(splits) != len(views):
        raise UsageError("splits must cover every view")
    lines = [MANIFEST_MAGIC, "convention w2c"]
    for i, (view, split) in enumerate(zip(views, splits)):
        if split not in ("map", "query"):
            raise UsageError(f"split tag must be map or query, got {split!r}")
        rel = f"images/{i:06d}.{image_format}"
        img = np.asarray(view.image, dtype=np.float32)
        if image_format == "npy":
            np.save(root / rel, img)
        else:
            from PIL import Image

            arr = np.clip(img * 255.0 + 0.5, 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(root / rel)
        m = view.pose.matrix()[:3].reshape(-1)
        intr = view.intrinsics
        fields = [rel, _fmt(intr.fx), _fmt(intr.fy), _fmt(intr.cx), _fmt(intr.cy)]
        fields += [_fmt(v) for v in m] + ["0.0", "0.0", "0.0", "1.0", split]
        lines.append("frame " + " ".join(fields))
    path = root / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n")
    np.savez_compressed(
        root / "gt.npz",
        coords=np.array([v.gt_coords for v in views], dtype=np.float32),
        valid=np.array([v.gt_valid for v in views]),
        depth=np.array([v.depth for v in views], dtype=np.float32),
        region=np.array([v.region for v in views], dtype=np.int32),
    )
    return path


def _load_image(path):
    if path.suffix == ".npy":
        img = np.load(path)
    else:
        from PIL import Image

        img = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"image {path} is not H x W x 3")
    return img


def _parse_pose(values, line_no):
    m = np.array(values, dtype=np.float64).reshape(4, 4)
    if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-9):
        raise DataError(f"line {line_no}: last pose row must be 0 0 0 1")
    r = m[:3, :3]
    det = np.linalg.det(r)
    if det < 0:
        raise DataError(f"line {line_no}: rotation has determinant {det:.3f}")
    if abs(det) < 1e-9:
        raise DataError(f"line {line_no}: pose matrix is not invertible")
    err = np.abs(r @ r.T - np.eye(3)).max()
    if err > ROTATION_TOL:
        raise DataError(
            f"line {line_no}: rotation block off orthonormal by {err:.2e}"
        )
    if err > 1e-12:
        u, _, vt = np.linalg.svd(r)
        r = u @ vt
    return RigidPose(r, m[:3, 3])


def load_dataset(manifest_path):
    """Read a manifest; returns ``(views, splits)``.

    Camera-to-world poses (header ``convention c2w``) are inverted on
    load. A missing ground-truth sidecar yields all-valid masks and NaN
    coordinate maps, which is what real captures look like.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest {manifest_path} does not exist")
    root = manifest_path.parent
    text = manifest_path.read_text().splitlines()
    if not text or text[0].strip() != MANIFEST_MAGIC:
        raise DataError(f"{manifest_path} is not a dataset manifest")
    convention = "w2c"
    frames = []
    for line_no, raw in enumerate(text[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "convention":
            if len(parts) != 2 or parts[1] not in ("w2c", "c2w"):
                raise DataError(f"line {line_no}: convention must be w2c or c2w")
            convention = parts[1]
            continue
        if parts[0] != "frame":
            raise DataError(f"line {line_no}: unknown record {parts[0]!r}")
        if len(parts) != 23:
            raise DataError(
                f"line {line_no}: expected 23 fields, got {len(parts)}"
            )
        try:
            numbers = [float(x) for x in parts[2:22]]
        except ValueError as exc:
            raise DataError(f"line {line_no}: {exc}") from None
        if parts[22] not in ("map", "query"):
            raise DataError(f"line {line_no}: split must be map or query")
        frames.append((line_no, parts[1], numbers, parts[22]))
    if not frames:
        raise DataError(f"{manifest_path} lists no frames")

    gt = None
    gt_path = root / "gt.npz"
    if gt_path.exists():
        with np.load(gt_path) as z:
            gt = {k: z[k] for k in ("coords", "valid", "depth", "region")}
        if len(gt["coords"]) != len(frames):
            raise DataError("gt.npz frame count does not match the manifest")

    views, splits = [], []
    for i, (line_no, rel, numbers, split) in enumerate(frames):
        img_path = root / rel
        if not img_path.exists():
            raise DataError(f"line {line_no}: missing image {img_path}")
        image = _load_image(img_path)
        h, w = image.shape[:2]
        pose = _parse_pose(numbers[4:], line_no)
        if convention == "c2w":
            pose = pose.inverse()
        fx, fy, cx, cy = numbers[:4]
        try:
            intr = CameraIntrinsics(fx, fy, cx, cy, width=w, height=h)
        except ValueError as exc:
            raise DataError(f"line {line_no}: {exc}") from None
        if gt is not None:
            coords, valid = gt["coords"][i], gt["valid"][i]
            depth, region = gt["depth"][i], int(gt["region"][i])
        else:
            coords = np.full((h, w, 3), np.nan, dtype=np.float32)
            valid = np.ones((h, w), dtype=bool)
            depth = np.full((h, w), np.nan, dtype=np.float32)
            region = -1
        views.append(
            ViewRecord(
                image=image, pose=pose, intrinsics=intr, gt_coords=coords,
                gt_valid=valid, depth=depth, region=region,
            )
        )
        splits.append(split)
    return views, splits


def split_views(views, splits, tag):
    return [v for v, s in zip(views, splits) if s == tag]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, arrays, meta):
    """Write ``index.txt`` + ``blob.bin`` + ``meta.json`` under ``path``.

    Arrays are serialized in sorted-name order as native little-endian
    bytes with a CRC32 each, so save -> load -> save is byte-identical.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index_lines = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        shape = ",".join(str(s) for s in arr.shape) or "-"
        index_lines.append(
            f"{name} {arr.dtype.str} {shape} {offset} {len(raw)} "
            f"{zlib.crc32(raw):08x}"
        )
        chunks.append(raw)
        offset += len(raw)
    (path / "blob.bin").write_bytes(b"".join(chunks))
    (path / "index.txt").write_text("\n".join(index_lines) + "\n")
    full_meta = dict(meta)
    full_meta["format_version"] = CHECKPOINT_VERSION
    (path / "meta.json").write_text(
        json.dumps(full_meta, sort_keys=True, indent=2) + "\n"
    )


def load_checkpoint(path, expect_stage=None):
    """Read a checkpoint directory back into ``(arrays, meta)``.

    Validates format version, per-array checksums, and blob length;
    ``expect_stage`` (a name or tuple of names) turns a stage mismatch
    into an explicit error instead of a downstream shape failure.
    """
    path = Path(path)
    for fname in ("index.txt", "blob.bin", "meta.json"):
        if not (path / fname).exists():
            raise DataError(f"checkpoint {path} is missing {fname}")
    try:
        meta = json.loads((path / "meta.json").read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"checkpoint {path}: meta.json unreadable: {exc}") from None
    version = meta.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise DataError(
            f"checkpoint format version {version} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    if expect_stage is not None:
        allowed = (expect_stage,) if isinstance(expect_stage, str) else tuple(expect_stage)
        if meta.get("stage") not in allowed:
            raise DataError(
                f"stage mismatch: checkpoint holds {meta.get('stage')!r}, "
                f"this command needs {' or '.join(allowed)}"
            )
    blob = (path / "blob.bin").read_bytes()
    arrays = {}
    for line_no, line in enumerate((path / "index.txt").read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            name, dtype, shape, offset, nbytes, crc = line.split()
            offset, nbytes = int(offset), int(nbytes)
        except ValueError:
            raise DataError(f"checkpoint index line {line_no} malformed") from None
        raw = blob[offset : offset + nbytes]
        if len(raw) != nbytes:
            raise DataError(f"checkpoint blob truncated at array '{name}'")
        if f"{zlib.crc32(raw):08x}" != crc:
            raise DataError(f"checksum mismatch in array '{name}'")
        dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
        arrays[name] = np.frombuffer(raw, dtype=np.dtype(dtype)).reshape(dims).copy()
    return arrays, meta


def pack_stack(encoder, router, bank, upsampler=None, head=None):
    """Flatten a model stack into named checkpoint arrays.

    Router control state (bias, usage EMA, step counter) rides along so
    a resumed joint stage continues the same control loop.
    """
    arrays = {"decoder.centers": bank.decoder.centers}
    for tag, obj in (("encoder", encoder), ("router", router)):
        for i, p in enumerate(obj.parameters()):
            arrays[f"{tag}.p{i:02d}"] = p.data
    arrays["router.bias"] = router.bias
    arrays["router.usage"] = router.usage
    arrays["router.step"] = np.array([router.step], dtype=np.int64)
    for k, expert in enumerate(bank.experts):
        for i, p in enumerate(expert.parameters()):
            arrays[f"expert{k}.p{i:02d}"] = p.data
    if upsampler is not None:
        for i, p in enumerate(upsampler.parameters()):
            arrays[f"upsampler.p{i:02d}"] = p.data
    if head is not None:
        for i, p in enumerate(head.parameters()):
            arrays[f"head.p{i:02d}"] = p.data
    return arrays


def _restore(obj, arrays, tag):
    for i, p in enumerate(obj.parameters()):
        key = f"{tag}.p{i:02d}"
        if key not in arrays:
            raise DataError(f"checkpoint is missing array '{key}'")
        if arrays[key].shape != p.data.shape:
            raise DataError(
                f"array '{key}' has shape {arrays[key].shape}, the configured "
                f"architecture needs {p.data.shape}"
            )
        p.data[:] = arrays[key]


def unpack_stack(arrays, config):
    """Rebuild ``(encoder, router, bank, upsampler, head)`` from arrays.

    Architecture dimensions come from ``config`` (normally the config
    snapshot stored beside the arrays). The encoder returns frozen; the
    render pair is None unless the checkpoint carries one.
    """
    from .experts import ExpertBank, ExpertHead, PositionDecoder
    from .features import Encoder
    from .gating import RouterState
    from .splat import GaussianHead, GridUpsampler

    encoder = Encoder(
        channels=tuple(config.encoder_channels),
        out_dim=config.descriptor_dim,
        seed=config.seed,
    )
    router = RouterState(
        in_dim=config.descriptor_dim,
        num_experts=config.num_experts,
        hidden=tuple(config.router_hidden),
        gamma=config.gamma,
        eta=config.eta,
        seed=config.seed,
    )
    if "decoder.centers" not in arrays:
        raise DataError("checkpoint is missing array 'decoder.centers'")
    decoder = PositionDecoder(arrays["decoder.centers"])
    experts = [
        ExpertHead(
            in_dim=config.descriptor_dim,
            width=config.expert_width,
            blocks=config.expert_blocks,
            num_centers=decoder.num_centers,
            seed=config.seed + 101 * (k + 1),
        )
        for k in range(config.num_experts)
    ]
    bank = ExpertBank(experts, decoder)
    _restore(encoder, arrays, "encoder")
    _restore(router, arrays, "router")
    for k, expert in enumerate(bank.experts):
        _restore(expert, arrays, f"expert{k}")
    router.bias = arrays["router.bias"].copy() if "router.bias" in arrays else router.bias
    if "router.usage" in arrays:
        router.usage = arrays["router.usage"].copy()
    if "router.step" in arrays:
        router.step = int(arrays["router.step"][0])
    for p in encoder.parameters():
        p.requires_grad = False

    upsampler = head = None
    if any(k.startswith("upsampler.") for k in arrays):
        upsampler = GridUpsampler(
            config.descriptor_dim, config.render_factor, config.render_hidden,
            seed=config.seed + 41,
        )
        head = GaussianHead(
            config.render_hidden, hidden=config.render_hidden, seed=config.seed + 42
        )
        _restore(upsampler, arrays, "upsampler")
        _restore(head, arrays, "head")
    return encoder, router, bank, upsampler, head


# ---------------------------------------------------------------------------
# configuration


DEFAULT_CONFIG = {
    "synth": {
        "regions": 4,
        "points_per_region": 700,
        "separation": 12.0,
        "frames_per_region": 32,
        "query_frames_per_region": 8,
        "resolution": [128, 128],
        "radius_range": [2.6, 3.2],
        "scene_seed": 11,
        "train_seed": 12,
        "query_seed": 77,
        "image_format": "npy",
    },
    "train": {
        "seed": 3,
        "num_experts": 4,
        "decoder_k": 16,
        "batch_size": 512,
        "buffer_capacity": 2**17,
        "lr_range": [3e-4, 3e-3],
        "clamp_schedule": [50.0, 1.0],
        "augment": True,
    },
    "gating": {},
    "stages": {
        "experts": {"epochs": 64},
        "gate": {"epochs": 300},
        "joint": {"epochs": 8},
        "render": {"epochs": 400},
    },
    "eval": {"seed": 100, "threshold_px": 10.0},
}


def _deep_merge(base, extra):
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path=None, overrides=()):
    """Resolve configuration: defaults < file < ``--set`` overrides."""
    import copy

    import yaml

    # Deep copy so dotted overrides never write into the shared defaults.
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise DataError(f"config file {path} does not exist")
        try:
            loaded = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise DataError(f"config file {path} unreadable: {exc}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise DataError(f"config file {path} must hold a mapping")
        cfg = _deep_merge(cfg, loaded)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        keys = key.strip().split(".")
        if not all(keys):
            raise UsageError(f"--set key {key!r} is malformed")
        try:
            parsed = yaml.safe_load(value)
        except yaml.YAMLError:
            parsed = value
        node = cfg
        for part in keys[:-1]:
            nxt = node.get(part)
            if not isinstance(nxt, dict):
                nxt = {}
                node[part] = nxt
            node = nxt
        node[keys[-1]] = parsed
    return cfg


def config_to_trainconfig(cfg, stage):
    """Build the stage :class:`TrainConfig` from a resolved config dict."""
    from .trainer import TrainConfig

    kwargs = {}
    kwargs.update(cfg.get("train", {}))
    kwargs.update(cfg.get("gating", {}))
    kwargs.update(cfg.get("stages", {}).get(stage, {}))
    kwargs["stage"] = stage
    for key in ("lr_range", "clamp_schedule", "tau_schedule", "render_lr",
                "encoder_channels", "router_hidden"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    try:
        return TrainConfig(**kwargs)
    except TypeError as exc:
        raise UsageError(f"unknown training option: {exc}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# metrics files


def _round_trip_float(x):
    x = float(x)
    return None if not np.isfinite(x) else x


def localization_metrics(report, wall_clock=None, extra=None):
    """JSON-ready dict for a localization run; failures carry null errors."""
    doc = {
        "schema": "moeloc.localization/1",
        "frames": int(report.frames),
        "median_translation_cm": _round_trip_float(report.median_translation_cm),
        "median_rotation_deg": _round_trip_float(report.median_rotation_deg),
        "failure_rate": float(report.failure_rate),
        "activated_map_bytes": int(report.activated_map_bytes),
        "per_frame": [
            {
                "translation_cm": _round_trip_float(t),
                "rotation_deg": _round_trip_float(r),
            }
            for t, r in zip(report.translation_cm, report.rotation_deg)
        ],
    }
    if wall_clock is not None:
        doc["wall_clock_s"] = float(wall_clock)
    if extra:
        doc.update(extra)
    return doc


def render_metrics(per_view, wall_clock=None, extra=None):
    """JSON-ready dict for a render evaluation.

    ``per_view`` is a list of ``{"psnr": ..., "ssim": ...}`` entries.
    """
    doc = {
        "schema": "moeloc.render/1",
        "frames": len(per_view),
        "mean_psnr_db": float(np.mean([e["psnr"] for e in per_view])),
        "mean_ssim": float(np.mean([e["ssim"] for e in per_view])),
        "per_frame": [
            {"psnr": float(e["psnr"]), "ssim": float(e["ssim"])} for e in per_view
        ],
    }
    if wall_clock is not None:
        doc["wall_clock_s"] = float(wall_clock)
    if extra:
        doc.update(extra)
    return doc


def save_metrics(doc, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def load_metrics(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"metrics file {path} does not exist")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"metrics file {path} unreadable: {exc}") from None


def save_history_csv(history, path):
    """Training log as CSV: step, loss, lr, schedules, usage, bias."""
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vector_keys = [k for k in ("usage", "bias", "alpha") if history and k in history[0]]
    scalar_keys = ["stage", "step", "loss", "lr", "clamp", "tau", "psnr"]
    present = [k for k in scalar_keys if history and k in history[0]]
    width = {k: len(np.atleast_1d(history[0][k])) for k in vector_keys}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = present + [
            f"{k}_{i}" for k in vector_keys for i in range(width[k])
        ]
        writer.writerow(header)
        for row in history:
            out = [row.get(k, "") for k in present]
            for k in vector_keys:
                out += [repr(float(v)) for v in np.atleast_1d(row[k])]
            writer.writerow(out)


def report_csv(report, path):
    """Per-frame localization errors as CSV; failures are inf rows."""
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "translation_cm", "rotation_deg", "success"])
        for i, (t, r) in enumerate(zip(report.translation_cm, report.rotation_deg)):
            ok = np.isfinite(t)
            writer.writerow([i, repr(float(t)), repr(float(r)), int(ok)])


def make_report_plot(inputs, out_png):
    """Two-panel summary chart from metrics JSON files.

    Left: activated map size vs median translation error, one point per
    localization report. Right: PSNR vs training wall-clock for render
    reports. Files of either schema can be mixed freely.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    loc, ren = [], []
    for path in inputs:
        doc = load_metrics(path)
        schema = doc.get("schema", "")
        if schema.startswith("moeloc.localization"):
            loc.append((Path(path).stem, doc))
        elif schema.startswith("moeloc.render"):
            ren.append((Path(path).stem, doc))
        else:
            raise DataError(f"{path} has unknown schema {schema!r}")
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    ax = axes[0]
    for name, doc in loc:
        x = doc.get("activated_map_bytes", 0) / 1e6
        y = doc.get("median_translation_cm")
        if y is not None:
            ax.plot(x, y, "o", label=name)
            ax.annotate(name, (x, y), fontsize=7, xytext=(3, 3),
                        textcoords="offset points")
    ax.set_xlabel("activated map size (MB)")
    ax.set_ylabel("median translation error (cm)")
    ax.set_title("map size vs error")
    ax.grid(True, alpha=0.3)
    ax = axes[1]
    for name, doc in ren:
        x = doc.get("wall_clock_s", 0.0)
        ax.plot(x, doc["mean_psnr_db"], "s", label=name)
        ax.annotate(name, (x, doc["mean_psnr_db"]), fontsize=7, xytext=(3, 3),
                    textcoords="offset points")
    ax.set_xlabel("training wall-clock (s)")
    ax.set_ylabel("PSNR (dB)")
    ax.set_title("rendering quality vs time")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
