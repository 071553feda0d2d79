"""File formats: model configs, weight stores, PPM images, labels and detections."""

from __future__ import annotations

import configparser
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bms_sppf import BmsSppfConfig, CapConfig, MhsaConfig, MssaConfig
from .graph import CompressionPolicy, ModelGraph, ScalePolicy, build_graph
from .postprocess import Detection

CONFIG_DIR = Path(__file__).parent / "configs"
PRESETS = ("baseline", "roc", "roc_1024", "roc_256", "roc_128", "roc_3223")
LETTERBOX_FILL = 114 / 255

WEIGHT_MAGIC = b"ROCW"
WEIGHT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f2")}
_CODES = {np.dtype("float32"): 0, np.dtype("float16"): 1}


class FormatError(ValueError):
    """Malformed file content."""


# ------------------------------------------------------------------ configs


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise FormatError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ModelConfig:
    policy: CompressionPolicy
    scale: ScalePolicy
    nc: int = 4

    def build(self, nc: int | None = None) -> ModelGraph:
        return build_graph(self.policy, self.nc if nc is None else nc, self.scale)


def parse_config(text: str, source: str = "<string>") -> ModelConfig:
    """Parse the sectioned ``key = value`` model config.

    Missing keys fall back to the uncompressed defaults; unknown sections or
    keys are rejected so typos do not pass silently.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise FormatError(f"{source}: {e}") from None
    known = {
        "scale": {"depth", "width", "max_channels"},
        "compression": {"name", "max_channels", "backbone_repeats", "head_repeats", "head_channels", "pooling"},
        "bms_sppf": {"kernels", "gate_groups", "cap_strategy", "cap_block", "unify_groups", "heads", "qkv_bias"},
        "detect": {"nc"},
    }
    for sec in cp.sections():
        if sec not in known:
            raise FormatError(f"{source}: unknown section [{sec}]")
        extra = set(cp[sec]) - known[sec]
        if extra:
            raise FormatError(f"{source}: unknown key(s) {sorted(extra)} in [{sec}]")

    def get(sec, key, conv, default):
        if not cp.has_option(sec, key):
            return default
        raw = cp.get(sec, key)
        try:
            return conv(raw)
        except (ValueError, FormatError):
            raise FormatError(f"{source}: bad value for {sec}.{key}: {raw!r}") from None

    try:
        scale = ScalePolicy(
            depth=get("scale", "depth", float, 1 / 3),
            width=get("scale", "width", float, 0.25),
            max_channels=get("scale", "max_channels", int, 1024),
        )
        d = BmsSppfConfig()
        unify = get("bms_sppf", "unify_groups", lambda s: None if s.strip().lower() == "channels" else int(s), None)
        bms = BmsSppfConfig(
            MssaConfig(get("bms_sppf", "kernels", _ints, d.mssa.kernels), get("bms_sppf", "gate_groups", int, d.mssa.gn_groups)),
            CapConfig(get("bms_sppf", "cap_strategy", str.strip, d.cap.strategy), get("bms_sppf", "cap_block", int, d.cap.block), unify),
            MhsaConfig(get("bms_sppf", "heads", int, d.mhsa.heads), get("bms_sppf", "qkv_bias", _parse_bool, d.mhsa.qkv_bias)),
        )
        base = CompressionPolicy()
        policy = CompressionPolicy(
            name=get("compression", "name", str.strip, base.name),
            max_channels=get("compression", "max_channels", int, base.max_channels),
            backbone_repeats=get("compression", "backbone_repeats", _ints, base.backbone_repeats),
            head_repeats=get("compression", "head_repeats", int, base.head_repeats),
            head_channels=get("compression", "head_channels", _ints, base.head_channels),
            pooling=get("compression", "pooling", str.strip, base.pooling),
            bms=bms,
        )
        nc = get("detect", "nc", int, 4)
    except FormatError:
        raise
    except ValueError as e:
        raise FormatError(f"{source}: {e}") from None
    if nc < 1:
        raise FormatError(f"{source}: detect.nc must be >= 1")
    return ModelConfig(policy, scale, nc)


def read_config(path) -> ModelConfig:
    """Load a config file; a bare preset name (e.g. ``roc``) resolves to the shipped file."""
    p = Path(path)
    if not p.exists() and str(path) in PRESETS:
        p = CONFIG_DIR / f"{path}.cfg"
    return parse_config(p.read_text(), str(p))


def format_config(cfg: ModelConfig) -> str:
    pol, sc, b = cfg.policy, cfg.scale, cfg.policy.bms

    def join(xs):
        return ", ".join(str(x) for x in xs)

    return (
        "[scale]\n"
        f"depth = {sc.depth!r}\nwidth = {sc.width!r}\nmax_channels = {sc.max_channels}\n\n"
        "[compression]\n"
        f"name = {pol.name}\nmax_channels = {pol.max_channels}\n"
        f"backbone_repeats = {join(pol.backbone_repeats)}\nhead_repeats = {pol.head_repeats}\n"
        f"head_channels = {join(pol.head_channels)}\npooling = {pol.pooling}\n\n"
        "[bms_sppf]\n"
        f"kernels = {join(b.mssa.kernels)}\ngate_groups = {b.mssa.gn_groups}\n"
        f"cap_strategy = {b.cap.strategy}\ncap_block = {b.cap.block}\n"
        f"unify_groups = {'channels' if b.cap.unify_groups is None else b.cap.unify_groups}\n"
        f"heads = {b.mhsa.heads}\nqkv_bias = {str(b.mhsa.qkv_bias).lower()}\n\n"
        "[detect]\n"
        f"nc = {cfg.nc}\n"
    )


def write_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(format_config(cfg))


# ------------------------------------------------------------------- labels


@dataclass(frozen=True)
class LabelRecord:
    cls: int
    cx: float
    cy: float
    w: float
    h: float

    def to_box(self, img_w: float, img_h: float) -> tuple[float, float, float, float]:
        return (
            (self.cx - self.w / 2) * img_w,
            (self.cy - self.h / 2) * img_h,
            (self.cx + self.w / 2) * img_w,
            (self.cy + self.h / 2) * img_h,
        )


def parse_labels(text: str, nc: int = 4, source: str = "<string>", eps: float = 1e-6) -> list[LabelRecord]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise FormatError(f"{source}:{lineno}: expected 'class cx cy w h', got {line.strip()!r}")
        try:
            cls = int(parts[0])
            cx, cy, w, h = (float(v) for v in parts[1:])
        except ValueError:
            raise FormatError(f"{source}:{lineno}: non-numeric field in {line.strip()!r}") from None
        if not 0 <= cls < nc:
            raise FormatError(f"{source}:{lineno}: class {cls} out of range for nc={nc}")
        vals = (cx, cy, w, h)
        if not all(np.isfinite(vals)) or min(vals) < 0 or max(vals) > 1:
            raise FormatError(f"{source}:{lineno}: coordinates must lie in [0, 1]")
        if cx - w / 2 < -eps or cy - h / 2 < -eps or cx + w / 2 > 1 + eps or cy + h / 2 > 1 + eps:
            raise FormatError(f"{source}:{lineno}: box extends outside the image")
        out.append(LabelRecord(cls, cx, cy, w, h))
    return out


def read_labels(path, nc: int = 4) -> list[LabelRecord]:
    return parse_labels(Path(path).read_text(), nc, str(path))


# ------------------------------------------------------------------- images


def _ppm_token(data: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(data):
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PPM header")
    return data[start:pos], pos


def decode_ppm(data: bytes) -> np.ndarray:
    """Binary P6 bytes -> (1, 3, H, W) float32 in [0, 1]."""
    if data[:2] != b"P6":
        raise FormatError(f"bad PPM magic {data[:2]!r}, expected b'P6'")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _ppm_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"bad PPM header field {tok!r}") from None
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise FormatError(f"bad PPM size {w}x{h}")
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}, expected 255")
    pos += 1  # single whitespace before the raster
    need = w * h * 3
    raster = data[pos : pos + need]
    if len(raster) < need:
        raise FormatError(f"truncated PPM payload: {len(raster)} of {need} bytes")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return (img.transpose(2, 0, 1)[None].astype(np.float32) / 255.0)


def read_image_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def encode_ppm(image) -> bytes:
    """(1, 3, H, W) or (3, H, W) in [0, 1] -> P6 bytes (rounded to 8 bits)."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 4:
        a = a[0]
    if a.ndim != 3 or a.shape[0] != 3:
        raise ValueError(f"expected a 3-channel image, got shape {np.shape(image)}")
    px = np.clip(np.rint(a * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = px.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + px.tobytes()


def write_image_ppm(image, path) -> None:
    Path(path).write_bytes(encode_ppm(image))


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of an NCHW array."""
    n, c, h, w = image.shape
    if (out_h, out_w) == (h, w):
        return image.copy()

    def axis(src, dst):
        pos = np.clip((np.arange(dst) + 0.5) * (src / dst) - 0.5, 0, src - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, (pos - lo)

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    fy = fy[:, None].astype(image.dtype)
    fx = fx[None, :].astype(image.dtype)
    top = image[:, :, y0][:, :, :, x0] * (1 - fx) + image[:, :, y0][:, :, :, x1] * fx
    bot = image[:, :, y1][:, :, :, x0] * (1 - fx) + image[:, :, y1][:, :, :, x1] * fx
    return top * (1 - fy) + bot * fy


@dataclass(frozen=True)
class Letterbox:
    """Affine ``dst = src * scale + (pad_x, pad_y)`` from source to network pixels."""

    scale: float
    pad_x: int
    pad_y: int
    src_hw: tuple[int, int]
    dst_hw: tuple[int, int]

    def forward_box(self, box):
        x1, y1, x2, y2 = box
        s = self.scale
        return (x1 * s + self.pad_x, y1 * s + self.pad_y, x2 * s + self.pad_x, y2 * s + self.pad_y)

    def inverse_box(self, box):
        """Network-pixel box -> source-pixel box, clipped to the source image."""
        x1, y1, x2, y2 = box
        s = self.scale
        h, w = self.src_hw
        xs = np.clip([(x1 - self.pad_x) / s, (x2 - self.pad_x) / s], 0, w)
        ys = np.clip([(y1 - self.pad_y) / s, (y2 - self.pad_y) / s], 0, h)
        return (float(xs[0]), float(ys[0]), float(xs[1]), float(ys[1]))


def letterbox(image, target: int = 640) -> tuple[np.ndarray, Letterbox]:
    """Aspect-preserving resize into a ``target`` square padded with gray."""
    image = np.asarray(image)
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W), got {image.shape}")
    n, _, h, w = image.shape
    s = min(target / h, target / w)
    nh, nw = min(target, round(h * s)), min(target, round(w * s))
    top, left = (target - nh) // 2, (target - nw) // 2
    out = np.full((n, 3, target, target), LETTERBOX_FILL, dtype=image.dtype)
    out[:, :, top : top + nh, left : left + nw] = resize_bilinear(image, nh, nw)
    return out, Letterbox(s, left, top, (h, w), (target, target))


# ------------------------------------------------------------------ weights


def encode_weights(store: dict[str, np.ndarray], dtype: str = "f32") -> bytes:
    """Serialize a weight store (insertion order is preserved)."""
    if dtype not in ("f32", "f16"):
        raise ValueError(f"dtype must be 'f32' or 'f16', got {dtype!r}")
    code = 0 if dtype == "f32" else 1
    parts = [WEIGHT_MAGIC, struct.pack("<II", WEIGHT_VERSION, len(store))]
    for name, arr in store.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"slot name too long: {name[:40]}...")
        a = np.asarray(arr)
        if a.ndim > 255:
            raise ValueError(f"rank {a.ndim} too large for {name!r}")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode_weights(data: bytes) -> dict[str, np.ndarray]:
    mv = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(mv):
            raise FormatError(f"truncated weight file at byte {pos} (need {n} more)")
        out = mv[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != WEIGHT_MAGIC:
        raise FormatError("bad weight file magic")
    version, count = struct.unpack("<II", take(8))
    if version != WEIGHT_VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    store: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _DTYPES[code]
        count_el = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(count_el * dt.itemsize), dtype=dt).reshape(shape)
        if name in store:
            raise FormatError(f"duplicate slot {name!r}")
        store[name] = arr.astype(np.float32) if code == 1 else arr.astype(np.float32, copy=True)
    if pos != len(mv):
        raise FormatError(f"{len(mv) - pos} trailing bytes after last record")
    return store


def check_store(graph: ModelGraph, store: dict[str, np.ndarray]) -> None:
    """Raise if a stored slot is unknown to ``graph`` or has the wrong shape.

    Folded stores (conv bias present, BN slots absent) are accepted.
    """
    slots = {name: shape for name, shape, _ in graph.slots()}
    for name, arr in store.items():
        if name in slots:
            if tuple(arr.shape) != tuple(slots[name]):
                raise FormatError(f"slot {name!r} has shape {tuple(arr.shape)}, graph expects {tuple(slots[name])}")
        elif name.endswith(".conv.bias") and f"{name[: -len('.conv.bias')]}.conv.weight" in slots:
            cout = slots[f"{name[: -len('.conv.bias')]}.conv.weight"][0]
            if tuple(arr.shape) != (cout,):
                raise FormatError(f"folded bias {name!r} has shape {tuple(arr.shape)}, expected ({cout},)")
        else:
            raise FormatError(f"slot {name!r} does not exist in the model graph")


def save_weights(store: dict[str, np.ndarray], path, dtype: str = "f32") -> None:
    data = encode_weights(store, dtype)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_weights(path, graph: ModelGraph | None = None) -> dict[str, np.ndarray]:
    store = decode_weights(Path(path).read_bytes())
    if graph is not None:
        check_store(graph, store)
    return store


# --------------------------------------------------------------- detections


def _det_key(d: Detection):
    return (-d.confidence, d.box[0], d.box[1], d.cls)


def format_detections(dets) -> str:
    lines = [
        f"{d.cls} {d.confidence:.6f} {d.box[0]:.6f} {d.box[1]:.6f} {d.box[2]:.6f} {d.box[3]:.6f}"
        for d in sorted(dets, key=_det_key)
    ]
    return "".join(line + "\n" for line in lines)


def write_detections(dets, path) -> None:
    Path(path).write_text(format_detections(dets))


def parse_detections(text: str, nc: int | None = None, source: str = "<string>") -> list[Detection]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise FormatError(f"{source}:{lineno}: expected 'class conf x1 y1 x2 y2'")
        try:
            cls = int(parts[0])
            conf, x1, y1, x2, y2 = (float(v) for v in parts[1:])
            det = Detection(cls, conf, (x1, y1, x2, y2))
        except ValueError as e:
            raise FormatError(f"{source}:{lineno}: {e}") from None
        if cls < 0 or (nc is not None and cls >= nc):
            raise FormatError(f"{source}:{lineno}: class {cls} out of range")
        out.append(det)
    return out


def read_detections(path, nc: int | None = None) -> list[Detection]:
    return parse_detections(Path(path).read_text(), nc, str(path))
