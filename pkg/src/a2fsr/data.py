"""Image I/O, color conversion, bicubic resampling, PSNR/SSIM on luma, dataset preparation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image, UnidentifiedImageError

from .errors import DatasetError, EvaluationError, ImageIOError

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
# BT.601 studio swing on [0, 1] RGB
Y_OFFSET = 16.0
Y_COEFFS = np.array([65.481, 128.553, 24.966])


@dataclass
class ImagePlane:
    """An image held as (h, w) or (h, w, 3).

    8-bit planes are uint8 in [0, 255]; float planes carry ``value_range``
    of 1.0 or 255.0.
    """

    data: np.ndarray
    color: str = "RGB"
    value_range: float = 255.0

    def __post_init__(self):
        if self.data.ndim == 3 and self.data.shape[2] == 1:
            self.data = self.data[:, :, 0]
        if self.data.ndim not in (2, 3) or (self.data.ndim == 3 and self.data.shape[2] != 3):
            raise ImageIOError(f"image must be (h, w) or (h, w, 3), got {self.data.shape}")
        if self.color not in ("RGB", "Y"):
            raise ImageIOError(f"unknown color tag {self.color!r}")
        if self.data.dtype == np.uint8:
            self.value_range = 255.0
        elif self.value_range not in (1.0, 255.0):
            raise ImageIOError("float planes must declare a value range of 1.0 or 255.0")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else 3

    @property
    def is_8bit(self) -> bool:
        return self.data.dtype == np.uint8

    def to_rgb(self) -> "ImagePlane":
        if self.channels == 3:
            return self
        return ImagePlane(np.repeat(self.data[:, :, None], 3, axis=2), "RGB", self.value_range)

    def as_unit_float(self) -> np.ndarray:
        return self.data.astype(np.float64) / self.value_range


# --------------------------------------------------------------------------
# I/O


def load_png(path) -> ImagePlane:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ImageIOError(f"{path}: not a PNG file ({im.format})")
            if im.mode in ("I;16", "I;16B", "I;16L", "I", "F"):
                raise ImageIOError(f"{path}: unsupported bit depth (mode {im.mode}); only 8-bit PNG")
            if im.mode in ("L", "RGB"):
                arr = np.asarray(im)
            elif im.mode in ("P", "RGBA", "LA", "1"):
                arr = np.asarray(im.convert("L" if im.mode in ("LA", "1") else "RGB"))
            else:
                raise ImageIOError(f"{path}: unsupported PNG mode {im.mode}")
    except FileNotFoundError:
        raise ImageIOError(f"{path}: no such file") from None
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        if isinstance(exc, ImageIOError):
            raise
        raise ImageIOError(f"{path}: cannot decode image ({exc})") from exc
    return ImagePlane(np.ascontiguousarray(arr, dtype=np.uint8), "RGB" if arr.ndim == 3 else "Y")


def save_png(plane: ImagePlane, path) -> None:
    data = plane.data if plane.is_8bit else quantize(plane.data * (255.0 / plane.value_range))
    try:
        Image.fromarray(data, mode="RGB" if data.ndim == 3 else "L").save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot write PNG ({exc})") from exc


# --------------------------------------------------------------------------
# pixel conversions


def quantize(x) -> np.ndarray:
    """Clip to [0, 255] and round half away from zero to uint8."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 255.0)
    return np.floor(x + 0.5).astype(np.uint8)


def image_to_tensor(plane: ImagePlane, dtype=np.float32) -> np.ndarray:
    """(h, w, 3) image -> (1, 3, h, w) tensor in [0, 1]."""
    rgb = plane.to_rgb().as_unit_float()
    return np.ascontiguousarray(rgb.transpose(2, 0, 1)[None], dtype=dtype)


def tensor_to_image(t: np.ndarray) -> ImagePlane:
    """(1, 3, h, w) tensor in [0, 1] -> 8-bit RGB plane."""
    if t.ndim != 4 or t.shape[0] != 1 or t.shape[1] != 3:
        raise ImageIOError(f"expected a (1, 3, h, w) tensor, got {t.shape}")
    return ImagePlane(quantize(t[0].transpose(1, 2, 0).astype(np.float64) * 255.0), "RGB")


def rgb_to_y(plane: ImagePlane) -> ImagePlane:
    """BT.601 studio-swing luma in [16, 235], as a float plane tagged Y."""
    if plane.color != "RGB" or plane.channels != 3:
        raise ImageIOError("rgb_to_y needs a 3-channel RGB plane")
    rgb = plane.as_unit_float()
    return ImagePlane(Y_OFFSET + rgb @ Y_COEFFS, "Y", 255.0)


# --------------------------------------------------------------------------
# bicubic resampling


def cubic(x, a: float = -0.5):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_weights(in_len: int, out_len: int, antialias: bool = True) -> np.ndarray:
    """Dense (out_len, in_len) interpolation matrix for one axis (imresize conventions)."""
    scale = out_len / in_len
    if antialias and scale < 1:
        width = 4.0 / scale
        kernel = lambda d: scale * cubic(scale * d)
    else:
        width = 4.0
        kernel = cubic
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = kernel(u[:, None] - idx)
    w /= w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 1, in_len).astype(np.int64) - 1
    mat = np.zeros((out_len, in_len))
    np.add.at(mat, (np.repeat(np.arange(out_len), taps), idx.ravel()), w.ravel())
    return mat


def bicubic_resize(plane, out_size, antialias: bool = True):
    """Resize to ``out_size`` = (height, width) with a separable a=-0.5 cubic kernel.

    Accepts an :class:`ImagePlane` (returned with the same depth; 8-bit output
    is rounded) or a bare (h, w[, c]) float array.
    """
    out_h, out_w = (int(v) for v in out_size)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_size}")
    arr = plane.data if isinstance(plane, ImagePlane) else np.asarray(plane)
    src = arr.astype(np.float64)
    wy = resize_weights(src.shape[0], out_h, antialias)
    wx = resize_weights(src.shape[1], out_w, antialias)
    out = np.tensordot(wy, src, axes=(1, 0))
    out = np.moveaxis(np.tensordot(wx, out, axes=(1, 1)), 0, 1)
    if not isinstance(plane, ImagePlane):
        return out
    if plane.is_8bit:
        return ImagePlane(quantize(out), plane.color)
    return ImagePlane(out, plane.color, plane.value_range)


def bicubic_upscale_tensor(lr: np.ndarray, scale: int) -> np.ndarray:
    """(n, 3, h, w) tensor -> bicubic (n, 3, h*p, w*p), used as the comparison baseline."""
    n, c, h, w = lr.shape
    wy = resize_weights(h, h * scale, False)
    wx = resize_weights(w, w * scale, False)
    out = np.einsum("yh,nchw,xw->ncyx", wy, lr.astype(np.float64), wx)
    return out.astype(lr.dtype)


# --------------------------------------------------------------------------
# metrics


def _y_plane(plane) -> np.ndarray:
    """Quantize to 8 bits, then convert RGB to Y; Y-tagged planes pass through."""
    if not isinstance(plane, ImagePlane):
        arr = np.asarray(plane)
        plane = ImagePlane(arr, "RGB" if arr.ndim == 3 else "Y",
                           255.0 if arr.dtype == np.uint8 else 1.0)
    data = plane.data if plane.is_8bit else quantize(plane.data * (255.0 / plane.value_range))
    if plane.color == "Y" or data.ndim == 2:
        return data.astype(np.float64)
    return rgb_to_y(ImagePlane(data, "RGB")).data


def _prepare_pair(sr, hr, shave):
    a, b = _y_plane(sr), _y_plane(hr)
    if a.shape != b.shape:
        raise EvaluationError(f"size mismatch: SR {a.shape} vs HR {b.shape}")
    if shave < 0:
        raise EvaluationError("shave must be >= 0")
    if shave:
        a, b = a[shave:-shave, shave:-shave], b[shave:-shave, shave:-shave]
    if a.size == 0:
        raise EvaluationError(f"image smaller than the {shave}-pixel shave")
    return a, b


def psnr_y(sr, hr, shave: int = 0) -> float:
    a, b = _prepare_pair(sr, hr, shave)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0 ** 2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian; the 2-D window is its outer product."""
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    k = len(g)
    rows = sliding_window_view(img, k, axis=1) @ g
    return sliding_window_view(rows, k, axis=0) @ g


def ssim_y(sr, hr, shave: int = 0) -> float:
    """Single-scale SSIM with an 11x11 Gaussian (sigma 1.5), mean over valid window positions."""
    a, b = _prepare_pair(sr, hr, shave)
    if min(a.shape) < SSIM_WINDOW:
        raise EvaluationError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1, c2 = (SSIM_K1 * 255) ** 2, (SSIM_K2 * 255) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class ImageMetrics:
    name: str
    psnr: float
    ssim: float
    ms: float


@dataclass
class MetricsReport:
    scale: int
    shave: int
    entries: list[ImageMetrics] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([e.psnr for e in self.entries])) if self.entries else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([e.ssim for e in self.entries])) if self.entries else float("nan")

    @property
    def mean_ms(self) -> float:
        return float(np.mean([e.ms for e in self.entries])) if self.entries else float("nan")

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "shave": self.shave,
            "images": [vars(e) for e in self.entries],
            "mean": {"psnr": self.mean_psnr, "ssim": self.mean_ssim, "ms": self.mean_ms},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["name", "psnr", "ssim", "ms"])
        for e in self.entries:
            writer.writerow([e.name, f"{e.psnr:.4f}", f"{e.ssim:.6f}", f"{e.ms:.3f}"])
        writer.writerow(["MEAN", f"{self.mean_psnr:.4f}", f"{self.mean_ssim:.6f}", f"{self.mean_ms:.3f}"])
        return buf.getvalue()

    def format_table(self) -> str:
        lines = [f"{'image':<24} {'PSNR':>8} {'SSIM':>8} {'ms':>9}"]
        for e in self.entries:
            lines.append(f"{e.name:<24} {e.psnr:8.2f} {e.ssim:8.4f} {e.ms:9.1f}")
        lines.append(f"{'mean':<24} {self.mean_psnr:8.2f} {self.mean_ssim:8.4f} {self.mean_ms:9.1f}")
        return "\n".join(lines)


# --------------------------------------------------------------------------
# datasets


@dataclass
class ImagePair:
    name: str
    lr: np.ndarray  # uint8 (h, w, 3)
    hr: np.ndarray  # uint8 (h*p, w*p, 3)


@dataclass
class Manifest:
    path: Path
    pairs: list[tuple[Path, Path]]
    skipped: list[tuple[Path, str]]


def center_crop_to_multiple(arr: np.ndarray, p: int) -> np.ndarray:
    h, w = arr.shape[:2]
    dh, dw = h % p, w % p
    return arr[dh // 2:h - (dh - dh // 2), dw // 2:w - (dw - dw // 2)]


def manifest_path(out_dir, scale: int) -> Path:
    return Path(out_dir) / f"manifest_X{scale}.txt"


def prepare_dataset(hr_dir, scale: int, out_dir, antialias: bool = True) -> Manifest:
    """Crop HR PNGs to multiples of ``scale`` and write bicubic LR counterparts.

    Layout: ``out_dir/HR/<stem>.png``, ``out_dir/X<scale>/<stem>.png`` and
    ``out_dir/manifest_X<scale>.txt`` with one ``hr_path,lr_path`` per line;
    unreadable inputs are listed as ``# skipped`` comment lines.
    """
    hr_dir, out_dir = Path(hr_dir), Path(out_dir)
    if not hr_dir.is_dir():
        raise DatasetError(f"{hr_dir}: not a directory")
    sources = sorted(hr_dir.glob("*.png"))
    if not sources:
        raise DatasetError(f"{hr_dir}: no PNG images found")
    hr_out, lr_out = out_dir / "HR", out_dir / f"X{scale}"
    hr_out.mkdir(parents=True, exist_ok=True)
    lr_out.mkdir(parents=True, exist_ok=True)

    pairs, skipped = [], []
    for src in sources:
        try:
            plane = load_png(src).to_rgb()
        except ImageIOError as exc:
            log.warning("skipping %s: %s", src, exc)
            skipped.append((src, str(exc)))
            continue
        hr = center_crop_to_multiple(plane.data, scale)
        if hr.shape[0] < scale or hr.shape[1] < scale:
            skipped.append((src, "smaller than the scale factor"))
            continue
        lr = bicubic_resize(ImagePlane(hr), (hr.shape[0] // scale, hr.shape[1] // scale), antialias)
        hr_path, lr_path = hr_out / f"{src.stem}.png", lr_out / f"{src.stem}.png"
        save_png(ImagePlane(np.ascontiguousarray(hr)), hr_path)
        save_png(lr, lr_path)
        pairs.append((hr_path, lr_path))

    if not pairs:
        raise DatasetError(f"{hr_dir}: no image could be processed")
    path = manifest_path(out_dir, scale)
    with open(path, "w") as fh:
        for hr_path, lr_path in pairs:
            fh.write(f"{hr_path},{lr_path}\n")
        for src, reason in skipped:
            fh.write(f"# skipped {src}: {reason}\n")
    return Manifest(path, pairs, skipped)


def read_manifest(path) -> list[tuple[Path, Path]]:
    pairs = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        hr, _, lr = line.partition(",")
        pairs.append((Path(hr), Path(lr)))
    return pairs


def find_pairs(root, scale: int) -> list[tuple[Path, Path]]:
    """Match ``root/HR/*.png`` with ``root/X<scale>/*.png`` by stem (or read the manifest)."""
    root = Path(root)
    if root.is_file():
        return read_manifest(root)
    hr_dir, lr_dir = root / "HR", root / f"X{scale}"
    if not hr_dir.is_dir() or not lr_dir.is_dir():
        raise DatasetError(f"{root}: expected HR/ and X{scale}/ subdirectories")
    hr = {p.stem: p for p in hr_dir.glob("*.png")}
    lr = {p.stem: p for p in lr_dir.glob("*.png")}
    orphans = sorted(str(hr[s]) for s in hr.keys() - lr.keys()) + sorted(
        str(lr[s]) for s in lr.keys() - hr.keys()
    )
    if orphans:
        raise DatasetError(f"{root}: unmatched LR/HR stems: {', '.join(orphans)}", orphans)
    if not hr:
        raise DatasetError(f"{root}: no image pairs")
    return [(hr[s], lr[s]) for s in sorted(hr)]


def load_pairs(root, scale: int) -> list[ImagePair]:
    out = []
    for hr_path, lr_path in find_pairs(root, scale):
        hr = load_png(hr_path).to_rgb().data
        lr = load_png(lr_path).to_rgb().data
        if hr.shape[0] != lr.shape[0] * scale or hr.shape[1] != lr.shape[1] * scale:
            raise DatasetError(
                f"{hr_path.stem}: HR {hr.shape[:2]} is not x{scale} of LR {lr.shape[:2]}"
            )
        out.append(ImagePair(hr_path.stem, lr, hr))
    return out


def make_pair(name: str, hr: np.ndarray, scale: int, antialias: bool = True) -> ImagePair:
    """Build an in-memory (LR, HR) pair the same way :func:`prepare_dataset` does."""
    if hr.ndim == 2:
        hr = np.repeat(hr[:, :, None], 3, axis=2)
    hr = np.ascontiguousarray(center_crop_to_multiple(hr, scale))
    lr = bicubic_resize(ImagePlane(hr), (hr.shape[0] // scale, hr.shape[1] // scale), antialias)
    return ImagePair(name, lr.data, hr)
