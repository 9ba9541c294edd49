"""Score distributions, the frozen pseudo-encoder, synthetic data, augmentations and file formats.

Images are ``(H, W, C)`` float arrays in ``[0, 1]`` (batches prepend an axis).
Embeddings are ``(1 + N_p, H_v)`` with the CLS row first.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, FormatError, ValidationError

EMBEDDING_MAGIC = b"AQE1"
IMAGE_MAGIC = b"AQI1"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# score distributions


def validate_dos(bins, tol: float = 1e-6) -> np.ndarray:
    """Check a K-bin distribution and return it renormalised to sum exactly 1."""
    d = np.asarray(bins, dtype=np.float64)
    if d.ndim != 1 or d.size < 2:
        raise ValidationError(f"a score distribution needs K >= 2 bins, got shape {d.shape}")
    if not np.isfinite(d).all():
        raise ValidationError("score distribution has a non-finite bin")
    neg = np.flatnonzero(d < 0)
    if neg.size:
        raise ValidationError(f"bin {neg[0] + 1} is negative ({d[neg[0]]!r})")
    total = d.sum()
    if abs(total - 1.0) > tol:
        raise ValidationError(f"bins sum to {total!r}, expected 1 within {tol}")
    return d / total


def dos_to_mos(d) -> float | np.ndarray:
    """Mean opinion score: the expectation of the bin index ``1..K``.

    Accepts one distribution or a batch ``(n, K)``.
    """
    arr = np.asarray(d, dtype=np.float64)
    if arr.ndim == 1:
        arr = validate_dos(arr)
        return float(arr @ np.arange(1, arr.size + 1))
    if arr.ndim != 2:
        raise ValidationError(f"expected (K,) or (n, K) distributions, got {arr.shape}")
    if (arr < 0).any() or not np.allclose(arr.sum(axis=1), 1.0, rtol=0, atol=1e-6):
        raise ValidationError("batch contains an invalid distribution")
    return arr @ np.arange(1, arr.shape[1] + 1)


def gaussian_dos(mos, k: int, sigma: float = 1.2) -> np.ndarray:
    """Discretise a Gaussian around each MOS onto bins ``1..K`` and normalise."""
    mos = np.atleast_1d(np.asarray(mos, dtype=np.float64))
    bins = np.arange(1, k + 1)
    logits = -0.5 * ((bins[None, :] - mos[:, None]) / sigma) ** 2
    w = np.exp(logits - logits.max(axis=1, keepdims=True))
    return w / w.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# frozen pseudo-encoder


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass(frozen=True)
class EncoderConfig:
    width: int = 32
    patch: int = 8
    channels: int = 3
    hv: int = 24
    seed: int = 1234

    @property
    def n_patches(self) -> int:
        return (self.width // self.patch) ** 2


class PseudoEncoder:
    """Deterministic stand-in for a frozen ViT.

    Each ``P x P x C`` patch goes through a fixed seeded affine map to ``H_v``
    dims, plus a sinusoidal offset for its position; the CLS row is a fixed
    seeded vector. All arrays are read-only and never see a gradient.
    """

    frozen = True

    def __init__(self, config: EncoderConfig):
        if config.width % config.patch:
            raise DimensionError(
                f"image width {config.width} not divisible by patch size {config.patch}"
            )
        self.config = config
        rng = np.random.default_rng(config.seed)
        fan_in = config.patch * config.patch * config.channels
        self.weight = rng.normal(0.0, 2.0 / np.sqrt(fan_in), size=(fan_in, config.hv))
        self.bias = rng.normal(0.0, 0.1, size=config.hv)
        self.cls = rng.normal(0.0, 1.0, size=config.hv)
        self.positions = sinusoidal_positions(config.n_patches, config.hv)
        for arr in (self.weight, self.bias, self.cls, self.positions):
            arr.flags.writeable = False

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.weight, self.bias, self.cls, self.positions):
            h.update(arr.tobytes())
        return h.hexdigest()

    def patchify(self, images: np.ndarray) -> np.ndarray:
        imgs = np.asarray(images, dtype=np.float64)
        single = imgs.ndim == 3
        if single:
            imgs = imgs[None]
        n, hgt, wid, c = imgs.shape
        p = self.config.patch
        if hgt % p or wid % p:
            raise DimensionError(f"image {hgt}x{wid} not divisible by patch size {p}")
        if c != self.config.channels:
            raise DimensionError(f"expected {self.config.channels} channels, got {c}")
        x = imgs.reshape(n, hgt // p, p, wid // p, p, c).transpose(0, 1, 3, 2, 4, 5)
        x = x.reshape(n, (hgt // p) * (wid // p), p * p * c)
        return x[0] if single else x

    def encode(self, images: np.ndarray) -> np.ndarray:
        """Embeddings ``(1 + N_p, H_v)``, or ``(n, 1 + N_p, H_v)`` for a batch."""
        imgs = np.asarray(images, dtype=np.float64)
        single = imgs.ndim == 3
        patches = self.patchify(imgs[None] if single else imgs)
        if patches.shape[1] != self.config.n_patches:
            raise DimensionError(
                f"image yields {patches.shape[1]} patches, encoder expects {self.config.n_patches}"
            )
        tokens = patches @ self.weight + self.bias + self.positions
        cls = np.broadcast_to(self.cls, (tokens.shape[0], 1, self.config.hv))
        out = np.concatenate([cls, tokens], axis=1)
        return out[0] if single else out


def pseudo_encode(img: np.ndarray, encoder_seed: int, patch: int = 8, hv: int = 24) -> np.ndarray:
    img = np.asarray(img)
    h, w, c = img.shape[-3:]
    if h != w:
        raise DimensionError(f"pseudo_encode expects square images, got {h}x{w}")
    return PseudoEncoder(EncoderConfig(w, patch, c, hv, encoder_seed)).encode(img)


# ---------------------------------------------------------------------------
# augmentations


def hflip(img: np.ndarray) -> np.ndarray:
    """Reverse the width axis (``-2``) of an image or batch of images."""
    return np.ascontiguousarray(np.asarray(img)[..., ::-1, :])


def _interp_axis(x: np.ndarray, out: int, axis: int) -> np.ndarray:
    n = x.shape[axis]
    src = (np.arange(out) + 0.5) * (n / out) - 0.5
    src = np.clip(src, 0.0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    w = src - lo
    shape = [1] * x.ndim
    shape[axis] = out
    w = w.reshape(shape)
    a = np.take(x, lo, axis=axis)
    b = np.take(x, hi, axis=axis)
    return a + w * (b - a)


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of ``(..., H, W, C)`` images."""
    x = np.asarray(img, dtype=np.float64)
    x = _interp_axis(x, height, x.ndim - 3)
    return _interp_axis(x, width, x.ndim - 2)


def resize_random_crop(img, resize_to: int, crop_to: int, rng=None, offset=None) -> np.ndarray:
    """Bilinear resize to ``resize_to`` square, then a ``crop_to`` square window.

    The window's top-left ``offset`` is drawn uniformly from ``rng`` unless given.
    """
    if crop_to > resize_to:
        raise ContractError(f"crop {crop_to} larger than resized size {resize_to}")
    x = resize_bilinear(img, resize_to, resize_to)
    if offset is None:
        if rng is None:
            raise ContractError("resize_random_crop needs an rng or an explicit offset")
        offset = rng.integers(0, resize_to - crop_to + 1, size=2)
    oy, ox = int(offset[0]), int(offset[1])
    return np.ascontiguousarray(x[..., oy : oy + crop_to, ox : ox + crop_to, :])


def pad_to_square(img: np.ndarray, size: int) -> np.ndarray:
    """Aspect-preserving resize so the longer side is ``size``, zero-filled to square."""
    x = np.asarray(img, dtype=np.float64)
    h, w = x.shape[-3], x.shape[-2]
    scale = size / max(h, w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    x = resize_bilinear(x, nh, nw)
    out = np.zeros(x.shape[:-3] + (size, size, x.shape[-1]))
    top, left = (size - nh) // 2, (size - nw) // 2
    out[..., top : top + nh, left : left + nw, :] = x
    return out


def prepare_image(img: np.ndarray, size: int, padding: bool) -> np.ndarray:
    """Bring an image to ``size x size``: letterbox when ``padding``, else stretch."""
    x = np.asarray(img, dtype=np.float64)
    if x.shape[-3] == size and x.shape[-2] == size:
        return x
    return pad_to_square(x, size) if padding else resize_bilinear(x, size, size)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    width: int = 32
    channels: int = 3
    k: int = 10
    sigma_bins: float = 1.2
    label_noise: float = 0.2


@dataclass
class Dataset:
    dos: np.ndarray
    images: np.ndarray | None = None
    embeddings: np.ndarray | None = None
    split: str = "train"
    seed: int | None = None
    features: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.dos = np.asarray(self.dos, dtype=np.float64)
        if self.dos.ndim != 2 or len(self.dos) == 0:
            raise ContractError("a dataset needs at least one (n, K) score distribution")
        n = len(self.dos)
        for name in ("images", "embeddings"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ContractError(f"{name} has {len(arr)} items but there are {n} distributions")
        if self.images is None and self.embeddings is None:
            raise ContractError("a dataset needs images or embeddings")

    def __len__(self) -> int:
        return len(self.dos)

    @property
    def k(self) -> int:
        return self.dos.shape[1]

    @property
    def mos(self) -> np.ndarray:
        return dos_to_mos(self.dos)

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return Dataset(
            self.dos[idx], pick(self.images), pick(self.embeddings), self.split, self.seed,
            pick(self.features),
        )

    def with_embeddings(self, encoder: PseudoEncoder) -> Dataset:
        if self.images is None:
            raise ContractError("dataset has no images to encode")
        return Dataset(
            self.dos, self.images, encoder.encode(self.images), self.split, self.seed, self.features
        )


def image_statistics(images: np.ndarray) -> np.ndarray:
    """Oracle statistics per image: brightness, contrast, saturation, centrality, noisiness."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    n, h, w, _ = x.shape
    lum = x.mean(axis=-1)
    contrast = lum.reshape(n, -1).std(axis=1)
    saturation = (x.max(axis=-1) - x.min(axis=-1)).reshape(n, -1).mean(axis=1)
    dev = (lum - np.median(lum.reshape(n, -1), axis=1)[:, None, None]) ** 2
    mass = dev.reshape(n, -1).sum(axis=1) + 1e-12
    ys, xs = np.mgrid[0:h, 0:w]
    cy = (dev * ys).reshape(n, -1).sum(axis=1) / mass
    cx = (dev * xs).reshape(n, -1).sum(axis=1) / mass
    off = np.hypot(cy - (h - 1) / 2, cx - (w - 1) / 2) / (0.5 * np.hypot(h, w))
    centrality = 1.0 - off
    noise = np.abs(np.diff(lum, axis=2)).reshape(n, -1).mean(axis=1)
    brightness = lum.reshape(n, -1).mean(axis=1)
    return np.stack([brightness, contrast, saturation, centrality, noise], axis=1)


# Fixed weights of the hidden aesthetic function over standardised statistics.
_SIGNAL_WEIGHTS = np.array([1.2, 0.8, 0.8, 0.6, -0.5])
_SIGNAL_CENTER = np.array([0.498, 0.056, 0.217, 0.899, 0.050])
_SIGNAL_SCALE = np.array([0.137, 0.026, 0.067, 0.118, 0.028])


def hidden_mos(stats: np.ndarray, k: int) -> np.ndarray:
    """Smooth map from oracle statistics to a MOS in ``[1, K]``, centred mid-scale."""
    z = ((stats - _SIGNAL_CENTER) / _SIGNAL_SCALE) @ _SIGNAL_WEIGHTS
    return 1.0 + (k - 1) / (1.0 + np.exp(-0.6 * z))


def render_images(n: int, cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    w, c = cfg.width, cfg.channels
    bg = rng.uniform(0.25, 0.75, size=(n, 1, 1, 1)) + rng.uniform(-0.15, 0.15, size=(n, 1, 1, c))
    fg = rng.uniform(0.0, 1.0, size=(n, 1, 1, c))
    center = rng.uniform(0.15, 0.85, size=(n, 2)) * (w - 1)
    radius = rng.uniform(0.08, 0.28, size=n) * w
    alpha = rng.uniform(0.2, 1.0, size=n)
    noise_amp = rng.uniform(0.0, 0.15, size=n)
    ys, xs = np.mgrid[0:w, 0:w]
    d2 = (ys[None] - center[:, 0, None, None]) ** 2 + (xs[None] - center[:, 1, None, None]) ** 2
    mask = (alpha[:, None, None] * np.exp(-0.5 * d2 / radius[:, None, None] ** 2))[..., None]
    img = bg * (1.0 - mask) + fg * mask
    img = img + noise_amp[:, None, None, None] * rng.standard_normal(size=(n, w, w, c))
    return np.clip(img, 0.0, 1.0)


def gen_synthetic(n: int, cfg: SyntheticConfig | None = None, seed: int = 0,
                  split: str = "train") -> Dataset:
    """Seeded synthetic images whose DOS follows a hidden function of image statistics."""
    if n < 1:
        raise ContractError("gen_synthetic needs n >= 1")
    cfg = cfg or SyntheticConfig()
    rng = np.random.default_rng(seed)
    images = render_images(n, cfg, rng)
    stats = image_statistics(images)
    mos = hidden_mos(stats, cfg.k) + cfg.label_noise * rng.standard_normal(n)
    mos = np.clip(mos, 1.0, cfg.k)
    return Dataset(gaussian_dos(mos, cfg.k, cfg.sigma_bins), images=images, split=split,
                   seed=seed, features=stats)


# ---------------------------------------------------------------------------
# binary formats (little-endian, f32 payload)

# magic (its last byte is the format version), then u32 counts
_EMB_HEADER = struct.Struct("<4sIIII")
_IMG_HEADER = struct.Struct("<4sIIII")


def _read_header(buf: bytes, magic: bytes, hdr: struct.Struct) -> tuple[int, ...]:
    head = bytes(buf[:4])
    if len(head) == 4 and head[:3] == magic[:3] and head[3:].isdigit() and head != magic:
        raise FormatError(f"unsupported format version {head[3:].decode()} "
                          f"(this reader handles {FORMAT_VERSION})", 3)
    if head != magic:
        raise FormatError(f"bad magic {head!r}, expected {magic!r}", 0)
    if len(buf) < hdr.size:
        raise FormatError("truncated header", len(buf))
    _, *counts = hdr.unpack_from(buf, 0)
    return tuple(counts)


def _read_payload(buf: bytes, counts: tuple[int, int], start: int, n: int) -> np.ndarray:
    per_item = counts[0] + counts[1]
    expected = start + 4 * n * per_item
    if len(buf) < expected:
        item = (len(buf) - start) // (4 * per_item) if per_item else 0
        raise FormatError(f"truncated payload in item {item}", len(buf))
    if len(buf) > expected:
        raise FormatError("trailing bytes after payload", expected)
    return np.frombuffer(buf, dtype="<f4", offset=start).reshape(n, per_item).astype(np.float64)


def _check_dos_rows(dos: np.ndarray, start: int, stride: int, dos_offset: int) -> None:
    for i, row in enumerate(dos):
        try:
            validate_dos(row)
        except ValidationError as exc:
            raise FormatError(f"item {i}: {exc}", start + i * stride + dos_offset) from None


def write_embeddings(path, embeddings: np.ndarray, dos: np.ndarray) -> None:
    emb = np.asarray(embeddings)
    dos = np.asarray(dos)
    if emb.ndim != 3 or dos.ndim != 2 or len(emb) != len(dos) or len(emb) == 0:
        raise ContractError(f"bad shapes for embedding file: {emb.shape}, {dos.shape}")
    n, tokens, hv = emb.shape
    payload = np.concatenate([emb.reshape(n, -1), dos], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMBEDDING_MAGIC, n, tokens, hv, dos.shape[1]))
        fh.write(payload.tobytes())


def read_embeddings(path, split: str = "train") -> Dataset:
    buf = Path(path).read_bytes()
    n, tokens, hv, k = _read_header(buf, EMBEDDING_MAGIC, _EMB_HEADER)
    if n == 0 or tokens == 0 or hv == 0 or k < 2:
        raise FormatError(f"invalid counts n={n} tokens={tokens} hv={hv} K={k}", 4)
    rows = _read_payload(buf, (tokens * hv, k), _EMB_HEADER.size, n)
    dos = rows[:, tokens * hv :]
    _check_dos_rows(dos, _EMB_HEADER.size, 4 * (tokens * hv + k), 4 * tokens * hv)
    return Dataset(dos.copy(), embeddings=rows[:, : tokens * hv].reshape(n, tokens, hv).copy(),
                   split=split)


def write_images(path, images: np.ndarray, dos: np.ndarray) -> None:
    imgs = np.asarray(images)
    dos = np.asarray(dos)
    if imgs.ndim != 4 or imgs.shape[1] != imgs.shape[2] or len(imgs) != len(dos) or len(imgs) == 0:
        raise ContractError(f"bad shapes for image file: {imgs.shape}, {dos.shape}")
    n, w, _, c = imgs.shape
    payload = np.concatenate([imgs.reshape(n, -1), dos], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_IMG_HEADER.pack(IMAGE_MAGIC, n, w, c, dos.shape[1]))
        fh.write(payload.tobytes())


def read_images(path, split: str = "train") -> Dataset:
    buf = Path(path).read_bytes()
    n, w, c, k = _read_header(buf, IMAGE_MAGIC, _IMG_HEADER)
    if n == 0 or w == 0 or c == 0 or k < 2:
        raise FormatError(f"invalid counts n={n} W={w} C={c} K={k}", 4)
    rows = _read_payload(buf, (w * w * c, k), _IMG_HEADER.size, n)
    dos = rows[:, w * w * c :]
    _check_dos_rows(dos, _IMG_HEADER.size, 4 * (w * w * c + k), 4 * w * w * c)
    return Dataset(dos.copy(), images=rows[:, : w * w * c].reshape(n, w, w, c).copy(), split=split)


def read_dataset(path, split: str = "train") -> Dataset:
    """Read either file type, dispatching on the magic bytes."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == IMAGE_MAGIC:
        return read_images(path, split)
    if magic == EMBEDDING_MAGIC:
        return read_embeddings(path, split)
    raise FormatError(f"unrecognised magic {magic!r}", 0)


def to_f32_exact(arr: np.ndarray) -> np.ndarray:
    """Round to the values a file round-trip preserves."""
    return np.asarray(arr, dtype=np.float32).astype(np.float64)
