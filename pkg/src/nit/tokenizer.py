"""Variable-resolution latent tokenization.

Converts images/latents of arbitrary native resolution into token matrices
and back, plus a lossless seeded toy codec standing in for a pretrained
autoencoder. All functions are pure; latents use channel-first layout
(c, h, w) and token matrices are (num_tokens, c * p * p) in raster order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

LATENT_MAGIC = b"NITL"
LATENT_VERSION = 1


class ShapeError(ValueError):
    """Raised when a dimension fails a divisibility or consistency check."""


@dataclass(frozen=True)
class ImageSpec:
    """Native pixel geometry of one image."""

    height: int
    width: int
    channels: int = 3
    class_label: int | None = None

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ShapeError(f"non-positive image size {self.height}x{self.width}")


@dataclass
class LatentImage:
    """One instance's latent grid plus its native geometry and label."""

    data: np.ndarray  # (c, h, w)
    label: int | None = None
    patch_size: int = 1

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"latent must be (c, h, w), got shape {self.data.shape}")
        c, h, w = self.data.shape
        p = self.patch_size
        if p <= 0 or h % p or w % p:
            raise ShapeError(f"patch size {p} does not divide latent {h}x{w}")

    @property
    def token_count(self) -> int:
        _, h, w = self.data.shape
        return (h * w) // (self.patch_size**2)

    @property
    def grid(self) -> tuple[int, int]:
        _, h, w = self.data.shape
        return h // self.patch_size, w // self.patch_size


@dataclass
class TokenMatrix:
    """Raster-ordered patch tokens of a single latent."""

    tokens: np.ndarray  # (N, c*p*p)
    grid: tuple[int, int]

    def __post_init__(self):
        gh, gw = self.grid
        if self.tokens.ndim != 2 or self.tokens.shape[0] != gh * gw:
            raise ShapeError(
                f"token rows {self.tokens.shape} inconsistent with grid {self.grid}"
            )


def latent_shape(
    spec: ImageSpec, downsample_factor: int, latent_channels: int
) -> tuple[int, int, int]:
    """Latent (h, w, c) for an image, rejecting non-divisible axes."""
    if spec.height % downsample_factor:
        raise ShapeError(
            f"height {spec.height} not divisible by downsample factor {downsample_factor}"
        )
    if spec.width % downsample_factor:
        raise ShapeError(
            f"width {spec.width} not divisible by downsample factor {downsample_factor}"
        )
    return spec.height // downsample_factor, spec.width // downsample_factor, latent_channels


def patchify(latent: LatentImage) -> TokenMatrix:
    """Reshape a (c, h, w) latent into (h*w/p^2, c*p*p) raster-ordered tokens.

    Row j holds the flattened p x p x c patch at raster position j over the
    token grid; flattening order within a row is (c, ph, pw).
    """
    c, h, w = latent.data.shape
    p = latent.patch_size
    gh, gw = h // p, w // p
    # (c, gh, p, gw, p) -> (gh, gw, c, p, p) -> (gh*gw, c*p*p)
    x = latent.data.reshape(c, gh, p, gw, p)
    x = x.transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * p * p)
    return TokenMatrix(tokens=x, grid=(gh, gw))


def unpatchify(tokens: np.ndarray, h: int, w: int, p: int, label: int | None = None) -> LatentImage:
    """Exact inverse of :func:`patchify`."""
    if h % p or w % p:
        raise ShapeError(f"patch size {p} does not divide {h}x{w}")
    gh, gw = h // p, w // p
    n, dim = tokens.shape
    if n != gh * gw:
        raise ShapeError(f"expected {gh * gw} token rows, got {n}")
    if dim % (p * p):
        raise ShapeError(f"token dim {dim} not a multiple of p^2={p * p}")
    c = dim // (p * p)
    x = tokens.reshape(gh, gw, c, p, p).transpose(2, 0, 3, 1, 4).reshape(c, h, w)
    return LatentImage(data=x, label=label, patch_size=p)


@dataclass
class ToyCodec:
    """Lossless seeded stand-in for a pretrained autoencoder.

    Space-to-depth by ``downsample_factor`` followed by a fixed random
    orthogonal channel mixing (seeded), so ``decode(encode(x)) == x`` up to
    the projection's numerical inverse. ``identity=True`` skips the mixing
    for an exactly lossless round trip.
    """

    downsample_factor: int = 8
    channels: int = 3
    seed: int = 0
    identity: bool = False
    patch_size: int = 1
    _proj: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        c = self.latent_channels
        if self.identity:
            self._proj = np.eye(c, dtype=np.float32)
        else:
            rng = np.random.default_rng(self.seed)
            q, _ = np.linalg.qr(rng.standard_normal((c, c)))
            self._proj = q.astype(np.float32)

    @property
    def latent_channels(self) -> int:
        return self.channels * self.downsample_factor**2

    def encode(self, image: np.ndarray, label: int | None = None) -> LatentImage:
        """(c, H, W) pixels -> LatentImage with a (c*f*f, H/f, W/f) grid."""
        if image.ndim != 3 or image.shape[0] != self.channels:
            raise ShapeError(f"expected ({self.channels}, H, W) image, got {image.shape}")
        f = self.downsample_factor
        c, hh, ww = image.shape
        if hh % f or ww % f:
            raise ShapeError(f"image {hh}x{ww} not divisible by downsample factor {f}")
        h, w = hh // f, ww // f
        x = image.reshape(c, h, f, w, f).transpose(0, 2, 4, 1, 3).reshape(c * f * f, h, w)
        z = np.einsum("dc,chw->dhw", self._proj, x).astype(np.float32)
        return LatentImage(data=z, label=label, patch_size=self.patch_size)

    def decode(self, latent: LatentImage) -> np.ndarray:
        """Inverse of :meth:`encode` (orthogonal mixing: inverse = transpose)."""
        f = self.downsample_factor
        cf, h, w = latent.data.shape
        if cf != self.latent_channels:
            raise ShapeError(f"latent channels {cf} != codec channels {self.latent_channels}")
        x = np.einsum("cd,dhw->chw", self._proj.T, latent.data)
        x = x.reshape(self.channels, f, f, h, w).transpose(0, 3, 1, 4, 2)
        return x.reshape(self.channels, h * f, w * f)


def save_latent(path, latent: LatentImage) -> None:
    """Write header (magic, version, c/h/w/p as u16, label i32) + f32 LE data."""
    c, h, w = latent.data.shape
    label = -1 if latent.label is None else int(latent.label)
    header = LATENT_MAGIC + struct.pack(
        "<HHHHHi", LATENT_VERSION, c, h, w, latent.patch_size, label
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(latent.data.astype("<f4").tobytes(order="C"))


def load_latent(path) -> LatentImage:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != LATENT_MAGIC:
            raise ShapeError(f"bad latent magic {magic!r}")
        version, c, h, w, p, label = struct.unpack("<HHHHHi", fh.read(14))
        if version != LATENT_VERSION:
            raise ShapeError(f"unsupported latent version {version}")
        data = np.frombuffer(fh.read(4 * c * h * w), dtype="<f4").reshape(c, h, w)
    return LatentImage(
        data=data.copy(), label=None if label < 0 else label, patch_size=p
    )
