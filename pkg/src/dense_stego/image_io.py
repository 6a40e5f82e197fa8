"""Image decoding/encoding, manifests, carrier/secret pairing and tensor conversion.

Images are held as ``uint8`` arrays of shape ``(H, W, 3)``.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor_core import Tensor, concat_channels

log = logging.getLogger(__name__)

READABLE_FORMATS = {"PNG", "JPEG"}


class ImageReadError(OSError):
    pass


class ImageFormatError(ValueError):
    pass


def check_image(img: np.ndarray, what: str = "image") -> np.ndarray:
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{what} must be a uint8 array of shape (H, W, 3), got "
                         f"{img.dtype} {img.shape}")
    return img


def resize_bilinear(img: np.ndarray, height: int, width: Optional[int] = None) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling; corner pixels map exactly."""
    width = height if width is None else width
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()

    def coords(n_out, n_in):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out), np.zeros(n_out, dtype=int), np.zeros(n_out, dtype=int)
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return pos - lo, lo, hi

    fy, y0, y1 = coords(height, h)
    fx, x0, x1 = coords(width, w)
    src = img.astype(np.float64)
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    fy = fy[:, None, None]
    out = top * (1 - fy) + bottom * fy
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def load_image(path, target_size: Optional[int] = None) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            fmt = im.format
            if fmt not in READABLE_FORMATS:
                raise ImageFormatError(f"{path}: unsupported image format {fmt!r} (PNG or JPEG only)")
            if im.mode in ("L", "I", "I;16", "F", "1"):
                gray = np.asarray(im.convert("L"))
                arr = np.repeat(gray[:, :, None], 3, axis=2)
            else:
                arr = np.asarray(im.convert("RGB"))
    except FileNotFoundError as exc:
        raise ImageReadError(f"{path}: no such file") from exc
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        if isinstance(exc, ImageFormatError):
            raise
        raise ImageReadError(f"{path}: cannot decode image ({exc})") from exc
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    if target_size is not None:
        arr = resize_bilinear(arr, target_size)
    return arr


def save_png(img: np.ndarray, path) -> Path:
    """Write ``img`` losslessly. Any suffix other than ``.png`` is refused."""
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise ImageFormatError(f"{path}: stego and recovered images must be written as PNG; lossy "
                               f"formats such as JPEG destroy the hidden payload")
    check_image(img)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img, mode="RGB").save(path, format="PNG")
    return path


def to_tensor(*images: np.ndarray) -> Tensor:
    """Stack images into an ``(N, 3, H, W)`` float tensor scaled to [0, 1]."""
    batch = np.stack([check_image(im) for im in images]).astype(np.float32) / np.float32(255)
    return Tensor(batch.transpose(0, 3, 1, 2))


def from_tensor(t, index: Optional[int] = 0) -> np.ndarray:
    """Clamp to [0, 1], scale by 255 and round half-to-even.

    Returns one ``(H, W, 3)`` image, or the whole ``(N, H, W, 3)`` batch when
    ``index`` is None.
    """
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.ndim != 4 or data.shape[1] != 3:
        raise ValueError(f"from_tensor expects an (N, 3, H, W) tensor, got shape {data.shape}")
    data = np.clip(data.astype(np.float64), 0.0, 1.0) * 255.0
    out = np.rint(data).astype(np.uint8).transpose(0, 2, 3, 1)
    out = np.ascontiguousarray(out)
    return out if index is None else out[index]


def concat_pair(carrier: Tensor, secret: Tensor) -> Tensor:
    """Carrier in channels 0-2, secret in 3-5."""
    if carrier.shape != secret.shape:
        raise ValueError(f"carrier shape {carrier.shape} does not match secret shape {secret.shape}")
    if carrier.data.ndim != 4 or carrier.shape[1] != 3:
        raise ValueError(f"carrier/secret must be (N, 3, H, W), got {carrier.shape}")
    return concat_channels(carrier, secret)


def residual_image(a: np.ndarray, b: np.ndarray, gain: int = 1) -> np.ndarray:
    check_image(a, "first image")
    check_image(b, "second image")
    if a.shape != b.shape:
        raise ValueError(f"residual_image: dimension mismatch {a.shape} vs {b.shape}")
    if gain < 1:
        raise ValueError(f"gain must be >= 1, got {gain}")
    diff = np.abs(a.astype(np.int64) - b.astype(np.int64)) * int(gain)
    return np.clip(diff, 0, 255).astype(np.uint8)


# -- manifests and pairing ---------------------------------------------------


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation with no fixed points (rejection sampling)."""
    if n < 2:
        raise ValueError("a derangement needs at least two elements")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


@dataclass
class DatasetManifest:
    pairs: list = field(default_factory=list)
    split: str = "train"
    size: Optional[int] = None
    root: Path = field(default_factory=Path)
    allow_self: bool = False

    def __post_init__(self):
        self.pairs = [(str(c), str(s)) for c, s in self.pairs]
        if self.split not in ("train", "test"):
            raise ValueError(f"manifest split must be 'train' or 'test', got {self.split!r}")
        if not self.allow_self:
            for c, s in self.pairs:
                if c == s:
                    raise ValueError(f"manifest pairs {c} with itself; set allow_self for self-hiding")

    def __len__(self) -> int:
        return len(self.pairs)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.root / path

    def to_dict(self) -> dict:
        doc = {"split": self.split, "size": self.size,
               "pairs": [{"carrier": c, "secret": s} for c, s in self.pairs]}
        if self.allow_self:
            doc["allow_self"] = True
        return doc

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"manifest not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: manifest is not valid JSON ({exc})") from exc
        try:
            pairs = [(p["carrier"], p["secret"]) for p in doc["pairs"]]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{path}: manifest needs a 'pairs' list of {{carrier, secret}} objects") from exc
        return cls(pairs=pairs, split=doc.get("split", "train"), size=doc.get("size"),
                   root=path.parent, allow_self=bool(doc.get("allow_self", False)))


def build_manifest(paths: Sequence, seed: int = 0, split: str = "train", size: Optional[int] = None,
                   disjoint: bool = True, root=None) -> DatasetManifest:
    """Pair images either from disjoint halves or by a derangement of the whole list."""
    paths = [str(p) for p in paths]
    rng = np.random.default_rng(seed)
    if disjoint:
        if len(paths) < 2:
            raise ValueError("disjoint pairing needs at least two images")
        half = len(paths) // 2
        carriers, secrets = paths[:half], paths[half:2 * half]
        order = rng.permutation(half)
        pairs = [(carriers[i], secrets[order[i]]) for i in range(half)]
    else:
        perm = derangement(len(paths), rng)
        pairs = [(paths[i], paths[perm[i]]) for i in range(len(paths))]
    return DatasetManifest(pairs=pairs, split=split, size=size, root=Path(root) if root else Path())


def epoch_pairs(pairs: Sequence[tuple], rng: np.random.Generator, allow_self: bool = False) -> list:
    """Re-pair secrets with carriers by a derangement of the secret column."""
    n = len(pairs)
    if n < 2:
        return list(pairs)
    carriers = [c for c, _ in pairs]
    secrets = [s for _, s in pairs]
    for _ in range(1000):
        perm = derangement(n, rng)
        out = [(carriers[i], secrets[perm[i]]) for i in range(n)]
        if allow_self or all(c != s for c, s in out):
            return out
    return list(pairs)


class ImageCache:
    """Decode-once store of manifest images at a fixed size."""

    def __init__(self, manifest: DatasetManifest, size: int):
        self.manifest = manifest
        self.size = size
        self._images: dict[str, np.ndarray] = {}
        self.failed: set[str] = set()

    def get(self, p: str) -> Optional[np.ndarray]:
        if p in self.failed:
            return None
        if p not in self._images:
            try:
                self._images[p] = load_image(self.manifest.resolve(p), self.size)
            except (ImageReadError, ImageFormatError) as exc:
                log.warning("skipping unreadable image: %s", exc)
                self.failed.add(p)
                return None
        return self._images[p]

    def usable(self, pairs: Iterable[tuple]) -> list:
        out = []
        for c, s in pairs:
            ci, si = self.get(c), self.get(s)
            if ci is not None and si is not None:
                out.append((ci, si))
        return out


def list_images(directory) -> list[Path]:
    exts = {".png", ".jpg", ".jpeg"}
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in exts)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
