"""Image ingestion, patching, train/test manifests and synthetic instances.

Manifests are tab-separated text. The first line is a header carrying the
patch geometry and seed; each following line is one patch::

    # deepinverse-manifest v1 patch_h=32 patch_w=32 stride=32 seed=0 split_fraction=0.7
    train	/abs/path/camera.pgm	0	0
    test	/abs/path/coins.pgm	32	64

Splits are assigned per source image, so no image feeds both splits.
"""

import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError

IMAGE_SUFFIXES = (".pgm", ".png")
_MANIFEST_TAG = "deepinverse-manifest v1"


def bundled_corpus():
    """Directory of the small grayscale corpus shipped with the package."""
    return Path(str(resources.files("deepinverse") / "data" / "corpus"))


def _skip_ws_and_comments(raw, pos, path):
    while pos < len(raw):
        ch = raw[pos:pos + 1]
        if ch == b"#":
            end = raw.find(b"\n", pos)
            pos = len(raw) if end < 0 else end + 1
        elif ch.isspace():
            pos += 1
        else:
            return pos
    raise FormatError("unexpected end of PGM header", path, pos)


def _read_token(raw, pos, path):
    pos = _skip_ws_and_comments(raw, pos, path)
    start = pos
    while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
        pos += 1
    token = raw[start:pos]
    if not token.isdigit():
        raise FormatError(f"expected an integer, found {token[:16]!r}", path, start)
    return int(token), pos


def read_pgm(path):
    """Decode a binary (P5) PGM into an integer array and its maxval."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] != b"P5":
        raise FormatError("not a binary PGM (missing P5 magic)", path, 0)
    pos = 2
    width, pos = _read_token(raw, pos, path)
    height, pos = _read_token(raw, pos, path)
    maxval, pos = _read_token(raw, pos, path)
    if not 0 < maxval < 65536:
        raise FormatError(f"invalid maxval {maxval}", path, pos)
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError("missing whitespace before raster", path, pos)
    pos += 1
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    size = width * height * dtype.itemsize
    if len(raw) - pos < size:
        raise FormatError(
            f"raster truncated: {len(raw) - pos} of {size} bytes", path, len(raw)
        )
    pixels = np.frombuffer(raw, dtype=dtype, count=width * height, offset=pos)
    return pixels.reshape(height, width).astype(np.int64), maxval


def to_8bit(image):
    """Clip to ``[0, 1]`` and round ``v * 255`` to the nearest integer."""
    return np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, image):
    """Write a ``[0, 1]`` image as 8-bit P5 (see :func:`to_8bit`)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DomainError(f"PGM holds a single 2-D channel, got shape {image.shape}")
    pixels = to_8bit(image)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(pixels.tobytes())


def load_grayscale(path):
    """Load a PGM or PNG as a float64 image in ``[0, 1]``.

    8-bit values map to ``v / 255`` exactly; PGMs with larger maxval are
    scaled by their maxval. Color PNGs are converted to luminance.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        pixels, maxval = read_pgm(path)
        return pixels / float(maxval)
    if suffix == ".png":
        try:
            from PIL import Image, UnidentifiedImageError
        except ImportError:  # pragma: no cover - Pillow is an optional dependency
            raise FormatError("PNG support needs Pillow installed", path) from None
        try:
            with Image.open(path) as img:
                img = img.convert("L")
                pixels = np.asarray(img, dtype=np.float64)
        except (UnidentifiedImageError, OSError, SyntaxError) as exc:
            raise FormatError(f"corrupt PNG ({exc})", path) from None
        return pixels / 255.0
    raise FormatError(f"unsupported image format {suffix or '(none)'!r}", path)


def crop_patches(image, patch_h, patch_w, stride=None):
    """Row-major grid of patches; partial border patches are dropped."""
    image = np.asarray(image)
    stride = stride or patch_h
    h, w = image.shape
    patches = []
    for r in range(0, h - patch_h + 1, stride):
        for c in range(0, w - patch_w + 1, stride):
            patches.append(image[r:r + patch_h, c:c + patch_w].copy())
    return patches


def patch_origins(shape, patch_h, patch_w, stride):
    h, w = shape
    return [(r, c) for r in range(0, h - patch_h + 1, stride)
            for c in range(0, w - patch_w + 1, stride)]


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic oracle image.

    ``kind`` is ``"dct-sparse"`` (``k`` nonzero DCT coefficients) or
    ``"piecewise-constant"`` (``regions`` constant rectangles, the first
    covering the whole frame).
    """

    n1: int
    n2: int
    kind: str = "dct-sparse"
    k: int = 8
    regions: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("dct-sparse", "piecewise-constant"):
            raise DomainError(f"unknown synthetic kind {self.kind!r}")
        if self.kind == "dct-sparse" and not 0 <= self.k < self.n1 * self.n2:
            raise DomainError(f"need 0 <= k < {self.n1 * self.n2}, got k={self.k}")
        if self.kind == "piecewise-constant" and self.regions < 1:
            raise DomainError("need at least one region")


def make_synthetic(spec, rescale=True):
    """Generate the image described by ``spec``.

    For ``dct-sparse`` the coefficients are uniform in ``[-1, 1]`` at ``k``
    uniformly chosen positions; with ``rescale`` the inverse transform is
    min-max mapped to ``[0, 1]`` (which adds a DC offset), otherwise the
    exactly ``k``-sparse signal is returned.
    """
    from .baselines import idct2

    rng = np.random.Generator(np.random.PCG64(int(spec.seed)))
    n1, n2 = spec.n1, spec.n2
    if spec.kind == "dct-sparse":
        coeffs = np.zeros(n1 * n2)
        where = rng.choice(n1 * n2, size=spec.k, replace=False)
        coeffs[where] = rng.uniform(-1.0, 1.0, size=spec.k)
        image = idct2(coeffs.reshape(n1, n2))
        if rescale:
            lo, hi = image.min(), image.max()
            image = (image - lo) / (hi - lo) if hi > lo else np.zeros_like(image)
        return image
    image = np.full((n1, n2), rng.uniform())
    for _ in range(spec.regions - 1):
        rh = int(rng.integers(max(1, n1 // 4), max(2, 3 * n1 // 4) + 1))
        rw = int(rng.integers(max(1, n2 // 4), max(2, 3 * n2 // 4) + 1))
        r0 = int(rng.integers(0, n1 - rh + 1))
        c0 = int(rng.integers(0, n2 - rw + 1))
        image[r0:r0 + rh, c0:c0 + rw] = rng.uniform()
    return image


@dataclass(frozen=True)
class ManifestEntry:
    split: str
    path: str
    row: int
    col: int


@dataclass(frozen=True)
class CorpusManifest:
    entries: tuple
    patch_h: int
    patch_w: int
    stride: int
    seed: int
    split_fraction: float

    def sources(self, split):
        return sorted({e.path for e in self.entries if e.split == split})

    def header(self):
        return (f"# {_MANIFEST_TAG} patch_h={self.patch_h} patch_w={self.patch_w} "
                f"stride={self.stride} seed={self.seed} split_fraction={self.split_fraction!r}")

    def write(self, path):
        with open(path, "w", newline="\n") as fh:
            fh.write(self.header() + "\n")
            for e in self.entries:
                fh.write(f"{e.split}\t{e.path}\t{e.row}\t{e.col}\n")

    def load_patches(self, split, limit=None):
        """Stack the patches of one split as an ``(l, patch_h, patch_w)`` array."""
        cache = {}
        out = []
        for e in self.entries:
            if e.split != split:
                continue
            if e.path not in cache:
                cache[e.path] = load_grayscale(e.path)
            img = cache[e.path]
            out.append(img[e.row:e.row + self.patch_h, e.col:e.col + self.patch_w])
            if limit is not None and len(out) >= limit:
                break
        if not out:
            return np.zeros((0, self.patch_h, self.patch_w))
        return np.stack(out)


def read_manifest(path):
    with open(path, "r") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(f"# {_MANIFEST_TAG}"):
        raise FormatError("missing manifest header", path, 0)
    fields = dict(item.split("=", 1) for item in lines[0].split()[3:])
    try:
        geometry = dict(
            patch_h=int(fields["patch_h"]), patch_w=int(fields["patch_w"]),
            stride=int(fields["stride"]), seed=int(fields["seed"]),
            split_fraction=float(fields["split_fraction"]),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed manifest header ({exc})", path, 0) from None
    entries = []
    offset = len(lines[0]) + 1
    for line in lines[1:]:
        parts = line.split("\t")
        if len(parts) != 4 or parts[0] not in ("train", "test"):
            raise FormatError(f"malformed manifest record {line!r}", path, offset)
        entries.append(ManifestEntry(parts[0], parts[1], int(parts[2]), int(parts[3])))
        offset += len(line) + 1
    return CorpusManifest(tuple(entries), **geometry)


def list_images(source_dir):
    source_dir = Path(source_dir)
    if not source_dir.is_dir():
        raise DomainError(f"{source_dir} is not a directory")
    return sorted(p for p in source_dir.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def build_manifest(source_dir, patch_h=32, patch_w=None, stride=None,
                   split_fraction=0.7, seed=0):
    """Shuffle source images by seed, split them, then enumerate patches.

    ``split_fraction`` is the share of *source images* assigned to training;
    both splits always receive at least one image.
    """
    patch_w = patch_w or patch_h
    stride = stride or patch_h
    paths = list_images(source_dir)
    if len(paths) < 2:
        raise DomainError(
            f"found {len(paths)} readable image(s) in {source_dir}; "
            "cannot form both splits (need at least 2)"
        )
    if not 0 < split_fraction < 1:
        raise DomainError(f"split_fraction must lie in (0, 1), got {split_fraction}")
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    order = rng.permutation(len(paths))
    n_train = min(max(int(round(split_fraction * len(paths))), 1), len(paths) - 1)
    entries = []
    for rank, idx in enumerate(order):
        path = Path(os.path.abspath(paths[idx]))
        split = "train" if rank < n_train else "test"
        shape = load_grayscale(path).shape
        for r, c in patch_origins(shape, patch_h, patch_w, stride):
            entries.append(ManifestEntry(split, str(path), r, c))
    return CorpusManifest(tuple(entries), patch_h, patch_w, stride, int(seed), float(split_fraction))


def total_variation(image):
    """Anisotropic total variation (sum of absolute forward differences)."""
    image = np.asarray(image, dtype=np.float64)
    return float(np.abs(np.diff(image, axis=0)).sum() + np.abs(np.diff(image, axis=1)).sum())


def synthetic_stack(count, n1, n2=None, kind="dct-sparse", k=8, regions=2, seed=0, rescale=True):
    """``count`` synthetic images with per-image seeds derived from ``seed``."""
    n2 = n2 or n1
    seeds = np.random.SeedSequence(int(seed)).generate_state(count, dtype=np.uint64)
    return np.stack([
        make_synthetic(SyntheticSpec(n1, n2, kind, k, regions, int(s)), rescale=rescale)
        for s in seeds
    ])

