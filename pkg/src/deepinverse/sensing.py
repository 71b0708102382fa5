"""Measurement ensembles, the forward map ``y = Phi x`` and its adjoint.

One dense ``m x n`` matrix senses the whole image; nothing here builds
block-diagonal operators.

Ensemble files (``.dics``) are a fixed little-endian header followed by the
row-major float64 entries::

    magic      4s   b"DICS"
    version    u16  1
    generator  u16  generator id (see GENERATORS)
    m          u64
    n          u64
    seed       u64
    entries    m*n float64
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DomainError, FormatError

MAGIC = b"DICS"
VERSION = 1
_HEADER = struct.Struct("<4sHHQQQ")

# Algorithm identifiers stored with every ensemble so a matrix can be replayed
# bit-exactly: numpy's PCG64 bit generator seeded with the integer seed.
GENERATORS = {
    0: "custom",
    1: "pcg64-gaussian",     # N(0, 1/m) entries, standard_normal / sqrt(m)
    2: "pcg64-orthonormal",  # QR of a pcg64 Gaussian draw, orthonormal rows
}
_GENERATOR_IDS = {name: key for key, name in GENERATORS.items()}


@dataclass(frozen=True)
class MeasurementEnsemble:
    """A measurement matrix together with the recipe that produced it."""

    m: int
    n: int
    seed: int
    entries: np.ndarray = field(repr=False)
    generator: str = "custom"

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.shape != (self.m, self.n):
            raise DimensionError(
                f"entries have shape {entries.shape}, expected ({self.m}, {self.n})"
            )
        if self.generator not in _GENERATOR_IDS:
            raise DomainError(f"unknown generator {self.generator!r}")
        entries = entries.copy()
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def ratio(self):
        return self.m / self.n

    def key(self):
        """Hashable identity used to cache per-matrix precomputations."""
        return (self.m, self.n, self.seed, self.generator)


def _check_sizes(m, n):
    if m < 1 or n < 1:
        raise DomainError(f"need m >= 1 and n >= 1, got m={m}, n={n}")
    if m > n:
        raise DomainError(f"undersampled regime requires m <= n, got m={m} > n={n}")


def gen_ensemble(m, n, seed, kind="gaussian"):
    """Draw a seeded ``m x n`` measurement matrix.

    ``kind="gaussian"`` gives i.i.d. N(0, 1/m) entries, so columns have unit
    expected squared norm. ``kind="orthonormal"`` gives a matrix with
    orthonormal rows (a debugging aid: with ``m == n`` its adjoint is its
    inverse).
    """
    m, n, seed = int(m), int(n), int(seed)
    _check_sizes(m, n)
    rng = np.random.Generator(np.random.PCG64(seed))
    if kind == "gaussian":
        entries = rng.standard_normal((m, n)) / math.sqrt(m)
        generator = "pcg64-gaussian"
    elif kind == "orthonormal":
        q, r = np.linalg.qr(rng.standard_normal((n, m)))
        # Sign fix makes the factorization unique, hence reproducible.
        entries = (q * np.sign(np.diag(r))).T
        generator = "pcg64-orthonormal"
    else:
        raise DomainError(f"unknown ensemble kind {kind!r}")
    return MeasurementEnsemble(m, n, seed, entries, generator)


def measurements_for_ratio(ratio, n):
    """Number of measurements used for an undersampling ratio ``m/n``."""
    if not 0 < ratio <= 1:
        raise DomainError(f"ratio must lie in (0, 1], got {ratio}")
    return max(1, int(round(ratio * n)))


def measure(phi, x):
    """``y = Phi x`` with ``x`` flattened row-major."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != phi.n:
        raise DimensionError(f"signal has {x.size} pixels, ensemble expects {phi.n}")
    return phi.entries @ x


def _image_shape(n, shape):
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if math.prod(shape) != n:
            raise DimensionError(f"shape {shape} does not hold {n} pixels")
        return shape
    side = math.isqrt(n)
    if side * side != n:
        raise DimensionError(f"n={n} is not square; pass an explicit image shape")
    return (side, side)


def proxy(phi, y, shape=None):
    """Adjoint back-projection ``Phi^T y`` reshaped to an image.

    ``shape`` defaults to the square image holding ``n`` pixels.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size != phi.m:
        raise DimensionError(f"got {y.size} measurements, ensemble has m={phi.m}")
    return (y @ phi.entries).reshape(_image_shape(phi.n, shape))


def add_noise(y, snr_db, seed):
    """Add white Gaussian noise at a target measurement SNR.

    The noise variance is chosen so that ``10 log10(||y||^2 / E||w||^2)``
    equals ``snr_db``. ``snr_db = inf`` returns an unchanged copy.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if math.isinf(snr_db) and snr_db > 0:
        return y.copy()
    energy = float(y @ y)
    if energy == 0.0:
        raise DomainError("cannot set an SNR relative to an all-zero measurement")
    sigma = math.sqrt(energy / (y.size * 10.0 ** (snr_db / 10.0)))
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    return y + sigma * rng.standard_normal(y.size)


def save_ensemble(phi, path):
    header = _HEADER.pack(MAGIC, VERSION, _GENERATOR_IDS[phi.generator], phi.m, phi.n, phi.seed)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(phi.entries, dtype="<f8").tobytes())


def load_ensemble(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError("truncated ensemble header", path, len(raw))
    magic, version, gen_id, m, n, seed = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", path, 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", path, 4)
    if gen_id not in GENERATORS:
        raise FormatError(f"unknown generator id {gen_id}", path, 6)
    expected = _HEADER.size + 8 * m * n
    if len(raw) != expected:
        raise FormatError(
            f"payload holds {len(raw) - _HEADER.size} bytes, expected {8 * m * n}",
            path, min(len(raw), expected),
        )
    entries = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(m, n)
    return MeasurementEnsemble(m, n, seed, entries, GENERATORS[gen_id])
