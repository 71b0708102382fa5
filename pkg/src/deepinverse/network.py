"""The learned inverse map: fixed adjoint lifting followed by conv layers.

Each layer computes ``crop(relu(conv_full(x, W) + b))`` where ``b`` is a
bias *map* of the full convolution size and the crop restores the input
size, so every feature map stays ``n1 x n2``. The lifting ``Phi^T y`` has no
trainable weights.

Weight files (``.dinw``) are little-endian::

    magic        4s   b"DINW"
    version      u16  1
    bias_mode    u16  0 = full bias map, 1 = one scalar per filter
    layer_count  u32
    input_h      u32
    input_w      u32
    per layer    6 x u32: out_ch, in_ch, k1, k2, bias_h, bias_w
    payload      float64 filters then bias, layer by layer
"""

import csv
import logging
import math
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics
from .errors import DimensionError, DivergenceError, DomainError, FormatError, ShapeMismatchError
from .metrics import psnr

log = logging.getLogger(__name__)

MAGIC = b"DINW"
VERSION = 1
_HEAD = struct.Struct("<4sHHIII")
_LAYER = struct.Struct("<6I")


@dataclass(frozen=True)
class Architecture:
    """Layer widths, kernel sizes and the image size the biases are built for."""

    filters: tuple = (8, 4, 1)
    kernel: tuple = (7, 7)
    input_h: int = 32
    input_w: int = 32
    scalar_bias: bool = False

    def __post_init__(self):
        filters = tuple(int(f) for f in self.filters)
        kernel = self.kernel
        if isinstance(kernel, int):
            kernel = (kernel, kernel)
        kernel = tuple(int(k) for k in kernel)
        object.__setattr__(self, "filters", filters)
        object.__setattr__(self, "kernel", kernel)
        if not filters or min(filters) < 1:
            raise DimensionError(f"filter counts must be positive, got {filters}")
        if filters[-1] != 1:
            raise DimensionError(f"last layer must have exactly 1 filter, got {filters[-1]}")
        if len(kernel) != 2 or min(kernel) < 1 or kernel[0] % 2 == 0 or kernel[1] % 2 == 0:
            raise DimensionError(f"kernel sides must be odd and >= 1, got {kernel}")

    def layer_shapes(self):
        """``(filter_shape, bias_shape)`` for every layer, in order."""
        k1, k2 = self.kernel
        shapes = []
        in_ch = 1
        for out_ch in self.filters:
            if self.scalar_bias:
                bias = (out_ch, 1, 1)
            else:
                bias = (out_ch, self.input_h + k1 - 1, self.input_w + k2 - 1)
            shapes.append(((out_ch, in_ch, k1, k2), bias))
            in_ch = out_ch
        return shapes


DESK = Architecture()
PAPER = Architecture(filters=(64, 32, 1), kernel=(11, 11), input_h=64, input_w=64)
PRESETS = {"desk": DESK, "paper": PAPER}


@dataclass
class LayerParams:
    filters: np.ndarray
    bias: np.ndarray

    def copy(self):
        return LayerParams(self.filters.copy(), self.bias.copy())


@dataclass
class NetworkParams:
    """Trainable parameters of every convolutional layer."""

    layers: list
    input_h: int
    input_w: int

    def __post_init__(self):
        in_ch = 1
        for idx, layer in enumerate(self.layers, start=1):
            o, c, k1, k2 = layer.filters.shape
            if c != in_ch:
                raise DimensionError(
                    f"layer{idx}: expects {c} input channels, previous layer gives {in_ch}"
                )
            full = (o, self.input_h + k1 - 1, self.input_w + k2 - 1)
            if layer.bias.shape not in (full, (o, 1, 1)):
                raise DimensionError(
                    f"layer{idx}: bias shape {layer.bias.shape}, expected {full} or {(o, 1, 1)}"
                )
            in_ch = o
        if in_ch != 1:
            raise DimensionError(f"last layer must output 1 channel, got {in_ch}")

    @property
    def layer1(self):
        return self.layers[0]

    @property
    def layer2(self):
        return self.layers[1]

    @property
    def layer3(self):
        return self.layers[2]

    @property
    def scalar_bias(self):
        return self.layers[0].bias.shape[1:] == (1, 1)

    def architecture(self):
        return Architecture(
            filters=tuple(layer.filters.shape[0] for layer in self.layers),
            kernel=self.layers[0].filters.shape[2:],
            input_h=self.input_h,
            input_w=self.input_w,
            scalar_bias=self.scalar_bias,
        )

    def arrays(self):
        """All parameter arrays in storage order (filters, bias per layer)."""
        out = []
        for layer in self.layers:
            out.extend((layer.filters, layer.bias))
        return out

    def copy(self):
        return NetworkParams([layer.copy() for layer in self.layers], self.input_h, self.input_w)

    def to_vector(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_vector(self, vec):
        """New parameters with the same shapes, filled from a flat vector."""
        vec = np.asarray(vec, dtype=np.float64)
        layers, pos = [], 0
        for layer in self.layers:
            parts = []
            for a in (layer.filters, layer.bias):
                parts.append(vec[pos:pos + a.size].reshape(a.shape).copy())
                pos += a.size
            layers.append(LayerParams(*parts))
        if pos != vec.size:
            raise DimensionError(f"vector has {vec.size} entries, parameters need {pos}")
        return NetworkParams(layers, self.input_h, self.input_w)

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    eval_every: int = 100

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise DomainError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise DomainError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            raise DomainError("batch_size and eval_every must be >= 1, epochs >= 0")


@dataclass
class TrainingLog:
    """Per-iteration training loss and periodic test-set PSNR."""

    train_mse: list = field(default_factory=list)
    test_psnr: dict = field(default_factory=dict)
    elapsed_s: float = 0.0

    def rows(self):
        for it, loss in enumerate(self.train_mse):
            yield it, loss, self.test_psnr.get(it)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iteration", "train_mse", "test_psnr_db"])
            for it, loss, score in self.rows():
                writer.writerow([it, repr(float(loss)), "" if score is None else repr(float(score))])


def init_params(arch=DESK, seed=0):
    """Glorot-uniform filters and zero biases, deterministic per seed."""
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    layers = []
    for fshape, bshape in arch.layer_shapes():
        o, c, k1, k2 = fshape
        limit = math.sqrt(6.0 / (c * k1 * k2 + o * k1 * k2))
        layers.append(LayerParams(rng.uniform(-limit, limit, fshape), np.zeros(bshape)))
    return NetworkParams(layers, arch.input_h, arch.input_w)


def _bias_window(bias, h, w):
    if bias.shape[-2:] == (1, 1):
        return bias
    return numerics.crop_to(bias, h, w)


def layer_forward(x, layer):
    """One layer on a ``(C, H, W)`` map or ``(B, C, H, W)`` batch.

    Computes ``crop(relu(conv_full(x) + b))``. Because the crop commutes
    with the elementwise bias and ReLU, only the centered window of the full
    convolution is evaluated.
    """
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    pre = numerics.conv2d_same(x, layer.filters) + _bias_window(layer.bias, h, w)
    return numerics.relu(pre)


def _check_input(omega, h, w):
    if (h, w) != (omega.input_h, omega.input_w):
        raise DimensionError(
            f"layer1: parameters are built for {omega.input_h}x{omega.input_w} inputs, "
            f"got {h}x{w}"
        )


def _proxies(ys, phi, omega):
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    if ys.shape[1] != phi.m:
        raise DimensionError(f"got {ys.shape[1]} measurements, ensemble has m={phi.m}")
    if phi.n != omega.input_h * omega.input_w:
        raise DimensionError(
            f"layer1: ensemble senses n={phi.n} pixels, parameters expect "
            f"{omega.input_h}x{omega.input_w}"
        )
    return (ys @ phi.entries).reshape(-1, 1, omega.input_h, omega.input_w)


def apply_layers(x, omega):
    """Run every layer on a single-channel ``(B, 1, H, W)`` batch of proxies."""
    _check_input(omega, *np.shape(x)[-2:])
    for layer in omega.layers:
        x = layer_forward(x, layer)
    return x


def forward(y, phi, omega):
    """Estimate ``x_hat = M(y, omega)`` for one measurement vector."""
    return forward_batch(np.reshape(y, (1, -1)), phi, omega)[0]


def forward_batch(ys, phi, omega):
    """Estimates for a ``(B, m)`` stack of measurement vectors, ``(B, H, W)``."""
    return apply_layers(_proxies(ys, phi, omega), omega)[:, 0]


def _as_arrays(batch):
    if isinstance(batch, tuple) and len(batch) == 2 and np.ndim(batch[0]) == 2:
        ys, xs = batch
    else:
        batch = list(batch)
        if not batch:
            raise DomainError("loss needs a nonempty batch")
        ys = np.stack([np.ravel(y) for y, _ in batch])
        xs = np.stack([np.asarray(x) for _, x in batch])
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    if len(ys) == 0:
        raise DomainError("loss needs a nonempty batch")
    return ys, xs


def loss(batch, phi, omega):
    """Mean over the batch of ``||M(y, omega) - x||^2``.

    ``batch`` is a sequence of ``(y, x)`` pairs or a ``(ys, xs)`` tuple of
    stacked arrays.
    """
    ys, xs = _as_arrays(batch)
    est = forward_batch(ys, phi, omega)
    return float(np.sum((est - xs.reshape(est.shape)) ** 2) / len(ys))


def loss_and_grad(batch, phi, omega):
    """Loss and its exact gradient with respect to every filter and bias."""
    ys, xs = _as_arrays(batch)
    x = _proxies(ys, phi, omega)
    _check_input(omega, *x.shape[-2:])
    h, w = x.shape[-2:]
    inputs, pres = [], []
    for layer in omega.layers:
        inputs.append(x)
        pre = numerics.conv2d_same(x, layer.filters) + _bias_window(layer.bias, h, w)
        pres.append(pre)
        x = numerics.relu(pre)
    batch_size = len(ys)
    residual = x - xs.reshape(x.shape)
    value = float(np.sum(residual ** 2) / batch_size)

    grads = [None] * len(omega.layers)
    g = 2.0 * residual / batch_size
    for idx in reversed(range(len(omega.layers))):
        layer = omega.layers[idx]
        g_pre = g * (pres[idx] > 0)
        if layer.bias.shape[-2:] == (1, 1):
            g_bias = g_pre.sum(axis=(0, 2, 3)).reshape(layer.bias.shape)
        else:
            g_bias = np.zeros_like(layer.bias)
            numerics.crop_to(g_bias, h, w)[...] = g_pre.sum(axis=0)
        g_x, g_w = numerics.conv2d_same_backward(inputs[idx], layer.filters, g_pre)
        grads[idx] = LayerParams(g_w, g_bias)
        g = g_x
    return value, NetworkParams(grads, omega.input_h, omega.input_w)


def backward(batch, phi, omega):
    """Gradient of :func:`loss`, shaped like ``omega``."""
    return loss_and_grad(batch, phi, omega)[1]


def mean_psnr(images, phi, omega, ys=None, chunk=64):
    """Average PSNR of the network's estimates over a stack of images."""
    images = np.asarray(images, dtype=np.float64)
    if ys is None:
        ys = images.reshape(len(images), -1) @ phi.entries.T
    scores = []
    for start in range(0, len(images), chunk):
        est = forward_batch(ys[start:start + chunk], phi, omega)
        scores.extend(psnr(e, t) for e, t in zip(est, images[start:start + chunk]))
    return float(np.mean(scores))


def train(images, phi, config, params=None, arch=DESK, test_images=None,
          checkpoint=None, checkpoint_every=0):
    """Fit the network by mini-batch SGD with momentum.

    Training pairs ``(Phi x, x)`` are formed from ``images`` (an ``(l, H, W)``
    stack) against the fixed ensemble ``phi``. Each epoch visits a fresh
    seeded permutation in batches of ``config.batch_size``; the last batch of
    an epoch may be smaller. When ``test_images`` is given, the mean test PSNR
    is logged every ``config.eval_every`` iterations and after the last one.

    ``checkpoint(params, iteration)`` is called every ``checkpoint_every``
    iterations. A non-finite loss or gradient raises
    :class:`~deepinverse.errors.DivergenceError` holding the last finite
    parameters.

    Returns ``(params, TrainingLog)``.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or len(images) == 0:
        raise DomainError("training needs a nonempty (l, H, W) stack of images")
    omega = init_params(arch, config.seed) if params is None else params.copy()
    _check_input(omega, *images.shape[1:])
    xs = images
    ys = xs.reshape(len(xs), -1) @ phi.entries.T
    test_ys = None
    if test_images is not None:
        test_images = np.asarray(test_images, dtype=np.float64)
        test_ys = test_images.reshape(len(test_images), -1) @ phi.entries.T

    rng = np.random.Generator(np.random.PCG64(int(config.seed) + 1))
    velocity = [np.zeros_like(a) for a in omega.arrays()]
    train_log = TrainingLog()
    start = time.perf_counter()
    it = 0
    n_batches = math.ceil(len(xs) / config.batch_size)
    total = config.epochs * n_batches
    for epoch in range(config.epochs):
        order = rng.permutation(len(xs))
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            # Overflow is caught just below as a non-finite loss or gradient.
            with np.errstate(over="ignore", invalid="ignore"):
                value, grads = loss_and_grad((ys[idx], xs[idx]), phi, omega)
            if not math.isfinite(value) or not grads.all_finite():
                train_log.elapsed_s = time.perf_counter() - start
                raise DivergenceError(
                    f"non-finite loss at iteration {it} (epoch {epoch}); "
                    f"learning rate {config.learning_rate} is likely too large",
                    params=omega, log=train_log,
                )
            train_log.train_mse.append(value)
            if test_ys is not None and (it % config.eval_every == 0 or it == total - 1):
                train_log.test_psnr[it] = mean_psnr(test_images, phi, omega, test_ys)
            if config.learning_rate > 0:
                updated = []
                for v, p, g in zip(velocity, omega.arrays(), grads.arrays()):
                    v *= config.momentum
                    v -= config.learning_rate * g
                    updated.append(p + v)
                omega = _rebuild(omega, updated)
            it += 1
            if checkpoint is not None and checkpoint_every and it % checkpoint_every == 0:
                checkpoint(omega, it)
        log.debug("epoch %d done, last loss %.6g", epoch, train_log.train_mse[-1])
    train_log.elapsed_s = time.perf_counter() - start
    return omega, train_log


def _rebuild(omega, arrays):
    layers = [LayerParams(arrays[2 * i], arrays[2 * i + 1]) for i in range(len(omega.layers))]
    return NetworkParams(layers, omega.input_h, omega.input_w)


class InferenceNet:
    """Forward pass specialised to one ensemble and one parameter set.

    Filters are flipped, cast and laid out once, each layer writes its
    activations straight into the padded input buffer of the next, and only
    the centered output window of each layer is computed. ``dtype=np.float32``
    is the fast path; results are returned as float64 images. The work
    buffers are reused, so an instance must not be shared between threads.
    """

    def __init__(self, omega, phi, dtype=np.float32):
        _proxies(np.zeros((1, phi.m)), phi, omega)
        self.shape = h, w = (omega.input_h, omega.input_w)
        self.dtype = np.dtype(dtype)
        self._phi = np.ascontiguousarray(phi.entries, dtype=self.dtype)
        self._plans, self._biases = [], []
        for layer in omega.layers:
            k1, k2 = layer.filters.shape[2:]
            wf = layer.filters[:, :, ::-1, ::-1]
            plan = numerics.PlannedCorrelation(wf, h, w, ((k1 - 1) // 2, (k2 - 1) // 2),
                                               self.dtype)
            # Bias laid out like plan.raw so it is added in one contiguous pass.
            bias = np.zeros(plan.raw.shape, dtype=self.dtype)
            bias[:, :, :w] = _bias_window(layer.bias, h, w)
            self._plans.append(plan)
            self._biases.append(bias)
        self._proxy = np.empty(h * w, dtype=self.dtype)
        self._result = np.empty((1, h, w), dtype=self.dtype)
        dests = [p.interior for p in self._plans[1:]] + [self._result]
        self._steps = [(p, p.raw, b, p.output, d)
                       for p, b, d in zip(self._plans, self._biases, dests)]

    def __call__(self, y):
        y = np.asarray(y, dtype=self.dtype).reshape(-1)
        np.matmul(y, self._phi, out=self._proxy)
        self._plans[0].interior[0] = self._proxy.reshape(self.shape)
        for plan, raw, bias, output, dest in self._steps:
            plan()
            np.add(raw, bias, out=raw)
            np.maximum(output, 0, out=dest)
        return self._result[0].astype(np.float64)


def save_params(omega, path):
    """Write parameters in the ``.dinw`` format."""
    parts = [_HEAD.pack(MAGIC, VERSION, int(omega.scalar_bias), len(omega.layers),
                        omega.input_h, omega.input_w)]
    for layer in omega.layers:
        parts.append(_LAYER.pack(*layer.filters.shape, *layer.bias.shape[1:]))
    for a in omega.arrays():
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_params(path, expected=None):
    """Read a ``.dinw`` file.

    With ``expected`` (an :class:`Architecture`), a file built for a
    different configuration raises :class:`ShapeMismatchError` naming the
    first layer that disagrees.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEAD.size:
        raise FormatError("truncated header", path, len(raw))
    magic, version, bias_mode, count, in_h, in_w = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", path, 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", path, 4)
    if bias_mode not in (0, 1):
        raise FormatError(f"unknown bias mode {bias_mode}", path, 6)
    if count < 1:
        raise FormatError("file declares no layers", path, 8)
    pos = _HEAD.size
    dims = []
    for i in range(count):
        if len(raw) < pos + _LAYER.size:
            raise FormatError(f"truncated dims of layer{i + 1}", path, len(raw))
        dims.append(_LAYER.unpack_from(raw, pos))
        pos += _LAYER.size

    if expected is not None:
        _check_expected(dims, in_h, in_w, bool(bias_mode), expected)

    layers = []
    for i, (o, c, k1, k2, bh, bw) in enumerate(dims):
        arrays = []
        for what, shape in (("filters", (o, c, k1, k2)), ("bias", (o, bh, bw))):
            size = 8 * math.prod(shape)
            if len(raw) < pos + size:
                raise FormatError(f"truncated {what} of layer{i + 1}", path, len(raw))
            arrays.append(np.frombuffer(raw, dtype="<f8", count=size // 8, offset=pos)
                          .reshape(shape).astype(np.float64))
            pos += size
        layers.append(LayerParams(*arrays))
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes", path, pos)
    try:
        return NetworkParams(layers, in_h, in_w)
    except DimensionError as exc:
        raise FormatError(f"inconsistent layer dims ({exc})", path) from None


def _check_expected(dims, in_h, in_w, scalar_bias, expected):
    shapes = expected.layer_shapes()
    if len(dims) != len(shapes):
        raise ShapeMismatchError(
            f"layer{min(len(dims), len(shapes)) + 1}",
            f"file has {len(dims)} layers, architecture has {len(shapes)}",
        )
    if scalar_bias != expected.scalar_bias:
        raise ShapeMismatchError("layer1", "bias mode differs (scalar vs full map)")
    for i, ((o, c, k1, k2, bh, bw), (fshape, bshape)) in enumerate(zip(dims, shapes)):
        if (o, c, k1, k2) != fshape:
            raise ShapeMismatchError(
                f"layer{i + 1}", f"filters {o}x{c}x{k1}x{k2} in file, expected "
                + "x".join(map(str, fshape))
            )
        if (o, bh, bw) != bshape:
            raise ShapeMismatchError(
                f"layer{i + 1}", f"bias {o}x{bh}x{bw} in file, expected "
                + "x".join(map(str, bshape))
            )
    if (in_h, in_w) != (expected.input_h, expected.input_w):
        raise ShapeMismatchError(
            "layer1", f"input size {in_h}x{in_w} in file, expected "
            f"{expected.input_h}x{expected.input_w}"
        )


def with_input_size(arch, h, w):
    return replace(arch, input_h=int(h), input_w=int(w))
