"""Convolution, nonlinearity and gradient-checking primitives.

Feature maps are ``(channels, height, width)`` arrays, optionally with a
leading batch axis. Filter banks are ``(out_channels, in_channels, k1, k2)``
with odd kernel sides. Convolution is true convolution (the kernel is
flipped), and the *full* output of an ``h x w`` input is
``(h + k1 - 1) x (w + k2 - 1)``.

All routines work in the dtype of their inputs (float64 unless the caller
explicitly passes float32 arrays) and never mutate their arguments.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DimensionError, DomainError, NumericError

__all__ = [
    "conv2d_full",
    "conv2d_backward",
    "conv2d_same",
    "conv2d_same_backward",
    "correlate2d",
    "PlannedCorrelation",
    "relu",
    "relu_mask",
    "crop_to",
    "zero_pad",
    "check_filters",
    "grad_check",
]


def _batched(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected (C, H, W) or (B, C, H, W), got shape {x.shape}")


def _float_dtype(*arrays):
    dt = np.result_type(*arrays)
    return dt if dt in (np.float32, np.float64) else np.float64


def check_filters(filters, in_channels=None):
    """Validate a filter bank and return it as an array."""
    w = np.asarray(filters)
    if w.ndim != 4:
        raise DimensionError(f"filters must be (O, C, k1, k2), got shape {w.shape}")
    k1, k2 = w.shape[2:]
    if k1 < 1 or k2 < 1 or k1 % 2 == 0 or k2 % 2 == 0:
        raise DimensionError(f"kernel sides must be odd and >= 1, got {k1}x{k2}")
    if in_channels is not None and w.shape[1] != in_channels:
        raise DimensionError(
            f"input has {in_channels} channels, filters expect {w.shape[1]}"
        )
    return w


def _padded_flat(x, p1, p2, dtype):
    # One spare row keeps the flattened windows of the last output row in bounds.
    b, c, h, w = x.shape
    wp = w + 2 * p2
    xp = np.zeros((b, c, h + 2 * p1 + 1, wp), dtype=dtype)
    xp[:, :, p1:p1 + h, p2:p2 + w] = x
    return xp.reshape(b, c, -1), wp


def _im2col(xf, wp, k1, k2, length):
    b, c, _ = xf.shape
    s = xf.strides
    view = as_strided(xf, (b, c, k1, k2, length), (s[0], s[1], wp * s[2], s[2], s[2]))
    return view.reshape(b, c * k1 * k2, length)


def _row_cols(xf, wp, k1, k2, length):
    # Column shifts only: (B, C*k2, length + (k1-1)*wp); row shifts become offsets.
    b, c, _ = xf.shape
    s = xf.strides
    span = length + (k1 - 1) * wp
    view = as_strided(xf, (b, c, k2, span), (s[0], s[1], s[2], s[2]))
    return np.ascontiguousarray(view).reshape(b, c * k2, span)


def _strategy(c, o, k1, k2):
    # Rough count of elements moved per output position by each layout.
    costs = {
        "im2col": c * k1 * k2,
        "rows": c * k2 + k1 * o + 4 * k1,
        "stacked": c * k2 + 2 * k1 * o + k1,
        "taps": 2 * k1 * k2 * o,
    }
    return min(costs, key=costs.get)


def _correlate(x, wf, pad):
    """Correlate a zero-padded batch with a filter bank (no kernel flip).

    ``pad = (p1, p2)`` zeros are added on each side; the output has spatial
    size ``(h + 2*p1 - k1 + 1, w + 2*p2 - k2 + 1)``.

    Four equivalent layouts are used depending on the channel counts: a full
    im2col matrix, a column-shift-only matrix with one product per kernel
    row or one product for all kernel rows followed by row-shifted sums, or
    one product for all taps followed by shifted sums.
    """
    b, c, h, w = x.shape
    o, _, k1, k2 = wf.shape
    p1, p2 = pad
    ho, wo = h + 2 * p1 - k1 + 1, w + 2 * p2 - k2 + 1
    dt = _float_dtype(x, wf)
    xf, wp = _padded_flat(x, p1, p2, dt)
    length = ho * wp
    wf = wf.astype(dt, copy=False)
    strategy = _strategy(c, o, k1, k2)
    if strategy == "im2col":
        cols = _im2col(xf, wp, k1, k2, length)
        out = np.matmul(wf.reshape(o, -1), cols)
    elif strategy == "rows":
        cols = _row_cols(xf, wp, k1, k2, length)
        wr = np.ascontiguousarray(wf.transpose(2, 0, 1, 3)).reshape(k1, o, c * k2)
        out = np.matmul(wr[0], cols[:, :, :length])
        for u in range(1, k1):
            out += np.matmul(wr[u], cols[:, :, u * wp:u * wp + length])
    elif strategy == "stacked":
        cols = _row_cols(xf, wp, k1, k2, length)
        wr = np.ascontiguousarray(wf.transpose(2, 0, 1, 3)).reshape(k1 * o, c * k2)
        big = np.matmul(wr, cols).reshape(b, k1, o, -1)
        out = big[:, 0, :, :length].copy()
        for u in range(1, k1):
            out += big[:, u, :, u * wp:u * wp + length]
    else:
        wm = np.ascontiguousarray(wf.transpose(2, 3, 0, 1)).reshape(k1 * k2, o, c)
        taps = np.matmul(wm.reshape(k1 * k2 * o, c), xf).reshape(b, k1 * k2, o, -1)
        out = taps[:, 0, :, :length].copy()
        for t in range(1, k1 * k2):
            off = (t // k2) * wp + t % k2
            out += taps[:, t, :, off:off + length]
    return out.reshape(b, o, ho, wp)[:, :, :, :wo]


class PlannedCorrelation:
    """``correlate2d`` of one ``(C, h, w)`` map with fixed kernels, planned once.

    The layout choice, kernel rearrangement and all work buffers are fixed
    at construction, so repeated calls allocate nothing. Callers write the
    input into :attr:`interior` (a view of the zero-padded buffer) and call
    the object; the returned ``(O, ho, wo)`` view is overwritten by the next
    call.
    """

    def __init__(self, kernels, h, w, pad, dtype=np.float64):
        w_ = check_filters(kernels).astype(dtype)
        o, c, k1, k2 = w_.shape
        p1, p2 = (int(p) for p in pad)
        self.out_shape = (o, h + 2 * p1 - k1 + 1, w + 2 * p2 - k2 + 1)
        self.wp = w + 2 * p2
        self.length = self.out_shape[1] * self.wp
        self.k = (k1, k2)
        self.padded = np.zeros((c, h + 2 * p1 + 1, self.wp), dtype=dtype)
        self.interior = self.padded[:, p1:p1 + h, p2:p2 + w]
        self._flat = self.padded.reshape(c, -1)
        self.strategy = _strategy(c, o, k1, k2)
        s = self._flat.strides
        if self.strategy == "im2col":
            self._weights = w_.reshape(o, -1)
            self._view = as_strided(self._flat, (c, k1, k2, self.length),
                                    (s[0], self.wp * s[1], s[1], s[1]))
            self._cols = np.empty((c * k1 * k2, self.length), dtype=dtype)
        elif self.strategy in ("rows", "stacked"):
            span = self.length + (k1 - 1) * self.wp
            self._weights = np.ascontiguousarray(w_.transpose(2, 0, 1, 3)).reshape(k1, o, c * k2)
            self._view = as_strided(self._flat, (c, k2, span), (s[0], s[1], s[1]))
            self._cols = np.empty((c * k2, span), dtype=dtype)
            self._part = np.empty((o, self.length), dtype=dtype)
            if self.strategy == "stacked":
                self._weights = self._weights.reshape(k1 * o, c * k2)
                self._big = np.empty((k1, o, span), dtype=dtype)
        else:
            self._weights = np.ascontiguousarray(w_.transpose(2, 3, 0, 1)).reshape(k1 * k2 * o, c)
            self._taps = np.empty((k1 * k2, o, self._flat.shape[1]), dtype=dtype)
        self._out = np.empty((o, self.length), dtype=dtype)
        # raw keeps the wrap-around columns; output is its (O, ho, wo) window.
        self.raw = self._out.reshape(o, self.out_shape[1], self.wp)
        self.output = self.raw[:, :, :self.out_shape[2]]

    def __call__(self):
        k1, k2 = self.k
        n, wp, out = self.length, self.wp, self._out
        if self.strategy == "im2col":
            np.copyto(self._cols.reshape(self._view.shape), self._view)
            np.matmul(self._weights, self._cols, out=out)
        elif self.strategy == "rows":
            cols = self._cols
            np.copyto(cols.reshape(self._view.shape), self._view)
            np.matmul(self._weights[0], cols[:, :n], out=out)
            for u in range(1, k1):
                np.matmul(self._weights[u], cols[:, u * wp:u * wp + n], out=self._part)
                out += self._part
        elif self.strategy == "stacked":
            big = self._big
            np.copyto(self._cols.reshape(self._view.shape), self._view)
            np.matmul(self._weights, self._cols, out=big.reshape(len(self._weights), -1))
            np.copyto(out, big[0, :, :n])
            for u in range(1, k1):
                np.add(out, big[u, :, u * wp:u * wp + n], out=out)
        else:
            taps = self._taps
            np.matmul(self._weights, self._flat, out=taps.reshape(len(self._weights), -1))
            out[...] = taps[0, :, :n]
            for t in range(1, k1 * k2):
                off = (t // k2) * wp + t % k2
                out += taps[t, :, off:off + n]
        return self.output


def _correlate_filter_grad(x, g, k1, k2, pad):
    """Gradient of ``_correlate(x, wf, pad)`` with respect to ``wf``."""
    b, c, h, w = x.shape
    o, ho, wo = g.shape[1:]
    dt = _float_dtype(x, g)
    xf, wp = _padded_flat(x, pad[0], pad[1], dt)
    length = ho * wp
    cols = _row_cols(xf, wp, k1, k2, length)
    gf = np.zeros((b, o, ho, wp), dtype=dt)
    gf[..., :wo] = g
    gf = gf.reshape(b, o, length)
    grad = np.empty((o, k1, c, k2), dtype=dt)
    for u in range(k1):
        part = np.matmul(gf, cols[:, :, u * wp:u * wp + length].transpose(0, 2, 1))
        grad[:, u] = part.sum(axis=0).reshape(o, c, k2)
    return np.ascontiguousarray(grad.transpose(0, 2, 1, 3))


def _conv(x, filters, same):
    xb, single = _batched(x)
    w = check_filters(filters, xb.shape[1])
    k1, k2 = w.shape[2:]
    pad = ((k1 - 1) // 2, (k2 - 1) // 2) if same else (k1 - 1, k2 - 1)
    out = _correlate(xb, w[:, :, ::-1, ::-1], pad)
    return out[0] if single else out


def _conv_backward(x, filters, grad_out, same):
    xb, single = _batched(x)
    gb, _ = _batched(grad_out)
    w = check_filters(filters, xb.shape[1])
    o, c, k1, k2 = w.shape
    b, _, h, wd = xb.shape
    p1, p2 = ((k1 - 1) // 2, (k2 - 1) // 2) if same else (k1 - 1, k2 - 1)
    expected = (b, o, h + 2 * p1 - k1 + 1, wd + 2 * p2 - k2 + 1)
    if gb.shape != expected:
        raise DimensionError(f"grad_out has shape {gb.shape}, expected {expected}")
    # True convolution: d/dx is a correlation of grad_out with the unflipped kernel.
    grad_x = _correlate(gb, w.transpose(1, 0, 2, 3), (k1 - 1 - p1, k2 - 1 - p2))
    grad_w = _correlate_filter_grad(xb, gb, k1, k2, (p1, p2))[:, :, ::-1, ::-1]
    grad_w = np.ascontiguousarray(grad_w)
    return (grad_x[0] if single else grad_x), grad_w


def correlate2d(x, kernels, pad):
    """Cross-correlate zero-padded maps with a bank of (unflipped) kernels.

    ``pad = (p1, p2)`` zeros are added on each side of the two spatial axes.
    This is the primitive behind every convolution here; callers that apply
    the same filters many times can flip them once and call it directly.
    """
    xb, single = _batched(x)
    w = check_filters(kernels, xb.shape[1])
    out = _correlate(xb, w, tuple(int(p) for p in pad))
    return out[0] if single else out


def conv2d_full(x, filters):
    """Full zero-padded 2-D convolution.

    ``out[o, i, j] = sum_c sum_{u,v} filters[o, c, u, v] * x[c, i - u, j - v]``,
    with ``x`` taken as zero outside its support. Accepts a single
    ``(C, H, W)`` map or a ``(B, C, H, W)`` batch.
    """
    return _conv(x, filters, same=False)


def conv2d_backward(x, filters, grad_out):
    """Gradients of :func:`conv2d_full` given the gradient at its output.

    Returns ``(grad_x, grad_filters)``; ``grad_filters`` is summed over the
    batch when ``x`` is batched.
    """
    return _conv_backward(x, filters, grad_out, same=False)


def conv2d_same(x, filters):
    """Centered ``h x w`` window of :func:`conv2d_full`, computed directly.

    Equal to ``crop_to(conv2d_full(x, filters), h, w)`` but skips the
    border outputs the crop would discard.
    """
    return _conv(x, filters, same=True)


def conv2d_same_backward(x, filters, grad_out):
    """Gradients of :func:`conv2d_same`; see :func:`conv2d_backward`."""
    return _conv_backward(x, filters, grad_out, same=True)


def relu(x):
    """Elementwise ``max(0, x)``."""
    return np.maximum(x, 0)


def relu_mask(pre_activation):
    """Derivative of ReLU at ``pre_activation`` (0 at the kink)."""
    return (np.asarray(pre_activation) > 0).astype(np.result_type(pre_activation, np.float32))


def crop_to(x, target_h, target_w):
    """Centered ``target_h x target_w`` window of every channel.

    The size difference must be even on both axes so the window is exactly
    centered.
    """
    x = np.asarray(x)
    h, w = x.shape[-2:]
    dh, dw = h - target_h, w - target_w
    if dh < 0 or dw < 0:
        raise DimensionError(f"cannot crop {h}x{w} to larger {target_h}x{target_w}")
    if dh % 2 or dw % 2:
        raise DimensionError(
            f"crop from {h}x{w} to {target_h}x{target_w} is not centered (odd margin)"
        )
    return x[..., dh // 2:dh // 2 + target_h, dw // 2:dw // 2 + target_w]


def zero_pad(x, pad_h, pad_w):
    """Pad the two trailing axes with ``pad_h``/``pad_w`` zeros on each side."""
    x = np.asarray(x)
    width = [(0, 0)] * (x.ndim - 2) + [(pad_h, pad_h), (pad_w, pad_w)]
    return np.pad(x, width)


def grad_check(fun, point, step=1e-5):
    """Compare an analytic gradient with central differences.

    ``fun(p)`` must return ``(value, gradient)`` for a flat parameter vector
    ``p``. Returns the largest coordinate-wise relative error
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if not step > 0:
        raise DomainError(f"step must be positive, got {step}")
    p = np.array(point, dtype=np.float64).reshape(-1)
    value, analytic = fun(p.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if not np.isfinite(value) or not np.all(np.isfinite(analytic)):
        raise NumericError("non-finite loss or gradient at the check point")
    if analytic.shape != p.shape:
        raise DimensionError(
            f"gradient has {analytic.size} entries, parameter vector has {p.size}"
        )
    numeric = np.empty_like(p)
    for i in range(p.size):
        old = p[i]
        p[i] = old + step
        f_plus = fun(p.copy())[0]
        p[i] = old - step
        f_minus = fun(p.copy())[0]
        p[i] = old
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"non-finite loss while perturbing coordinate {i}")
        numeric[i] = (f_plus - f_minus) / (2.0 * step)
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0
