"""Classical iterative recovery: IHT, soft-threshold AMP and TV minimization.

All solvers take raw measurements ``y`` and a
:class:`~deepinverse.sensing.MeasurementEnsemble`, return a
:class:`~deepinverse.metrics.RecoveryResult`, and are deterministic given
their inputs. Wall time is measured inside each call.
"""

import logging
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn

from .errors import DimensionError, DomainError
from .metrics import RecoveryResult
from .sensing import _image_shape

log = logging.getLogger(__name__)


def dct2(image):
    """Orthonormal 2-D type-II DCT."""
    return dctn(np.asarray(image, dtype=np.float64), type=2, norm="ortho")


def idct2(coeffs):
    """Inverse of :func:`dct2`."""
    return idctn(np.asarray(coeffs, dtype=np.float64), type=2, norm="ortho")


@dataclass(frozen=True)
class SparsityBasis:
    """Orthonormal basis ``Psi``; ``analysis`` is ``Psi^T``, ``synthesis`` is ``Psi``."""

    n1: int
    n2: int
    kind: str = "dct"

    def __post_init__(self):
        if self.kind not in ("dct", "identity"):
            raise DomainError(f"unknown basis kind {self.kind!r}")

    def analysis(self, image):
        image = np.asarray(image, dtype=np.float64).reshape(self.n1, self.n2)
        return dct2(image) if self.kind == "dct" else image.copy()

    def synthesis(self, coeffs):
        coeffs = np.asarray(coeffs, dtype=np.float64).reshape(self.n1, self.n2)
        return idct2(coeffs) if self.kind == "dct" else coeffs.copy()


@dataclass
class SolverConfig:
    max_iters: int = 200
    tolerance: float = 1e-6
    sparsity_k: int = 8
    lam: float = 1e-2
    alpha: float = 1.1
    onsager: bool = True
    verbose: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise DomainError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tolerance < 0:
            raise DomainError(f"tolerance must be >= 0, got {self.tolerance}")


def soft_threshold(v, tau):
    """``sign(v) * max(|v| - tau, 0)``."""
    if tau < 0:
        raise DomainError(f"threshold must be non-negative, got {tau}")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def hard_threshold_k(v, k):
    """Keep the ``k`` largest-magnitude entries of ``v``, zero the rest.

    Ties are broken toward the lower flat index.
    """
    v = np.asarray(v, dtype=np.float64)
    if not 0 <= k <= v.size:
        raise DomainError(f"need 0 <= k <= {v.size}, got {k}")
    out = np.zeros_like(v)
    if k == 0:
        return out
    flat = v.reshape(-1)
    keep = np.argsort(-np.abs(flat), kind="stable")[:k]
    out.reshape(-1)[keep] = flat[keep]
    return out


def _prepare(y, phi, shape):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size != phi.m:
        raise DimensionError(f"got {y.size} measurements, ensemble has m={phi.m}")
    return y, _image_shape(phi.n, shape)


def _rel_change(new, old):
    # Divergent runs reach inf here; the caller's finiteness check handles them.
    with np.errstate(over="ignore", invalid="ignore"):
        scale = np.linalg.norm(new)
        diff = np.linalg.norm(new - old)
        return diff / scale if scale > 0 else diff


def iht_recover(y, phi, basis=None, config=None, shape=None, callback=None):
    """Iterative hard thresholding in the basis ``Psi`` with unit step.

    ``s <- H_k(s + Psi^T Phi^T (y - Phi Psi s))``, stopping after
    ``max_iters`` or once the relative change of ``s`` drops below
    ``tolerance``. ``callback(iteration, estimate)`` sees every iterate.

    ``history`` holds the residual norm of every iterate, starting from
    ``s = 0``. A run that does not converge returns its lowest-residual
    iterate with ``converged`` false; a non-finite residual stops the run
    and sets ``aborted``.
    """
    start = time.perf_counter()
    config = config or SolverConfig()
    y, shape = _prepare(y, phi, shape)
    basis = basis or SparsityBasis(*shape)
    a = phi.entries
    s = np.zeros(shape)
    converged = aborted = False
    it = 0
    if config.sparsity_k == 0:
        return RecoveryResult(np.zeros(shape), time.perf_counter() - start, 0, True, "iht")
    residual = y.copy()
    history = [float(np.linalg.norm(residual))]
    best, best_norm = s, history[0]
    for it in range(1, config.max_iters + 1):
        step = basis.analysis((residual @ a).reshape(shape))
        s_new = hard_threshold_k(s + step, config.sparsity_k)
        change = _rel_change(s_new, s)
        s = s_new
        residual = y - a @ basis.synthesis(s).reshape(-1)
        norm = float(np.linalg.norm(residual))
        history.append(norm)
        if not math.isfinite(norm):
            aborted = True
            log.debug("IHT residual became non-finite at iteration %d", it)
            break
        if norm <= best_norm:
            best, best_norm = s, norm
        if callback is not None:
            callback(it, basis.synthesis(s))
        if change < config.tolerance:
            converged = True
            break
    estimate = basis.synthesis(s if converged else best)
    return RecoveryResult(estimate, time.perf_counter() - start, it, converged, "iht",
                          aborted=aborted, history=history)


def amp_recover(y, phi, config=None, shape=None, basis=None, callback=None):
    """Soft-threshold AMP with the Onsager correction, sparse in ``basis``.

    Iterates::

        s   <- eta(s + Psi^T Phi^T z, tau),   tau = alpha * ||z|| / sqrt(m)
        z   <- y - Phi Psi s + (||s||_0 / m) * z

    where ``eta`` is soft thresholding and the last term is the Onsager
    correction (dropped when ``config.onsager`` is false). A residual that
    grows past 10x its initial norm aborts the run.
    """
    start = time.perf_counter()
    config = config or SolverConfig(max_iters=100)
    y, shape = _prepare(y, phi, shape)
    basis = basis or SparsityBasis(*shape)
    a = phi.entries
    m = phi.m
    s = np.zeros(shape)
    z = y.copy()
    z0 = float(np.linalg.norm(z))
    history = [z0]
    converged = aborted = False
    it = 0
    if z0 == 0.0:
        return RecoveryResult(np.zeros(shape), time.perf_counter() - start, 0, True, "amp",
                              history=history)
    for it in range(1, config.max_iters + 1):
        pseudo = s + basis.analysis((z @ a).reshape(shape))
        tau = config.alpha * float(np.linalg.norm(z)) / math.sqrt(m)
        s_new = soft_threshold(pseudo, tau)
        z_new = y - a @ basis.synthesis(s_new).reshape(-1)
        if config.onsager:
            z_new += (np.count_nonzero(s_new) / m) * z
        change = _rel_change(s_new, s)
        s, z = s_new, z_new
        znorm = float(np.linalg.norm(z))
        history.append(znorm)
        if callback is not None:
            callback(it, basis.synthesis(s))
        if not math.isfinite(znorm) or znorm > 10.0 * z0:
            aborted = True
            log.debug("AMP residual grew to %.3g (initial %.3g), aborting", znorm, z0)
            break
        if change < config.tolerance:
            converged = True
            break
    estimate = basis.synthesis(s)
    if not np.all(np.isfinite(estimate)):
        estimate = np.zeros(shape)
    return RecoveryResult(estimate, time.perf_counter() - start, it, converged, "amp",
                          aborted=aborted, history=history)


def _grad(x):
    # Forward differences, zero across the last row/column (symmetric boundary).
    g = np.zeros((2,) + x.shape)
    g[0, :-1] = x[1:] - x[:-1]
    g[1, :, :-1] = x[:, 1:] - x[:, :-1]
    return g


def _grad_adjoint(p):
    out = np.zeros(p.shape[1:])
    out[:-1] -= p[0, :-1]
    out[1:] += p[0, :-1]
    out[:, :-1] -= p[1, :, :-1]
    out[:, 1:] += p[1, :, :-1]
    return out


def tv_objective(x, y, phi, lam):
    """``0.5 ||Phi x - y||^2 + lam * TV(x)`` with anisotropic TV."""
    r = phi.entries @ x.reshape(-1) - y
    return 0.5 * float(r @ r) + lam * float(np.abs(_grad(x)).sum())


def stacked_operator_norm(phi, shape, iters=100):
    """Power-iteration estimate of ``||[Phi; D]||`` (D = forward differences)."""
    a = phi.entries
    v = np.random.Generator(np.random.PCG64(0)).standard_normal(shape)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = ((a @ v.reshape(-1)) @ a).reshape(shape) + _grad_adjoint(_grad(v))
        est = float(np.linalg.norm(w))
        if est == 0.0:
            return 0.0
        v = w / est
    return math.sqrt(est)


def tv_recover(y, phi, config=None, shape=None, callback=None):
    """Anisotropic TV minimization by the Chambolle-Pock primal-dual method.

    Solves ``min_x 0.5 ||Phi x - y||^2 + lam * TV(x)``. Both terms are
    dualized through the stacked operator ``K = [Phi; D]`` with
    ``sigma = tau = 1 / (1.01 L)``, ``L`` from power iteration.

    The returned estimate, and the iterate reported to ``callback``, is the
    lowest-objective primal iterate seen so far, so ``history`` (its
    objective per iteration) never increases. The raw objective of the
    primal-dual sequence is kept in ``result.details["raw_objective"]``.
    """
    start = time.perf_counter()
    config = config or SolverConfig(max_iters=500)
    lam = config.lam
    if not lam > 0:
        raise DomainError(f"TV weight must be positive, got {lam}")
    y, shape = _prepare(y, phi, shape)
    a = phi.entries
    op_norm = stacked_operator_norm(phi, shape)
    sigma = tau = 1.0 / (1.01 * op_norm)

    x = np.zeros(shape)
    x_bar = x.copy()
    q = np.zeros_like(y)
    p = np.zeros((2,) + shape)
    best = x.copy()
    best_obj = tv_objective(x, y, phi, lam)
    history, raw = [best_obj], [best_obj]
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        q = (q + sigma * (a @ x_bar.reshape(-1) - y)) / (1.0 + sigma)
        p = np.clip(p + sigma * _grad(x_bar), -lam, lam)
        x_new = x - tau * ((q @ a).reshape(shape) + _grad_adjoint(p))
        x_bar = 2.0 * x_new - x
        change = _rel_change(x_new, x)
        x = x_new
        obj = tv_objective(x, y, phi, lam)
        raw.append(obj)
        if obj <= best_obj:
            best, best_obj = x.copy(), obj
        history.append(best_obj)
        if callback is not None:
            callback(it, best)
        if change < config.tolerance:
            converged = True
            break
    return RecoveryResult(best, time.perf_counter() - start, it, converged, "tv",
                          history=history, details={"raw_objective": raw})
