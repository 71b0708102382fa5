"""Monte-Carlo sweeps, runtime benchmarks, noise experiments and CSV reports.

A *method* is any object with a ``name``, an optional ``prepare(phi)`` hook
(run outside the timed region, e.g. to fetch or train a network for that
matrix) and ``recover(y, phi, shape, truth)`` returning a
:class:`~deepinverse.metrics.RecoveryResult`. Only the ``recover`` call is
timed.

Report files (all CSV, ``\\n`` line endings, no timing columns unless the
file is a timing table, so sweep reports are byte-reproducible)::

    fig2_success.csv       ratio,method,success_rate,successes,trials
    fig3_psnr.csv          ratio,method,mean_psnr_db,mean_nmse,trials
    fig4_hist_<m>.csv      bin_left_db,count
    trials.csv             ratio,method,trial,patch,psnr_db,nmse,success,iterations,aborted
    table1_runtime.csv     ratio,method,median_time_s,repetitions,images
    table3_noise.csv       method,ratio,snr_db,noiseless_psnr_db,noisy_psnr_db,drop_db
"""

import csv
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, network
from .errors import DeepInverseError, DomainError
from .metrics import RecoveryResult, nmse, psnr, success
from .sensing import add_noise, gen_ensemble, measure, measurements_for_ratio, proxy

log = logging.getLogger(__name__)


class Method:
    """Base recoverer; subclasses override :meth:`recover`."""

    name = "method"

    def prepare(self, phi):
        pass

    def recover(self, y, phi, shape, truth):
        raise NotImplementedError


class ZeroMethod(Method):
    name = "zero"

    def recover(self, y, phi, shape, truth):
        return RecoveryResult(np.zeros(shape), 0.0, 0, True, self.name)


class IdentityMethod(Method):
    """Debug recoverer that returns the ground truth."""

    name = "identity"

    def recover(self, y, phi, shape, truth):
        return RecoveryResult(np.array(truth, dtype=np.float64), 0.0, 0, True, self.name)


class ProxyMethod(Method):
    """The adjoint estimate ``Phi^T y`` with no further processing."""

    name = "proxy-only"

    def recover(self, y, phi, shape, truth):
        start = time.perf_counter()
        est = proxy(phi, y, shape)
        return RecoveryResult(est, time.perf_counter() - start, 1, True, self.name)


class SolverMethod(Method):
    def __init__(self, name, solver, config):
        self.name = name
        self.solver = solver
        self.config = config

    def recover(self, y, phi, shape, truth):
        return self.solver(y, phi, config=self.config, shape=shape)


class DeepInverseMethod(Method):
    """Learned recovery with one network per measurement matrix.

    ``nets`` maps :meth:`MeasurementEnsemble.key` to :class:`NetworkParams`.
    When a matrix has no network, ``trainer(phi)`` is called (if given) to
    fit one; otherwise :meth:`prepare` raises :class:`DomainError`.
    Compiled inference nets reuse work buffers, so each thread gets its own.
    """

    name = "deepinverse"

    def __init__(self, nets=None, trainer=None, dtype=np.float32):
        self.nets = dict(nets or {})
        self.trainer = trainer
        self.dtype = dtype
        self._local = threading.local()
        self._lock = threading.Lock()

    def _cache(self):
        if not hasattr(self._local, "nets"):
            self._local.nets = {}
        return self._local.nets

    def add(self, phi, omega):
        with self._lock:
            self.nets[phi.key()] = omega
            self._local = threading.local()

    def prepare(self, phi):
        key = phi.key()
        cache = self._cache()
        if key in cache:
            return cache[key]
        with self._lock:
            if key not in self.nets:
                if self.trainer is None:
                    raise DomainError(
                        f"no trained network for ensemble m={phi.m} n={phi.n} seed={phi.seed}"
                    )
                self.nets[key] = self.trainer(phi)
            omega = self.nets[key]
        cache[key] = network.InferenceNet(omega, phi, self.dtype)
        return cache[key]

    def recover(self, y, phi, shape, truth):
        net = self.prepare(phi)
        start = time.perf_counter()
        est = net(y)
        return RecoveryResult(est.reshape(shape), time.perf_counter() - start, 1, True, self.name)


SOLVER_DEFAULTS = {
    "iht": baselines.SolverConfig(max_iters=200),
    "amp": baselines.SolverConfig(max_iters=100),
    "tv": baselines.SolverConfig(max_iters=500),
}
METHOD_NAMES = ("zero", "identity", "proxy-only", "iht", "amp", "tv", "deepinverse")


def make_method(name, config=None, **options):
    """Build a registered method by name.

    ``config`` overrides the solver defaults for ``iht``, ``amp`` and
    ``tv``; ``options`` are passed to :class:`DeepInverseMethod`.
    """
    simple = {"zero": ZeroMethod, "identity": IdentityMethod, "proxy-only": ProxyMethod}
    if name in simple:
        return simple[name]()
    solvers = {"iht": baselines.iht_recover, "amp": baselines.amp_recover,
               "tv": baselines.tv_recover}
    if name in solvers:
        return SolverMethod(name, solvers[name], config or SOLVER_DEFAULTS[name])
    if name == "deepinverse":
        return DeepInverseMethod(**options)
    raise DomainError(f"unknown method {name!r}; available: {', '.join(METHOD_NAMES)}")


def trial_seed(seed, *path):
    """Deterministic 64-bit seed for one node of the (ratio, trial, ...) tree."""
    state = np.random.SeedSequence([int(seed)] + [int(p) for p in path]).generate_state(2)
    return int(state[0]) | (int(state[1]) << 32)


@dataclass
class TrialRecord:
    ratio: float
    method: str
    trial: int
    patch: int
    psnr_db: float
    nmse: float
    success: int
    time_s: float
    iterations: int
    aborted: bool
    error: str = ""


@dataclass
class ReportRow:
    ratio: float
    method: str
    success_rate: float
    successes: int
    mean_psnr_db: float
    mean_nmse: float
    mean_time_s: float
    trial_count: int


def aggregate(trials):
    """Collapse trial records into per-(ratio, method) rows, in first-seen order."""
    groups = {}
    for rec in trials:
        groups.setdefault((rec.ratio, rec.method), []).append(rec)
    rows = []
    for (ratio, method), recs in groups.items():
        wins = sum(r.success for r in recs)
        rows.append(ReportRow(
            ratio=ratio,
            method=method,
            success_rate=wins / len(recs),
            successes=wins,
            mean_psnr_db=float(np.mean([r.psnr_db for r in recs])),
            mean_nmse=float(np.mean([r.nmse for r in recs])),
            mean_time_s=float(np.mean([r.time_s for r in recs])),
            trial_count=len(recs),
        ))
    return rows


@dataclass
class EvalReport:
    """Per-trial records plus the aggregates derived from them."""

    trials: list = field(default_factory=list)

    @property
    def rows(self):
        return aggregate(self.trials)

    def row(self, ratio, method):
        for r in self.rows:
            if r.ratio == ratio and r.method == method:
                return r
        raise KeyError((ratio, method))

    def psnrs(self, method, ratio=None):
        return [t.psnr_db for t in self.trials
                if t.method == method and (ratio is None or t.ratio == ratio)]

    def write(self, out_dir, bin_width=1.0):
        """Write fig2, fig3, per-method fig4 histograms and trials.csv."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = self.rows
        _write_csv(out / "fig2_success.csv",
                   ["ratio", "method", "success_rate", "successes", "trials"],
                   [[_num(r.ratio), r.method, _num(r.success_rate), r.successes, r.trial_count]
                    for r in rows])
        _write_csv(out / "fig3_psnr.csv",
                   ["ratio", "method", "mean_psnr_db", "mean_nmse", "trials"],
                   [[_num(r.ratio), r.method, _num(r.mean_psnr_db), _num(r.mean_nmse),
                     r.trial_count] for r in rows])
        written = [out / "fig2_success.csv", out / "fig3_psnr.csv"]
        for method in dict.fromkeys(t.method for t in self.trials):
            path = out / f"fig4_hist_{method}.csv"
            write_histogram(path, emit_histogram(self.psnrs(method), bin_width))
            written.append(path)
        _write_csv(out / "trials.csv",
                   ["ratio", "method", "trial", "patch", "psnr_db", "nmse", "success",
                    "iterations", "aborted"],
                   [[_num(t.ratio), t.method, t.trial, t.patch, _num(t.psnr_db), _num(t.nmse),
                     t.success, t.iterations, int(t.aborted)] for t in self.trials])
        written.append(out / "trials.csv")
        return written


def _num(v):
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _ensemble(m, n, seed, kind):
    return gen_ensemble(m, n, seed, kind=kind)


def _fixed_ensemble(phis, ratio, m, n, seed, ri, kind):
    if phis and ratio in phis:
        phi = phis[ratio]
        if (phi.m, phi.n) != (m, n):
            raise DomainError(
                f"ensemble for ratio {ratio} is {phi.m}x{phi.n}, expected {m}x{n}"
            )
        return phi
    return _ensemble(m, n, trial_seed(seed, ri) % 2**63, kind)


def _run_trial(methods, phi, x, y, ratio, trial, patch):
    shape = x.shape
    records = []
    for method in methods:
        try:
            method.prepare(phi)
            start = time.perf_counter()
            result = method.recover(y, phi, shape, x)
            elapsed = time.perf_counter() - start
            est = np.asarray(result.estimate, dtype=np.float64).reshape(shape)
            if not np.all(np.isfinite(est)):
                raise DeepInverseError("non-finite estimate")
            aborted, iters, error = result.aborted, result.iterations, ""
        except (DeepInverseError, ArithmeticError, ValueError) as exc:
            log.warning("%s failed on trial %d at ratio %g: %s", method.name, trial, ratio, exc)
            est = np.zeros(shape)
            elapsed, aborted, iters, error = 0.0, True, 0, str(exc)
        ok = 0 if aborted else success(est, x)
        records.append(TrialRecord(ratio, method.name, trial, patch, psnr(est, x),
                                   nmse(est, x), ok, elapsed, iters, aborted, error))
    return records


def sweep(methods, ratios, patches, trials, seed=0, fixed_phi=False, snr_db=None,
          phi_kind="gaussian", threads=1, phis=None):
    """Run every method on identical sensed patches at each ratio.

    Trial ``t`` senses ``patches[t % len(patches)]``. With ``fixed_phi`` one
    matrix per ratio (seeded by ``(seed, ratio index)``) is shared by all
    trials; otherwise each trial draws its own from ``(seed, ratio index,
    t)``. ``phis`` maps a ratio to an explicit matrix used for all of its
    trials (e.g. the one a network was trained against). A finite ``snr_db``
    adds seeded measurement noise. An aborted or failing method scores the
    all-zero estimate with success 0.

    Records are ordered by (ratio, trial, method) whatever ``threads`` is.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if not methods or not len(ratios) or len(patches) == 0 or trials < 1:
        raise DomainError("sweep needs methods, ratios, patches and trials >= 1")
    shape = patches.shape[1:]
    n = int(np.prod(shape))

    jobs = []
    for ri, ratio in enumerate(ratios):
        m = measurements_for_ratio(ratio, n)
        shared = None
        if fixed_phi or (phis and ratio in phis):
            shared = _fixed_ensemble(phis, ratio, m, n, seed, ri, phi_kind)
        for t in range(trials):
            jobs.append((ri, float(ratio), m, t, shared))

    def run(job):
        ri, ratio, m, t, shared = job
        phi = shared or _ensemble(m, n, trial_seed(seed, ri, t) % 2**63, phi_kind)
        patch = t % len(patches)
        x = patches[patch]
        y = measure(phi, x.reshape(-1))
        if snr_db is not None and math.isfinite(snr_db):
            y = add_noise(y, snr_db, trial_seed(seed, ri, t, 1) % 2**63)
        return _run_trial(methods, phi, x, y, ratio, t, patch)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    return EvalReport([rec for batch in results for rec in batch])


def emit_histogram(samples, bin_width=1.0):
    """Counts in left-closed bins ``[a, a + w)`` starting at ``floor(min)``.

    Non-finite samples (exact recoveries score infinite PSNR) are left out.
    Returns a list of ``(bin_left, count)``.
    """
    if not bin_width > 0:
        raise DomainError(f"bin width must be positive, got {bin_width}")
    values = np.asarray([s for s in samples if math.isfinite(s)], dtype=np.float64)
    if values.size == 0:
        return []
    start = math.floor(values.min())
    idx = np.floor((values - start) / bin_width).astype(np.int64)
    counts = np.bincount(idx)
    return [(start + i * bin_width, int(c)) for i, c in enumerate(counts)]


def write_histogram(path, bins):
    _write_csv(path, ["bin_left_db", "count"], [[_num(a), c] for a, c in bins])


def bench_runtime(methods, ratios, patches, repetitions=5, seed=0, images=1,
                  phi_kind="gaussian", out_path=None, phis=None):
    """Median wall time per (ratio, method) over ``repetitions`` runs.

    Each repetition recovers the first ``images`` patches and records their
    mean time; one extra warm-up repetition is run first and discarded.
    Repetitions are interleaved across all (ratio, method) cells so slow
    drifts in machine load hit every cell alike.
    Returns rows ``(ratio, method, median_time_s, repetitions, images)``.
    """
    if repetitions < 3:
        raise DomainError(f"need at least 3 repetitions, got {repetitions}")
    patches = np.asarray(patches, dtype=np.float64)[:images]
    shape = patches.shape[1:]
    n = int(np.prod(shape))
    cells = []
    for ri, ratio in enumerate(ratios):
        phi = _fixed_ensemble(phis, ratio, measurements_for_ratio(ratio, n), n, seed, ri,
                              phi_kind)
        ys = [measure(phi, x.reshape(-1)) for x in patches]
        for method in methods:
            method.prepare(phi)
            cells.append((float(ratio), method, phi, ys, []))
    for rep in range(repetitions + 1):
        for _, method, phi, ys, times in cells:
            total = 0.0
            for x, y in zip(patches, ys):
                start = time.perf_counter()
                method.recover(y, phi, shape, x)
                total += time.perf_counter() - start
            if rep:
                times.append(total / len(patches))
    rows = [(ratio, method.name, float(np.median(times)), repetitions, len(patches))
            for ratio, method, _, _, times in cells]
    if out_path is not None:
        _write_csv(out_path, ["ratio", "method", "median_time_s", "repetitions", "images"],
                   [[_num(r), name, _num(t), reps, k] for r, name, t, reps, k in rows])
    return rows


def noise_experiment(methods, snr_db, ratio, patches, trials, seed=0, fixed_phi=False,
                     phi_kind="gaussian", threads=1, out_path=None, phis=None):
    """Mean PSNR per method with and without measurement noise.

    Both runs share matrices and patches; only the noise differs. Returns
    rows ``(method, ratio, snr_db, noiseless, noisy, drop)``.
    """
    kwargs = dict(seed=seed, fixed_phi=fixed_phi, phi_kind=phi_kind, threads=threads,
                  phis=phis)
    clean = sweep(methods, [ratio], patches, trials, **kwargs)
    noisy = sweep(methods, [ratio], patches, trials, snr_db=snr_db, **kwargs)
    rows = []
    for method in methods:
        a = clean.row(float(ratio), method.name).mean_psnr_db
        b = noisy.row(float(ratio), method.name).mean_psnr_db
        drop = a - b if math.isfinite(a) or math.isfinite(b) else 0.0
        rows.append((method.name, float(ratio), float(snr_db), a, b, drop))
    if out_path is not None:
        _write_csv(out_path,
                   ["method", "ratio", "snr_db", "noiseless_psnr_db", "noisy_psnr_db", "drop_db"],
                   [[name, _num(r), _num(s), _num(a), _num(b), _num(d)]
                    for name, r, s, a, b, d in rows])
    return rows
