import csv
import math

import numpy as np
import pytest

from deepinverse import baselines, datakit, evaluation, network, sensing
from deepinverse.errors import DomainError, NumericError
from deepinverse.evaluation import Method, make_method
from deepinverse.metrics import RecoveryResult

PATCHES = datakit.synthetic_stack(6, 8, kind="piecewise-constant", regions=3, seed=0)
SMALL = network.Architecture(filters=(2, 1), kernel=(3, 3), input_h=8, input_w=8)


class Recorder(Method):
    name = "recorder"

    def __init__(self):
        self.keys = []

    def recover(self, y, phi, shape, truth):
        self.keys.append(phi.key())
        return RecoveryResult(np.zeros(shape), 0.0)


class Exploding(Method):
    name = "exploding"

    def recover(self, y, phi, shape, truth):
        raise NumericError("boom")


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_identity_and_zero_rates():
    methods = [make_method("zero"), make_method("identity")]
    report = evaluation.sweep(methods, [0.1, 0.5], PATCHES, trials=7, seed=1)
    for ratio in (0.1, 0.5):
        assert report.row(ratio, "zero").success_rate == 0.0
        assert report.row(ratio, "identity").success_rate == 1.0
        assert report.row(ratio, "identity").mean_psnr_db == math.inf
    assert all(r.trial_count == 7 for r in report.rows)


def test_rows_reaggregate_from_trials():
    report = evaluation.sweep([make_method("proxy-only")], [0.3], PATCHES, trials=5)
    (row,) = report.rows
    recs = report.trials
    assert row.successes == sum(r.success for r in recs)
    assert row.mean_psnr_db == pytest.approx(np.mean([r.psnr_db for r in recs]))
    assert [r.patch for r in recs] == [0, 1, 2, 3, 4]


def test_failing_method_counts_as_failure_and_sweep_continues():
    report = evaluation.sweep([Exploding(), make_method("identity")], [0.5], PATCHES, trials=3)
    row = report.row(0.5, "exploding")
    assert row.success_rate == 0.0 and row.mean_nmse == pytest.approx(1.0)
    assert all(t.aborted and "boom" in t.error for t in report.trials if t.method == "exploding")
    assert report.row(0.5, "identity").success_rate == 1.0


def test_aborted_solver_is_failure():
    # AMP with a tiny threshold and very few measurements blows up.
    method = evaluation.SolverMethod("amp", baselines.amp_recover,
                                     baselines.SolverConfig(max_iters=50, alpha=0.01))
    report = evaluation.sweep([method], [0.05], PATCHES, trials=3, seed=2)
    recs = report.trials
    assert all(r.aborted for r in recs)
    assert report.row(0.05, "amp").success_rate == 0.0


def test_fresh_and_fixed_matrices():
    fresh, fixed = Recorder(), Recorder()
    evaluation.sweep([fresh], [0.25], PATCHES, trials=4, seed=3)
    evaluation.sweep([fixed], [0.25], PATCHES, trials=4, seed=3, fixed_phi=True)
    assert len(set(fresh.keys)) == 4
    assert len(set(fixed.keys)) == 1
    phi = sensing.gen_ensemble(16, 64, seed=99)
    given = Recorder()
    evaluation.sweep([given], [0.25], PATCHES, trials=2, phis={0.25: phi})
    assert set(given.keys) == {phi.key()}
    with pytest.raises(DomainError):
        evaluation.sweep([given], [0.5], PATCHES, trials=1, phis={0.5: phi})


def test_sweep_validation():
    with pytest.raises(DomainError):
        evaluation.sweep([], [0.1], PATCHES, trials=1)
    with pytest.raises(DomainError):
        evaluation.sweep([make_method("zero")], [0.1], PATCHES, trials=0)


def test_reports_are_byte_reproducible_and_thread_independent(tmp_path):
    methods = [make_method("proxy-only"), make_method("iht")]
    a = evaluation.sweep(methods, [0.3, 0.6], PATCHES, trials=4, seed=5)
    b = evaluation.sweep(methods, [0.3, 0.6], PATCHES, trials=4, seed=5, threads=3)
    files_a = a.write(tmp_path / "a")
    files_b = b.write(tmp_path / "b")
    assert [p.name for p in files_a] == [p.name for p in files_b]
    for pa, pb in zip(files_a, files_b):
        assert pa.read_bytes() == pb.read_bytes()
    names = {p.name for p in files_a}
    assert {"fig2_success.csv", "fig3_psnr.csv", "trials.csv",
            "fig4_hist_proxy-only.csv", "fig4_hist_iht.csv"} <= names
    rows = _read(tmp_path / "a" / "fig2_success.csv")
    assert list(rows[0]) == ["ratio", "method", "success_rate", "successes", "trials"]
    c = evaluation.sweep(methods, [0.3, 0.6], PATCHES, trials=4, seed=6)
    c.write(tmp_path / "c")
    assert (tmp_path / "c" / "trials.csv").read_bytes() != files_a[-1].read_bytes()


def test_histogram_examples(tmp_path):
    assert evaluation.emit_histogram([10.1, 10.9, 12.0], 1.0) == [(10, 2), (11, 0), (12, 1)]
    assert evaluation.emit_histogram([3.7]) == [(3, 1)]
    samples = np.random.default_rng(0).normal(20, 4, 200)
    bins = evaluation.emit_histogram(list(samples) + [math.inf], 0.5)
    assert sum(c for _, c in bins) == 200
    lefts = [a for a, _ in bins]
    assert lefts[0] <= samples.min() < lefts[0] + 0.5
    assert lefts[-1] <= samples.max() < lefts[-1] + 0.5
    with pytest.raises(DomainError):
        evaluation.emit_histogram([1.0], 0.0)
    evaluation.write_histogram(tmp_path / "h.csv", [(10, 2), (11, 0)])
    assert (tmp_path / "h.csv").read_text() == "bin_left_db,count\n10.0,2\n11.0,0\n"


def test_bench_requires_three_repetitions():
    with pytest.raises(DomainError):
        evaluation.bench_runtime([make_method("zero")], [0.1], PATCHES, repetitions=2)


def test_bench_noop_is_fastest(tmp_path):
    methods = [make_method("zero"), make_method("tv", baselines.SolverConfig(max_iters=50))]
    rows = evaluation.bench_runtime(methods, [0.2, 0.4], PATCHES, repetitions=3, images=2,
                                    out_path=tmp_path / "t1.csv")
    times = {(r, name): t for r, name, t, _, _ in rows}
    for ratio in (0.2, 0.4):
        assert times[(ratio, "zero")] < times[(ratio, "tv")]
    table = _read(tmp_path / "t1.csv")
    assert len(table) == 4 and table[0]["repetitions"] == "3" and table[0]["images"] == "2"


def test_bench_median_is_stable():
    method = make_method("tv", baselines.SolverConfig(max_iters=200, tolerance=0.0))
    medians = [evaluation.bench_runtime([method], [0.3], PATCHES, repetitions=5, images=2)[0][2]
               for _ in range(2)]
    assert max(medians) <= 1.5 * min(medians)


def test_noise_experiment(tmp_path):
    methods = [make_method("proxy-only"), make_method("identity")]
    rows = evaluation.noise_experiment(methods, math.inf, 0.3, PATCHES, trials=4)
    for _, _, _, clean, noisy, drop in rows:
        assert clean == noisy and drop == 0.0
    rows = evaluation.noise_experiment([make_method("tv", baselines.SolverConfig(max_iters=200))],
                                       10.0, 0.5, PATCHES, trials=6, out_path=tmp_path / "t3.csv")
    (name, ratio, snr, clean, noisy, drop), = rows
    assert noisy <= clean + 0.1
    assert drop == pytest.approx(clean - noisy)
    header = (tmp_path / "t3.csv").read_text().splitlines()[0]
    assert header == "method,ratio,snr_db,noiseless_psnr_db,noisy_psnr_db,drop_db"


def test_make_method_registry():
    assert [make_method(n).name for n in evaluation.METHOD_NAMES] == list(evaluation.METHOD_NAMES)
    with pytest.raises(DomainError, match="available: zero, identity"):
        make_method("bm3d")


def test_deepinverse_method_needs_or_trains_a_net():
    phi = sensing.gen_ensemble(20, 64, seed=0)
    bare = evaluation.DeepInverseMethod()
    with pytest.raises(DomainError, match="no trained network"):
        bare.prepare(phi)
    calls = []

    def trainer(p):
        calls.append(p.key())
        return network.init_params(SMALL, 0)

    method = evaluation.DeepInverseMethod(trainer=trainer)
    report = evaluation.sweep([method], [20 / 64], PATCHES, trials=3, fixed_phi=True)
    assert len(calls) == 1
    assert all(not t.aborted for t in report.trials)


def test_deepinverse_method_matches_forward_under_threads():
    phi = sensing.gen_ensemble(30, 64, seed=0)
    omega = network.init_params(SMALL, 1)
    method = evaluation.DeepInverseMethod({phi.key(): omega}, dtype=np.float64)
    serial = evaluation.sweep([method], [30 / 64], PATCHES, trials=6, phis={30 / 64: phi})
    threaded = evaluation.sweep([method], [30 / 64], PATCHES, trials=6, phis={30 / 64: phi},
                                threads=3)
    expected = [network.forward(sensing.measure(phi, x), phi, omega) for x in PATCHES]
    for rec, est in zip(serial.trials, expected):
        assert rec.nmse == pytest.approx(np.sum((est - PATCHES[rec.patch]) ** 2)
                                         / np.sum(PATCHES[rec.patch] ** 2))
    assert [t.nmse for t in serial.trials] == [t.nmse for t in threaded.trials]


def test_trial_seed_is_deterministic_and_distinct():
    assert evaluation.trial_seed(0, 1, 2) == evaluation.trial_seed(0, 1, 2)
    assert len({evaluation.trial_seed(0, r, t) for r in range(5) for t in range(50)}) == 250
