"""``deepinverse`` command line: gen-data, train, recover, eval, bench.

Every command writes under ``--out`` only, and first echoes all resolved
arguments (defaults included) to ``<out>/run.cfg``, one argument per line.
``deepinverse @<out>/run.cfg`` replays the run; later flags override the
echoed ones, e.g. ``deepinverse @run.cfg --out other``.

``recover`` scores the 8-bit image it writes (clipped to [0, 1]), so the
metrics line always describes ``recovered.pgm`` itself.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure (training divergence).
"""

import argparse
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import datakit, evaluation, network
from .baselines import SolverConfig
from .errors import DeepInverseError, DivergenceError, NumericError
from .metrics import nmse, psnr
from .sensing import gen_ensemble, load_ensemble, measure, measurements_for_ratio, save_ensemble

log = logging.getLogger("deepinverse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
WEIGHTS_FILE = "weights.dinw"
PHI_FILE = "phi.dics"
CHECKPOINT_FILE = "checkpoint.dinw"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _names(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def _ints(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _path(text):
    return os.path.abspath(text)


def _add_common(p):
    p.add_argument("--out", type=_path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads (DICS_THREADS overrides)")
    p.add_argument("--verbose", action=argparse.BooleanOptionalAction, default=False)


def _add_arch(p):
    p.add_argument("--arch", choices=sorted(network.PRESETS), default="desk")
    p.add_argument("--filters", type=_ints, default=None,
                   help="comma-separated filters per layer, overrides the preset")
    p.add_argument("--kernel", type=int, default=None, help="odd kernel side, overrides the preset")
    p.add_argument("--scalar-bias", action=argparse.BooleanOptionalAction, default=False)


def _add_solver(p):
    p.add_argument("--max-iters", type=int, default=None,
                   help="solver iterations (default: 200 iht, 100 amp, 500 tv)")
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--sparsity-k", type=int, default=8)
    p.add_argument("--lam", type=float, default=1e-2, help="TV weight")
    p.add_argument("--alpha", type=float, default=1.1, help="AMP threshold multiplier")


def build_parser():
    parser = _Parser(prog="deepinverse", fromfile_prefix_chars="@",
                     description="Compressive sensing recovery: learned and classical.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="build a train/test patch manifest")
    _add_common(p)
    p.add_argument("--source", type=_path, default=None,
                   help="directory of .pgm/.png images (default: bundled corpus)")
    p.add_argument("--synthetic", choices=["dct-sparse", "piecewise-constant"], default=None,
                   help="generate synthetic images instead of reading --source")
    p.add_argument("--count", type=int, default=20, help="synthetic image count")
    p.add_argument("--size", type=int, default=32, help="synthetic image side")
    p.add_argument("--k", type=int, default=8, help="nonzero DCT coefficients (dct-sparse)")
    p.add_argument("--regions", type=int, default=2, help="rectangles (piecewise-constant)")
    p.add_argument("--patch", type=int, default=32)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--split-fraction", type=float, default=0.7)

    p = sub.add_parser("train", help="train a network against one seeded ensemble")
    _add_common(p)
    _add_arch(p)
    p.add_argument("--manifest", type=_path, required=True)
    p.add_argument("--ratio", type=float, required=True, help="m/n")
    p.add_argument("--phi", choices=["gaussian", "orthonormal"], default="gaussian")
    p.add_argument("--phi-seed", type=int, default=None, help="default: --seed")
    p.add_argument("--learning-rate", type=float, default=network.TrainConfig.learning_rate)
    p.add_argument("--momentum", type=float, default=network.TrainConfig.momentum)
    p.add_argument("--batch-size", type=int, default=network.TrainConfig.batch_size)
    p.add_argument("--epochs", type=int, default=network.TrainConfig.epochs)
    p.add_argument("--eval-every", type=int, default=network.TrainConfig.eval_every)
    p.add_argument("--train-limit", type=int, default=0, help="max training patches (0: all)")
    p.add_argument("--test-limit", type=int, default=50, help="test patches for PSNR logging")
    p.add_argument("--checkpoint-every", type=int, default=100, help="iterations (0: never)")

    p = sub.add_parser("recover", help="sense one image and recover it")
    _add_common(p)
    _add_arch(p)
    _add_solver(p)
    p.add_argument("--image", type=_path, required=True)
    p.add_argument("--ratio", type=float, default=None, help="m/n (default: from --phi-file)")
    p.add_argument("--method", default="deepinverse", help=", ".join(evaluation.METHOD_NAMES))
    p.add_argument("--weights", type=_path, default=None,
                   help="weights file or training run directory (deepinverse)")
    p.add_argument("--phi", choices=["gaussian", "orthonormal"], default="gaussian")
    p.add_argument("--phi-file", type=_path, default=None,
                   help="ensemble file (default: the run's phi.dics, else seeded)")

    for name, helptext in (("eval", "Monte-Carlo success/PSNR sweep and noise table"),
                           ("bench", "runtime table")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        _add_solver(p)
        p.add_argument("--manifest", type=_path, required=True)
        p.add_argument("--split", choices=["train", "test"], default="test")
        p.add_argument("--patches", type=int, default=0, help="max patches used (0: all)")
        p.add_argument("--methods", type=_names, default=["proxy-only", "iht", "amp", "tv"])
        p.add_argument("--ratios", type=_floats, default=[0.01, 0.05, 0.1, 0.2])
        p.add_argument("--phi", choices=["gaussian", "orthonormal"], default="gaussian")
        p.add_argument("--weights", type=_path, nargs="*", default=[],
                       help="training run directories for deepinverse (one per ratio)")
        if name == "eval":
            p.add_argument("--trials", type=int, default=100)
            p.add_argument("--fixed-phi", action=argparse.BooleanOptionalAction, default=False)
            p.add_argument("--bin-width", type=float, default=1.0)
            p.add_argument("--snr-db", type=float, default=20.0)
            p.add_argument("--noise-ratio", type=float, default=None,
                           help="ratio for the noise table (default: 0.1 if swept, else first)")
        else:
            _add_arch(p)
            p.add_argument("--repetitions", type=int, default=5)
            p.add_argument("--images", type=int, default=10)
    return parser


def _format_value(value):
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_run_cfg(args, out_dir):
    lines = [args.command]
    for key, value in sorted(vars(args).items()):
        if key == "command":
            continue
        flag = "--" + key.replace("_", "-")
        if isinstance(value, bool):
            lines.append(flag if value else "--no-" + key.replace("_", "-"))
        elif value is None:
            continue
        elif isinstance(value, list) and key == "weights":
            if value:
                lines.append(flag)
                lines.extend(value)
        else:
            lines.append(f"{flag}={_format_value(value)}")
    path = Path(out_dir) / "run.cfg"
    path.write_text("\n".join(lines) + "\n")
    return path


def resolve_threads(requested):
    env = os.environ.get("DICS_THREADS")
    if env:
        try:
            value = int(env)
        except ValueError:
            raise UsageError(f"DICS_THREADS must be an integer, got {env!r}")
    else:
        value = requested
    if value < 1:
        raise UsageError(f"thread count must be >= 1, got {value}")
    return value


def _architecture(args, h, w):
    arch = network.PRESETS[args.arch]
    try:
        if args.filters is not None:
            arch = network.Architecture(args.filters, arch.kernel, arch.input_h, arch.input_w)
        if args.kernel is not None:
            arch = network.Architecture(arch.filters, args.kernel, arch.input_h, arch.input_w)
        return network.Architecture(arch.filters, arch.kernel, h, w, args.scalar_bias)
    except DeepInverseError as exc:
        raise UsageError(str(exc)) from None


def _solver_config(args, method):
    default = evaluation.SOLVER_DEFAULTS.get(method)
    if default is None:
        return None
    try:
        return SolverConfig(
            max_iters=args.max_iters or default.max_iters, tolerance=args.tolerance,
            sparsity_k=args.sparsity_k, lam=args.lam, alpha=args.alpha, verbose=args.verbose,
        )
    except DeepInverseError as exc:
        raise UsageError(str(exc)) from None


def _atomic_save(omega, path):
    tmp = Path(str(path) + ".tmp")
    network.save_params(omega, tmp)
    os.replace(tmp, path)


def _run_dir_files(path):
    """``(weights, phi)`` paths for a run directory or a bare weights file."""
    path = Path(path)
    if path.is_dir():
        return path / WEIGHTS_FILE, path / PHI_FILE
    return path, path.with_name(PHI_FILE)


def cmd_gen_data(args):
    out = Path(args.out)
    if args.synthetic:
        image_dir = out / "images"
        image_dir.mkdir(parents=True, exist_ok=True)
        try:
            stack = datakit.synthetic_stack(args.count, args.size, kind=args.synthetic, k=args.k,
                                            regions=args.regions, seed=args.seed)
        except DeepInverseError as exc:
            raise UsageError(str(exc)) from None
        for i, image in enumerate(stack):
            datakit.write_pgm(image_dir / f"synthetic_{i:04d}.pgm", image)
        source = image_dir
    else:
        source = args.source or datakit.bundled_corpus()
    manifest = datakit.build_manifest(source, args.patch, stride=args.stride,
                                      split_fraction=args.split_fraction, seed=args.seed)
    manifest.write(out / "manifest.tsv")
    train = sum(e.split == "train" for e in manifest.entries)
    print(f"manifest: {out / 'manifest.tsv'} ({train} train, "
          f"{len(manifest.entries) - train} test patches)")
    return EXIT_OK


def cmd_train(args):
    out = Path(args.out)
    manifest = datakit.read_manifest(args.manifest)
    train = manifest.load_patches("train", args.train_limit or None)
    test = manifest.load_patches("test", args.test_limit or None)
    if len(train) == 0:
        raise UsageError("manifest has no training patches")
    h, w = train.shape[1:]
    arch = _architecture(args, h, w)
    try:
        config = network.TrainConfig(args.learning_rate, args.momentum, args.batch_size,
                                     args.epochs, args.seed, args.eval_every)
        phi_seed = args.seed if args.phi_seed is None else args.phi_seed
        phi = gen_ensemble(measurements_for_ratio(args.ratio, h * w), h * w, phi_seed,
                           kind=args.phi)
    except DeepInverseError as exc:
        raise UsageError(str(exc)) from None
    save_ensemble(phi, out / PHI_FILE)

    def checkpoint(omega, it):
        _atomic_save(omega, out / CHECKPOINT_FILE)
        log.info("checkpoint at iteration %d", it)

    try:
        omega, train_log = network.train(
            train, phi, config, arch=arch, test_images=test if len(test) else None,
            checkpoint=checkpoint, checkpoint_every=args.checkpoint_every,
        )
    except DivergenceError as exc:
        if exc.params is not None:
            _atomic_save(exc.params, out / CHECKPOINT_FILE)
        if exc.log is not None:
            exc.log.write_csv(out / "fig5_convergence.csv")
        raise
    _atomic_save(omega, out / WEIGHTS_FILE)
    train_log.write_csv(out / "fig5_convergence.csv")
    last = train_log.train_mse[-1] if train_log.train_mse else float("nan")
    summary = f"trained {len(train_log.train_mse)} iterations, final loss {last:.6g}"
    if train_log.test_psnr:
        summary += f", test psnr {list(train_log.test_psnr.values())[-1]:.3f} dB"
    print(summary)
    return EXIT_OK


def _load_net(path, phi_path, arch):
    if not Path(path).is_file():
        raise FileNotFoundError(f"weights file not found: {path}")
    omega = network.load_params(path, expected=arch)
    phi = load_ensemble(phi_path) if phi_path is not None else None
    return omega, phi


def cmd_recover(args):
    out = Path(args.out)
    truth = datakit.load_grayscale(args.image)
    h, w = truth.shape
    n = h * w
    if args.method not in evaluation.METHOD_NAMES:
        raise UsageError(f"unknown method {args.method!r}; available: "
                         + ", ".join(evaluation.METHOD_NAMES))
    phi = None
    omega = None
    phi_file = args.phi_file
    if args.method == "deepinverse":
        if args.weights is None:
            raise UsageError("method deepinverse needs --weights")
        weights, run_phi = _run_dir_files(args.weights)
        if phi_file is None and run_phi.is_file():
            phi_file = run_phi
        omega, _ = _load_net(weights, None, _architecture(args, h, w))
    if phi_file is not None:
        phi = load_ensemble(phi_file)
        if phi.n != n:
            raise UsageError(f"ensemble senses n={phi.n} pixels, image has {n}")
    else:
        if args.ratio is None:
            raise UsageError("--ratio is required without an ensemble file")
        try:
            phi = gen_ensemble(measurements_for_ratio(args.ratio, n), n, args.seed,
                               kind=args.phi)
        except DeepInverseError as exc:
            raise UsageError(str(exc)) from None
    if omega is not None:
        method = evaluation.DeepInverseMethod({phi.key(): omega})
    else:
        method = evaluation.make_method(args.method, _solver_config(args, args.method))
    y = measure(phi, truth.reshape(-1))
    method.prepare(phi)
    result = method.recover(y, phi, truth.shape, truth)
    estimate = np.asarray(result.estimate, dtype=np.float64).reshape(truth.shape)
    datakit.write_pgm(out / "recovered.pgm", estimate)
    # Score the image actually written, so the report describes the artifact.
    estimate = datakit.to_8bit(estimate) / 255.0
    score = psnr(estimate, truth)
    line = (f"method={method.name} m={phi.m} n={phi.n} psnr_db="
            f"{'inf' if math.isinf(score) else f'{score:.4f}'} nmse={nmse(estimate, truth):.6g} "
            f"time_s={result.wall_time:.6f}")
    (out / "metrics.txt").write_text(line + "\n")
    print(line)
    return EXIT_OK


def _methods(args, ratios, shape, need_phis):
    n = int(np.prod(shape))
    unknown = [m for m in args.methods if m not in evaluation.METHOD_NAMES]
    if unknown:
        raise UsageError(f"unknown method(s) {', '.join(unknown)}; available: "
                         + ", ".join(evaluation.METHOD_NAMES))
    methods, phis = [], {}
    for name in args.methods:
        if name != "deepinverse":
            methods.append(evaluation.make_method(name, _solver_config(args, name)))
            continue
        nets = {}
        for run in args.weights:
            weights, phi_path = _run_dir_files(run)
            if not phi_path.is_file():
                raise FileNotFoundError(f"ensemble file not found: {phi_path}")
            phi = load_ensemble(phi_path)
            omega = network.load_params(weights) if weights.is_file() else None
            if omega is None:
                raise FileNotFoundError(f"weights file not found: {weights}")
            ratio = min(ratios, key=lambda r: abs(measurements_for_ratio(r, n) - phi.m))
            if phi.n != n or measurements_for_ratio(ratio, n) != phi.m:
                raise UsageError(f"{run}: trained for m={phi.m} n={phi.n}, which matches "
                                 "none of the requested ratios")
            phis[ratio] = phi
            nets[phi.key()] = omega
        missing = [r for r in ratios if r not in phis]
        if missing and need_phis:
            raise UsageError("deepinverse needs --weights for every ratio; missing "
                             + ", ".join(map(str, missing)))
        if missing:
            arch = _architecture(args, *shape)
            log.warning("no weights for ratios %s: timing untrained networks", missing)
            untrained = network.init_params(arch, args.seed)
            methods.append(_UntrainedNet(nets, untrained))
        else:
            methods.append(evaluation.DeepInverseMethod(nets))
    return methods, phis


class _UntrainedNet(evaluation.DeepInverseMethod):
    """Timing stand-in: reuses one initialized network for any ensemble."""

    def __init__(self, nets, omega):
        super().__init__(nets, trainer=lambda phi: omega)


def _patches(args):
    manifest = datakit.read_manifest(args.manifest)
    patches = manifest.load_patches(args.split, args.patches or None)
    if len(patches) == 0:
        raise UsageError(f"manifest has no {args.split} patches")
    return patches


def cmd_eval(args):
    out = Path(args.out)
    patches = _patches(args)
    methods, phis = _methods(args, args.ratios, patches.shape[1:], need_phis=True)
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    report = evaluation.sweep(methods, args.ratios, patches, args.trials, seed=args.seed,
                              fixed_phi=args.fixed_phi, phi_kind=args.phi,
                              threads=args.threads, phis=phis)
    report.write(out, args.bin_width)
    noise_ratio = args.noise_ratio
    if noise_ratio is None:
        noise_ratio = 0.1 if 0.1 in args.ratios else args.ratios[0]
    evaluation.noise_experiment(methods, args.snr_db, noise_ratio, patches, args.trials,
                                seed=args.seed, fixed_phi=args.fixed_phi, phi_kind=args.phi,
                                threads=args.threads, phis=phis,
                                out_path=out / "table3_noise.csv")
    for row in report.rows:
        print(f"ratio={row.ratio:g} method={row.method} success_rate={row.success_rate:.3f} "
              f"mean_psnr_db={row.mean_psnr_db:.3f}")
    return EXIT_OK


def cmd_bench(args):
    out = Path(args.out)
    patches = _patches(args)
    methods, phis = _methods(args, args.ratios, patches.shape[1:], need_phis=False)
    rows = evaluation.bench_runtime(methods, args.ratios, patches, args.repetitions,
                                    seed=args.seed, images=args.images, phi_kind=args.phi,
                                    out_path=out / "table1_runtime.csv", phis=phis)
    for ratio, name, t, _, _ in rows:
        print(f"ratio={ratio:g} method={name} median_time_s={t:.6f}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "recover": cmd_recover,
            "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.threads = resolve_threads(args.threads)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_run_cfg(args, args.out)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"deepinverse {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"deepinverse {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DeepInverseError, OSError) as exc:
        print(f"deepinverse {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
