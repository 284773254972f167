"""Command-line interface: ``tibp {synth,train,reconstruct,benchmark,match}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .core import StateError, denormalize, init_state
from .evaluate import (feature_match_score, learned_appearances, per_pixel_rmse,
                       reconstruct_test_image, run_benchmark, write_rows)
from .io import (DataError, load_checkpoint, load_image_directory, read_config, read_manifest,
                 save_checkpoint, write_image, write_manifest)
from .sampler import sweep
from .synth import SynthSpec, generate_synthetic_dataset, normalized_truth_features

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

TRACE_HEADER = ["iteration", "log_likelihood", "data_log_likelihood", "k_plus", "births",
                "alpha", "sigma_x", "sigma_a", "proposals", "accepts", "seconds"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _ints(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of integers: {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _names(text: str) -> tuple[str, ...]:
    values = tuple(v for v in text.replace(",", " ").split())
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tibp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="draw a synthetic glyph dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n-images", type=int, default=100)
    p.add_argument("--height", type=int, default=9)
    p.add_argument("--width", type=int, default=9)
    p.add_argument("--mode", choices=("additive", "occluding"), default="occluding")
    p.add_argument("--include-prob", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rotations", type=_floats, default=(0.0,), help="degrees, comma separated")
    p.add_argument("--scales", type=_floats, default=(1.0,))

    p = sub.add_parser("train", help="run sweeps and write a checkpoint")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--trace", required=True, type=Path)
    p.add_argument("--resume", type=Path)

    p = sub.add_parser("reconstruct", help="reconstruct held-out images")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--metrics", required=True, type=Path)
    p.add_argument("--sweeps", type=int, default=10)

    p = sub.add_parser("benchmark", help="time the MH sampler against naive enumeration")
    p.add_argument("--sizes", type=_ints, default=(9, 15))
    p.add_argument("--samplers", type=_names, default=("mh", "naive"))
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("match", help="score learned features against a truth manifest")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--truth", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    return parser


def cmd_synth(args) -> int:
    spec = SynthSpec(n_images=args.n_images, height=args.height, width=args.width,
                     include_prob=args.include_prob, mode=args.mode, noise=args.noise,
                     rotations=args.rotations, scales=args.scales)
    data, truth = generate_synthetic_dataset(spec, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    suffix = ".ppm" if data.n_channels == 3 else ".pgm"
    width = max(4, len(str(data.n_images - 1)))
    files = []
    for n, img in enumerate(data.images):
        name = f"img_{n:0{width}d}{suffix}"
        write_image(args.out / name, img)
        files.append(name)
    truth.meta.update(seed=args.seed, include_prob=args.include_prob)
    write_manifest(truth, args.out / "truth.manifest", files)
    print(f"wrote {len(files)} images and truth.manifest to {args.out}")
    return EXIT_OK


def _trace_row(report, seconds: float) -> dict:
    return {
        "iteration": report.iteration,
        "log_likelihood": report.log_likelihood,
        "data_log_likelihood": report.data_log_likelihood,
        "k_plus": report.k_plus,
        "births": report.births,
        "alpha": report.alpha,
        "sigma_x": report.sigma_x,
        "sigma_a": report.sigma_a,
        "proposals": sum(report.proposals.values()),
        "accepts": sum(report.accepts.values()),
        "seconds": seconds,
    }


def cmd_train(args) -> int:
    config = read_config(args.config)
    if args.resume is not None:
        state = load_checkpoint(args.resume)
        if state.variant != config.variant:
            raise DataError("checkpoint variant differs from the config")
    else:
        data = load_image_directory(args.data, normalize=config.normalize)
        state = init_state(data, config)
    rows = []
    while state.iteration < config.iterations:
        state, report = sweep(state)
        rows.append(_trace_row(report, report.seconds))
        print(f"iter {report.iteration:4d}  K+ {report.k_plus:3d}  "
              f"log-lik {report.log_likelihood:.3f}", flush=True)
    save_checkpoint(state, args.out)
    write_rows(rows, args.trace, header=TRACE_HEADER)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    state = load_checkpoint(args.checkpoint)
    raw = load_image_directory(args.data, normalize=False)
    if raw.images.shape[1:] != state.X.shape[1:]:
        raise DataError(f"test images are {raw.images.shape[1:]}, "
                        f"the model expects {state.X.shape[1:]}")
    x = (raw.images - state.mean) / state.std
    args.out.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(state.seed))
    rows = []
    for name, img in zip(raw.names, x):
        rec = reconstruct_test_image(state, img, args.sweeps, rng)
        rmse = per_pixel_rmse(rec.image, img)
        write_image(args.out / (Path(name).stem + (".ppm" if img.shape[2] == 3 else ".pgm")),
                    denormalize(rec.image, state.mean, state.std))
        rows.append({"image": name, "rmse": rmse, "k_active": int(rec.z.sum())})
    rows.append({"image": "mean", "rmse": float(np.mean([r["rmse"] for r in rows])),
                 "k_active": float(np.mean([r["k_active"] for r in rows]))})
    write_rows(rows, args.metrics)
    print(f"mean test RMSE {rows[-1]['rmse']:.6f} over {len(rows) - 1} images")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    def progress(row):
        print(f"{row.sampler:5s} {row.size:3d}  iter {row.iteration:4d}  "
              f"{row.seconds:.3f}s  log-lik {row.log_likelihood:.3f}", flush=True)

    rows = run_benchmark(args.sizes, args.samplers, args.iterations, args.seed, progress)
    write_rows(rows, args.out)
    return EXIT_OK


def cmd_match(args) -> int:
    state = load_checkpoint(args.checkpoint)
    truth = read_manifest(args.truth)
    if state.K == 0:
        raise DataError("the checkpoint has no learned features")
    target = normalized_truth_features(truth, state.mean, state.std)
    result = feature_match_score(learned_appearances(state), target, state.space)
    partner = {t: l for l, t in result.assignment}
    rows = []
    for j, name in enumerate(truth.names):
        rows.append({"true_feature": j, "name": name, "learned_feature": partner.get(j, ""),
                     "rmse": float(result.costs[j])})
    for k in result.surplus:
        rows.append({"true_feature": "", "name": "surplus", "learned_feature": k, "rmse": ""})
    write_rows(rows, args.out)
    print(f"mean matched RMSE {result.mean_rmse:.6f}; {len(result.surplus)} surplus features")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "reconstruct": cmd_reconstruct,
            "benchmark": cmd_benchmark, "match": cmd_match}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (FloatingPointError, StateError, np.linalg.LinAlgError, OverflowError) as e:
        print(f"tibp: numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as e:
        print(f"tibp: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"tibp: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
