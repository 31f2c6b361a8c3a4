"""``ndcrf`` command line: filter, refine, train-overfit, eval, fixture.

Each command prints one JSON summary line on stdout; diagnostics go to stderr.
Exit codes: 2 bad arguments, 3 I/O error, 4 shape mismatch, 5 invalid CRF
config, 6 training divergence.
"""

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import densecrf, io, permutohedral, training
from .tensor import ShapeError, argmax_channels, dice_coefficient

log = logging.getLogger("ndcrf")

EXIT_ARGS, EXIT_IO, EXIT_SHAPE, EXIT_CONFIG, EXIT_DIVERGED = 2, 3, 4, 5, 6


class ConfigError(ValueError):
    pass


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def load_config(path, k):
    """Parse a CRF JSON config for ``k`` labels into :class:`densecrf.CrfParams`."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    try:
        thetas = {name: float(raw[name]) for name in ("theta_alpha", "theta_beta", "theta_gamma")}
    except KeyError as exc:
        raise ConfigError(f"{path}: missing {exc.args[0]}") from None
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: thetas must be numbers") from None
    mu = raw.get("mu", "potts")
    if mu == "potts":
        mu = densecrf.potts(k)
    else:
        try:
            mu = np.array(mu, dtype=np.float64)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: mu must be \"potts\" or a k x k matrix") from None
        if mu.shape != (k, k):
            raise ConfigError(f"{path}: mu has shape {mu.shape}, expected ({k}, {k})")
        if np.any(np.diag(mu) != 0):
            raise ConfigError(f"{path}: mu diagonal must be zero")
    try:
        return densecrf.CrfParams(mu=mu, w=tuple(raw.get("w", (1.0, 1.0))),
                                  iterations=raw.get("iterations", 5), **thetas)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def params_to_json(params):
    return {
        "theta_alpha": params.theta_alpha,
        "theta_beta": params.theta_beta,
        "theta_gamma": params.theta_gamma,
        "w": list(params.w),
        "mu": params.mu.tolist(),
        "iterations": params.iterations,
    }


def _emit(summary):
    print(json.dumps(summary, sort_keys=True))


def cmd_filter(args):
    if args.mode == "appearance" and (args.theta_alpha is None or args.theta_beta is None):
        raise CliError(EXIT_ARGS, "appearance mode requires --theta-alpha and --theta-beta")
    if args.mode == "smoothness" and args.theta_gamma is None:
        raise CliError(EXIT_ARGS, "smoothness mode requires --theta-gamma")
    config = permutohedral.FeatureConfig(args.mode, args.theta_alpha, args.theta_beta, args.theta_gamma)
    values = io.read_tensor(args.input)
    reference = io.read_image(args.reference)
    if values.shape[:-1] != reference.shape[:-1]:
        raise ShapeError(f"input extents {values.shape[:-1]} != reference extents {reference.shape[:-1]}")
    start = time.perf_counter()
    lattice = permutohedral.lattice_build(permutohedral.build_features(reference, config))
    flat = values.reshape(lattice.n_points, -1)
    out = permutohedral.filter(lattice, flat, normalize=args.normalize)
    wall = (time.perf_counter() - start) * 1e3
    io.write_tensor(out.reshape(values.shape), args.output)
    _emit({"n_points": lattice.n_points, "dim": lattice.dim,
           "vertices": lattice.n_vertices, "wall_ms": round(wall, 3)})


def cmd_refine(args):
    probs = io.read_tensor(args.probs)
    reference = io.read_image(args.reference)
    params = load_config(args.config, probs.shape[-1])
    state = densecrf.mean_field_inference(reference, probs, params)
    io.write_tensor(state.q, args.output_q)
    labels = argmax_channels(state.q)
    if args.output_labels:
        io.write_labels(labels, args.output_labels)
    _emit({"iterations": params.iterations, "max_delta": state.max_deltas,
           "n_points": int(labels.size), "labels": params.n_labels})


def _write_history(path, history, k, timing):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"] + [f"dice_{c}" for c in range(k)] + ["wall_ms"])
        for row in history:
            wall = f"{row.wall_ms:.3f}" if timing else "0"
            writer.writerow([row.step, repr(row.loss)] + [repr(d) for d in row.dice] + [wall])


def cmd_train_overfit(args):
    image = io.read_image(args.image)
    labels = io.read_labels(args.labels)
    if image.shape[:-1] != labels.shape:
        raise ShapeError(f"image extents {image.shape[:-1]} != label extents {labels.shape}")
    k = max(int(labels.max()) + 1, 2)
    params = load_config(args.config, k)
    k = params.n_labels
    if labels.max() >= k:
        raise ShapeError(f"labels reach {labels.max()} but config has {k} labels")
    if not 0.0 <= args.strength < 1.0:
        raise CliError(EXIT_ARGS, "--strength must lie in [0, 1)")
    if args.lr < 0 or args.steps < 0:
        raise CliError(EXIT_ARGS, "--lr and --steps must be non-negative")
    cfg = training.TrainConfig(learning_rate=args.lr, steps=args.steps,
                               train_mu=args.train_mu, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    distorted = training.distort_labels(labels, k, cfg.seed, args.strength)
    result = training.train_overfit(image, distorted, labels, params, cfg)

    before = argmax_channels(distorted)
    after = argmax_channels(result.final_q)
    io.write_tensor(distorted, out / "distorted_probs.npy")
    io.write_labels(before, out / "labels_before.npy")
    io.write_labels(after, out / "labels_after.npy")
    if labels.ndim == 2:
        scale = 1.0 / (k - 1)
        io.write_png(before * scale, out / "labels_before.png")
        io.write_png(after * scale, out / "labels_after.png")
    with open(out / "params.json", "w") as fh:
        json.dump(params_to_json(result.params), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_history(out / "history.csv", result.history, k, args.record_timing)
    _emit({"baseline_dice": result.history[0].dice, "final_dice": result.final_dice,
           "final_loss": result.final_loss, "steps": cfg.steps, "w": list(result.params.w)})


def cmd_eval(args):
    pred = io.read_labels(args.pred)
    truth = io.read_labels(args.truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if args.label is not None:
        labels = [args.label]
    else:
        labels = range(int(max(pred.max(), truth.max())) + 1)
    _emit({"dice": {str(lab): dice_coefficient(pred, truth, lab) for lab in labels}})


def cmd_fixture(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    image, labels = training.two_region_fixture(args.size, args.seed)
    io.write_png(image, out / "image.png")
    io.write_tensor(image, out / "image.npy")
    io.write_labels(labels, out / "labels.npy")
    config = {"theta_alpha": 5.0, "theta_beta": 0.1, "theta_gamma": 3.0,
              "w": [1.0, 1.0], "mu": "potts", "iterations": 5}
    with open(out / "crf.json", "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _emit({"size": args.size, "foreground_voxels": int(labels.sum()), "out_dir": str(out)})


def build_parser():
    parser = argparse.ArgumentParser(prog="ndcrf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("filter", help="permutohedral Gaussian / bilateral filtering")
    p.add_argument("--input", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--mode", choices=permutohedral.MODES, default="appearance")
    p.add_argument("--theta-alpha", type=float)
    p.add_argument("--theta-beta", type=float)
    p.add_argument("--theta-gamma", type=float)
    p.add_argument("--output", required=True)
    p.add_argument("--no-normalize", dest="normalize", action="store_false")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("refine", help="dense CRF mean-field refinement of class probabilities")
    p.add_argument("--probs", required=True)
    p.add_argument("--reference", required=True,
                   help="reference image (NPY or PNG), intensities pre-scaled to [0, 1]")
    p.add_argument("--config", required=True)
    p.add_argument("--output-q", required=True)
    p.add_argument("--output-labels")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("train-overfit", help="fit CRF weights to undo a distorted segmentation")
    p.add_argument("--image", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--strength", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--train-mu", action="store_true", help="also train off-diagonal compatibilities")
    p.add_argument("--record-timing", action="store_true",
                   help="fill history wall_ms (makes output non-reproducible)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train_overfit)

    p = sub.add_parser("eval", help="per-label Dice between two label maps")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--label", type=int)
    group.add_argument("--all-labels", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fixture", help="write the two-region demo image, labels and config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fixture)
    return parser


def _thread_limit():
    n = os.environ.get("NDCRF_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            args.func(args)
    except CliError as exc:
        print(f"ndcrf: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"ndcrf: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ShapeError as exc:
        print(f"ndcrf: shape mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (OSError, io.NpyFormatError) as exc:
        print(f"ndcrf: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except training.DivergenceError as exc:
        print(f"ndcrf: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"ndcrf: {exc}", file=sys.stderr)
        return EXIT_ARGS
    return 0


if __name__ == "__main__":
    sys.exit(main())
