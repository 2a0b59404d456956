"""Command-line front end: verify, train, synth, revise and analyze.

Every command accepts ``--config FILE`` with flat ``key = value`` lines
(``#`` starts a comment); explicit flags override the file. Commands that
write files also write ``manifest.txt``, which is itself a valid config
that reproduces the run.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, datasets, resources, revision, saliency, scorer, verify
from .errors import BadInputError, IlensError, NumericError
from .imageio import list_images, read_image, write_image
from .optimizer import OptimizeConfig, optimize, write_theta_csv, write_trace_csv

MANIFEST = "manifest.txt"
HASH_PREFIX = "sha256."
# execution resources and output locations never change results, so they
# are kept out of manifests; a rerun names its own output location
NOT_RECORDED = {"config", "jobs", "command", "verbose", "out", "out_dir", "report"}


# config files ---------------------------------------------------------------


def parse_kv(text: str, source: str = "config") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadInputError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise BadInputError(f"{source}:{lineno}: empty key")
        if key in out:
            raise BadInputError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_kv(items: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off", ""):
        return False
    raise BadInputError(f"not a boolean: {text!r}")


def int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def grid_spec(text: str) -> tuple[int, int]:
    parts = str(text).lower().replace("x", ",").split(",")
    try:
        rows, cols = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 8x8, got {text!r}") from None
    return rows, cols


# parser ---------------------------------------------------------------------


def _common(p):
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                   help="worker threads for model evaluation")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")


def _model_flags(p):
    p.add_argument("--weights", help="ILENS1 weights file (default: bundled toy scorer)")
    p.add_argument("--grid", type=grid_spec, help="cell grid, e.g. 8x8")
    p.add_argument("--batch-size", type=int, default=64)


def _saliency_flags(p):
    p.add_argument("--r-set", type=int_list, help="context sizes, comma separated")
    p.add_argument("--scale", choices=sorted(saliency.SCALE_FRACTIONS), default="default")
    p.add_argument("--allow-large-r", action="store_true")
    p.add_argument("--samples-per-r", type=int, default=200)
    p.add_argument("--m1", type=float, default=0.60)
    p.add_argument("--m2", type=float, default=0.15)
    p.add_argument("--alpha", type=float, default=10.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ilens", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="identity and Shapley axiom suite on random games")
    _common(p)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--games", type=int, default=50)
    p.add_argument("--dim", type=int, default=3)
    p.add_argument("--pairs-per-game", type=int, default=10)
    p.add_argument("--inject-fault", choices=verify.FAULTS)
    p.add_argument("--report", help="also write the report here")
    p.add_argument("--out-dir", help="write report.txt and manifest.txt here")

    p = sub.add_parser("train", help="train the toy shapes scorer")
    _common(p)
    p.add_argument("--out", help="weights file to write")
    p.add_argument("--count", type=int, default=400)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--learning-rate", type=float, default=5e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--channels", type=int_list, default=[4, 8, 8])

    p = sub.add_parser("synth", help="write seeded toy scenes and their bounding boxes")
    _common(p)
    p.add_argument("--out-dir")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("revise", help="learn and apply an image revision")
    _common(p)
    p.add_argument("--image", help="input PNG or PPM (default: bundled toy scene 0)")
    p.add_argument("--out-dir")
    _model_flags(p)
    _saliency_flags(p)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--learning-rate", type=float, default=0.05)
    p.add_argument("--gradient-mode", choices=("analytic", "finite-difference"), default="analytic")
    p.add_argument("--fd-step", type=float, default=1e-3)
    p.add_argument("--relabel-period", type=int)
    p.add_argument("--minibatch-fraction", type=float, default=1.0)
    p.add_argument("--dry-run", action="store_true", help="skip optimization; theta stays 0")
    p.add_argument("--template-size", type=int)
    p.add_argument("--center-stride", type=int, default=1)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--beta-hue", type=float, default=revision.DEFAULT_BETAS["hue"])
    p.add_argument("--beta-sat", type=float, default=revision.DEFAULT_BETAS["sat"])
    p.add_argument("--beta-bright", type=float, default=revision.DEFAULT_BETAS["bright"])
    p.add_argument("--blur-kernel", type=int, default=5)
    p.add_argument("--blur-sigma", type=float)
    p.add_argument("--order", choices=sorted(revision.STAGE_ORDERS), default="blur-first")
    p.add_argument("--edge-low", type=float, default=0.1)
    p.add_argument("--edge-high", type=float, default=0.2)

    p = sub.add_parser("analyze", help="delta distributions, tau / kappa and P(F | delta)")
    _common(p)
    p.add_argument("--mode", choices=("tau", "kappa", "posterior"), default="tau")
    p.add_argument("--corpus-a", help="image directory (tau, kappa) or heatmap CSV directory (posterior)")
    p.add_argument("--corpus-b", help="second image directory (tau)")
    p.add_argument("--boxes", help="bounding boxes, one 'x0 y0 x1 y1' line per heatmap (posterior)")
    p.add_argument("--out-dir")
    _model_flags(p)
    p.add_argument("--r", type=int_list, help="context sizes; default from --scale")
    p.add_argument("--scale", choices=sorted(saliency.SCALE_FRACTIONS), default="default")
    p.add_argument("--allow-large-r", action="store_true")
    p.add_argument("--samples-per-image", type=int, default=100)
    p.add_argument("--bins", type=int, default=analysis.DEFAULT_BINS)
    p.add_argument("--blur-kernel", type=int, default=5)
    p.add_argument("--blur-sigma", type=float)
    p.add_argument("--svg", action="store_true")
    return parser


def _subparser(parser, command):
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            return action.choices[command]
    raise BadInputError(f"unknown command {command!r}")


def _apply_config(sub, path) -> None:
    """Load ``path`` as defaults for ``sub``; unknown keys are rejected."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise BadInputError(f"cannot read config {path}: {exc}") from None
    items = parse_kv(text, str(path))
    actions = {a.dest: a for a in sub._actions if a.dest != "help"}
    defaults, hashes = {}, {}
    for key, value in items.items():
        dest = key.replace("-", "_")
        if key.startswith(HASH_PREFIX):
            hashes[key[len(HASH_PREFIX):].replace("-", "_")] = value
            continue
        if key == "command":
            continue
        action = actions.get(dest)
        if action is None:
            raise BadInputError(f"{path}: unknown key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[dest] = _parse_bool(value)
        elif value == "":
            defaults[dest] = None
        else:
            try:
                defaults[dest] = action.type(value) if action.type else value
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise BadInputError(f"{path}: bad value for {key}: {exc}") from None
            if action.choices is not None and defaults[dest] not in action.choices:
                raise BadInputError(f"{path}: {key} must be one of {sorted(action.choices)}")
    for dest in hashes:
        if dest not in actions:
            raise BadInputError(f"{path}: hash for unknown key {dest!r}")
    sub.set_defaults(**defaults)
    sub.set_defaults(_hashes=hashes)


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = _subparser(parser, args.command)
        _apply_config(sub, args.config)
        args = parser.parse_args(argv)
    for dest, digest in getattr(args, "_hashes", {}).items():
        path = getattr(args, dest, None)
        if path and Path(path).is_file() and file_sha256(path) != digest:
            raise BadInputError(f"{dest} {path} does not match the hash recorded in the config")
    return args


def _manifest(args, inputs: dict) -> str:
    items = {"command": args.command}
    for key, value in sorted(vars(args).items()):
        if key.startswith("_") or key in NOT_RECORDED:
            continue
        items[key.replace("_", "-")] = _format_value(value)
    for key, path in sorted(inputs.items()):
        items[HASH_PREFIX + key.replace("_", "-")] = file_sha256(path)
    return format_kv(items)


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) in (None, ""):
            raise BadInputError(f"--{name.replace('_', '-')} is required")


def _out_dir(args) -> Path:
    _require(args, "out_dir")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _log(args, msg):
    if args.verbose:
        print(msg, file=sys.stderr)


# commands -----------------------------------------------------------------


def cmd_verify(args) -> int:
    if args.n < 2 or args.games < 1:
        raise BadInputError("need --n >= 2 and --games >= 1")
    results = verify.run_suite(args.n, args.games, args.dim, args.seed,
                               args.pairs_per_game, args.inject_fault)
    header = f"verify n={args.n} games={args.games} dim={args.dim} seed={args.seed}"
    if args.inject_fault:
        header += f" fault={args.inject_fault}"
    text = verify.report(results, header)
    sys.stdout.write(text)
    if args.report:
        Path(args.report).write_text(text)
    if args.out_dir:
        out = _out_dir(args)
        (out / "report.txt").write_text(text)
        (out / MANIFEST).write_text(_manifest(args, {}))
    return 0 if all(r.passed for r in results) else NumericError.exit_code


def cmd_train(args) -> int:
    _require(args, "out")
    if args.count < 2:
        raise BadInputError("--count must be >= 2")
    images, labels = datasets.shapes_dataset(args.count, args.size, args.seed, args.noise)
    recipe = scorer.default_architecture(args.size, tuple(args.channels), classes=2)
    model = scorer.init_model(recipe, (args.size, args.size, 3), seed=args.seed)
    model, acc = scorer.train_toy(model, images, labels, epochs=args.epochs, seed=args.seed,
                                  batch_size=args.batch_size, learning_rate=args.learning_rate)
    scorer.save_weights(model, args.out)
    Path(str(args.out) + ".manifest.txt").write_text(_manifest(args, {}))
    print(f"training accuracy {acc:.4f}")
    if args.epochs > 0 and acc <= 0.5:
        print("training did not beat the random-guess baseline", file=sys.stderr)
        return NumericError.exit_code
    return 0


def cmd_synth(args) -> int:
    out = _out_dir(args)
    boxes = []
    for k in range(args.count):
        seed = args.seed + k
        write_image(out / f"scene_{k:03d}.png", datasets.toy_scene(seed, args.size))
        boxes.append(datasets.foreground_box(seed, args.size))
    analysis.write_boxes(out / "boxes.txt", boxes)
    (out / MANIFEST).write_text(_manifest(args, {}))
    return 0


def _load_model(args):
    if not args.weights:
        args.weights = str(resources.toy_weights())
    return scorer.load_weights(args.weights)


def _grid_image(pixels, args) -> scorer.GridImage:
    return scorer.GridImage(pixels, grid=args.grid)


def _sal_config(args, n) -> saliency.SaliencyConfig:
    r_set = tuple(args.r_set) if args.r_set else saliency.r_set_for(n, args.scale)
    large = args.allow_large_r or args.scale == "large"
    return saliency.SaliencyConfig(r_set, args.samples_per_r, args.m1, args.m2, args.alpha, large)


def diverging_rgb(values) -> np.ndarray:
    """-1 -> blue, 0 -> white, +1 -> red."""
    v = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)[..., None]
    white = np.ones(3)
    red, blue = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])
    return np.where(v >= 0, white + v * (red - white), white - v * (blue - white))


def cmd_revise(args) -> int:
    if not args.image:
        args.image = str(resources.toy_scene_path(0))
    out = _out_dir(args)
    model = _load_model(args)
    image = _grid_image(read_image(args.image), args)
    if image.shape != model.input_shape:
        raise BadInputError(f"image shape {image.shape} does not fit the model input {model.input_shape}")
    edges = revision.edge_map(image, args.edge_low, args.edge_high)
    image = scorer.GridImage(image.pixels, image.grid, image.baseline, edges)
    betas = {"hue": args.beta_hue, "sat": args.beta_sat, "bright": args.beta_bright}
    field = revision.RevisionField.zeros(image, args.template_size, args.center_stride, args.lam, betas)
    reviser = revision.Reviser(image, field, edges, args.blur_kernel, args.blur_sigma, args.order)
    sal = _sal_config(args, image.n_cells)
    if args.dry_run:
        result = reviser.revise()
        trace, samples = None, None
    else:
        opt = OptimizeConfig(args.steps, args.learning_rate, args.gradient_mode, args.fd_step,
                             args.seed, args.relabel_period, args.minibatch_fraction,
                             args.batch_size, max(1, args.jobs))
        field, trace, result, samples = optimize(
            image, model, sal, opt, field=field, reviser=reviser,
            log=lambda m: _log(args, m))
    write_image(out / "revised.png", result.revised.pixels)
    for op, heat in result.heatmaps.items():
        write_image(out / f"heatmap_{op}.png", diverging_rgb(heat))
        analysis.write_grid_csv(out / f"heatmap_{op}.csv", heat)
    write_theta_csv(out / "theta.csv", field)
    if trace is not None:
        write_trace_csv(out / "loss_trace.csv", trace)
        saliency.write_samples_csv(out / "coalitions.csv", samples)
        print(f"loss {trace.losses[0]:.6g} -> {trace.final_loss:.6g}")
    (out / MANIFEST).write_text(_manifest(args, {"image": args.image, "weights": args.weights}))
    return 0


def _corpus(directory, args):
    paths = list_images(directory)
    if not paths:
        raise BadInputError(f"no PNG or PPM images in {directory}")
    return [_grid_image(read_image(p), args) for p in paths], paths


def cmd_analyze(args) -> int:
    out = _out_dir(args)
    if args.mode == "posterior":
        return _analyze_posterior(args, out)
    _require(args, "corpus_a")
    model = _load_model(args)
    corpus_a, paths_a = _corpus(args.corpus_a, args)
    inputs = {"weights": args.weights}
    if args.mode == "tau":
        _require(args, "corpus_b")
        corpus_b, _ = _corpus(args.corpus_b, args)
        names = ("a", "b")
    else:
        corpus_b = corpus_a
        corpus_a = analysis.denoise_corpus(corpus_a, args.blur_kernel, args.blur_sigma)
        names = ("denoised", "original")
    n = corpus_a[0].n_cells
    rs = args.r or list(saliency.r_set_for(n, args.scale))
    large = args.allow_large_r or args.scale == "large"
    for r in rs:
        if not 1 <= r < n or (r > 0.5 * n and not large):
            raise BadInputError(f"r={r} not allowed for n={n}; use --allow-large-r above 0.5n")
    kw = {"batch_size": args.batch_size, "jobs": max(1, args.jobs)}
    summary = []
    for r in rs:
        na = analysis.corpus_delta_norms(corpus_a, model, r, args.samples_per_image, args.seed, **kw)
        nb = analysis.corpus_delta_norms(corpus_b, model, r, args.samples_per_image, args.seed, **kw)
        ha, hb = analysis.shared_histograms(na, nb, r, args.bins)
        metric = analysis.tau_metric(ha, hb)
        analysis.write_histograms_csv(out / f"hist_r{r}.csv", {names[0]: ha, names[1]: hb})
        analysis.write_curve_csv(out / f"{args.mode}_r{r}.csv", ha.edges, {args.mode: metric})
        if args.svg:
            svg = analysis.line_plot_svg(ha.centers, {f"{args.mode} r={r}": metric},
                                         f"{args.mode} at r={r}")
            (out / f"{args.mode}_r{r}.svg").write_text(svg)
        summary.append(f"r={r}: max |{args.mode}| {np.max(np.abs(metric)):.6g}")
    print("\n".join(summary))
    (out / MANIFEST).write_text(_manifest(args, inputs))
    return 0


def _analyze_posterior(args, out: Path) -> int:
    _require(args, "corpus_a", "boxes")
    directory = Path(args.corpus_a)
    if not directory.is_dir():
        raise BadInputError(f"not a directory: {directory}")
    paths = sorted(directory.glob("*.csv"))
    if not paths:
        raise BadInputError(f"no heatmap CSV files in {directory}")
    heatmaps = [analysis.read_grid_csv(p) for p in paths]
    boxes = analysis.read_boxes(args.boxes)
    if len(boxes) != len(heatmaps):
        raise BadInputError(f"{len(boxes)} boxes for {len(heatmaps)} heatmaps")
    masks = [analysis.box_mask(b, h.shape) for b, h in zip(boxes, heatmaps)]
    curve = analysis.foreground_posterior(heatmaps, masks, args.bins)
    analysis.write_curve_csv(out / "posterior.csv", curve.edges, {
        "p_f_given_delta": curve.posterior, "p_delta_given_f": curve.lik_f,
        "p_delta_given_b": curve.lik_b})
    if args.svg:
        centers = 0.5 * (curve.edges[:-1] + curve.edges[1:])
        svg = analysis.line_plot_svg(centers, {"P(F|delta)": curve.posterior}, "foreground posterior")
        (out / "posterior.svg").write_text(svg)
    print(f"foreground prior {curve.prior_f:.6g}")
    (out / MANIFEST).write_text(_manifest(args, {"boxes": args.boxes}))
    return 0


COMMANDS = {
    "verify": cmd_verify,
    "train": cmd_train,
    "synth": cmd_synth,
    "revise": cmd_revise,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except IlensError as exc:
        print(f"ilens: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
