"""Command-line entry points.

Exit codes: 0 success, 1 invalid input or failed check, 2 file I/O error.
Every run prints the seed and the format versions in play, and artifacts are
written atomically, so identical invocations produce byte-identical files.

Set ICOCONV_THREADS to pin the BLAS thread count; it must be honored before
numpy loads, which is why this module touches the environment first.
"""
from __future__ import annotations

import os
import sys

_threads = os.environ.get("ICOCONV_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import numpy as np  # noqa: E402

from . import (  # noqa: E402
    CHECKPOINT_FORMAT_VERSION,
    DATASET_FORMAT_VERSION,
    MESH_FORMAT_VERSION,
    REPORT_FORMAT_VERSION,
    STENCIL_FORMAT_VERSION,
    __version__,
)

GRADCHECK_TOLERANCE = 1e-5


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags by default; the contract reserves 2 for I/O
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _preamble(seed) -> None:
    print(
        f"icoconv {__version__} seed={seed} formats:"
        f" mesh={MESH_FORMAT_VERSION} stencil={STENCIL_FORMAT_VERSION}"
        f" checkpoint={CHECKPOINT_FORMAT_VERSION} dataset={DATASET_FORMAT_VERSION}"
        f" report={REPORT_FORMAT_VERSION}"
    )


def _int_list(text: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_mesh_gen(args) -> int:
    from .icomesh import build_mesh, edge_count, save_mesh

    _preamble(args.seed)
    mesh = build_mesh(args.level)
    save_mesh(mesh, args.out, seed=args.seed)
    print(f"level {mesh.level}: {mesh.n_vertices} vertices, {len(mesh.faces)} faces, "
          f"{edge_count(mesh)} edges -> {args.out}")
    return 0


def _cmd_stencil_build(args) -> int:
    from .icomesh import build_mesh
    from .stencil import build_stencils, save_stencils

    _preamble(args.seed)
    sset = build_stencils(build_mesh(args.level))
    save_stencils(sset, args.out, seed=args.seed)
    print(f"level {args.level}: {sset.n_vertices} vertex stencils -> {args.out}")
    return 0


def _cmd_equivariance_report(args) -> int:
    from . import harness, plots

    _preamble(args.seed)
    report = harness.psi_equivariance_error(args.levels, args.n, args.trials, args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    csv_path = os.path.join(args.out_dir, "psi_equivariance.csv")
    report.save(csv_path, seed=args.seed)
    plots.plot_report(report, os.path.join(args.out_dir, "psi_equivariance.png"))
    print(report.table())
    print(f"wrote {csv_path} and psi_equivariance.png")
    return 0


def _cmd_convergence_report(args) -> int:
    from . import harness, plots

    _preamble(args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    grad, hess = harness.stencil_consistency(args.levels)
    quad = harness.phi_quadrature_error(args.level, args.n_values, args.trials, args.seed)
    for report, stem in ((grad, "stencil_gradient"), (hess, "stencil_hessian"),
                         (quad, "phi_quadrature")):
        report.save(os.path.join(args.out_dir, stem + ".csv"), seed=args.seed)
        plots.plot_report(report, os.path.join(args.out_dir, stem + ".png"))
        print(report.table())
        print()
    print(f"wrote 3 csv + 3 png files under {args.out_dir}")
    return 0


_MODEL_BUILDERS = {"tiny": "tiny_gradcheck_model", "small": "small_bump_classifier",
                   "digit": "digit_classifier"}


def _cmd_gradcheck(args) -> int:
    from . import train

    _preamble(args.seed)
    spec = getattr(train, _MODEL_BUILDERS[args.model])()
    model = train.Model(spec)
    worst, rows = train.gradcheck(model, n_params=args.probes, seed=args.seed)
    for row in rows:
        print(f"  layer {row['layer']:2d} {row['key']:5s}[{row['index']}] "
              f"analytic {row['analytic']: .6e} numeric {row['numeric']: .6e} "
              f"rel {row['rel_err']:.3e}")
    print(f"max relative error {worst:.3e} over {len(rows)} probes ({args.model} model)")
    if worst >= GRADCHECK_TOLERANCE:
        print(f"FAIL: exceeds {GRADCHECK_TOLERANCE:g}")
        return 1
    print(f"OK: below {GRADCHECK_TOLERANCE:g}")
    return 0


def _cmd_synth_data(args) -> int:
    from . import data

    _preamble(args.seed)
    ds = data.synth_bumps(args.level, args.classes, args.per_class, args.rotated,
                          args.seed, split=args.split)
    data.save_dataset(args.out, ds, seed=args.seed)
    kind = "rotated" if args.rotated else "canonical"
    print(f"{ds.n} {kind} samples ({args.classes} classes, level {args.level}) -> {args.out}")
    return 0


def _cmd_mnist_prep(args) -> int:
    from . import data

    _preamble(args.seed)
    images, labels = data.load_mnist_idx(args.images, args.labels)
    rng = np.random.default_rng(args.seed)
    if args.n is not None and args.n < images.shape[0]:
        keep = rng.choice(images.shape[0], size=args.n, replace=False)
        images, labels = images[keep], labels[keep]
    rotations = None
    if args.rotated:
        from .geom import random_rotation

        rotations = np.stack([random_rotation(rng) for _ in range(images.shape[0])])
    signals = data.project_to_sphere(images, args.level, rotations)
    ds = data.LabeledSphereDataset(signals, labels, args.level, split=args.split)
    data.save_dataset(args.out, ds, seed=args.seed)
    kind = "rotated" if args.rotated else "upright"
    print(f"{ds.n} {kind} digit projections (level {args.level}) -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    from . import data, plots, train

    cfg = dict(train._CONFIG_DEFAULTS)
    if args.config:
        cfg.update(train.load_config(args.config))
    for key in ("lr", "batch", "epochs", "seed", "dtype", "decay", "decay_every"):
        value = getattr(args, key.replace("-", "_"))
        if value is not None:
            cfg[key] = value
    _preamble(cfg["seed"])

    train_ds = data.load_dataset(args.data)
    x, stats = data.standardize(train_ds.signals)
    val = data.load_dataset(args.val) if args.val else None

    spec = getattr(train, _MODEL_BUILDERS[args.model])(
        level=train_ds.mesh_level, n_classes=int(train_ds.labels.max()) + 1)
    model = train.Model(spec)
    print(model.describe())
    print(f"{train.parameter_count(model, train.init_weights(model, cfg['seed']))} parameters")

    os.makedirs(args.out_dir, exist_ok=True)
    vx, vy = (None, None)
    if val is not None:
        vx, _ = data.standardize(val.signals, stats)
        vy = val.labels
    weights, metrics = train.train_classifier(
        model, x, train_ds.labels, cfg, vx, vy, out_dir=args.out_dir, log=print)
    # rewrite the final checkpoint with the normalization constants evaluation needs
    train.save_checkpoint(
        os.path.join(args.out_dir, "final.ckpt"), model.spec, weights,
        seed=cfg["seed"], epoch=len(metrics) - 1,
        norm_mean=[float(v) for v in stats[0]], norm_std=[float(v) for v in stats[1]])
    acc_key = "val_acc" if val is not None else "train_acc"
    plots.plot_training_curves(
        [m["epoch"] for m in metrics],
        [m["train_loss"] for m in metrics],
        [m[acc_key] for m in metrics],
        os.path.join(args.out_dir, "training.png"),
    )
    print(f"final {acc_key} {metrics[-1][acc_key]:.4f} -> {args.out_dir}")
    return 0


def _cmd_eval(args) -> int:
    from . import data, train

    spec, weights, meta = train.load_checkpoint(args.checkpoint)
    _preamble(meta.get("seed"))
    model = train.Model(spec)
    ds = data.load_dataset(args.data)
    x = ds.signals
    if "norm_mean" in meta:
        stats = (np.asarray(meta["norm_mean"]), np.asarray(meta["norm_std"]))
        x, _ = data.standardize(x, stats)
    loss, acc = train.evaluate(model, weights, x, ds.labels)
    print(f"{ds.n} samples: loss {loss:.6f} accuracy {acc:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="icoconv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("mesh-gen", parents=[], help="build a subdivided icosahedral mesh")
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_mesh_gen)

    p = sub.add_parser("stencil-build", help="precompute derivative stencils for a level")
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_stencil_build)

    p = sub.add_parser("equivariance-report",
                       help="lifting-layer defect vs mesh level (csv + png)")
    p.add_argument("--levels", type=_int_list, default=[3, 4, 5])
    p.add_argument("--n", type=int, default=16, help="orientation count")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=_cmd_equivariance_report)

    p = sub.add_parser("convergence-report",
                       help="stencil consistency and orientation quadrature (csv + png)")
    p.add_argument("--levels", type=_int_list, default=[2, 3, 4, 5])
    p.add_argument("--level", type=int, default=4, help="mesh level for the quadrature study")
    p.add_argument("--n-values", type=_int_list, default=[2, 4, 8, 16, 32])
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=_cmd_convergence_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training gradients")
    p.add_argument("--model", choices=sorted(_MODEL_BUILDERS), default="tiny")
    p.add_argument("--probes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("synth-data", help="generate the bump-constellation dataset")
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--rotated", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("mnist-prep", help="project IDX digit images onto the sphere")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--level", type=int, default=4)
    p.add_argument("--n", type=int, default=None, help="subset size (seeded choice)")
    p.add_argument("--rotated", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_mnist_prep)

    p = sub.add_parser("train", help="train a classifier on a cached dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--val", default=None)
    p.add_argument("--model", choices=sorted(_MODEL_BUILDERS), default="small")
    p.add_argument("--config", default=None, help="key=value file of training options")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dtype", choices=["float32", "float64"], default=None)
    p.add_argument("--decay", type=float, default=None)
    p.add_argument("--decay-every", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a cached dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None) -> int:
    from .train import TrainingDiverged

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, AssertionError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
