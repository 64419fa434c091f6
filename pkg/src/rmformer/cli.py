"""Command-line entry point: train, predict, evaluate, gen-data, stats, grad-check.

Exit status: 0 ok, 1 evaluation skipped files, 2 config error, 3 numerical abort
(non-finite loss, failed gradient check), 4 I/O error.
"""
import argparse
import csv
import logging
import sys
from pathlib import Path

from .config import describe_keys, load_config
from .errors import CheckpointError, ConfigError, ContractViolation, DimensionError, NonFiniteLoss

EXIT_OK, EXIT_SKIPS, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4


CSV_HELP = """output files:
  train    loss.csv   step,lr_backbone,lr_other,loss_cps,loss_rrs1,loss_rrs2,total
           config.txt resolved key = value config; final.ckpt (+ checkpoint_NNNNNN.ckpt)
  predict  <stem>_pl.png, <stem>_pm.png, <stem>_ph.png 8-bit maps
           <stem>_sel_rrsI_SIDE.png refiner selections with --dump-selection
  evaluate filename,mae,fmax,em,sm,mba (one row per image, then a 'mean' row)
  gen-data images/*.png, masks/*.png, manifest.txt (image<TAB>mask<TAB>seed)
  stats    stats.csv  histogram,lo,hi,count; stats.png
"""


def _run_config(args):
    return load_config(args.config, args.overrides)


def _write_config(cfg, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text())


def _dataset(cfg):
    from .data import load_directory, synthetic_dataset

    side = cfg.model.scales[-1]
    if cfg.data.dir:
        if not Path(cfg.data.dir).is_dir():
            raise FileNotFoundError(f"data directory not found: {cfg.data.dir}")
        return load_directory(cfg.data.dir, side)
    return synthetic_dataset(cfg.data.n_samples, side, cfg.data.complexity, cfg.data.seed,
                             cfg.model.cps_side)


def _plot_losses(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [r["step"] for r in rows]
    for key in ("loss_cps", "loss_rrs1", "loss_rrs2", "total"):
        ax.plot(steps, [r[key] for r in rows], label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_train(args):
    from .training import load_checkpoint, train

    cfg = _run_config(args)
    out_dir = Path(cfg.output.dir)
    _write_config(cfg, out_dir)
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(cfg, _dataset(cfg), out_dir, resume=resume)
    if result.losses:
        _plot_losses(result.losses, out_dir / "loss.png")
    print(f"wrote {out_dir / 'final.ckpt'} after {result.checkpoint.step} steps")
    return EXIT_OK


def _inputs(path):
    from .metrics import IMAGE_SUFFIXES

    path = Path(path)
    if path.is_dir():
        return [p for p in sorted(path.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES]
    return [path]


def cmd_predict(args):
    from .data import load_image
    from .training import load_checkpoint, model_from_checkpoint, predict, write_prediction

    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    failed = []
    for path in _inputs(args.input):
        try:
            image = load_image(path)
        except (OSError, ValueError) as exc:
            failed.append(f"{path}: {exc}")
            continue
        maps = predict(model, image)
        for p in write_prediction(maps, args.out, path.stem, args.dump_selection):
            print(p)
    for line in failed:
        print(f"unreadable: {line}", file=sys.stderr)
    return EXIT_IO if failed else EXIT_OK


def cmd_evaluate(args):
    from .metrics import evaluate_dataset

    for d in (args.pred_dir, args.gt_dir):
        if not Path(d).is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    report = evaluate_dataset(args.pred_dir, args.gt_dir, args.beta2, args.jobs, args.pred_suffix)
    report.write_csv(args.out_csv)
    means = report.means
    print(" ".join(f"{k}={v:.4f}" for k, v in means.items()))
    for name in report.skipped:
        print(f"skipped: {name}", file=sys.stderr)
    return EXIT_SKIPS if report.skipped else EXIT_OK


def cmd_gen_data(args):
    from .data import generate_sample, write_dataset

    cfg = _run_config(args)
    n = cfg.data.n_samples if args.n is None else args.n
    if n < 1:
        raise ConfigError(f"sample count must be >= 1, got {n}")
    side, seeds = cfg.model.scales[-1], [cfg.data.seed + i for i in range(n)]

    def one(seed):
        return generate_sample(seed, side, cfg.data.complexity, cps_side=cfg.model.cps_side)

    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(args.jobs) as pool:
            samples = list(pool.map(one, seeds))
    else:
        samples = [one(s) for s in seeds]
    manifest = write_dataset(samples, args.out)
    print(f"wrote {n} samples, manifest {manifest}")
    return EXIT_OK


def _write_stats(stats, out_dir):
    rows = []
    for name, edges, counts in (("diagonal", stats.diagonal_edges, stats.diagonal_histogram),
                                ("edge_pixels", stats.edge_edges, stats.edge_pixel_histogram)):
        rows += [(name, int(edges[i]), int(edges[i + 1]), int(c)) for i, c in enumerate(counts)]
    with open(out_dir / "stats.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("histogram", "lo", "hi", "count"))
        writer.writerows(rows)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, name, counts, title in ((axes[0], "diagonal", stats.diagonal_histogram, "image diagonal (px)"),
                                    (axes[1], "edge_pixels", stats.edge_pixel_histogram, "edge pixels per mask")):
        labels = [f"{lo}-{hi}" for n, lo, hi, _ in rows if n == name]
        ax.bar(range(len(counts)), counts)
        ax.set_xticks(range(len(counts)), labels, rotation=45, ha="right", fontsize=7)
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_dir / "stats.png")
    plt.close(fig)


def cmd_stats(args):
    from .data import dataset_stats, load_mask
    from .metrics import IMAGE_SUFFIXES

    mask_dir = Path(args.mask_dir)
    if not mask_dir.is_dir():
        raise FileNotFoundError(f"not a directory: {mask_dir}")
    masks = [load_mask(p) for p in sorted(mask_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES]
    stats = dataset_stats(masks)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_stats(stats, out_dir)
    print(f"{len(masks)} masks; diagonal {stats.diagonal_histogram.tolist()} "
          f"edge pixels {stats.edge_pixel_histogram.tolist()}")
    return EXIT_OK


def cmd_grad_check(args):
    from . import gradcheck

    cfg = _run_config(args)
    ops = args.ops or gradcheck.differentiable_ops()
    ok = True
    print(f"{'op_id':<24} {'max_rel_error':>14} {'threshold':>10}")
    for op in ops:
        err = gradcheck.grad_check(op, seed=cfg.train.seed)
        thr = gradcheck.REGISTRY[op].threshold
        ok &= bool(err < thr)
        print(f"{op:<24} {err:>14.3e} {thr:>10.0e} {'ok' if err < thr else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rmformer", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Coarse-to-fine high-resolution salient object detection.",
        epilog=CSV_HELP + "\nconfig keys (file lines or trailing key=value overrides):\n" + describe_keys(),
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("overrides", nargs="*", metavar="key=value", help="overrides, applied after the file")
        return p

    p = with_config(sub.add_parser("train", help="train a model"))
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write stage maps for an image or a directory of images")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("out")
    p.add_argument("--dump-selection", action="store_true", help="also write the refined-pixel masks")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against ground-truth masks")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("out_csv")
    p.add_argument("--pred-suffix", default="", help="prediction name suffix to strip, e.g. _ph")
    p.add_argument("--beta2", type=float, default=0.3)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = with_config(sub.add_parser("gen-data", help="write a synthetic image/mask dataset"))
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--n", type=int, help="sample count (default data.n_samples)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("stats", help="diagonal and edge-pixel histograms of a mask directory")
    p.add_argument("mask_dir")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_stats)

    p = with_config(sub.add_parser("grad-check", help="finite-difference gradient suite"))
    p.add_argument("--ops", nargs="*", help="subset of op ids")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractViolation, DimensionError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
