"""Command-line driver.

Exit codes: 0 success, 1 validation error, 2 numeric abort, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .errors import FormatError, LumVitError, NumericError, OracleError, UsageError

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2, 64

HEATMAP_MAGIC = "# LUMHEAT1"
KHIST_MAGIC = "# LUMKHIST1"
CSBENCH_MAGIC = "# LUMCSBENCH1"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lumvit", description="Learnable under-sampling mask ViT on a simulated DMD.")
    p.add_argument("--version", action="version", version=f"lumvit {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="write a seeded synthetic cube + labels")
    g.add_argument("--classes", type=int, default=8)
    g.add_argument("--bands", type=int, default=64)
    g.add_argument("--size", type=int, default=96)
    g.add_argument("--synth-noise", type=float, default=0.01)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="run the staged training pipeline")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--d-tar", type=float)
    t.add_argument("--baseline", choices=["lum", "du", "random", "mag", "cs"])
    t.add_argument("--stage-multiplier", type=float)
    t.add_argument("--recipe", choices=["staged", "single"])
    t.add_argument("--preset", choices=["hsi", "imagenet"])
    t.add_argument("--cube", help="HSC cube (with --labels) instead of the configured data")
    t.add_argument("--labels")
    t.add_argument("--out")

    e = sub.add_parser("eval", help="before/after-mask overall accuracy")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--fixed-mask", help="DMD schedule file; replaces every mask parameter")
    e.add_argument("--noise-sigma", type=float, default=0.0)
    e.add_argument("--seed", type=int, help="noise seed (required with --noise-sigma)")
    e.add_argument("--cube")
    e.add_argument("--labels")
    e.add_argument("--split", choices=["train", "val"], default="val")
    e.add_argument("--out", help="write a JSON report here")
    e.add_argument("--logits", help="write the after-mask logits (.npy) here")

    x = sub.add_parser("export-mask", help="write the DMD acquisition schedule")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--d-tar", type=float)
    x.add_argument("--out", required=True)

    v = sub.add_parser("visualize", help="mask heatmap (PGM + CSV) and kernel histogram (CSV)")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--out", required=True, help="output directory")
    v.add_argument("--pixels", type=int, default=32, help="PGM pixels per patch cell")

    c = sub.add_parser("cs-bench", help="CS + OMP reconstruction rate sweep")
    c.add_argument("--rates", type=_floats, default=[0.02, 0.05, 0.1, 0.2, 0.3])
    c.add_argument("--trials", type=int, default=20)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--patch", type=int, default=8)
    c.add_argument("--sparsity", type=int, default=3)
    c.add_argument("--out")

    o = sub.add_parser("gradcheck", help="finite-difference oracle suite")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--tol", type=float, default=1e-4)
    o.add_argument("--eps", type=float, default=1e-5)
    o.add_argument("--floor", type=float, default=1e-5)
    o.add_argument("--no-graph", action="store_true", help="skip the end-to-end toy graph")
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synth(args) -> int:
    from .data import gen_synthetic, save_cube, write_labels

    os.makedirs(args.out, exist_ok=True)
    cube, labels = gen_synthetic(args.classes, args.bands, args.size, args.synth_noise, args.seed)
    save_cube(os.path.join(args.out, "cube.hsc"), cube)
    write_labels(os.path.join(args.out, "labels.hsl"), labels)
    counts = np.bincount(labels.reshape(-1), minlength=args.classes + 1)
    print(f"wrote {args.out}/cube.hsc ({cube.height}x{cube.width}x{cube.channels}) and labels.hsl")
    print("labeled pixels per class: " + " ".join(str(int(c)) for c in counts[1:]))
    return EXIT_OK


def _data_override(args) -> dict | None:
    if args.cube or args.labels:
        if not (args.cube and args.labels):
            raise UsageError("--cube and --labels go together")
        return {"cube": args.cube, "labels": args.labels}
    return None


def cmd_train(args) -> int:
    from .config import RunConfig
    from .train import deployment_report, run_pipeline

    overrides = {"seed": args.seed, "d_tar": args.d_tar, "baseline": args.baseline,
                 "stage_multiplier": args.stage_multiplier, "recipe": args.recipe,
                 "preset": args.preset, "out": args.out, "data": _data_override(args)}
    cfg = RunConfig.load(args.config, overrides).validate(require_seed=True)
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    res = run_pipeline(cfg)
    rep = deployment_report(res.model, res.dataset, batch=cfg.eval_batch)
    for path in res.metrics:
        print(f"metrics: {path}")
    print(f"checkpoint: {res.checkpoints[-1]}")
    print(f"before mask: OA {rep['before'].oa:.3f}")
    print(f"after mask:  OA {rep['after'].oa:.3f}  (d_ops {rep['fixed'].rate:.4f})")
    return EXIT_OK


def _eval_dataset(loaded, args):
    from .train import prepare_data

    run = loaded.run
    if run is None:
        raise FormatError("checkpoint carries no run config; cannot rebuild its data split")
    override = _data_override(args)
    if override is not None:
        run.data = override
    return prepare_data(run, norm=loaded.norm)


def cmd_eval(args) -> int:
    from .dmd import NoiseModel
    from .schedule import read_schedule
    from .train import evaluate, load_checkpoint

    if args.noise_sigma > 0 and args.seed is None:
        raise UsageError("--noise-sigma needs --seed")
    noise = NoiseModel("additive_gaussian", args.noise_sigma) if args.noise_sigma > 0 else None
    noise_rng = np.random.default_rng(args.seed) if noise is not None else None
    loaded = load_checkpoint(args.checkpoint)
    dataset = _eval_dataset(loaded, args)
    model = loaded.model.astype(np.float64)
    report = {}
    if args.fixed_mask:
        sched = read_schedule(args.fixed_mask)
        # deployment path: the schedule alone decides what is acquired
        model.mask = None
        model.fixed = None
        after, logits = evaluate(model, dataset, args.split, mode="fixed", fixed=sched.mask, dmd=True,
                                 return_logits=True, bank=sched.bank, fill=sched.fill, noise=noise,
                                 rng=noise_rng)
        fixed_rate = sched.mask.rate
    else:
        before = evaluate(model, dataset, args.split, mode="dense")
        report["before_mask_oa"] = before.oa
        print(f"before mask: OA {before.oa:.3f}")
        fm = model.export_mask()
        via_dmd = model.embed_mode == "binarized" and model.cfg.kind != "cs"
        after, logits = evaluate(model, dataset, args.split, mode="fixed", fixed=fm, dmd=via_dmd,
                                 return_logits=True, noise=noise, rng=noise_rng)
        fixed_rate = fm.rate
    report.update(after_mask_oa=after.oa, d_ops=fixed_rate, per_class=after.per_class.tolist(),
                  confusion=after.confusion.tolist(), samples=after.total)
    print(f"after mask:  OA {after.oa:.3f}  (d_ops {fixed_rate:.4f}, {after.total} samples)")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True, allow_nan=True)
            fh.write("\n")
    if args.logits:
        np.save(args.logits, logits)
    return EXIT_OK


def cmd_export_mask(args) -> int:
    from .errors import ValidationError
    from .schedule import schedule_from_model, write_schedule
    from .train import load_checkpoint

    model = load_checkpoint(args.checkpoint).model
    if model.cfg.kind == "cs":
        raise ValidationError("the CS baseline has no DMD patch-embedding schedule")
    if model.embed_mode != "binarized":
        print("warning: checkpoint embed is full precision; the schedule binarizes it", file=sys.stderr)
    sched = schedule_from_model(model, args.d_tar)
    write_schedule(args.out, sched)
    print(f"wrote {args.out}: {sched.bank.num_kernels} patterns, {sched.mask.retained} of "
          f"{sched.mask.D.size} entries retained (d_ops {sched.mask.rate:.4f})")
    return EXIT_OK


def retain_map(model) -> np.ndarray:
    """(N, C) retain probabilities, or the fixed mask for mask-free models."""
    if model.mask is not None:
        return model.probs()[..., 1].astype(np.float64)
    return model.export_mask().D.astype(np.float64)


def write_pgm(path, img: np.ndarray) -> None:
    """8-bit binary PGM of values in [0, 1]."""
    px = np.floor(np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def cmd_visualize(args) -> int:
    from .train import load_checkpoint

    model = load_checkpoint(args.checkpoint).model
    probs = retain_map(model)
    N, C = probs.shape
    g = int(round(np.sqrt(N)))
    per_patch = probs.mean(axis=1)
    grid = per_patch.reshape(g, g)
    os.makedirs(args.out, exist_ok=True)
    write_pgm(os.path.join(args.out, "heatmap.pgm"), np.kron(grid, np.ones((args.pixels, args.pixels))))
    with open(os.path.join(args.out, "heatmap.csv"), "w") as fh:
        fh.write(HEATMAP_MAGIC + "\nrow,col,mean_retain\n")
        for i in range(N):
            fh.write(f"{i // g},{i % g},{float(per_patch[i])!r}\n")
    sums = probs.sum(axis=0)
    retained = model.export_mask().D.sum(axis=0)
    with open(os.path.join(args.out, "kernel_hist.csv"), "w") as fh:
        fh.write(KHIST_MAGIC + "\nkernel,retain_prob_sum,retained_patches\n")
        for j in range(C):
            fh.write(f"{j},{float(sums[j])!r},{int(retained[j])}\n")
    counts = np.bincount(np.floor(sums).astype(int), minlength=N + 1)
    with open(os.path.join(args.out, "kernel_hist_bins.csv"), "w") as fh:
        fh.write(KHIST_MAGIC + "\nprob_sum_lo,prob_sum_hi,kernels\n")
        for b, n in enumerate(counts):
            fh.write(f"{b},{b + 1},{int(n)}\n")
    print(f"heatmap mean retain {per_patch.mean():.4f} over {N} patches; wrote {args.out}")
    return EXIT_OK


def cmd_cs_bench(args) -> int:
    from .baselines import cs_bench

    rows = cs_bench(args.rates, args.trials, args.seed, args.patch, args.sparsity)
    lines = [CSBENCH_MAGIC, "rate,psnr_mean,psnr_std,recovery_rate"]
    for r in rows:
        lines.append(",".join(repr(float(r[k])) for k in ("rate", "psnr_mean", "psnr_std", "recovery_rate")))
        print(f"rate {r['rate']:.3f}  PSNR {r['psnr_mean']:7.2f} +- {r['psnr_std']:.2f} dB  "
              f"exact recovery {r['recovery_rate']:.2f}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .oracle import run_suite

    rep = run_suite(args.seed, eps=args.eps, tol=args.tol, include_graph=not args.no_graph, floor=args.floor)
    for line in rep.lines():
        print(line)
    print(f"{len(rep.entries)} checks, max relative error {rep.max_rel_error:.3e}, tol {args.tol:g}: "
          f"{'PASS' if rep.passed else 'FAIL'}")
    if not rep.passed:
        raise OracleError("gradient check failed")
    return EXIT_OK


COMMANDS = {
    "gen-synth": cmd_gen_synth, "train": cmd_train, "eval": cmd_eval, "export-mask": cmd_export_mask,
    "visualize": cmd_visualize, "cs-bench": cmd_cs_bench, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, OracleError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LumVitError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
