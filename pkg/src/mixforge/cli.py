"""``mixforge`` command line.

Exit codes: 0 success, 1 validation error (bad config, bad arguments,
contract violations), 2 I/O error (missing or unreadable files).
"""

from __future__ import annotations

import argparse
import logging
import sys

from mixforge import pipeline
from mixforge.config import load_config
from mixforge.errors import MixforgeError

SUBCOMMANDS = (
    "toy-corpus",
    "features",
    "pool",
    "synth",
    "score",
    "plan",
    "mix",
    "train",
    "eval",
    "report",
    "sweep-ratio",
    "sweep-kp",
    "expand-data",
    "run-all",
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (all keys optional)")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override a config value, e.g. --set curriculum.theta=0.7 (repeatable)",
    )
    common.add_argument("--workdir", help="artifact directory (overrides workdir)")
    common.add_argument("--seed", type=int, help="master seed (overrides seed)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="mixforge", description="Synthetic-speaker curriculum toolkit for target speaker extraction.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.add_parser("toy-corpus", parents=[common], help="generate toy speakers and utterances")
    sub.add_parser("features", parents=[common], help="write FTR1 features for every corpus utterance")
    sub.add_parser("pool", parents=[common], help="sample the kNN reference pool")
    p = sub.add_parser("synth", parents=[common], help="generate synthetic interference speakers")
    p.add_argument("--k", type=int, help="neighbors (default vc.k)")
    p.add_argument("--p", type=float, help="interpolation factor (default vc.p)")
    p.add_argument("--grid", action="store_true", help="run every (k, p) in vc.k_grid x vc.p_grid")
    p = sub.add_parser("score", parents=[common], help="pair utterances into triplets and score similarity")
    p.add_argument("--tag", action="append", help="synthetic set(s) to include, e.g. k4_p0.5")
    p = sub.add_parser("plan", parents=[common], help="partition the curriculum and attach stage 3")
    p.add_argument("--theta", type=float)
    p.add_argument("--ratio", type=float, help="synthetic share per stage-3 batch")
    sub.add_parser("mix", parents=[common], help="render mixture/target/interference/reference WAVs")
    sub.add_parser("train", parents=[common], help="train the mask model for every seed")
    sub.add_parser("eval", parents=[common], help="evaluate baselines and trained models on the test split")
    sub.add_parser("report", parents=[common], help="print the iSDR table")
    sub.add_parser("sweep-ratio", parents=[common], help="stage-3 finetuning across synthetic ratios")
    sub.add_parser("sweep-kp", parents=[common], help="stage-3 finetuning across the (k, p) grid")
    sub.add_parser("expand-data", parents=[common], help="stage-3 finetuning with 5x synthetic data")
    sub.add_parser("run-all", parents=[common], help="toy-corpus through report in one go")
    return parser


def _run(args) -> None:
    overrides = list(args.overrides)
    if args.workdir:
        overrides.append(f"workdir={args.workdir}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "theta", None) is not None:
        overrides.append(f"curriculum.theta={args.theta}")
    if getattr(args, "ratio", None) is not None:
        overrides.append(f"curriculum.syn_ratio={args.ratio}")
    if getattr(args, "k", None) is not None:
        overrides.append(f"vc.k={args.k}")
    if getattr(args, "p", None) is not None:
        overrides.append(f"vc.p={args.p}")
    cfg = load_config(args.config, overrides)
    ws = pipeline.Workspace(cfg)
    cmd = args.command

    if cmd in ("toy-corpus", "run-all"):
        rows = pipeline.toy_corpus(ws)
        print(f"wrote {len(rows)} utterances")
    if cmd in ("features", "run-all"):
        rows = pipeline.compute_features(ws)
        print(f"wrote {len(rows)} feature files")
    if cmd in ("pool", "run-all"):
        meta = pipeline.make_pool(ws)
        print(f"pool {meta['pool_id']}: {len(meta['speakers'])} speakers, {meta['n_frames']} frames")
    if cmd in ("synth", "run-all"):
        grid = [(k, p) for k in cfg.vc.k_grid for p in cfg.vc.p_grid] if getattr(args, "grid", False) else [(cfg.vc.k, cfg.vc.p)]
        pool = pipeline.load_pool(ws)
        for k, p in grid:
            rows = pipeline.synthesize(ws, int(k), float(p), pool=pool)
            print(f"synth {pipeline.synth_tag(k, p)}: {len(rows)} utterances")
    if cmd in ("score", "run-all"):
        out = pipeline.score(ws, getattr(args, "tag", None))
        print(", ".join(f"{s}: {len(v)} triplets" for s, v in out.items()))
    if cmd in ("plan", "run-all"):
        plan = pipeline.make_plan(ws)
        plan.save(ws.path("plan.json"))
        print(
            f"plan: stage1={len(plan.stage1)} stage2={len(plan.stage2)} "
            f"stage3 real={len(plan.stage3_real)} syn={len(plan.stage3_syn)} theta={plan.theta}"
        )
    if cmd in ("mix", "run-all"):
        out = pipeline.mix(ws)
        print(", ".join(f"{s}: {len(v)} mixtures" for s, v in out.items()))
    if cmd in ("train", "run-all"):
        results = pipeline.run_train(ws)
        for r in results:
            losses = r.epoch_losses()
            print(f"seed {r.seed}: {len(losses)} epochs, loss {losses[0]:.4g} -> {losses[-1]:.4g}, best dev {r.stage_dev}")
    if cmd in ("eval", "run-all"):
        pipeline.run_eval(ws)
    if cmd in ("report", "run-all"):
        print(pipeline.write_report(ws), end="")
    if cmd == "sweep-ratio":
        pipeline.sweep_ratio(ws)
        print(ws.path("sweeps/ratio.txt").read_text(), end="")
    if cmd == "sweep-kp":
        pipeline.sweep_kp(ws)
        print(ws.path("sweeps/kp.txt").read_text(), end="")
    if cmd == "expand-data":
        pipeline.expand_data(ws)
        print(ws.path("sweeps/expand.txt").read_text(), end="")


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _run(args)
    except MixforgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
