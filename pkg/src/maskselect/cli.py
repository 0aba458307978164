"""Command-line surface tying the library together.

Exit codes: 0 on success, 2 on validation or input errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .datagen import (
    PipelineConfig,
    dataset_stats,
    read_manifest,
    run_assemble_stage,
    run_prompts_stage,
    run_sample_stage,
    write_manifest,
)
from .errors import MaskSelectError
from .masks import BinaryMask
from .metrics import DEFAULT_NORM_SIZE
from .proposals import (
    DEFAULT_IOU_FILTER,
    DEFAULT_MAX_PROPOSALS,
    DEFAULT_NMS_THRESHOLD,
    load_proposal_set,
    postprocess,
    save_proposal_set,
)
from .synth import SynthConfig, save_samples, synth_generate
from .train import RunConfig, STRATEGIES, evaluate, gradcheck, train
from .viz import render_overlay, write_report_files, write_training_figure


def _load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise MaskSelectError(f"{path}: invalid JSON at byte {exc.pos}: {exc.msg}") from exc


def _cmd_train(args) -> int:
    cfg = RunConfig.from_json(_load_json(args.config))
    if args.out:
        cfg.checkpoint = args.out
    if args.log:
        cfg.log = args.log
    _, records = train(cfg)
    if cfg.log:
        figure = write_training_figure(records, cfg.log)
        print(f"log: {cfg.log}")
        print(f"figure: {figure}")
    if cfg.checkpoint:
        print(f"checkpoint: {cfg.checkpoint}")
    final = records[-1]
    print(
        f"final step {final['step']}: total={final['loss_total']:.6f} "
        f"iou={final['loss_iou']:.6f} iop={final['loss_iop']:.6f}"
    )
    return 0


def _cmd_eval(args) -> int:
    report = evaluate(
        args.ckpt,
        args.data,
        strategy=args.strategy,
        iop_threshold=args.iop_threshold,
        norm_size=args.norm_size,
    )
    paths = write_report_files(report, args.report)
    print(
        f"giou={report.giou:.4f} ciou={report.ciou:.4f} nciou={report.nciou:.4f} "
        f"n={report.sample_count}"
    )
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return 0


def _cmd_gradcheck(args) -> int:
    report = gradcheck(args.seed)
    for block in report.blocks:
        flag = "ok" if block.passed else "FAIL"
        print(f"{flag:4s} {block.name:32s} max rel err {block.max_rel_error:.3e}")
    worst = report.worst()
    print(f"{'PASS' if report.passed else 'FAIL'}: worst block {worst.name} "
          f"at {worst.max_rel_error:.3e}")
    return 0 if report.passed else 1


def _cmd_synth(args) -> int:
    cfg = SynthConfig(
        channels=args.model_dim,
        targets_min=args.targets_min,
        targets_max=args.targets_max,
        jitter=args.jitter,
        seg_noise=args.sigma,
    )
    samples = synth_generate(args.n, cfg, args.seed)
    save_samples(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _cmd_propose_postprocess(args) -> int:
    pset = load_proposal_set(args.in_path)
    before = len(pset)
    pset = postprocess(pset, iou_filter=args.iou_filter, nms_threshold=args.nms,
                       max_proposals=args.max_proposals)
    save_proposal_set(pset, args.out)
    print(f"{before} -> {len(pset)} proposals ({args.out})")
    return 0


def _cmd_render(args) -> int:
    with open(args.mask, "r", encoding="utf-8") as fh:
        mask = BinaryMask.from_json(json.load(fh))
    render_overlay(mask, args.out)
    print(f"wrote {mask.width}x{mask.height} overlay to {args.out}")
    return 0


def _dataset_paths(cfg: PipelineConfig) -> dict:
    return {
        "selection": os.path.join(cfg.outdir, "selection.json"),
        "prompts": os.path.join(cfg.outdir, "prompts.jsonl"),
        "manifest": os.path.join(cfg.outdir, "manifest.jsonl"),
        "diagnostics": os.path.join(cfg.outdir, "diagnostics.log"),
        "stats": os.path.join(cfg.outdir, "stats.json"),
    }


def _cmd_dataset(args) -> int:
    cfg = PipelineConfig.from_json(_load_json(args.config))
    if args.provider:
        cfg.provider = args.provider
    os.makedirs(cfg.outdir, exist_ok=True)
    paths = _dataset_paths(cfg)
    if args.stage == "sample":
        selection = run_sample_stage(cfg)
        with open(paths["selection"], "w", encoding="utf-8") as fh:
            json.dump(selection, fh, indent=2)
            fh.write("\n")
        counts = {k: len(v) for k, v in selection.items()}
        print(f"selected {counts} -> {paths['selection']}")
    elif args.stage == "prompts":
        selection = _load_json(paths["selection"])
        prompts = run_prompts_stage(cfg, selection)
        with open(paths["prompts"], "w", encoding="utf-8") as fh:
            for entry in prompts:
                fh.write(json.dumps(entry))
                fh.write("\n")
        print(f"wrote {len(prompts)} prompts -> {paths['prompts']}")
    elif args.stage == "assemble":
        with open(paths["prompts"], "r", encoding="utf-8") as fh:
            prompts = [json.loads(line) for line in fh if line.strip()]
        records, diagnostics = run_assemble_stage(cfg, prompts)
        write_manifest(records, paths["manifest"])
        with open(paths["diagnostics"], "w", encoding="utf-8") as fh:
            for line in diagnostics:
                fh.write(line)
                fh.write("\n")
        print(f"wrote {len(records)} records -> {paths['manifest']} "
              f"({len(diagnostics)} diagnostics)")
    else:  # stats
        records = read_manifest(paths["manifest"])
        stats = dataset_stats(records)
        with open(paths["stats"], "w", encoding="utf-8") as fh:
            json.dump(stats, fh, indent=2)
            fh.write("\n")
        print(f"images: {stats['images']}")
        print(f"pairs: {stats['pairs']}")
        print(f"avg pairs/image: {stats['avg_pairs_per_image']:.2f}")
        print(f"avg question words: {stats['avg_question_words']:.2f}")
        print(f"distinct categories: {stats['distinct_categories']}")
        print(f"splits: {stats['splits']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskselect",
        description="Mask-proposal selection toolkit: training, evaluation, "
                    "postprocessing, and dataset generation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the selection model")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", help="checkpoint output path")
    p.add_argument("--log", help="JSONL training log path")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a data directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--strategy", choices=STRATEGIES, default="threshold-iop")
    p.add_argument("--iop-threshold", type=float, default=None,
                   help="defaults to the checkpoint's configured threshold")
    p.add_argument("--norm-size", type=int, default=DEFAULT_NORM_SIZE)
    p.add_argument("--report", required=True, help="report JSON output path")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("synth", help="generate synthetic training samples")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model-dim", type=int, default=32)
    p.add_argument("--targets-min", type=int, default=1)
    p.add_argument("--targets-max", type=int, default=2)
    p.add_argument("--jitter", type=int, default=2)
    p.add_argument("--sigma", type=float, default=0.05)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("propose-postprocess",
                       help="filter, deduplicate, and cap a proposal file")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--iou-filter", type=float, default=DEFAULT_IOU_FILTER)
    p.add_argument("--nms", type=float, default=DEFAULT_NMS_THRESHOLD)
    p.add_argument("--max-proposals", type=int, default=DEFAULT_MAX_PROPOSALS)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_propose_postprocess)

    p = sub.add_parser("dataset", help="dataset generation pipeline stages")
    p.add_argument("stage", choices=("sample", "prompts", "assemble", "stats"))
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.add_argument("--provider", help="override provider, e.g. mock:7")
    p.set_defaults(fn=_cmd_dataset)

    p = sub.add_parser("render", help="render a mask JSON file as a PGM overlay")
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except MaskSelectError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
