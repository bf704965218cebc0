"""Command-line entry point: synthdoc generate, pretrain, finetune, infer, evaluate, visualize, ablate, gradcheck."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

log = logging.getLogger("hipvie")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (PipelineConfig layout)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set finetune.lr=1e-3 (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="single seed for all randomness")
    p.add_argument("-v", "--verbose", action="store_true")


def _config(args):
    from .pipeline import load_config

    overrides = list(args.overrides)
    for flag, key in (("steps", "steps"), ("lr", "lr"), ("batch_size", "batch_size")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides.append(f"{args.command}.{key}={v}")
    if getattr(args, "active", None) is not None:
        tasks = [t for t in args.active.split(",") if t]
        overrides.append(f"pretrain.active={json.dumps(tasks)}")
    return load_config(args.config, overrides, args.seed)


def cmd_generate(args) -> int:
    from .synthdoc import generate_corpus, load_corpus

    cfg = _config(args)
    seed = cfg.seed if args.seed is not None else args.start
    manifest = generate_corpus(args.out, args.count, seed, cfg.layout)
    load_corpus(args.out)  # re-reads and validates every annotation
    print(f"wrote {len(manifest.files)} documents to {args.out}; categories {manifest.category_counts}")
    return 0


def _train_stage(args, stage: str) -> int:
    import torch

    from .model import HIPModel
    from .objectives import load_checkpoint, train
    from .synthdoc import load_corpus

    cfg = _config(args)
    tcfg = replace(getattr(cfg, stage), seed=cfg.seed)
    docs = load_corpus(args.corpus or cfg.paths.corpus)
    out = Path(args.checkpoint or Path(cfg.paths.checkpoints) / f"{stage}.pt")
    out.parent.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    if getattr(args, "init", None):
        model, _, _ = load_checkpoint(args.init)
    else:
        model = HIPModel(cfg.model)
    t0 = time.time()
    history = train(model, docs, tcfg, checkpoint=out, resume=args.resume)
    if not history:
        print(f"nothing to do: checkpoint already at step {tcfg.steps}")
        return 0
    last = history[-1]
    print(f"{stage}: {len(history)} steps in {time.time() - t0:.0f}s; final "
          + " ".join(f"{k}={v:.4f}" for k, v in last.items()) + f"; saved {out}")
    return 0 if all(v == v for v in last.values()) else 1


def cmd_pretrain(args) -> int:
    return _train_stage(args, "pretrain")


def cmd_finetune(args) -> int:
    return _train_stage(args, "finetune")


def cmd_infer(args) -> int:
    from .pipeline import infer_paths

    written = infer_paths(args.checkpoint, args.input, args.out)
    print(f"wrote {len(written)} prediction files to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import format_report
    from .pipeline import evaluate_dirs

    report = evaluate_dirs(args.pred, args.gt, args.iou, args.matcher)
    print(format_report(report, args.protocol))
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps({"protocol": args.protocol, **report.to_dict()}, indent=1))
    return 0


def cmd_visualize(args) -> int:
    from .core import load_document
    from .pipeline import load_model, visualize

    model = load_model(args.checkpoint) if args.checkpoint else None
    gt_dir = Path(args.gt)
    stems = [p.stem for p in sorted(gt_dir.glob("*.json")) if p.name != "manifest.json"][: args.limit]
    n = 0
    for stem in stems:
        doc = load_document(gt_dir / stem)
        pred = None
        if args.pred:
            pf = Path(args.pred) / f"{stem}.json"
            if pf.exists():
                pred = json.loads(pf.read_text())
        for which in args.which.split(","):
            if which in ("spotting", "grouping", "labeling") and pred is None:
                log.warning("no prediction for %s; skipping %s", stem, which)
                continue
            visualize(doc, pred, which, args.out, stem, args.scale, model, args.seed or 0)
            n += 1
    print(f"wrote {n} overlays to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    from .objectives import ablation_table, run_ablation
    from .synthdoc import generate_document

    cfg = _config(args)
    docs = [generate_document(cfg.layout, cfg.seed + i) for i in range(args.docs)]
    n_test = max(1, int(round(args.test_fraction * len(docs))))
    train_docs, test_docs = docs[:-n_test], docs[-n_test:]
    seeds = [int(s) for s in args.seeds.split(",")]
    results = run_ablation(train_docs, test_docs, args.rows.split(","), seeds, cfg.model,
                           replace(cfg.pretrain, steps=args.pretrain_steps),
                           replace(cfg.finetune, steps=args.finetune_steps))
    print(ablation_table(results))
    if args.report:
        Path(args.report).write_text(json.dumps([asdict(r) for r in results], indent=1))
    return 0 if all(r.ee == r.ee for r in results) else 1


def cmd_gradcheck(args) -> int:
    import torch

    from .model import HIPModel
    from .objectives import gradient_suite
    from .synthdoc import LayoutSpec, generate_document

    cfg = _config(args)
    torch.manual_seed(cfg.seed)
    model = HIPModel(cfg.model).double()
    doc = generate_document(LayoutSpec.small(), cfg.seed)
    t0 = time.time()
    errs = gradient_suite(model, [doc], samples=args.samples, eps=args.eps, seed=cfg.seed)
    ok = True
    for name, err in errs.items():
        flag = err < args.tol
        ok &= flag
        print(f"{name:<18} max rel err {err:.2e}  {'ok' if flag else 'FAIL'}")
    print(f"{time.time() - t0:.0f}s")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hipvie", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthdoc", help="synthetic corpus tools")
    ssub = p.add_subparsers(dest="action", required=True)
    g = ssub.add_parser("generate", help="write PNG + JSON documents and a manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--start", type=int, default=0, help="first document seed when --seed is not given")
    _common(g)
    g.set_defaults(func=cmd_generate)

    for name, fn in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, help=f"{name} on a generated corpus")
        p.add_argument("--corpus")
        p.add_argument("--checkpoint", help="output checkpoint path")
        p.add_argument("--resume", help="checkpoint to resume from (restores optimizer, step and rng)")
        p.add_argument("--steps", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        if name == "pretrain":
            p.add_argument("--active", help="comma-separated tasks among mim,etd,wtb,mlm,ror ('' = spotting only)")
        else:
            p.add_argument("--init", help="pre-trained checkpoint to start from")
        _common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("infer", help="predict entities for a PNG or a directory of PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score prediction JSON against ground truth JSON")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--protocol", choices=("ocr-based", "ocr-free"), default="ocr-based")
    p.add_argument("--matcher", choices=("greedy", "hungarian"), default="greedy")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--report", help="write the EvalReport JSON here")
    _common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("visualize", help="draw overlays")
    p.add_argument("--gt", required=True, help="corpus directory (PNG + JSON)")
    p.add_argument("--pred", help="prediction directory")
    p.add_argument("--checkpoint", help="needed for the mim view")
    p.add_argument("--which", default="spotting,grouping,labeling,ror",
                   help="comma-separated among spotting,grouping,labeling,mim,ror")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=10)
    p.add_argument("--scale", type=int, default=4)
    _common(p)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("ablate", help="pre-training task ablation (rows a-g)")
    p.add_argument("--rows", default="a,b,c,d,e,f,g")
    p.add_argument("--seeds", default="0")
    p.add_argument("--docs", type=int, default=200)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--pretrain-steps", type=int, default=200)
    p.add_argument("--finetune-steps", type=int, default=200)
    p.add_argument("--report")
    _common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every head on a 64x64 document")
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-4)
    _common(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from jsonschema import ValidationError

    from .pipeline import ConfigError

    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
