"""Command-line entry points.

Subcommands:

* ``pretrain``  train and freeze a backbone, saving it as a checkpoint
* ``train``     run a full staged experiment (or an expansion sweep)
* ``eval``      score a checkpoint on a dataset
* ``metrics``   summarize an accuracy-matrix CSV
* ``export-similarity``  write a checkpoint pool's stage-similarity CSV
* ``synth``     materialize the synthetic stream as PNG files
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .data import ingest_folder, synth_stream
from .errors import InputError
from .harness import (
    RunConfig,
    build_stream,
    load_config,
    load_run_checkpoint,
    obtain_backbone,
    resolve_run_dir,
    run_experiment,
    save_run_checkpoint,
)
from .metrics import load_matrix_csv, save_matrix_csv, summarize
from .train import evaluate


def _load_run_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def _cmd_pretrain(args) -> int:
    config = _load_run_config(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    backbone, head, log = obtain_backbone(config, run_dir=None)
    save_run_checkpoint(out, config, backbone, head, pool=None, completed_stage=None)
    best = max((r["val_acc"] for r in log), default=None)
    print(json.dumps({"checkpoint": str(out), "epochs": len(log), "best_val_acc": best}))
    return 0


def _cmd_train(args) -> int:
    config = _load_run_config(args)
    result = run_experiment(config, run_dir=args.run_dir)
    payload = {"run_dir": result["run_dir"]}
    if "metrics" in result:
        payload["metrics"] = result["metrics"]
    if "table" in result:
        payload["sweep"] = result["table"]
    print(json.dumps(payload))
    return 0


def _resolve_eval_subset(state, spec: str):
    if spec.startswith("synth:"):
        try:
            stage = int(spec.split(":", 1)[1])
        except ValueError:
            raise InputError(f"expected synth:<stage index>, got {spec!r}") from None
        stream = build_stream(state.config)
        return stream.test_set(stage), f"synth stage {stage} test set"
    ds, skipped = ingest_folder(spec, split=(0.0, 0.0, 1.0), seed=state.config.seed,
                                image_size=state.config.vit.image_size)
    if skipped:
        print(f"warning: skipped {skipped} undecodable file(s)", file=sys.stderr)
    return ds.test, f"folder {spec}"


def _cmd_eval(args) -> int:
    state = load_run_checkpoint(args.checkpoint)
    subset, label = _resolve_eval_subset(state, args.dataset)
    acc, f1 = evaluate(state.pool, state.backbone, state.head, subset,
                       readout=state.config.readout)
    print(json.dumps({"dataset": label, "samples": len(subset),
                      "accuracy": acc, "macro_f1": f1}))
    return 0


def _cmd_metrics(args) -> int:
    matrix = load_matrix_csv(args.matrix)
    print(json.dumps(summarize(matrix, avg_acc_form=args.avg_acc_form)))
    return 0


def _cmd_export_similarity(args) -> int:
    state = load_run_checkpoint(args.checkpoint)
    if state.pool is None:
        raise InputError(f"{args.checkpoint} holds no prompt pool")
    sim = state.pool.stage_similarity()
    out = args.out or "stage_similarity.csv"
    save_matrix_csv(out, sim, row_prefix="stage", col_prefix="stage")
    print(json.dumps({"out": out, "stages": sim.shape[0]}))
    return 0


def _cmd_synth(args) -> int:
    from PIL import Image

    stream = synth_stream(args.seed, num_domains=args.domains,
                          n_per_domain=args.per_domain)
    out = Path(args.out)
    rows = ["domain,split,index,label,path"]
    for k, domain in enumerate(stream.domains):
        for split in ("train", "val", "test"):
            subset = domain.subset(split)
            folder = out / f"domain_{k}_{domain.name}" / split
            folder.mkdir(parents=True, exist_ok=True)
            for i in range(len(subset)):
                img = (subset.images[i] * 255.0).round().astype(np.uint8)
                rel = folder / f"{i:05d}_class{int(subset.labels[i])}.png"
                Image.fromarray(img).save(rel)
                rows.append(f"{k},{split},{i},{int(subset.labels[i])},{rel}")
    (out / "labels.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(json.dumps({"out": str(out), "domains": stream.num_stages}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptcl",
        description="Prompt-pool continual learning on synthetic domain streams.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train and freeze a backbone")
    p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", default="backbone.bin", help="checkpoint output path")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("train", help="run the staged experiment")
    p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--run-dir", help="output directory (default: hash under run root)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True,
                   help="synth:<stage> for a synthetic test set, or an image folder")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("metrics", help="summarize an accuracy matrix CSV")
    p.add_argument("--matrix", required=True)
    p.add_argument("--avg-acc-form", choices=("seen", "diagonal"), default="seen")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("export-similarity", help="stage-similarity CSV from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="output CSV path (default stage_similarity.csv)")
    p.set_defaults(func=_cmd_export_similarity)

    p = sub.add_parser("synth", help="materialize the synthetic stream as PNGs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--domains", type=int, default=3)
    p.add_argument("--per-domain", type=int, default=120)
    p.set_defaults(func=_cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
