"""``instap`` command line: data generation, both training stages, evaluation, mask inspection, reports.

Every verb writes into a fresh output directory (built under a temporary
name, then renamed into place) together with ``run.json``, a manifest holding
the argv, resolved config, its sha256, the three seeds, ``git describe`` and
wall time.  Errors are printed as one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import shutil
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import torch

from . import kernels
from .checkpoint import CheckpointError
from .schema import MANIFEST, DatasetFormatError, SceneConfig, Vocab, default_vocab, generate_dataset, \
    read_dataset, write_dataset

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_EXISTS = 5
EXIT_FORMAT = 6

VERBS = ("gen-data", "pretrain", "align", "eval-retrieval", "eval-grounding", "inspect-mask", "report")


class CLIError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(EXIT_USAGE, "usage", message)


# ---------------------------------------------------------------------------
# helpers


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CLIError(EXIT_MISSING, "missing_file", f"config file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CLIError(EXIT_CONFIG, "invalid_config", f"{p}: not valid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise CLIError(EXIT_CONFIG, "invalid_config", f"{p}: top level must be an object")
    return d


def _check_keys(d: dict, allowed, prefix: str = "") -> None:
    bad = sorted(set(d) - set(allowed))
    if bad:
        raise CLIError(EXIT_CONFIG, "invalid_config", f"unknown config keys: {', '.join(prefix + b for b in bad)}")


def _dataset_dir(path) -> Path:
    p = Path(path)
    for cand in (p, p / "data"):
        if (cand / MANIFEST).is_file():
            return cand
    if p.is_file():
        return p
    raise CLIError(EXIT_MISSING, "missing_file", f"dataset not found: {p / MANIFEST}")


def _vocab_for(data: Path) -> Vocab:
    for cand in (data / "vocab.txt", data.parent / "vocab.txt"):
        if cand.is_file():
            return Vocab.load(cand)
    return default_vocab()


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CLIError(EXIT_MISSING, "missing_file", f"{what} not found: {p}")
    return p


class _OutDir:
    """Temporary sibling directory renamed onto ``target`` only on success."""

    def __init__(self, target, force: bool):
        self.target = Path(target)
        if self.target.exists() and not force:
            raise CLIError(EXIT_EXISTS, "exists", f"output directory exists (use --force): {self.target}")
        self.force = force

    def __enter__(self) -> Path:
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=self.target.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.target.exists():
            shutil.rmtree(self.target)
        os.replace(self.tmp, self.target)
        return False


def _write_manifest(out: Path, verb: str, argv, config: dict, seeds: dict, t0: float) -> None:
    doc = {
        "verb": verb,
        "argv": list(argv),
        "config": config,
        "config_hash": _config_hash(config),
        "seeds": seeds,
        "git_describe": _git_describe(),
        "backend": kernels.BACKEND,
        "torch": torch.__version__,
        "numpy": np.__version__,
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# verbs

GEN_KEYS = {"scenes", "seed", "split", "image_fraction", "canvas", "frames", "object_count", "sizes",
            "speeds", "allow_overlap"}


def _parse_range(text: str) -> tuple[int, int]:
    parts = [int(x) for x in str(text).split(",")]
    if len(parts) == 1:
        return parts[0], parts[0]
    if len(parts) != 2:
        raise CLIError(EXIT_USAGE, "usage", f"expected N or LO,HI, got {text!r}")
    return parts[0], parts[1]


def cmd_gen_data(args, argv, t0) -> None:
    cfg = _load_config(args.config)
    _check_keys(cfg, GEN_KEYS)
    for key, val in (("scenes", args.scenes), ("seed", args.seed if args.seed is not None else args.seed_data),
                     ("split", args.split), ("image_fraction", args.image_fraction), ("frames", args.frames)):
        if val is not None:
            cfg[key] = val
    if args.objects is not None:
        cfg["object_count"] = list(_parse_range(args.objects))
    if args.canvas is not None:
        h, w = _parse_range(args.canvas)
        cfg["canvas"] = [h, w]
    cfg.setdefault("scenes", 64)
    cfg.setdefault("seed", 0)
    cfg.setdefault("split", "train")
    cfg.setdefault("image_fraction", 0.0)
    base = SceneConfig()
    scene = SceneConfig(
        canvas=tuple(cfg.get("canvas", base.canvas)),
        T=int(cfg.get("frames", base.T)),
        object_count=tuple(cfg.get("object_count", base.object_count)),
        sizes=tuple(cfg.get("sizes", base.sizes)),
        speeds=tuple(cfg.get("speeds", base.speeds)),
        allow_overlap=bool(cfg.get("allow_overlap", base.allow_overlap)),
    )
    if cfg["split"] not in ("train", "test", "zero"):
        raise CLIError(EXIT_USAGE, "usage", f"unknown split {cfg['split']!r}")
    samples = generate_dataset(int(cfg["scenes"]), int(cfg["seed"]), cfg["split"], scene, float(cfg["image_fraction"]))
    with _OutDir(args.out, args.force) as out:
        write_dataset(samples, out / "data")
        default_vocab().save(out / "vocab.txt")
        _write_manifest(out, "gen-data", argv, cfg, {"data": int(cfg["seed"])}, t0)


def _train_config(args, stage: str):
    from .training import TrainConfig

    d = _load_config(args.config)
    d["stage"] = stage
    for key, val in (("seed_data", args.seed_data), ("seed_init", args.seed_init),
                     ("seed_dropout", args.seed_dropout), ("max_steps", args.steps), ("epochs", args.epochs),
                     ("batch_size", args.batch_size), ("checkpoint_every", args.checkpoint_every)):
        if val is not None:
            d[key] = val
    if stage == "align" and getattr(args, "init", None) is not None:
        d["init_from"] = args.init
    try:
        return TrainConfig.from_dict(d)
    except KeyError as exc:
        raise CLIError(EXIT_CONFIG, "invalid_config", str(exc.args[0])) from exc
    except (TypeError, ValueError) as exc:
        raise CLIError(EXIT_CONFIG, "invalid_config", str(exc)) from exc


def cmd_train(args, argv, t0, stage: str) -> None:
    from .training import train

    cfg = _train_config(args, stage)
    data = _dataset_dir(args.data)
    if stage == "align" and cfg.init_from:
        _require_file(cfg.init_from, "stage-1 checkpoint")
    samples = read_dataset(data)
    vocab = _vocab_for(data)
    with _OutDir(args.out, args.force) as out:
        train(cfg, samples, vocab=vocab, out_dir=out, step_log=out / "steps.jsonl")
        seeds = {"data": cfg.seed_data, "init": cfg.seed_init, "dropout": cfg.seed_dropout}
        _write_manifest(out, stage, argv, cfg.to_dict(), seeds, t0)


def _load_model(path):
    from .training import load_checkpoint

    model, _, meta = load_checkpoint(_require_file(path, "checkpoint"))
    model.eval()
    return model, meta


def cmd_eval_retrieval(args, argv, t0) -> None:
    from .evaluation import EvalConfig, eval_global_retrieval, eval_instance_retrieval, report_csv, \
        result_document, write_json

    d = _load_config(args.config)
    _check_keys(d, {f.name for f in dataclasses.fields(EvalConfig)})
    for key, val in (("pool_size", args.pool_size), ("sentence_index", args.sentence_index),
                     ("rerank_vtm", args.rerank)):
        if val is not None:
            d[key] = val
    if "crop_hw" in d:
        d["crop_hw"] = tuple(d["crop_hw"])
    cfg = EvalConfig(**d)
    data = _dataset_dir(args.data)
    model, _ = _load_model(args.checkpoint)
    samples = read_dataset(data)
    vocab = _vocab_for(data)
    splits = ("global", "instance") if args.split == "both" else (args.split,)
    seed = args.seed_data if args.seed_data is not None else 0
    docs = []
    for split in splits:
        fn = eval_global_retrieval if split == "global" else eval_instance_retrieval
        docs.append(result_document(fn(model, samples, vocab, cfg), seed, str(args.checkpoint)))
    with _OutDir(args.out, args.force) as out:
        write_json(out / "metrics.json", {"results": docs})
        (out / "table.csv").write_text(report_csv([{"results": docs}], [Path(args.checkpoint).stem]))
        _write_manifest(out, "eval-retrieval", argv, dataclasses.asdict(cfg), {"data": seed}, t0)


def cmd_eval_grounding(args, argv, t0) -> None:
    from .evaluation import GroundingConfig, grounding_finetune, grounding_metrics, grounding_predict, write_json

    d = _load_config(args.config)
    _check_keys(d, {f.name for f in dataclasses.fields(GroundingConfig)})
    for key, val in (("steps", args.steps), ("seed", args.seed_data)):
        if val is not None:
            d[key] = val
    cfg = GroundingConfig(**d)
    model, _ = _load_model(args.checkpoint)
    train_dir = _dataset_dir(args.data)
    test_dir = _dataset_dir(args.eval_data) if args.eval_data else train_dir
    train_set, test_set = read_dataset(train_dir), read_dataset(test_dir)
    vocab = _vocab_for(train_dir)
    torch.manual_seed(cfg.seed)
    history = grounding_finetune(model, train_set, vocab, cfg)
    preds = grounding_predict(model, test_set, vocab, cfg)
    metrics = grounding_metrics(preds)
    doc = {
        "split": "grounding",
        "checkpoint": str(args.checkpoint),
        "seed": cfg.seed,
        "metrics": {f"iou@{t}": v for t, v in metrics.items()},
        "mean_iou": float(np.mean([p.score for p in preds])),
        "final_loss": history[-1] if history else None,
        "instances": len(preds),
    }
    with _OutDir(args.out, args.force) as out:
        write_json(out / "grounding.json", doc)
        _write_manifest(out, "eval-grounding", argv, dataclasses.asdict(cfg), {"data": cfg.seed}, t0)


def inspect_mask_rows(model, sample, rho: float, frames_per_clip: int) -> list[list]:
    """One row per token: index, frame, row, col, importance score, masked flag."""
    from .masking import build_mask, importance_scores
    from .tokens import patchify

    tok = patchify(sample.frames01[:frames_per_clip], model.cfg.patch)
    dt = next(model.parameters()).dtype
    _, A = model.teacher_forward(torch.from_numpy(tok.data.astype(np.float32))[None].to(dt),
                                 torch.from_numpy(tok.positions)[None])
    scores = importance_scores(A[0].double().numpy())
    mask = build_mask(scores, rho)
    return [[i, int(f), int(r), int(c), repr(float(s)), int(m)]
            for i, ((f, r, c), s, m) in enumerate(zip(tok.positions, scores, mask.mask))]


def cmd_inspect_mask(args, argv, t0) -> None:
    data = _dataset_dir(args.data)
    model, meta = _load_model(args.checkpoint)
    samples = read_dataset(data)
    if args.sample_id is not None:
        found = [s for s in samples if s.sample_id == args.sample_id]
        if not found:
            raise CLIError(EXIT_MISSING, "missing_sample", f"sample not found: {args.sample_id}")
        sample = found[0]
    else:
        if not 0 <= args.index < len(samples):
            raise CLIError(EXIT_MISSING, "missing_sample", f"sample index {args.index} out of range")
        sample = samples[args.index]
    tc = meta.get("train_config", {})
    rho = args.rho if args.rho is not None else float(tc.get("mask_ratio", 0.8))
    fpc = args.frames if args.frames is not None else int(tc.get("frames_per_clip", 4))
    rows = inspect_mask_rows(model, sample, rho, fpc)
    with _OutDir(args.out, args.force) as out:
        with open(out / "mask.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["token", "frame", "row", "col", "score", "masked"])
            w.writerows(rows)
        cfg = {"sample_id": sample.sample_id, "rho": rho, "frames_per_clip": fpc, "checkpoint": str(args.checkpoint)}
        _write_manifest(out, "inspect-mask", argv, cfg, {}, t0)


def cmd_report(args, argv, t0) -> None:
    from .evaluation import report_csv

    docs, names = [], []
    for p in args.inputs:
        path = _require_file(p, "eval result")
        try:
            docs.append(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise CLIError(EXIT_FORMAT, "format", f"{path}: not valid JSON ({exc})") from exc
        names.append(path.parent.name or path.stem)
    text = report_csv(docs, names)
    with _OutDir(args.out, args.force) as out:
        (out / "report.csv").write_text(text)
        _write_manifest(out, "report", argv, {"inputs": [str(p) for p in args.inputs]}, {}, t0)
    sys.stdout.write(text)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file for the verb")
    common.add_argument("--out", required=True, help="output directory (created atomically)")
    common.add_argument("--seed-data", type=int)
    common.add_argument("--seed-init", type=int)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--force", action="store_true", help="replace an existing output directory")

    parser = _Parser(prog="instap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic shapes-world dataset")
    p.add_argument("--scenes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", choices=("train", "test", "zero"))
    p.add_argument("--objects", help="objects per scene: N or LO,HI")
    p.add_argument("--frames", type=int)
    p.add_argument("--canvas", help="H,W")
    p.add_argument("--image-fraction", type=float)

    for verb in ("pretrain", "align"):
        p = sub.add_parser(verb, parents=[common], help=f"run the {verb} stage")
        p.add_argument("--data", required=True)
        p.add_argument("--seed-dropout", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--checkpoint-every", type=int)
        if verb == "align":
            p.add_argument("--init", help="stage-1 checkpoint whose video encoder initialises stage 2")

    p = sub.add_parser("eval-retrieval", parents=[common], help="global / instance retrieval recall")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("global", "instance", "both"), default="both")
    p.add_argument("--pool-size", type=int)
    p.add_argument("--sentence-index", type=int)
    p.add_argument("--rerank", type=int)

    p = sub.add_parser("eval-grounding", parents=[common], help="fit the box head and report IoU@t")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("inspect-mask", parents=[common], help="dump teacher importance scores and mask")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample-id")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--rho", type=float)
    p.add_argument("--frames", type=int)

    p = sub.add_parser("report", parents=[common], help="CSV table from eval JSON documents")
    p.add_argument("inputs", nargs="+")
    return parser


def _dispatch(args, argv) -> None:
    t0 = time.perf_counter()
    if args.threads < 1:
        raise CLIError(EXIT_USAGE, "usage", "--threads must be >= 1")
    torch.set_num_threads(args.threads)
    if args.verb == "gen-data":
        cmd_gen_data(args, argv, t0)
    elif args.verb in ("pretrain", "align"):
        cmd_train(args, argv, t0, args.verb)
    elif args.verb == "eval-retrieval":
        cmd_eval_retrieval(args, argv, t0)
    elif args.verb == "eval-grounding":
        cmd_eval_grounding(args, argv, t0)
    elif args.verb == "inspect-mask":
        cmd_inspect_mask(args, argv, t0)
    else:
        cmd_report(args, argv, t0)


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": message}) + "\n")
    return code


def run(argv=None) -> int:
    """Execute one verb; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        _dispatch(args, argv)
    except CLIError as exc:
        return _fail(exc.code, exc.kind, str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing_file", str(exc))
    except (CheckpointError, DatasetFormatError) as exc:
        return _fail(EXIT_FORMAT, "format", str(exc))
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        return _fail(EXIT_ERROR, type(exc).__name__, str(exc))
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
