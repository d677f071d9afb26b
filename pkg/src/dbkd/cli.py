"""Command-line tool: scan models, build and evaluate zoos, convert
datasets, and render reports.

Scan exit codes are the machine-readable verdict: 0 = clean,
2 = backdoored, 1 = operational error. Flags override the key=value config
file; DBKD_SEED is the fallback seed.
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .annealing import write_trace_jsonl
from .batchfile import read_batch, write_batch
from .detector import ScanConfig, save_report, scan_all2one, scan_source_specific
from .errors import ConfigInvalid, DbkdError
from .harness import (entries_from_manifest, evaluate_entries, save_eval_result)
from .objective import ObjectiveConfig
from .oracle import NativeOracle, load_net
from .remote import RemoteEndpoint, RemoteOracle
from .tensors import RandomSource, ValidationBatch
from .triggers import TEMPLATE_KINDS, SearchSpaceConfig
from .zoo import (ArchSpec, AttackRecipe, DatasetSpec, ZooBuildConfig, build_zoo,
                  make_dataset, save_zoo)

EXIT_CLEAN = 0
EXIT_ERROR = 1
EXIT_BACKDOORED = 2


def _read_config_file(path, known: set[str]) -> dict:
    """Flat key=value file; '#' starts a comment; unknown keys are errors."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigInvalid(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigInvalid(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = value
    return values


def _resolve(args: argparse.Namespace, parser: argparse.ArgumentParser,
             file_keys: set[str]) -> argparse.Namespace:
    """Apply config-file values for flags the user did not set explicitly."""
    if getattr(args, "config", None):
        from_file = _read_config_file(args.config, file_keys)
        explicit = {a.dest for a in parser._actions
                    if any(opt in sys.argv for opt in a.option_strings)}
        for key, text in from_file.items():
            if key in explicit:
                continue
            current = parser.get_default(key)
            kind = type(current) if current is not None else str
            if kind is bool:
                setattr(args, key, text.lower() in ("1", "true", "yes"))
            elif current is None and key in ("steps", "workers"):
                setattr(args, key, int(text))
            elif kind is int:
                setattr(args, key, int(text))
            elif kind is float:
                setattr(args, key, float(text))
            else:
                setattr(args, key, text)
    return args


def _seed_from(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("DBKD_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigInvalid(f"DBKD_SEED must be an integer, got {env!r}") from exc
    return 0


def _templates_from(args, image_shape) -> tuple[SearchSpaceConfig, ...]:
    kinds = TEMPLATE_KINDS if args.template == "all" else (args.template,)
    return tuple(SearchSpaceConfig(kind, image_shape=image_shape,
                                   delta_s=args.delta_s, alpha_max=args.alpha_max,
                                   noise_bound=args.noise_bound)
                 for kind in kinds)


def _scan_config(args, image_shape, seed) -> ScanConfig:
    if args.lam <= 0:
        raise ConfigInvalid("--lambda must be > 0")
    return ScanConfig(
        templates=_templates_from(args, image_shape),
        objective=ObjectiveConfig(lam=args.lam, batch_size=args.batch_size),
        threshold=args.threshold,
        strategy=args.strategy.replace("-", "_"),
        steps=args.steps,
        epsilon=args.epsilon,
        seed=seed,
        workers=args.workers or os.cpu_count() or 1,
        attach_traces=bool(args.trace),
    )


def _split_batches(batch: ValidationBatch, size: int):
    """First `size` samples search, the remainder verifies (when present)."""
    if len(batch) <= size:
        return batch, None
    search = ValidationBatch.from_arrays(batch.stack[:size], batch.labels[:size],
                                         batch.class_count)
    holdout = ValidationBatch.from_arrays(batch.stack[size:], batch.labels[size:],
                                          batch.class_count)
    return search, holdout


def _per_class_split(batch: ValidationBatch, per_class: int):
    out = {}
    for c in range(batch.class_count):
        idx = np.flatnonzero(batch.labels == c)[:per_class]
        if len(idx):
            out[c] = ValidationBatch.from_arrays(batch.stack[idx], batch.labels[idx],
                                                 batch.class_count)
    return out


def cmd_scan(args, parser) -> int:
    args = _resolve(args, parser, _SCAN_KEYS)
    seed = _seed_from(args)
    if (args.model is None) == (args.endpoint is None):
        print("scan: exactly one of --model or --endpoint is required", file=sys.stderr)
        return EXIT_ERROR
    batch = read_batch(args.batch)
    if args.model is not None:
        oracle = NativeOracle(load_net(args.model))
        model_id = str(args.model)
    else:
        oracle = RemoteOracle(RemoteEndpoint.parse(args.endpoint, timeout=args.timeout))
        model_id = args.endpoint
    cfg = _scan_config(args, oracle.input_shape, seed)
    if args.holdout:
        search, holdout = batch, read_batch(args.holdout)
    else:
        search, holdout = _split_batches(batch, args.batch_size)
    if cfg.strategy == "source_specific":
        per_class = _per_class_split(search, args.batch_size)
        report = scan_source_specific(oracle, per_class, cfg, model_id=model_id)
    else:
        report = scan_all2one(oracle, search, cfg, holdout=holdout, model_id=model_id)
    if args.out:
        save_report(args.out, report)
    if args.trace:
        best = max((r for r in report.results if r.trace is not None),
                   key=lambda r: (r.best_casr or 0.0), default=None)
        if best is not None:
            write_trace_jsonl(args.trace, best.trace)
    print(f"{model_id}: score {report.model_score:.4f} -> {report.verdict} "
          f"(target {report.predicted_target}, {report.total_queries} queries)")
    return EXIT_BACKDOORED if report.verdict == "backdoored" else EXIT_CLEAN


def cmd_zoo_build(args, parser) -> int:
    args = _resolve(args, parser, _ZOO_BUILD_KEYS)
    seed = _seed_from(args)
    attacks = []
    for kind, strategy, count in (("patch", "all2one", args.patch),
                                  ("blend", "all2one", args.blend),
                                  ("blend", "one_shift", args.blend_oneshift),
                                  ("warp", "all2one", args.warp),
                                  ("noise", "all2one", args.noise)):
        if count:
            attacks.append(AttackRecipe(kind, strategy, count))
    dataset = DatasetSpec(class_count=args.classes, height=args.image_size,
                          width=args.image_size,
                          train_per_class=args.train_per_class,
                          test_per_class=args.test_per_class)
    cfg = ZooBuildConfig(dataset=dataset, clean_count=args.clean,
                         attacks=tuple(attacks), epochs=args.epochs,
                         arch=ArchSpec())
    zoo = build_zoo(cfg, seed, progress=lambda msg: print(f"  {msg}"))
    out = Path(args.out)
    save_zoo(zoo, out)
    rng = RandomSource(seed).substream("zoo-batches")
    write_batch(out / "validation.dbkb", zoo.dataset.validation_batch(args.batch_size, rng))
    write_batch(out / "holdout.dbkb", zoo.dataset.validation_batch(args.batch_size, rng))
    print(f"zoo with {len(zoo.entries)} entries written to {out}")
    return EXIT_CLEAN


def cmd_zoo_eval(args, parser) -> int:
    args = _resolve(args, parser, _ZOO_EVAL_KEYS)
    seed = _seed_from(args)
    spec, zoo_seed, entries = entries_from_manifest(args.zoo)
    dataset = make_dataset(spec, RandomSource(zoo_seed).substream("dataset"))
    cfg = _scan_config(args, spec.image_shape, seed)
    rng = RandomSource(seed).substream("zoo-eval")
    batch = dataset.validation_batch(args.batch_size, rng)
    holdout = dataset.validation_batch(args.batch_size, rng)
    per_class = (dataset.per_class_batches(args.batch_size, rng)
                 if cfg.strategy == "source_specific" else None)
    result = evaluate_entries(entries, dataset, cfg, batch, holdout=holdout,
                              per_class_batches=per_class,
                              progress=lambda msg: print(f"  {msg}"))
    if args.out:
        save_eval_result(args.out, result, include_reports=args.reports)
    m = result["metrics"]
    print(json.dumps({k: m.get(k) for k in ("auroc", "tpr", "fpr",
                                            "target_label_accuracy", "mean_iou",
                                            "mean_texture_cs", "random_texture_cs",
                                            "models_scored", "models_errored")},
                     indent=2))
    return EXIT_ERROR if m.get("models_scored", 0) == 0 else EXIT_CLEAN


def _read_idx(path) -> np.ndarray:
    """Parse an IDX (MNIST-style) file into an ndarray."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ConfigInvalid(f"{path}: truncated IDX header")
    zero1, zero2, dtype_code, ndim = struct.unpack_from(">BBBB", raw, 0)
    if zero1 != 0 or zero2 != 0:
        raise ConfigInvalid(f"{path}: not an IDX file")
    dtypes = {0x08: np.uint8, 0x09: np.int8, 0x0B: np.int16, 0x0C: np.int32,
              0x0D: np.float32, 0x0E: np.float64}
    if dtype_code not in dtypes:
        raise ConfigInvalid(f"{path}: unsupported IDX dtype 0x{dtype_code:02x}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    data = np.frombuffer(raw, np.dtype(dtypes[dtype_code]).newbyteorder(">"),
                         offset=4 + 4 * ndim)
    return data.reshape(dims)


def cmd_convert_dataset(args, parser) -> int:
    if args.npz:
        archive = np.load(args.npz)
        images, labels = archive["images"], archive["labels"]
    else:
        if not args.images or not args.labels:
            print("convert-dataset: need --npz or both --images and --labels",
                  file=sys.stderr)
            return EXIT_ERROR
        images = _read_idx(args.images)
        labels = _read_idx(args.labels)
    if images.ndim == 3:
        images = images[:, None, :, :]
    if images.dtype != np.float32 or images.max() > 1.0:
        images = images.astype(np.float32) / 255.0
    labels = labels.astype(np.int64).ravel()
    if len(images) != len(labels):
        raise ConfigInvalid(f"{len(images)} images vs {len(labels)} labels")
    if args.limit:
        images, labels = images[:args.limit], labels[:args.limit]
    class_count = int(labels.max()) + 1
    batch = ValidationBatch.from_arrays(np.clip(images, 0.0, 1.0), labels, class_count)
    write_batch(args.out, batch)
    print(f"wrote {len(batch)} samples ({class_count} classes) to {args.out}")
    return EXIT_CLEAN


def cmd_serve_docs_report(args, parser) -> int:
    with open(args.report) as fh:
        doc = json.load(fh)
    lines = [f"# Scan report: {doc.get('model_id')}", ""]
    lines.append(f"- verdict: **{doc.get('verdict')}** "
                 f"(score {doc.get('model_score'):.4f}, threshold {doc.get('threshold')})")
    lines.append(f"- strategy: {doc.get('strategy')}; classes: {doc.get('class_count')}")
    lines.append(f"- predicted target: {doc.get('predicted_target')}"
                 + (f" (source {doc.get('predicted_source')})"
                    if doc.get("predicted_source") is not None else ""))
    lines.append(f"- queries: {doc.get('total_queries')}; "
                 f"wall time: {doc.get('wall_time'):.1f}s; seed: {doc.get('seed')}")
    lines += ["", "| template | source | target | cASR | verification ASR | error |",
              "|---|---|---|---|---|---|"]
    for r in sorted(doc.get("results", []),
                    key=lambda r: -(r.get("best_casr") or 0.0)):
        casr_txt = f"{r['best_casr']:.4f}" if r.get("best_casr") is not None else "-"
        ver = (f"{r['verification_asr']:.3f}"
               + ("" if r.get("verification_on_holdout") else " (search batch)")
               if r.get("verification_asr") is not None else "-")
        src = r.get("source")
        lines.append(f"| {r['template']} | {'-' if src is None else src} "
                     f"| {r['target']} | {casr_txt} | {ver} | {r.get('error') or ''} |")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"report rendered to {args.out}")
    else:
        print(text, end="")
    return EXIT_CLEAN


_SCAN_KEYS = {"template", "strategy", "lam", "batch_size", "steps", "epsilon",
              "threshold", "delta_s", "alpha_max", "noise_bound", "seed",
              "workers", "timeout"}
_ZOO_BUILD_KEYS = {"classes", "image_size", "clean", "patch", "blend",
                   "blend_oneshift", "warp", "noise", "epochs", "seed",
                   "train_per_class", "test_per_class", "batch_size"}
_ZOO_EVAL_KEYS = _SCAN_KEYS


def _add_scan_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--template", choices=list(TEMPLATE_KINDS) + ["all"], default="all")
    p.add_argument("--strategy", choices=["all2one", "source-specific"],
                   default="all2one")
    p.add_argument("--lambda", dest="lam", type=float, default=0.6,
                   help="cASR smoothing sharpness per percentage point of margin")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--steps", type=int, default=None,
                   help="annealing steps (default 10000; 1000 for warp/noise)")
    p.add_argument("--epsilon", type=float, default=10.0)
    p.add_argument("--threshold", type=float, default=0.95)
    p.add_argument("--delta-s", type=int, default=9, help="max patch box area, px")
    p.add_argument("--alpha-max", type=float, default=0.4, help="blend weight bound")
    p.add_argument("--noise-bound", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--config", default=None, help="key=value config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dbkd",
                                     description="Black-box backdoor scanner")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_scan = sub.add_parser("scan", help="scan one model for backdoors")
    p_scan.add_argument("--model", help="native weights file (.dbkn)")
    p_scan.add_argument("--endpoint", help="tcp://host:port or cmd:<command>")
    p_scan.add_argument("--batch", required=True, help="validation batch (.dbkb)")
    p_scan.add_argument("--holdout", default=None,
                        help="held-out batch for verification ASR")
    p_scan.add_argument("--timeout", type=float, default=30.0)
    _add_scan_flags(p_scan)
    p_scan.add_argument("--out", default=None, help="write the report JSON here")
    p_scan.add_argument("--trace", default=None,
                        help="write the best run's trace JSONL here")

    p_build = sub.add_parser("zoo-build", help="train a clean/backdoored model zoo")
    p_build.add_argument("--out", required=True)
    p_build.add_argument("--classes", type=int, default=4)
    p_build.add_argument("--image-size", type=int, default=12)
    p_build.add_argument("--clean", type=int, default=8)
    p_build.add_argument("--patch", type=int, default=8)
    p_build.add_argument("--blend", type=int, default=0)
    p_build.add_argument("--blend-oneshift", type=int, default=0)
    p_build.add_argument("--warp", type=int, default=0)
    p_build.add_argument("--noise", type=int, default=0)
    p_build.add_argument("--epochs", type=int, default=8)
    p_build.add_argument("--train-per-class", type=int, default=400)
    p_build.add_argument("--test-per-class", type=int, default=100)
    p_build.add_argument("--batch-size", type=int, default=32)
    p_build.add_argument("--seed", type=int, default=None)
    p_build.add_argument("--config", default=None)

    p_eval = sub.add_parser("zoo-eval", help="scan every zoo entry and score the detector")
    p_eval.add_argument("--zoo", required=True, help="zoo directory with manifest.json")
    _add_scan_flags(p_eval)
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("--reports", action="store_true",
                        help="embed per-model reports in the output JSON")
    p_eval.add_argument("--trace", default=None, help=argparse.SUPPRESS)

    p_conv = sub.add_parser("convert-dataset",
                            help="convert IDX or NPZ data to a batch file")
    p_conv.add_argument("--images", help="IDX images file")
    p_conv.add_argument("--labels", help="IDX labels file")
    p_conv.add_argument("--npz", help="npz archive with images/labels arrays")
    p_conv.add_argument("--limit", type=int, default=None)
    p_conv.add_argument("--out", required=True)

    p_docs = sub.add_parser("serve-docs-report",
                            help="render a report JSON as markdown")
    p_docs.add_argument("--report", required=True)
    p_docs.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"scan": cmd_scan, "zoo-build": cmd_zoo_build,
                "zoo-eval": cmd_zoo_eval, "convert-dataset": cmd_convert_dataset,
                "serve-docs-report": cmd_serve_docs_report}
    try:
        return handlers[args.command](args, parser)
    except (DbkdError, OSError) as exc:
        print(f"dbkd {args.command}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
