"""Command-line interface: prepare, train, eval, curriculum, selfcheck.

Exit codes: 0 success, 2 usage, 3 validation, 4 file format, 5 numeric,
6 integrity (changed bundle, missing checkpoint, locked run directory).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from .bundle import INDEX, Bundle, load_bundle, prepare_bundle, sha256_file
from .curriculum import build_keyword_list, build_schedule
from .encoders import load_checkpoint, read_checkpoint_header
from .errors import ConfigError, IntegrityError, NumericError, ValidationError, WebVSEError
from .evaluation import RetrievalSet, evaluate, evaluate_5fold
from .pipeline import build_pair_data, build_tag_data, new_model, run_two_stage
from .selfcheck import KINDS, run_selfcheck
from .trainer import CheckpointStore, TrainConfig, read_config_file


def _config(args, overrides: dict | None = None) -> TrainConfig:
    values = read_config_file(args.config) if args.config else {}
    values.update(overrides or {})
    if args.seed is not None:
        values["seed"] = args.seed
    return TrainConfig.from_mapping(values)


def _config_overrides(args) -> dict:
    return {f.name: getattr(args, f"cfg_{f.name}") for f in fields(TrainConfig)
            if getattr(args, f"cfg_{f.name}", None) is not None}


def _check_dims(cfg: TrainConfig, bundle: Bundle) -> None:
    if cfg.image_dim and cfg.image_dim != bundle.image_dim:
        raise ValidationError(f"config image_dim={cfg.image_dim} but bundle features have dim {bundle.image_dim}")
    if cfg.word_dim and cfg.word_dim != bundle.word_dim:
        raise ValidationError(f"config word_dim={cfg.word_dim} but bundle word vectors have dim {bundle.word_dim}")


def _web_corpus(bundle: Bundle):
    web = build_tag_data(bundle.web_entries, bundle.web_features, bundle.word_vectors, bundle.lemma_map)
    usable = set(web.ids)
    return web, [e for e in bundle.web_entries if e.image_id in usable]


# prepare --------------------------------------------------------------------


def cmd_prepare(args) -> int:
    options = {}
    if args.config:
        options = {k: int(v) for k, v in read_config_file(args.config).items()}
    index, rejected = prepare_bundle(
        Path(args.out), args.features, args.captions, args.word_vectors,
        args.train_ids, args.val_ids, args.test_ids, args.folds,
        args.manifest, args.web_features, args.lemma_map, args.stopwords, options,
    )
    by_rule: dict[str, int] = {}
    for _, rule in rejected:
        by_rule[rule] = by_rule.get(rule, 0) + 1
    print(f"bundle {args.out}: {index['counts']['images']} images, {index['counts']['captions']} captions, "
          f"dim {index['image_dim']}")
    if args.manifest:
        print(f"web items accepted {index['counts']['web_accepted']}, rejected {len(rejected)} "
              + " ".join(f"{r}={n}" for r, n in sorted(by_rule.items())))
    return 0


# train ----------------------------------------------------------------------


class RunLock:
    """Exclusive lock file for a run directory."""

    def __init__(self, directory: Path):
        self.path = directory / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise IntegrityError(f"{self.path.parent} is locked by another run (remove {self.path} if stale)")
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    cfg = _config(args, _config_overrides(args))
    bundle = load_bundle(args.bundle)
    _check_dims(cfg, bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with RunLock(out):
        use_web = bundle.has_web and not args.stage1_only and cfg.stage2_epochs > 0
        manifest = {
            "config": asdict(cfg),
            "seed": cfg.seed,
            "bundle": str(Path(args.bundle).resolve()),
            "inputs": {**bundle.index["files"], INDEX: sha256_file(Path(args.bundle) / INDEX)},
            "stage1_only": bool(args.stage1_only),
            "artifacts": {"checkpoints": "checkpoints", "log": "train_log.jsonl", "best": "best.json",
                          "config": "config.txt"},
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "version": __version__,
        }
        _write_json(out / "run_manifest.json", manifest)
        (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")

        train_caps = bundle.captions_for(bundle.split.train)
        pairs = build_pair_data(bundle.features, train_caps, bundle.word_vectors, bundle.split.train,
                                bundle.lemma_map)
        val = RetrievalSet.build(bundle.features, bundle.captions_for(bundle.split.val), bundle.split.val)
        model = new_model(cfg, bundle.image_dim, bundle.word_vectors, train_caps)
        web = entries = None
        if use_web:
            web, entries = _web_corpus(bundle)
        store = CheckpointStore(out / "checkpoints")
        res = run_two_stage(cfg, model, pairs, val, web, entries, train_caps, bundle.stopwords,
                            bundle.lemma_map, store)

        (out / "train_log.jsonl").write_text(res.log.to_jsonl(), encoding="utf-8")
        best = {"epoch": res.best_epoch, "checkpoint": str(store.path(res.best_epoch).relative_to(out)),
                "rsum": next(r.report.rsum for r in res.log.records if r.epoch == res.best_epoch)}
        _write_json(out / "best.json", best)
        if res.keywords is not None:
            (out / "keywords.tsv").write_text(res.keywords.to_text(), encoding="utf-8")
            (out / "schedule.tsv").write_text(res.schedule.to_text(), encoding="utf-8")
        manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        manifest["best_epoch"] = res.best_epoch
        manifest["epochs"] = len(res.log)
        _write_json(out / "run_manifest.json", manifest)
    print(f"trained {len(res.log)} epochs; best epoch {res.best_epoch} (val rsum {best['rsum']:.1f})")
    return 0


# eval -----------------------------------------------------------------------


def _resolve_checkpoint(args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    if args.run:
        pointer = Path(args.run) / "best.json"
        if not pointer.exists():
            raise IntegrityError(f"{args.run} has no best.json")
        return Path(args.run) / json.loads(pointer.read_text(encoding="utf-8"))["checkpoint"]
    raise ValidationError("give --checkpoint or --run")


def cmd_eval(args) -> int:
    bundle = load_bundle(args.bundle)
    ckpt = _resolve_checkpoint(args)
    if not ckpt.exists():
        raise IntegrityError(f"checkpoint {ckpt} does not exist")
    header = read_checkpoint_header(ckpt)
    if header["V"] != bundle.image_dim:
        raise ValidationError(f"checkpoint expects image dim {header['V']}, bundle has {bundle.image_dim}")
    model = load_checkpoint(ckpt)
    ids = getattr(bundle.split, args.split)
    data = RetrievalSet.build(bundle.features, bundle.captions_for(ids), ids)
    if args.folds:
        if len(bundle.split.folds) != args.folds:
            raise ValidationError(f"bundle has {len(bundle.split.folds)} folds, --folds {args.folds} requested")
        if args.split != "test":
            raise ValidationError("folds partition the test split")
        report = evaluate_5fold(model, data, bundle.split.folds, args.folds)
    else:
        report = evaluate(model, data)
    print(report.table())
    print(report.to_text(), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
        _write_json(out / "report.json", report.as_dict())
    return 0


# curriculum -----------------------------------------------------------------


def cmd_curriculum(args) -> int:
    cfg = _config(args)
    bundle = load_bundle(args.bundle)
    if not bundle.has_web:
        raise ValidationError("bundle has no web corpus")
    kw = build_keyword_list(bundle.captions_for(bundle.split.train), bundle.stopwords, bundle.lemma_map, args.cap)
    _, entries = _web_corpus(bundle)
    epochs = args.epochs if args.epochs is not None else cfg.stage2_epochs
    schedule = build_schedule(entries, kw, epochs, args.difficulty or cfg.difficulty)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "keywords.tsv").write_text(kw.to_text(), encoding="utf-8")
    (out / "schedule.tsv").write_text(schedule.to_text(), encoding="utf-8")
    print(f"{len(kw.entries)} keywords; {len(schedule.item_ids)} web items over {epochs} epochs")
    return 0


# selfcheck ------------------------------------------------------------------


def cmd_selfcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    kinds = tuple(args.kinds) if args.kinds else KINDS
    records = run_selfcheck(args.trials, seed, kinds, args.inject_fault)
    lines = [r.line() for r in records if args.verbose or not r.passed]
    worst = max(r.result.overall for r in records)
    failed = [r for r in records if not r.passed]
    lines.append(f"{len(records)} checks, {len(failed)} failed, max rel error {worst:.2e}")
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "selfcheck.txt").write_text("\n".join(r.line() for r in records) + "\n", encoding="utf-8")
    if failed:
        culprits = {}
        for r in failed:
            for name in r.result.failures():
                culprits[name] = max(culprits.get(name, 0.0), r.result.max_rel_error[name])
        detail = ", ".join(f"{n} (rel error {e:.2e})" for n, e in sorted(culprits.items()))
        raise NumericError(f"gradient check failed for {detail}")
    return 0


# parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="webvse", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="validate inputs and write a dataset bundle")
    p.add_argument("--features", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--word-vectors", required=True)
    p.add_argument("--train-ids", required=True)
    p.add_argument("--val-ids", required=True)
    p.add_argument("--test-ids", required=True)
    p.add_argument("--folds", type=int, default=0, help="cut the test split into this many folds")
    p.add_argument("--manifest", help="web manifest")
    p.add_argument("--web-features", help="features of the web images")
    p.add_argument("--lemma-map")
    p.add_argument("--stopwords")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="two-stage training on a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--stage1-only", action="store_true")
    for f in fields(TrainConfig):
        if f.name == "seed":
            continue
        kind = {"int": int, "float": float}.get(f.type, str)
        flags = [f"--{f.name}"] + ([f"--{f.name.replace('_', '-')}"] if "_" in f.name else [])
        p.add_argument(*flags, dest=f"cfg_{f.name}", type=kind, default=None, metavar=f.name.upper())
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="retrieval metrics of a checkpoint")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--run", help="run directory; uses its best checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--folds", type=int, default=0, help="average over the bundle's test folds")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("curriculum", parents=[common], help="keyword list and web schedule")
    p.add_argument("--bundle", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--difficulty", choices=("min", "mean"))
    p.add_argument("--cap", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curriculum)

    p = sub.add_parser("selfcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--trials", type=int, default=25)
    p.add_argument("--kinds", nargs="+", choices=KINDS)
    p.add_argument("--inject-fault", metavar="PARAM", help="flip the sign of this parameter's gradient")
    p.add_argument("--out")
    p.set_defaults(func=cmd_selfcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except WebVSEError as exc:
        print(f"webvse {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"webvse {args.command}: {exc}", file=sys.stderr)
        return ValidationError.exit_code
    except ValueError as exc:
        print(f"webvse {args.command}: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
