"""``addrparse`` command line: generate, train, eval, zstat, parse, reorder-study, replay.

Every run writes a JSON manifest next to its main output. ``addrparse
replay MANIFEST`` reruns the recorded command and, with ``--check``,
verifies that the artifacts hash to the recorded values.

Exit codes: 0 success, 1 usage, 2 data or schema problem, 3 training
diverged even after the retry seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Sequence

from . import __version__
from .datagen import generate, load_config, split
from .domain import load_corpus, save_corpus
from .errors import AddrParseError, ProtocolFailed
from .evaluation import EvalReport, evaluate_seeds, reorder_study, z_test, zero_shot_eval
from .tagger import VARIANTS, ModelConfig, load_model, parse_many, save_model
from .training import DEFAULT_MERGES, DatasetBundle, TrainConfig, run_protocol

CONFIG_DIR_ENV = "ADDRPARSE_CONFIG_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("addrparse")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers --------------------------------------------------------------

def resolve_config(name: str) -> Path:
    """Find a generator config by path, then in $ADDRPARSE_CONFIG_DIR, then among the bundled ones."""
    path = Path(name)
    if path.exists():
        return path
    env_dir = os.environ.get(CONFIG_DIR_ENV)
    if env_dir and (Path(env_dir) / name).exists():
        return Path(env_dir) / name
    bundled = resources.files("addrparse") / "configs" / name
    if bundled.is_file():
        return Path(str(bundled))
    raise UsageError(f"config {name!r} not found (looked in ., ${CONFIG_DIR_ENV}, bundled configs)")


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")
    return path


def write_json(path: Path, data) -> Path:
    return write_text(path, json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def write_manifest(path: Path, command: str, argv: Sequence[str], params: dict, artifacts: Sequence[Path],
                   config: Path | None = None, extra: dict | None = None) -> None:
    manifest = {
        "tool": "addrparse",
        "version": __version__,
        "subcommand": command,
        "argv": list(argv),
        "cwd": os.getcwd(),
        "config": None if config is None else str(config),
        "params": params,
        "artifacts": {str(p): sha256_file(p) for p in artifacts},
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        manifest.update(extra)
    write_json(path, manifest)


def _manifest_path(args, default: Path) -> Path:
    return Path(args.manifest) if args.manifest else default


# -- subcommands ----------------------------------------------------------

def cmd_generate(args, argv) -> int:
    config_path = resolve_config(args.config)
    config = load_config(config_path, seed=args.seed)
    corpus = generate(config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out)
    artifacts = [out]
    if args.train_out or args.val_out:
        if not (args.train_out and args.val_out):
            raise UsageError("--train-out and --val-out go together")
        train, val = split(corpus, args.train_fraction, args.split_seed)
        for path, part in ((Path(args.train_out), train), (Path(args.val_out), val)):
            path.parent.mkdir(parents=True, exist_ok=True)
            save_corpus(part, path)
            artifacts.append(path)
    params = {"seed": config.seed, "samples_per_country": config.samples_per_country,
              "countries": [c.code for c in config.countries], "records": len(corpus),
              "train_fraction": args.train_fraction, "split_seed": args.split_seed}
    write_manifest(_manifest_path(args, out.with_name(out.name + ".manifest.json")), "generate", argv,
                   params, artifacts, config_path)
    print(f"wrote {len(corpus)} addresses to {out}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    fields = {name: getattr(args, name) for name in TrainConfig.__dataclass_fields__
              if getattr(args, name, None) is not None}
    return TrainConfig(**fields)


def cmd_train(args, argv) -> int:
    train_set = load_corpus(args.train)
    val_set = load_corpus(args.val)
    cfg = _train_config(args)
    base = ModelConfig(variant=args.variant, hidden_dim=args.hidden_dim, word_dim=args.word_dim,
                       subword_dim=args.subword_dim, ngram_n=args.ngram_n, hash_buckets=args.hash_buckets,
                       ngram_seed=args.ngram_seed)
    bundle = DatasetBundle.build(train_set, val_set, args.num_merges)
    runs = run_protocol(bundle, cfg, args.variant, base)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for run in runs:
        path = out_dir / f"model-seed{run.seed}.bin"
        save_model(run.model, path)
        artifacts.append(path)
    history = {"variant": args.variant, "train_config": cfg.to_dict(),
               "model_config": {k: v for k, v in asdict(base).items() if k != "seed"},
               "num_merges": args.num_merges, "runs": [r.history.to_dict() for r in runs]}
    artifacts.append(write_json(out_dir / "history.json", history))
    timing = {str(r.seed): round(r.history.wall_time, 3) for r in runs}
    write_manifest(_manifest_path(args, out_dir / "manifest.json"), "train", argv,
                   {"train_config": cfg.to_dict(), "model_config": asdict(base), "num_merges": args.num_merges},
                   artifacts, extra={"wall_time_seconds": timing})
    for r in runs:
        print(f"seed {r.seed}: {r.history.epochs} epochs, best {r.history.best_epoch}, "
              f"val loss {r.history.best_val_loss:.5f} ({r.history.stop_reason})")
    return EXIT_OK


def _load_models(paths: Sequence[str]):
    models = [load_model(p) for p in paths]
    return [(m.config.seed, m) for m in models]


def cmd_eval(args, argv) -> int:
    models = _load_models(args.model)
    corpus = load_corpus(args.corpus)
    if args.zero_shot:
        config_path = resolve_config(args.zero_shot)
        train_path = resolve_config(args.train_config)
        zs_cfg, train_cfg = load_config(config_path), load_config(train_path)
        family = _lexicon_family(config_path) | _lexicon_family(train_path)
        report = zero_shot_eval(models, corpus, zs_cfg.countries, train_cfg.countries, family)
    else:
        report = evaluate_seeds(models, corpus, args.title)
    out = Path(args.out)
    artifacts = [write_text(out, report.to_json())]
    text_out = Path(args.text_out) if args.text_out else out.with_suffix(".txt")
    artifacts.append(write_text(text_out, report.render()))
    write_manifest(_manifest_path(args, out.with_name(out.name + ".manifest.json")), "eval", argv,
                   {"models": list(args.model), "corpus": args.corpus, "seeds": report.seeds,
                    "inputs": {p: sha256_file(p) for p in [*args.model, args.corpus]}}, artifacts)
    sys.stdout.write(report.render())
    return EXIT_OK


def _lexicon_family(config_path: Path) -> dict[str, str]:
    """Map each lexicon id of a config to the root of its sister_of chain."""
    data = json.loads(config_path.read_text(encoding="utf-8"))
    parent = {}
    for lid, spec in data.get("lexicons", {}).items():
        parent[lid] = (spec.get("synthesize") or {}).get("sister_of") or lid
    family = {}
    for lid in parent:
        root = lid
        # the config loader already rejects sister_of cycles
        while parent.get(root, root) != root:
            root = parent[root]
        family[lid] = root
    return family


def cmd_zstat(args, argv) -> int:
    a = EvalReport.from_dict(json.loads(Path(args.a).read_text(encoding="utf-8")))
    b = EvalReport.from_dict(json.loads(Path(args.b).read_text(encoding="utf-8")))
    if args.country:
        ca, cb = a.country(args.country), b.country(args.country)
        k1, n1, k2, n2 = ca.k, ca.n, cb.k, cb.n
    else:
        k1, n1, k2, n2 = a.k, a.n, b.k, b.n
    result = z_test(k1, n1, k2, n2)
    data = {"a": args.a, "b": args.b, "country": args.country, "k1": k1, "n1": n1, "k2": k2, "n2": n2,
            "accuracy_a": k1 / n1, "accuracy_b": k2 / n2, **result.to_dict()}
    out = Path(args.out)
    write_json(out, data)
    write_manifest(_manifest_path(args, out.with_name(out.name + ".manifest.json")), "zstat", argv,
                   {"country": args.country, "inputs": {p: sha256_file(p) for p in (args.a, args.b)}}, [out])
    verdict = "reject" if result.reject else "no rejection"
    print(f"z = {result.z:.6f} ({verdict} at |z| > 3.290527)")
    return EXIT_OK


def cmd_parse(args, argv) -> int:
    model = load_model(args.model)
    if args.address is not None:
        raws = [args.address]
    else:
        raws = [line for line in Path(args.file).read_text(encoding="utf-8").splitlines() if line.strip()]
    results = parse_many(raws, model)
    text = "\n".join("\n".join(r.lines()) + "\n" for r in results)
    if args.out:
        out = Path(args.out)
        write_text(out, text)
        artifacts = [out]
        default = out.with_name(out.name + ".manifest.json")
    else:
        sys.stdout.write(text)
        artifacts = []
        default = Path("addrparse-parse.manifest.json")
    write_manifest(_manifest_path(args, default), "parse", argv,
                   {"model": args.model, "addresses": len(raws)}, artifacts)
    return EXIT_OK


def cmd_reorder(args, argv) -> int:
    model = load_model(args.model)
    corpus = load_corpus(args.corpus)
    result = reorder_study(model, corpus, args.patterns, args.n, args.seed)
    out = Path(args.out)
    write_json(out, {"model": args.model, "corpus": args.corpus, "patterns": args.patterns,
                     "seed": args.seed, **result.to_dict()})
    write_manifest(_manifest_path(args, out.with_name(out.name + ".manifest.json")), "reorder-study", argv,
                   {"patterns": args.patterns, "n": args.n, "seed": args.seed}, [out])
    print(f"before {result.before.token_accuracy:.4f} after {result.after.token_accuracy:.4f} "
          f"drop {result.drop * 100:.2f} points")
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    manifest = json.loads(Path(args.manifest_file).read_text(encoding="utf-8"))
    if manifest.get("tool") != "addrparse":
        raise UsageError(f"{args.manifest_file} is not an addrparse manifest")
    cwd = os.getcwd()
    os.chdir(manifest["cwd"])
    try:
        code = main(manifest["argv"])
    finally:
        os.chdir(cwd)
    if code != EXIT_OK or not args.check:
        return code
    base = Path(manifest["cwd"])
    changed = [p for p, digest in manifest["artifacts"].items() if sha256_file(base / p) != digest]
    for p in changed:
        print(f"artifact differs: {p}", file=sys.stderr)
    return EXIT_DATA if changed else EXIT_OK


# -- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="addrparse", description="Multinational address parsing toolkit.")
    parser.add_argument("--version", action="version", version=f"addrparse {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--manifest", help="where to write the run manifest")
        return p

    p = common(sub.add_parser("generate", help="generate a synthetic corpus"))
    p.add_argument("--config", required=True, help=f"config file or bundled name (see ${CONFIG_DIR_ENV})")
    p.add_argument("--seed", type=int, help="override the config's seed")
    p.add_argument("--out", required=True)
    p.add_argument("--train-out")
    p.add_argument("--val-out")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    d = TrainConfig()
    m = ModelConfig()
    p = common(sub.add_parser("train", help="train one model per seed"))
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="composed")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=list(d.seeds))
    p.add_argument("--retry-seed", type=int, default=d.retry_seed)
    p.add_argument("--epochs-max", type=int, default=d.epochs_max)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr0", type=float, default=d.lr0)
    p.add_argument("--lr-factor", type=float, default=d.lr_factor)
    p.add_argument("--plateau-patience", type=int, default=d.plateau_patience)
    p.add_argument("--early-stop-patience", type=int, default=d.early_stop_patience)
    p.add_argument("--teacher-forcing-ratio", type=float, default=d.teacher_forcing_ratio)
    p.add_argument("--divergence-threshold", type=float, default=d.divergence_threshold)
    p.add_argument("--divergence-grace-epochs", type=int, default=d.divergence_grace_epochs)
    p.add_argument("--hidden-dim", type=int, default=m.hidden_dim)
    p.add_argument("--word-dim", type=int, default=m.word_dim)
    p.add_argument("--subword-dim", type=int, default=m.subword_dim)
    p.add_argument("--ngram-n", type=int, default=m.ngram_n)
    p.add_argument("--hash-buckets", type=int, default=m.hash_buckets)
    p.add_argument("--ngram-seed", type=int, default=m.ngram_seed)
    p.add_argument("--num-merges", type=int, default=DEFAULT_MERGES)
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="score models on a corpus"))
    p.add_argument("--model", nargs="+", required=True, help="one model file per seed")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--text-out", help="plain-text report path (default: OUT with .txt)")
    p.add_argument("--title", default="holdout")
    p.add_argument("--zero-shot", metavar="CONFIG", help="config of the unseen countries")
    p.add_argument("--train-config", help="training config, needed with --zero-shot")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("zstat", help="two-proportion z-test between two eval reports"))
    p.add_argument("a", help="first eval report (positive z favours it)")
    p.add_argument("b", help="second eval report")
    p.add_argument("--country", help="compare one country instead of the pooled totals")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_zstat)

    p = common(sub.add_parser("parse", help="tag addresses with a trained model"))
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--address", help="a single address")
    src.add_argument("--file", help="one address per line")
    p.add_argument("--out", help="write here instead of stdout")
    p.set_defaults(func=cmd_parse)

    p = common(sub.add_parser("reorder-study", help="accuracy before/after reordering into other patterns"))
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--patterns", type=int, nargs="+", required=True)
    p.add_argument("--n", type=int, help="number of addresses to sample")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reorder)

    p = sub.add_parser("replay", help="rerun the command recorded in a manifest")
    p.add_argument("manifest_file")
    p.add_argument("--check", action="store_true", help="fail if any artifact hash changed")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "eval" and bool(args.zero_shot) != bool(args.train_config):
        print("addrparse eval: --zero-shot and --train-config go together", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"addrparse {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ProtocolFailed as exc:
        print(f"addrparse {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (AddrParseError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"addrparse {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
