"""Command-line driver: ``explainrec <command> [options]``.

Commands: synth, prepare, train, evaluate, explain, report. A JSON config
file supplies defaults; flags override it. Every artifact carries a header
with the format version and the resolved config, and reruns with the same
config produce byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import formats
from .data import (
    POOL_SIZE,
    Dataset,
    FeatureTables,
    ParseError,
    ValidationError,
    ground_truth_features,
    load_dataset,
    parse_interactions,
    split_train_test,
    write_interactions,
    write_manifest,
)
from .diffcore import NonFiniteGradient, load_checkpoint, save_checkpoint
from .evaluation import CSV_COLUMNS, EXPLAIN_METRICS, evaluate, explanation_metrics, model_scorer
from .explain import SOURCES, explanation_nar, ground_truth_vector, pearson_matrix, perturbation_vectors, top_k_words
from .models import FEATURE_MAPPED, MODEL_KINDS, Model, ScorerConfig
from .synth import SynthConfig, synth_generate
from .training import TrainConfig, TrainData, TrainingAborted, final_perturbations, train_model

log = logging.getLogger("explainrec")

INTERACTIONS_FILE = "interactions.tsv"
MANIFEST_FILE = "manifest.json"
PERTURBATION_KIND = {"car": "adversarial", "cnr": "counterfactual"}


class ConfigError(ValueError):
    pass


@dataclass
class EvalSettings:
    pool_size: int = POOL_SIZE
    k: int = 10


@dataclass
class ExplainSettings:
    k: int = 5
    top_k: int = 5


@dataclass
class RunConfig:
    seed: int | None = None
    out: str = "."
    data: str | None = None
    model: str = "nar"
    ratio: int = 4
    T: int = 5
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    explain: ExplainSettings = field(default_factory=ExplainSettings)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        nested = {"synth": SynthConfig, "train": TrainConfig, "eval": EvalSettings, "explain": ExplainSettings}
        kwargs = {}
        for name, typ in nested.items():
            sub = doc.pop(name, {}) or {}
            known = {f.name for f in fields(typ)}
            unknown = set(sub) - known
            if unknown:
                raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
            kwargs[name] = typ(**sub)
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc, **kwargs)

    def echo(self) -> dict:
        # the output location is left out so reruns elsewhere stay byte-identical
        d = asdict(self)
        del d["out"]
        d["train"]["hidden"] = list(self.train.hidden)
        d["train"]["seed"] = self.seed
        return d


# -- argument parsing ----------------------------------------------------

# (flag, section, field, type)
_SYNTH_FLAGS = [
    ("--users", "synth", "users", int),
    ("--items", "synth", "items", int),
    ("--features", "synth", "features", int),
    ("--density", "synth", "density", float),
    ("--planted", "synth", "planted", int),
    ("--item-attributes", "synth", "item_attributes", int),
    ("--match-rate", "synth", "match_rate", float),
    ("--noise", "synth", "noise", float),
]
_TRAIN_FLAGS = [
    ("--epochs", "train", "epochs", int),
    ("--lr", "train", "lr", float),
    ("--batch-size", "train", "batch_size", int),
    ("--negatives", "train", "negatives", int),
    ("--epsilon", "train", "epsilon", float),
    ("--lambda", "train", "lam", float),
    ("--xi", "train", "xi", float),
    ("--outer", "train", "outer", int),
    ("--distance", "train", "distance", str),
    ("--theta-epochs", "train", "theta_epochs", int),
    ("--cf-steps", "train", "cf_steps", int),
    ("--cf-lr", "train", "cf_lr", float),
    ("--cf-label", "train", "cf_label", str),
    ("--cf-weight", "train", "cf_weight", float),
    ("--id-dim", "train", "id_dim", int),
    ("--feature-dim", "train", "feature_dim", int),
]
_EVAL_FLAGS = [("--pool-size", "eval", "pool_size", int), ("--k", "eval", "k", int)]
_EXPLAIN_FLAGS = [("--k", "explain", "k", int), ("--top-k", "explain", "top_k", int)]


def _dest(section, name):
    return f"{section}__{name}"


def _add(parser, specs):
    for flag, section, name, typ in specs:
        parser.add_argument(flag, dest=_dest(section, name), type=typ, default=None, metavar=name.upper())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="JSON run config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed (required)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="explainrec", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a planted-preference dataset")
    _add(p, _SYNTH_FLAGS)
    p.add_argument("--T", dest="T", type=int, default=None)

    p = sub.add_parser("prepare", parents=[common], help="split an interaction file and write a manifest")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--T", dest="T", type=int, default=None)
    p.add_argument("--ratio", type=int, default=None)

    p = sub.add_parser("train", parents=[common], help="train one scorer")
    p.add_argument("--data")
    p.add_argument("--model", choices=MODEL_KINDS)
    _add(p, _TRAIN_FLAGS)
    p.add_argument("--hidden", type=lambda s: tuple(int(x) for x in s.split(",")), dest=_dest("train", "hidden"), metavar="A,B")

    p = sub.add_parser("evaluate", parents=[common], help="sampled top-k ranking evaluation")
    p.add_argument("--data")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--model", choices=MODEL_KINDS)
    _add(p, _EVAL_FLAGS)

    p = sub.add_parser("explain", parents=[common], help="explanation vectors, metrics and correlations")
    p.add_argument("--data")
    p.add_argument("--checkpoint", type=Path, action="append", required=True, dest="checkpoints")
    p.add_argument("--perturbations", type=Path, action="append", default=[],
                   help="perturbation dump, in checkpoint order for CAR/CNR (default: next to the checkpoint)")
    _add(p, _EXPLAIN_FLAGS)

    p = sub.add_parser("report", parents=[common], help="collect evaluation reports into one table")
    p.add_argument("reports", type=Path, nargs="+", help="eval_*.json files")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    doc = {}
    cfg_path = getattr(args, "config", None)
    if cfg_path is not None:
        try:
            doc = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {cfg_path}: {exc}") from exc
    try:
        cfg = RunConfig.from_dict(doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    for key in ("seed", "out", "data", "model", "T", "ratio"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    for key, val in vars(args).items():
        if "__" in key and val is not None:
            section, name = key.split("__")
            setattr(getattr(cfg, section), name, val)
    if cfg.seed is None:
        raise ConfigError("a seed is required: pass --seed or set \"seed\" in the config")
    cfg.train.seed = cfg.seed
    cfg.synth.T = cfg.T
    try:
        cfg.train.validate()
    except ValueError as exc:
        raise ConfigError(f"train config: {exc}") from exc
    if cfg.eval.pool_size < 2 or cfg.eval.k < 1 or cfg.explain.k < 1 or cfg.explain.top_k < 1:
        raise ConfigError("pool size must be at least 2 and k values at least 1")
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _dataset(cfg: RunConfig) -> tuple[Dataset, dict]:
    if cfg.data is None:
        raise ConfigError("no dataset: pass --data DIR or set \"data\" in the config")
    path = Path(cfg.data)
    if not (path / MANIFEST_FILE).exists() and not path.is_file():
        raise ConfigError(f"no manifest found at {path}; run 'synth' or 'prepare' first")
    return load_dataset(path)


def _load_model(path: Path) -> tuple[Model, dict]:
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist; run 'train' first")
    store, header = load_checkpoint(path)
    meta = header["meta"]
    return Model(ScorerConfig(**meta["scorer"]), store), meta


def _check_dataset(meta: dict, manifest: dict, path) -> None:
    if meta.get("dataset") != _dataset_fingerprint(manifest):
        raise ConfigError(f"{path} was trained on a different dataset split")


def _dataset_fingerprint(manifest: dict) -> dict:
    return {k: manifest[k] for k in ("n_users", "n_items", "P", "seed", "n_interactions")}


# -- commands ----------------------------------------------------------------


def cmd_synth(cfg: RunConfig) -> list[Path]:
    try:
        result = synth_generate(cfg.synth, cfg.seed)
    except ValidationError as exc:
        raise ConfigError(f"synth config: {exc}") from exc
    out = _out_dir(cfg)
    ds = result.dataset
    echo = cfg.echo()
    write_interactions(out / INTERACTIONS_FILE, ds.records, {"format": "interactions", "config": echo})
    write_manifest(
        out / MANIFEST_FILE,
        ds,
        INTERACTIONS_FILE,
        {"config": echo, "planted": result.planted, "item_attributes": result.attributes},
    )
    return [out / INTERACTIONS_FILE, out / MANIFEST_FILE]


def cmd_prepare(cfg: RunConfig, source: Path) -> list[Path]:
    if cfg.ratio < 1:
        raise ConfigError("split ratio must be at least 1")
    try:
        records = parse_interactions(source, cfg.T)
    except OSError as exc:
        raise ConfigError(f"cannot read {source}: {exc}") from exc
    ds = Dataset.from_records(records, cfg.T)
    train_idx, test_idx = split_train_test(ds, cfg.ratio, cfg.seed)
    ds = ds.with_split(train_idx, test_idx, cfg.seed)
    out = _out_dir(cfg)
    echo = cfg.echo()
    write_interactions(out / INTERACTIONS_FILE, ds.records, {"format": "interactions", "config": echo})
    write_manifest(out / MANIFEST_FILE, ds, INTERACTIONS_FILE, {"config": echo, "source": source.name})
    return [out / INTERACTIONS_FILE, out / MANIFEST_FILE]


def cmd_train(cfg: RunConfig) -> list[Path]:
    ds, manifest = _dataset(cfg)
    tables = FeatureTables.build(ds)
    data = TrainData.from_dataset(ds, tables)
    kind = cfg.model
    out = _out_dir(cfg)
    tic = time.perf_counter()
    result = train_model(kind, data, cfg.train)
    log.info("trained %s in %.1fs", kind, time.perf_counter() - tic)
    echo = cfg.echo()
    meta = {
        "scorer": result.model.config.to_dict(),
        "config": echo,
        "dataset": _dataset_fingerprint(manifest),
    }
    ckpt = out / f"{kind}.ckpt"
    digest = save_checkpoint(ckpt, result.model.store, meta)
    log.info("checkpoint %s sha256 %s", ckpt, digest)
    written = [ckpt]
    run_log = out / f"{kind}_log.jsonl"
    formats.write_run_log(run_log, result.log, echo)
    written.append(run_log)
    if kind in FEATURE_MAPPED:
        dump = out / f"{kind}_perturbations.tsv"
        records = final_perturbations(result, data, cfg.train)
        formats.write_perturbations(dump, records, ds.users, ds.items, echo)
        written.append(dump)
    return written


def cmd_evaluate(cfg: RunConfig, checkpoint: Path, expect_kind: str | None) -> list[Path]:
    ds, manifest = _dataset(cfg)
    model, meta = _load_model(checkpoint)
    if expect_kind is not None and expect_kind != model.kind:
        raise ConfigError(f"{checkpoint} holds a {model.kind} model, not {expect_kind}")
    _check_dataset(meta, manifest, checkpoint)
    tables = FeatureTables.build(ds)
    echo = cfg.echo()
    echo["model"] = model.kind
    echo["checkpoint"] = checkpoint.name
    report = evaluate(model_scorer(model, tables), ds, cfg.eval.pool_size, cfg.eval.k, cfg.seed, {"run": echo})
    out = _out_dir(cfg)
    js = out / f"eval_{model.kind}.json"
    js.write_text(report.to_json(), encoding="utf-8")
    csv_path = out / f"eval_{model.kind}.csv"
    header = ["model", *(f"{c}@{cfg.eval.k}" if c != "MRR" else "MRR" for c in CSV_COLUMNS), "users"]
    formats.write_csv(csv_path, header, [[model.kind, *report.csv_row(), report.users_evaluated]], "eval", echo)
    return [js, csv_path]


def _perturbation_path(checkpoint: Path, kind: str) -> Path:
    return checkpoint.with_name(f"{kind}_perturbations.tsv")


def cmd_explain(cfg: RunConfig, checkpoints: Sequence[Path], dumps: Sequence[Path]) -> list[Path]:
    """Every user gets a vector from every source; users without signal get
    zeros, which the correlation skips as constant and the metrics skip."""
    ds, manifest = _dataset(cfg)
    P = ds.vocab.size
    train = ds.train_records()
    gt_sets = {user: ground_truth_features(user, ds.records, ds.vocab) for user in ds.users}
    vectors: dict[str, dict[str, np.ndarray]] = {"GT": {u: ground_truth_vector(g, P) for u, g in gt_sets.items()}}
    extra_dumps = list(dumps)
    for path in checkpoints:
        model, meta = _load_model(path)
        _check_dataset(meta, manifest, path)
        source = model.kind.upper()
        if source in vectors:
            raise ConfigError(f"two checkpoints of kind {model.kind}")
        if model.kind == "nar":
            by_user: dict[str, list] = {}
            for rec in train:
                by_user.setdefault(rec.user_id, []).append(rec)
            vectors[source] = {
                u: explanation_nar(model, ds.user_index[u], by_user.get(u, []), ds.vocab).values for u in ds.users
            }
        elif model.kind in FEATURE_MAPPED:
            dump = extra_dumps.pop(0) if extra_dumps else _perturbation_path(path, model.kind)
            if not dump.exists():
                raise ConfigError(
                    f"{model.kind} explanations need the perturbation dump {dump}; "
                    f"it is written by 'train --model {model.kind}'"
                )
            records = formats.read_perturbations(dump, ds.user_index, ds.item_index, P)
            per_user = perturbation_vectors(records, PERTURBATION_KIND[model.kind], P)
            vectors[source] = {u: per_user.get(ds.user_index[u], np.zeros(P)) for u in ds.users}
        else:
            raise ConfigError(f"{path}: the {model.kind} model has no explanation vectors")

    sources = [s for s in SOURCES if s in vectors]
    echo = cfg.echo()
    echo["checkpoints"] = [p.name for p in checkpoints]
    out = _out_dir(cfg)
    k, top_k = cfg.explain.k, cfg.explain.top_k

    rows = [(u, s, vectors[s][u]) for s in sources for u in ds.users]
    formats.write_explanations(out / "explanations.tsv", rows, echo)
    formats.write_top_words(
        out / "top_words.tsv", [(u, s, top_k_words(v, ds.vocab, top_k)) for u, s, v in rows if s != "GT"], echo
    )

    references = {"GT": gt_sets}
    planted = manifest.get("planted")
    if planted:
        references["planted"] = {u: set(g) for u, g in planted.items()}
    report_rows = []
    for s in sources:
        if s == "GT":
            continue
        for ref_name, ref in references.items():
            usable = [u for u in ds.users if ref.get(u) and np.any(vectors[s][u])]
            vals = [explanation_metrics(vectors[s][u], ref[u], k) for u in usable]
            means = np.mean(vals, axis=0) if vals else np.full(len(EXPLAIN_METRICS), np.nan)
            report_rows.append([s, ref_name, len(vals), ds.n_users - len(vals), *(f"{m:.4f}" for m in means)])
    names = {"precision": "Precision", "recall": "Recall", "f1": "F1", "ndcg": "NDCG"}
    header = ["source", "reference", "users", "skipped", *(f"{names[m]}@{k}" for m in EXPLAIN_METRICS)]
    formats.write_csv(out / "explain_report.csv", header, report_rows, "explain_report", echo)

    mat, names_, skipped, n_users = pearson_matrix(vectors, sources)
    corr_rows = [[a, *(f"{mat[r, c]:.4f}" for c in range(len(names_)))] for r, a in enumerate(names_)]
    echo["correlation_users"] = n_users
    echo["correlation_skipped"] = skipped.tolist()
    formats.write_csv(out / "correlation.csv", ["source", *names_], corr_rows, "correlation", echo)
    return [out / n for n in ("explanations.tsv", "top_words.tsv", "explain_report.csv", "correlation.csv")]


def cmd_report(cfg: RunConfig, reports: Sequence[Path]) -> list[Path]:
    rows = []
    for path in reports:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read report {path}: {exc}") from exc
        run = doc.get("config", {}).get("run", {})
        rows.append([run.get("model", Path(path).stem), doc["k"], *(f"{doc['metrics'][m]:.4f}" for m in doc["metrics"])])
        metric_names = list(doc["metrics"])
    out = _out_dir(cfg)
    dest = out / "report.csv"
    formats.write_csv(dest, ["model", "k", *metric_names], rows, "report", cfg.echo())
    return [dest]


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        if args.command == "synth":
            written = cmd_synth(cfg)
        elif args.command == "prepare":
            written = cmd_prepare(cfg, args.input)
        elif args.command == "train":
            written = cmd_train(cfg)
        elif args.command == "evaluate":
            written = cmd_evaluate(cfg, args.checkpoint, args.model)
        elif args.command == "explain":
            written = cmd_explain(cfg, args.checkpoints, args.perturbations)
        else:
            written = cmd_report(cfg, args.reports)
    except ConfigError as exc:
        print(f"explainrec: error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, ValidationError) as exc:
        print(f"explainrec: invalid data: {exc}", file=sys.stderr)
        return 2
    except (TrainingAborted, NonFiniteGradient) as exc:
        print(f"explainrec: training aborted: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"explainrec: I/O error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"explainrec: error: {exc}", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
