"""Command-line entry point: train, evaluate, predict, ablate, report, gradcheck, baseline."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .baselines import fit_global_mean, fit_mf_als, grid_search_mf, MF_FACTOR_GRID, MF_REG_GRID
from .data import REPRESENTATIONS, RepConfig, Workspace
from .diagnostics import tiny_gradcheck
from .evaluation import DeepConnPredictor, evaluate
from .ingest import CorpusError, ReviewRecord, load_reviews, split_corpus
from .model import ModelConfig, VariantKind, make_variant
from .reports import ablation_suite, sparsity_report
from .train import CheckpointError, TrainConfig, fit, load_checkpoint, save_checkpoint

logger = logging.getLogger("deepconn")

GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Every tunable of a run. Serialized next to its outputs."""

    data: str | None = None
    embeddings: str | None = None
    split_seed: int = 0
    ratios: tuple[float, ...] = (0.8, 0.1, 0.1)
    stratify: bool = False
    exclude_target: bool = True
    rep: str = "embed"
    embed_dim: int = 300
    n_max: int = 300
    min_count: int = 1
    variant: str = "full"
    window: int = 3
    kernels: int = 100
    latent: int = 50
    fm_factors: int | None = None
    dropout: float = 0.5
    train_embeddings: bool = False
    precision: str = "float64"
    lr: float = 0.002
    batch_size: int = 100
    epochs: int = 50
    patience: int = 5
    seed: int = 0
    rmsprop_conventional: bool = False
    weight_decay: float = 0.0
    mf_factors: int | None = None
    mf_reg: float | None = None
    mf_sweeps: int = 20
    bucket_edges: tuple[int, ...] = (1, 2, 3, 4, 5, 10, 50)

    def model_config(self) -> ModelConfig:
        return ModelConfig(c=self.embed_dim, t=self.window, n1=self.kernels, n2=self.latent, k=self.fm_factors,
                           n_max=self.n_max, dropout=self.dropout, variant=VariantKind.parse(self.variant).value,
                           seed=self.seed, dtype=self.precision, train_embeddings=self.train_embeddings)

    def train_config(self) -> TrainConfig:
        kw = dict(lr=self.lr, batch_size=self.batch_size, max_epochs=self.epochs, patience=self.patience,
                  seed=self.seed, weight_decay=self.weight_decay)
        return TrainConfig.conventional(**kw) if self.rmsprop_conventional else TrainConfig(**kw)

    def rep_config(self) -> RepConfig:
        return RepConfig(rep=self.rep, c=self.embed_dim, n_max=self.n_max, min_count=self.min_count,
                         embeddings=self.embeddings, seed=self.seed, exclude_target=self.exclude_target)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"], d["bucket_edges"] = list(self.ratios), list(self.bucket_edges)
        return d

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value):
    """Convert a string (config file or flag) or JSON value to the field's type."""
    if key not in _TYPES:
        raise UsageError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    if value is None or (isinstance(value, str) and value.lower() in ("", "none", "null") and "None" in kind):
        return None
    try:
        if kind.startswith("tuple"):
            parts = value.split(",") if isinstance(value, str) else list(value)
            conv = float if "float" in kind else int
            return tuple(conv(p) for p in parts)
        if kind == "bool":
            if isinstance(value, bool):
                return value
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind.startswith("int"):
            return int(value)
        if kind.startswith("float"):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise UsageError(f"bad value for {key}: {value!r}") from None


def read_config_file(path: str | Path) -> dict:
    """Flat ``key=value`` lines; '#' starts a comment; dashes in keys read as underscores."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        out[key] = _coerce(key, value)
    return out


def resolve_config(flags: dict, config_file: str | None = None, base: dict | None = None) -> RunConfig:
    """defaults < saved run config < config file < command-line flags."""
    values = asdict(RunConfig())
    for key, value in (base or {}).items():
        if key in _TYPES:
            values[key] = _coerce(key, value)
    if config_file:
        values.update(read_config_file(config_file))
    for key, value in flags.items():
        values[key] = _coerce(key, value)
    cfg = RunConfig(**values)
    if cfg.rep not in REPRESENTATIONS:
        raise UsageError(f"--rep must be one of {REPRESENTATIONS}")
    if cfg.precision not in ("float32", "float64"):
        raise UsageError("--precision must be float32 or float64")
    try:
        VariantKind.parse(cfg.variant)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


# -- argument parsing ------------------------------------------------------------------

def _config_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    g = p.add_argument_group("data")
    g.add_argument("--data", help="JSONL review file")
    g.add_argument("--split-seed", dest="split_seed")
    g.add_argument("--ratios", help="train,valid,test fractions, e.g. 0.8,0.1,0.1")
    g.add_argument("--stratify", action="store_const", const=True)
    g.add_argument("--no-exclude-target", dest="exclude_target", action="store_const", const=False,
                   help="keep the target pair's own review in evaluation documents (leaky)")
    g = p.add_argument_group("text representation")
    g.add_argument("--embeddings", help="word vector file (whitespace separated, optional header)")
    g.add_argument("--embed-dim", dest="embed_dim")
    g.add_argument("--n-max", dest="n_max", help="document length cap in tokens")
    g.add_argument("--rep", choices=REPRESENTATIONS)
    g.add_argument("--min-count", dest="min_count")
    g.add_argument("--train-embeddings", dest="train_embeddings", action="store_const", const=True)
    g = p.add_argument_group("model")
    g.add_argument("--variant", choices=[v.value for v in VariantKind])
    g.add_argument("--window", help="convolution window t")
    g.add_argument("--kernels", help="number of convolution kernels n1")
    g.add_argument("--latent", help="tower output size n2")
    g.add_argument("--fm-factors", dest="fm_factors", help="FM factor count k (default 2*latent)")
    g.add_argument("--dropout")
    g.add_argument("--precision", choices=("float32", "float64"))
    g = p.add_argument_group("training")
    g.add_argument("--lr")
    g.add_argument("--batch-size", dest="batch_size")
    g.add_argument("--epochs")
    g.add_argument("--patience")
    g.add_argument("--seed")
    g.add_argument("--weight-decay", dest="weight_decay")
    g.add_argument("--rmsprop-conventional", dest="rmsprop_conventional", action="store_const", const=True,
                   help="0.1 on the new squared gradient, 0.9 on history")
    g = p.add_argument_group("reports")
    g.add_argument("--mf-factors", dest="mf_factors", help="fixed MF rank (default: grid search)")
    g.add_argument("--mf-reg", dest="mf_reg")
    g.add_argument("--mf-sweeps", dest="mf_sweeps")
    g.add_argument("--bucket-edges", dest="bucket_edges")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--checkpoint", help="checkpoint path (default: <out or run>/model.ckpt)")
    common.add_argument("-v", "--verbose", action="store_true")
    flags = _config_flags()
    parents = [common, flags]

    parser = argparse.ArgumentParser(prog="deepconn", description="Joint review-text rating model.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train", parents=parents, help="train a model and write a checkpoint")
    p.set_defaults(handler=cmd_train)

    for name, handler, text in (("evaluate", cmd_evaluate, "MSE of a trained run on a split"),
                                ("predict", cmd_predict, "predict ratings for user/item pairs"),
                                ("report", cmd_report, "MSE reduction over MF by training-review count")):
        p = sub.add_parser(name, parents=parents, help=text)
        p.add_argument("--run", required=True, help="directory written by 'train'")
        p.set_defaults(handler=handler)
        if name == "evaluate":
            p.add_argument("--split", choices=("train", "valid", "test"), default="test")
        if name == "predict":
            p.add_argument("--user")
            p.add_argument("--item")
            p.add_argument("--pairs", help="JSONL file of {user, item} objects")

    p = sub.add_parser("ablate", parents=parents, help="train and compare the six model variants")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=parents, help="finite-difference check of all gradients")
    p.add_argument("--tiny", action="store_true", help="use the tiny reference configuration (the only mode)")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("baseline", help="rating-only reference models")
    bsub = p.add_subparsers(dest="action", required=True, metavar="action")
    b = bsub.add_parser("fit", parents=parents, help="fit a baseline on the training split")
    b.add_argument("--model", choices=("mean", "mf"), default="mf")
    b.add_argument("--factors", dest="mf_factors", default=argparse.SUPPRESS)
    b.add_argument("--reg", dest="mf_reg", default=argparse.SUPPRESS)
    b.add_argument("--sweeps", dest="mf_sweeps", default=argparse.SUPPRESS)
    b.set_defaults(handler=cmd_baseline)

    p = sub.add_parser("synth", help="write a planted-signal demo corpus and vectors")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("additive", "interaction"), default="additive")
    p.add_argument("--reviews", type=int, default=200)
    p.add_argument("--users", type=int, default=20)
    p.add_argument("--items", type=int, default=20)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(handler=cmd_synth)
    return parser


_NON_CONFIG = {"command", "handler", "config", "out", "checkpoint", "verbose", "run", "split", "user", "item",
               "pairs", "tiny", "model", "action"}


def _flag_values(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}


# -- shared pipeline pieces ------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(args, default: str | Path | None = None) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else (Path(default) if default else None)
    if out is None:
        raise UsageError("--out is required")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _persist_config(cfg: RunConfig, out: Path) -> None:
    _write_json(out / "config.json", cfg.to_dict())
    (out / "config.txt").write_text(cfg.to_text())


def _load_split(cfg: RunConfig):
    if not cfg.data:
        raise UsageError("--data is required")
    corpus = load_reviews(cfg.data)
    for d in corpus.diagnostics:
        logger.warning("%s", d)
    return split_corpus(corpus.records, cfg.ratios, seed=cfg.split_seed, stratify=cfg.stratify)


def _workspace(cfg: RunConfig, split) -> Workspace:
    return Workspace(split, cfg.rep_config(), dtype=cfg.precision, token_ids=cfg.train_embeddings, t=cfg.window)


def _load_run(args) -> tuple[RunConfig, Workspace, object, dict]:
    run = Path(args.run)
    try:
        base = json.loads((run / "config.json").read_text())
    except OSError as exc:
        raise UsageError(f"cannot read run config: {exc}") from None
    cfg = resolve_config(_flag_values(args), args.config, base)
    ws = _workspace(cfg, _load_split(cfg))
    ckpt = args.checkpoint or run / "model.ckpt"
    model, header = load_checkpoint(ckpt, vocab_fingerprint=ws.fingerprint())
    return cfg, ws, model, header


def _mf_baseline(cfg: RunConfig, split):
    if cfg.mf_factors is not None and cfg.mf_reg is not None:
        model = fit_mf_als(split.train, cfg.mf_factors, cfg.mf_reg, cfg.mf_sweeps, cfg.seed)
        return model, {"f": cfg.mf_factors, "reg": cfg.mf_reg, "grid": []}
    factors = (cfg.mf_factors,) if cfg.mf_factors is not None else MF_FACTOR_GRID
    regs = (cfg.mf_reg,) if cfg.mf_reg is not None else MF_REG_GRID
    grid = grid_search_mf(split.train, split.valid, factors, regs, cfg.mf_sweeps, cfg.seed)
    return grid.model, {"f": grid.f, "reg": grid.reg, "grid": grid.table}


# -- subcommands -----------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = resolve_config(_flag_values(args), args.config)
    out = _out_dir(args)
    split = _load_split(cfg)
    ws = _workspace(cfg, split)
    _persist_config(cfg, out)
    model = make_variant(cfg.variant, cfg.model_config(), ws.stats(), embedding_init=ws.lookup)
    logger.info("%r on %d/%d/%d reviews", model, len(split.train), len(split.valid), len(split.test))
    result = fit(model, ws, cfg.train_config())

    with (out / "history.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "valid_mse"], lineterminator="\n")
        w.writeheader()
        w.writerows(result.history)
    _write_json(out / "history.json", result.history)
    predictor = DeepConnPredictor(model, ws)
    metrics = {
        "status": result.status,
        "epochs": len(result.history),
        "best_epoch": result.best_epoch,
        "best_valid_mse": result.best_valid_mse,
        "valid": evaluate(predictor, split.valid).to_dict(),
        "test": evaluate(predictor, split.test).to_dict(),
        "global_mean_test_mse": evaluate(fit_global_mean(split.train), split.test).mse,
    }
    _write_json(out / "metrics.json", metrics)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    save_checkpoint(model, ckpt, ws.fingerprint(), epoch=result.best_epoch,
                    metrics={"best_valid_mse": result.best_valid_mse}, extra={"run": cfg.to_dict()})
    print(f"status={result.status} best_epoch={result.best_epoch} valid_mse={result.best_valid_mse:.6f} "
          f"test_mse={metrics['test']['mse']:.6f}")
    return 0 if result.status != "diverged" else 1


def cmd_evaluate(args) -> int:
    cfg, ws, model, _ = _load_run(args)
    records = ws.split.part(args.split)
    report = evaluate(DeepConnPredictor(model, ws), records)
    if args.out:
        _write_json(_out_dir(args) / f"eval_{args.split}.json", report.to_dict())
    print(f"split={args.split} count={report.count} mse={report.mse:.6f} coldstart={report.coldstart_count}")
    return 0


def cmd_predict(args) -> int:
    if args.pairs:
        pairs = []
        with open(args.pairs, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    pairs.append((str(obj["user"]), str(obj["item"])))
    elif args.user is not None and args.item is not None:
        pairs = [(args.user, args.item)]
    else:
        raise UsageError("predict needs --user and --item, or --pairs")
    cfg, ws, model, _ = _load_run(args)
    # ordinals below zero never collide with corpus reviews
    records = [ReviewRecord(u, i, 0.0, "", -1 - k) for k, (u, i) in enumerate(pairs)]
    preds = DeepConnPredictor(model, ws).predict_records(records)
    lines = [json.dumps({"user": r.user_id, "item": r.item_id, "prediction": float(p), "cold": ws.is_cold(r)},
                        sort_keys=True) for r, p in zip(records, preds)]
    if args.out:
        (_out_dir(args) / "predictions.jsonl").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(_flag_values(args), args.config)
    out = _out_dir(args)
    split = _load_split(cfg)
    _persist_config(cfg, out)
    if not cfg.embeddings:
        logger.warning("no --embeddings given: variants using pretrained vectors will be marked failed")
    table = ablation_suite(split, cfg.model_config(), cfg.train_config(), cfg.rep_config())
    table.write(out)
    print(table.to_text(), end="")
    return 0


def cmd_report(args) -> int:
    cfg, ws, model, _ = _load_run(args)
    out = _out_dir(args, args.run)
    split = ws.split
    mf, chosen = _mf_baseline(cfg, split)
    predictor = DeepConnPredictor(model, ws)
    report = sparsity_report(predictor, mf, split.test, split.train, cfg.bucket_edges)
    report.write(out)
    summary = {
        "model_test": evaluate(predictor, split.test).to_dict(),
        "mf_test": evaluate(mf, split.test).to_dict(),
        "mf": chosen,
    }
    _write_json(out / "report_summary.json", summary)
    print(report.to_text(), end="")
    print(f"overall test MSE: model {summary['model_test']['mse']:.6f}  mf {summary['mf_test']['mse']:.6f} "
          f"(f={chosen['f']}, reg={chosen['reg']})")
    return 0


def cmd_gradcheck(args) -> int:
    seed = int(getattr(args, "seed", 0))
    variants = [args.variant] if hasattr(args, "variant") else [v.value for v in VariantKind]
    worst = 0.0
    rows = []
    for variant in variants:
        for trainable in (False, True):
            res = tiny_gradcheck(variant, seed, trainable, tolerance=GRADCHECK_TOLERANCE)
            worst = max(worst, res.max_error)
            rows.append({"variant": variant, "train_embeddings": trainable, "max_error": res.max_error,
                         "worst": res.worst})
            print(f"{variant:<12} train_embeddings={str(trainable):<5} max_rel_error={res.max_error:.3e} "
                  f"({res.worst})")
    ok = worst < GRADCHECK_TOLERANCE
    print(f"max relative error {worst:.3e} {'<' if ok else '>='} {GRADCHECK_TOLERANCE:g}: {'PASS' if ok else 'FAIL'}")
    if args.out:
        _write_json(_out_dir(args) / "gradcheck.json", {"max_error": worst, "passed": ok, "checks": rows})
    return 0 if ok else 1


def cmd_baseline(args) -> int:
    cfg = resolve_config(_flag_values(args), args.config)
    split = _load_split(cfg)
    if args.model == "mean":
        model, info = fit_global_mean(split.train), {"mean": None}
        info["mean"] = model.mean
    else:
        model, info = _mf_baseline(cfg, split)
        info["objective_trace"] = model.objective_trace
    metrics = {"model": args.model, **info,
               "valid": evaluate(model, split.valid).to_dict(), "test": evaluate(model, split.test).to_dict()}
    if args.out:
        out = _out_dir(args)
        _persist_config(cfg, out)
        _write_json(out / f"baseline_{args.model}.json", metrics)
    print(f"model={args.model} valid_mse={metrics['valid']['mse']:.6f} test_mse={metrics['test']['mse']:.6f}")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import planted_corpus

    corpus = planted_corpus(args.users, args.items, args.reviews, kind=args.kind, seed=args.seed, c=args.dim)
    data, vecs = corpus.write(args.out)
    print(f"wrote {data} and {vecs}")
    return 0


# -- entry points ----------------------------------------------------------------------

def _thread_limit():
    value = os.environ.get("DEEPCONN_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(value)))


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.handler(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"deepconn: error: {exc}", file=sys.stderr)
        return 2
    except (CorpusError, CheckpointError, OSError, ValueError, KeyError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"deepconn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
