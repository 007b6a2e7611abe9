"""Command-line entry point: data generation, training, evaluation,
ablation and gradient checking.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
failure. Flag values override config-file values; all randomness flows
from --seed (default 13). DSN_LOG in {quiet, info, debug} controls
logging."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import ablation as abl
from . import data as dp
from . import synth
from .errors import ConfigError, DataError, FormatError, NumericError, ShapeError
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .train import TrainConfig, evaluate, mean_predictor_mae, train

log = logging.getLogger("dsn")

DEFAULT_SEED = 13

CONFIG_KEYS = {
    "seed": int, "jobs": int, "posts": int, "users": int, "dim": int,
    "noise": float, "l": int, "alpha": float, "beta": float,
    "d_hidden": int, "heads": int, "dropout": float, "uid_embed_dim": int,
    "category_encoder": str, "features": str, "temporal": str,
    "epochs": int, "batch_size": int, "lr": float, "weight_decay": float,
    "axis": str, "seeds": str, "split": str,
    "data": str, "out": str, "checkpoint": str,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_config_file(path) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment; unknown keys
    rejected."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                values[key] = CONFIG_KEYS[key](val)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def _merge(args, key, default=None):
    """Command line wins over the config file, which wins over the default."""
    cli_val = getattr(args, key.replace("-", "_"), None)
    if cli_val is not None:
        return cli_val
    file_vals = getattr(args, "_file_values", {})
    if key in file_vals:
        return file_vals[key]
    return default


def _out_dir(path_str) -> Path:
    path = Path(path_str)
    if not path.exists():
        if not path.parent.exists():
            raise ConfigError(f"parent of output path {path} does not exist")
        path.mkdir()
    return path


def _parse_switches(spec: str, allowed: dict) -> dict:
    flags = {v: False for v in allowed.values()}
    if spec:
        for token in spec.split(","):
            token = token.strip()
            if token not in allowed:
                raise ConfigError(f"unknown switch {token!r}; expected subset of {sorted(allowed)}")
            flags[allowed[token]] = True
    return flags


def _load_data_dir(args):
    data_dir = Path(_merge(args, "data") or "")
    if not data_dir.is_dir():
        raise ConfigError(f"--data directory {data_dir} does not exist")
    posts = dp.read_posts(data_dir / "posts.jsonl")
    img = dp.read_embedding_file(data_dir / "images.dsne")
    txt = dp.read_embedding_file(data_dir / "texts.dsne")
    return posts, img, txt


def _model_config(args, d_origin, uid_vocab) -> ModelConfig:
    kwargs = dict(
        d_origin=d_origin,
        d_hidden=_merge(args, "d_hidden", 64),
        heads=_merge(args, "heads", 4),
        window_len=_merge(args, "l", 8),
        alpha=_merge(args, "alpha", 0.2),
        beta=_merge(args, "beta", 0.6),
        dropout=_merge(args, "dropout", 0.25),
        uid_embed_dim=_merge(args, "uid_embed_dim", 16),
        uid_vocab=uid_vocab,
        category_encoder=_merge(args, "category_encoder", "hce"),
    )
    features = _merge(args, "features")
    if features is not None:
        flags = _parse_switches(features, {"img": "use_image", "txt": "use_text",
                                           "cat": "use_category"})
        kwargs.update(flags)
    temporal = _merge(args, "temporal")
    if temporal is not None:
        flags = _parse_switches(temporal, {"lstm": "use_local_lstm",
                                           "attn": "use_long_attention"})
        kwargs.update(flags)
    return ModelConfig(**kwargs)


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        lr=_merge(args, "lr", 1e-3),
        weight_decay=_merge(args, "weight_decay", 1e-4),
        epochs=_merge(args, "epochs", 10),
        batch_size=_merge(args, "batch_size", 64),
        seed=_merge(args, "seed", DEFAULT_SEED),
    )


# --- subcommands -----------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = _out_dir(_merge(args, "out", "data"))
    spec = synth.GenSpec(
        n_users=_merge(args, "users", 200),
        n_posts=_merge(args, "posts", 1000),
        d_origin=_merge(args, "dim", 64),
        noise=_merge(args, "noise", 0.3),
        seed=_merge(args, "seed", DEFAULT_SEED),
    )
    result = synth.generate_synthetic(spec)
    dp.write_posts(out / "posts.jsonl", result.posts)
    dp.write_embedding_file(out / "images.dsne", result.img)
    dp.write_embedding_file(out / "texts.dsne", result.txt)
    result.tree.save(out / "tree.json")
    with open(out / "planted.txt", "w") as fh:
        for v in result.planted:
            fh.write(f"{v!r}\n")
    log.info("wrote %d posts to %s", len(result.posts), out)
    print(f"generated {len(result.posts)} posts in {out}")
    return 0


def cmd_train(args) -> int:
    posts, img, txt = _load_data_dir(args)
    out = _out_dir(_merge(args, "out", "run"))
    window_len = _merge(args, "l", 8)
    dataset = dp.prepare_dataset(posts, img, txt, window_len)
    mcfg = _model_config(args, img.shape[1], dataset.stats.uid_vocab)
    tcfg = _train_config(args)

    def log_row(row):
        print(f"epoch {row.epoch}: train_loss={row.train_loss:.4f} "
              f"val_mae={row.val_mae:.4f} val_src={row.val_src:.4f}")

    result = train(mcfg, tcfg, dataset, log_fn=log_row)
    save_checkpoint(out / "checkpoint.dsnp", result.params, mcfg)
    import json
    with open(out / "model_config.json", "w") as fh:
        json.dump(asdict(mcfg), fh, indent=2)
    with open(out / "train_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_mae", "val_src"])
        for row in result.log:
            writer.writerow([row.epoch, f"{row.train_loss:.8f}",
                             f"{row.val_mae:.8f}", f"{row.val_src:.8f}"])
    print(f"best epoch {result.best_epoch}; checkpoint in {out}")
    return 0


def _load_run(args, d_origin, uid_vocab):
    import json
    ckpt = _merge(args, "checkpoint")
    if ckpt is None:
        raise ConfigError("eval needs --checkpoint pointing at a train output dir or file")
    ckpt = Path(ckpt)
    if ckpt.is_dir():
        cfg_path = ckpt / "model_config.json"
        ckpt = ckpt / "checkpoint.dsnp"
    else:
        cfg_path = ckpt.parent / "model_config.json"
    with open(cfg_path) as fh:
        cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v
                             for k, v in json.load(fh).items()})
    params = load_checkpoint(ckpt, cfg)
    return params, cfg


def cmd_eval(args) -> int:
    posts, img, txt = _load_data_dir(args)
    params, mcfg = _load_run(args, img.shape[1], None)
    dataset = dp.prepare_dataset(posts, img, txt, mcfg.window_len)
    split = {"train": dataset.train_idx, "val": dataset.val_idx,
             "test": dataset.test_idx}[_merge(args, "split", "test")]
    ev = evaluate(params, mcfg, dataset, split)
    out_path = _merge(args, "out")
    if out_path is not None:
        out_path = Path(out_path)
        if not out_path.parent.exists():
            raise ConfigError(f"parent of output path {out_path} does not exist")
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["post_id", "s", "s_hat", "attention"])
            for i, pid in enumerate(ev.post_ids):
                weights = "[" + " ".join(f"{w:.6f}" for w in ev.attention[i].mean(axis=0)) + "]"
                writer.writerow([pid, f"{ev.labels[i]:.6f}", f"{ev.predictions[i]:.6f}", weights])
    src_txt = "n/a" if ev.src is None else f"{ev.src:.4f}"
    base = mean_predictor_mae(dataset, split)
    print(f"MAE={ev.mae:.4f} SRC={src_txt} (mean-predictor MAE={base:.4f})")
    return 0


def cmd_ablate(args) -> int:
    posts, img, txt = _load_data_dir(args)
    out = Path(_merge(args, "out", "ablation_report.csv"))
    if not out.parent.exists():
        raise ConfigError(f"parent of output path {out} does not exist")
    axis = _merge(args, "axis")
    if axis is None:
        raise ConfigError("ablate needs --axis (length|features|residual|category|temporal)")
    points = abl.grid_points(axis)
    seeds = [int(s) for s in str(_merge(args, "seeds", str(DEFAULT_SEED))).split(",")]
    base_mcfg = _model_config(args, img.shape[1], 1)  # uid_vocab refit per point
    base_tcfg = _train_config(args)
    rows = abl.ablate(points, posts, img, txt, base_mcfg, base_tcfg,
                      seeds, jobs=_merge(args, "jobs", 1))
    abl.write_report(out, rows)
    failures = [r for r in rows if r.error]
    for r in rows:
        mae_txt = "fail" if r.mae is None else f"{r.mae:.4f}"
        src_txt = "fail" if r.src is None else f"{r.src:.4f}"
        print(f"{r.config_id:24s} seed={r.seed} MAE={mae_txt} SRC={src_txt}")
    if failures:
        print(f"{len(failures)} grid rows failed; see {out}", file=sys.stderr)
    print(f"report written to {out}")
    return 0


def cmd_grad_check(args) -> int:
    from .checks import layer_grad_reports
    reports = layer_grad_reports(seed=_merge(args, "seed", DEFAULT_SEED))
    ok = True
    print(f"{'layer':20s} {'max_rel_error':>14s}  result")
    for name, rep in reports.items():
        print(f"{name:20s} {rep.max_rel_error:14.3e}  {'pass' if rep.passed else 'FAIL'}")
        ok = ok and rep.passed
    return 0 if ok else 3


# --- dispatch --------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="dsn", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-data")
    common(p)
    p.add_argument("--posts", type=int, default=None)
    p.add_argument("--users", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--out", type=str, default=None)

    def model_flags(p):
        p.add_argument("--l", type=int, default=None)
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--beta", type=float, default=None)
        p.add_argument("--d-hidden", dest="d_hidden", type=int, default=None)
        p.add_argument("--heads", type=int, default=None)
        p.add_argument("--dropout", type=float, default=None)
        p.add_argument("--uid-embed-dim", dest="uid_embed_dim", type=int, default=None)
        p.add_argument("--features", type=str, default=None,
                       help="comma subset of img,txt,cat")
        p.add_argument("--temporal", type=str, default=None,
                       help="comma subset of lstm,attn")
        p.add_argument("--category-encoder", dest="category_encoder", type=str, default=None)

    def train_flags(p):
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)

    p = sub.add_parser("train")
    common(p)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--out", type=str, default=None)
    model_flags(p)
    train_flags(p)

    p = sub.add_parser("eval")
    common(p)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--split", type=str, default=None, choices=["train", "val", "test"])
    p.add_argument("--out", type=str, default=None)

    p = sub.add_parser("ablate")
    common(p)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--axis", type=str, default=None,
                   choices=["length", "features", "residual", "category", "temporal"])
    p.add_argument("--seeds", type=str, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--out", type=str, default=None)
    model_flags(p)
    train_flags(p)

    p = sub.add_parser("grad-check")
    common(p)
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
}


def _setup_logging():
    level = {"quiet": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("DSN_LOG", "quiet"))
    if level is None:
        level = logging.ERROR
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        if getattr(args, "config", None):
            args._file_values = parse_config_file(args.config)
        else:
            args._file_values = {}
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, ShapeError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
