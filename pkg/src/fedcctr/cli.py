"""Command-line experiment runner: generate | augment | train | evaluate | ablate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import experiment as X
from .adaldp import write_trace_csv
from .config import ExperimentConfig, apply_override, dump_toml, load_config, validate
from .data import DOMAINS, DataError, Interaction, dataset_stats, load_interactions, load_item_meta, write_jsonl
from .fed_runtime import GlobalModel, config_hash, write_loss_terms_csv, write_round_csv
from .idst_cl import ModelParams
from .metrics import write_metrics_csv
from .nn_core import ConfigError
from .privaugnet import AugmentedDataset, CachedChatClient, PreconditionError

log = logging.getLogger("fedcctr")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
INTERACTIONS_FILE, ITEMS_FILE = "interactions.jsonl", "items.jsonl"
_run_handlers: List[logging.Handler] = []


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _resolve(args) -> ExperimentConfig:
    cfg = load_config(Path(args.config) if args.config else None)
    for item in args.set or []:
        apply_override(cfg, item)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    if getattr(args, "no_privacy", False):
        cfg.privacy.enabled = False
    validate(cfg)
    if getattr(args, "static_ldp", False):
        cfg = X.make_static(cfg)
    return cfg


def _prepare_out(out: Path, cfg: ExperimentConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_toml(cfg))
    (out / "config.json").write_text(cfg.to_json() + "\n")
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    _run_handlers.append(handler)


def _cfg_hash(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    d.pop("threads", None)
    return config_hash(d)


def _load_data(cfg: ExperimentConfig, data_dir: Optional[str]):
    if data_dir:
        d = Path(data_dir)
        if not (d / INTERACTIONS_FILE).exists():
            raise FileNotFoundError(f"no {INTERACTIONS_FILE} in {d}")
        records = load_interactions(d / INTERACTIONS_FILE)
        meta = load_item_meta(d / ITEMS_FILE) if (d / ITEMS_FILE).exists() else {}
    else:
        records, meta = X.raw_dataset(cfg)
    return X.split_dataset(cfg, records, meta)


def _load_aug(cfg: ExperimentConfig, split, aug_dir: Optional[str], out: Path) -> Optional[AugmentedDataset]:
    if not cfg.augmentation.enabled:
        return None
    if aug_dir:
        return AugmentedDataset.load(Path(aug_dir))
    return X.augment(cfg, split, X.llm_client(cfg, out / "llm_cache"))


def _write_stats(path: Path, stats: dict) -> None:
    path.write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")


def _stats_report(split, aug: Optional[AugmentedDataset]) -> dict:
    stats = dataset_stats(split, aug.augmented_lengths(split) if aug is not None else None)
    # human-readable labels
    table = {"Common Users": stats["common_users"]}
    for d in DOMAINS:
        s = stats[d]
        table[f"{d} Unique Items"] = s["unique_items"]
        table[f"{d} Ori. Avg Seq. Lens"] = s["ori_avg_seq_len"]
        table[f"{d} Ori. Sparsity"] = s["ori_sparsity"]
        if "aug_avg_seq_len" in s:
            table[f"{d} Aug. Avg Seq. Lens"] = s["aug_avg_seq_len"]
            table[f"{d} Aug. Sparsity"] = s["aug_sparsity"]
    stats["table"] = table
    return stats


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    _prepare_out(out, cfg)
    records, meta = X.raw_dataset(cfg)
    write_jsonl(out / INTERACTIONS_FILE, (_record(r) for r in records))
    write_jsonl(out / ITEMS_FILE, (meta[k] for k in sorted(meta)))
    split = X.split_dataset(cfg, records, meta)
    aug = None
    if cfg.augmentation.enabled and cfg.augmentation.backend == "mock":
        aug = X.augment(cfg, split)
    _write_stats(out / "stats.json", _stats_report(split, aug))
    print(f"wrote {len(records)} interactions for {len(split.users)} users to {out}")
    return EXIT_OK


def _record(r: Interaction) -> dict:
    return {"user": r.user, "item": r.item, "domain": r.domain, "rating": r.rating, "ts": r.ts}


def cmd_augment(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    _prepare_out(out, cfg)
    split = _load_data(cfg, args.data)
    cache = Path(args.cache) if args.cache else (Path(cfg.augmentation.cache_dir) if cfg.augmentation.cache_dir
                                                 else out / "llm_cache")
    client = X.llm_client(cfg, cache)
    aug = X.augment(cfg, split, client)
    aug.save(out)
    report = {
        "users": len(split.users),
        "items": len(aug.items),
        "candidates": cfg.augmentation.candidates,
        "warnings": len(aug.log.warnings),
        "fallbacks": aug.log.fallbacks,
        "dropped_ids": aug.log.dropped_ids,
        "stats": _stats_report(split, aug),
    }
    if isinstance(client, CachedChatClient):
        report.update(cache_hits=client.hits, cache_misses=client.misses, cache_hit_rate=client.hit_rate)
    _write_stats(out / "augment_report.json", report)
    if isinstance(client, CachedChatClient):
        print(f"cache hit rate: {100.0 * client.hit_rate:.1f}%")
    print(f"augmented {len(aug.items)} items and {len(aug.profiles)} users into {out}")
    return EXIT_OK


def _save_run(out: Path, run: X.TrainedRun, cfg: ExperimentConfig) -> None:
    res = run.result
    res.model.save(out / "checkpoint.bin", _cfg_hash(cfg))
    write_round_csv(out / "rounds.csv", res.reports)
    write_loss_terms_csv(out / "loss_terms.csv", res.reports, cfg.model.lambda1, cfg.model.lambda2)
    write_trace_csv(out / "privacy_trace.csv",
                    ((c.data.user, r) for c in sorted(res.clients, key=lambda c: c.client_id) for r in c.trace))


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    _prepare_out(out, cfg)
    split = _load_data(cfg, args.data)
    aug = _load_aug(cfg, split, args.aug, out)
    run = X.train(cfg, split, aug, record_timing=args.timing)
    _save_run(out, run, cfg)
    res = run.result
    status = "terminated (all clients stopped)" if res.terminated else "completed"
    print(f"{status}: {len(res.reports)} rounds, {sum(c.active for c in res.clients)} clients still active")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    split = _load_data(cfg, args.data)
    aug = _load_aug(cfg, split, args.aug, out.parent)
    model, fz = X.build_model(cfg, split, aug)
    gm, head = GlobalModel.load(ckpt)
    if gm.params.size != model.n_params():
        raise ConfigError(f"checkpoint has {gm.params.size} parameters, config implies {model.n_params()}")
    if head.get("config_hash") and head["config_hash"] != _cfg_hash(cfg):
        log.warning("checkpoint was trained with a different configuration")
    from .evaluation import evaluate_model
    clients = fz.all_clients(cfg.seed)
    res = evaluate_model(model, ModelParams(model.shapes, gm.params), clients,
                         {d: len(split.catalogs[d]) for d in DOMAINS}, cfg.seed, args.split, tuple(cfg.evaluation.ks))
    write_metrics_csv(out, [(args.name, d, res[d]) for d in DOMAINS])
    for d in DOMAINS:
        k = max(cfg.evaluation.ks)
        print(f"{d}: NDCG@{k}={res[d].ndcg_at[k]:.4f} MRR@{k}={res[d].mrr_at[k]:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    _prepare_out(out, cfg)
    split = _load_data(cfg, args.data)
    arms = args.arms.split(",") if args.arms else list(X.ARMS)
    for a in arms:
        if a not in X.ARMS:
            raise ConfigError(f"arms: unknown arm {a!r}; expected one of {X.ARMS}")
    aug = _load_aug(cfg, split, args.aug, out)
    rows = []
    for arm in arms:
        acfg = X.arm_config(cfg, arm)
        run = X.train(acfg, split, aug)
        arm_dir = out / arm
        arm_dir.mkdir(exist_ok=True)
        (arm_dir / "config.toml").write_text(dump_toml(acfg))
        _save_run(arm_dir, run, acfg)
        res = run.evaluate()
        rows.extend((arm, d, res[d]) for d in DOMAINS)
        print(f"{arm}: NDCG@10 A={res['A'].ndcg_at.get(10, float('nan')):.4f} "
              f"B={res['B'].ndcg_at.get(10, float('nan')):.4f}")
    write_metrics_csv(out / "ablation.csv", rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedcctr", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help="worker threads for augmentation and client steps")

    p = sub.add_parser("generate", help="write a synthetic corpus and its statistics")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("augment", help="run the LLM augmentation pipeline")
    common(p)
    p.add_argument("--data", help="directory holding interactions.jsonl (default: config source)")
    p.add_argument("--cache", help="LLM response cache directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="federated training")
    common(p)
    p.add_argument("--data")
    p.add_argument("--aug", help="directory written by 'augment' (default: augment in-process)")
    p.add_argument("--out", required=True)
    p.add_argument("--no-privacy", action="store_true", help="disable clipping, noise and budget")
    p.add_argument("--static-ldp", action="store_true", help="constant noise at an equal total privacy cost")
    p.add_argument("--timing", action="store_true", help="record wall time per round (breaks byte-identity)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="ranking metrics for a checkpoint")
    common(p)
    p.add_argument("--data")
    p.add_argument("--aug")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--split", choices=("test", "valid"), default="test")
    p.add_argument("--name", default="fedcctr")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate every ablation arm")
    common(p)
    p.add_argument("--data")
    p.add_argument("--aug")
    p.add_argument("--out", required=True)
    p.add_argument("--arms", help=f"comma-separated subset of {','.join(X.ARMS)}")
    p.add_argument("--no-privacy", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, PreconditionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        while _run_handlers:
            h = _run_handlers.pop()
            logging.getLogger().removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
