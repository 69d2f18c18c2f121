"""Command-line harness: calibrate -> train -> eval -> analyze -> bench.

Every subcommand takes a schema-validated JSON config (unknown keys are
rejected) plus optional --seed/--out overrides, and stamps its outputs with
the effective config hash so a run can be reproduced byte-for-byte. Exit
codes: 0 success, 2 config error, 3 numeric failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import jsonschema
import numpy as np

from dynakv import eviction as ev
from dynakv import model as tm
from dynakv import spectral
from dynakv.errors import ConfigError, DynaKVError, NumericError
from dynakv.gate import RetainStats

logger = logging.getLogger("dynakv")

_MODEL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "n_layers": {"type": "integer", "minimum": 1},
        "n_heads": {"type": "integer", "minimum": 1},
        "head_dim": {"type": "integer", "minimum": 2},
        "d_model": {"type": "integer", "minimum": 2},
        "vocab_size": {"type": "integer", "minimum": 2},
        "max_seq_len": {"type": "integer", "minimum": 2},
        "rope_base": {"type": "number", "exclusiveMinimum": 0},
        "ln_eps": {"type": "number", "exclusiveMinimum": 0},
    },
}

_TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "alpha": {"type": "number", "minimum": 0},
        "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "steps": {"type": "integer", "minimum": 1},
        "batch": {"type": "integer", "minimum": 1},
        "seq_len": {"type": "integer", "minimum": 2},
        "seed": {"type": "integer"},
        "mode": {"enum": ["soft-train", "hard-eval"]},
        "trainable_U": {"type": "boolean"},
        "freeze_base": {"type": "boolean"},
        "gate_lr_mult": {"type": "number", "exclusiveMinimum": 0},
        "gate_init_peak": {"type": "number"},
        "grad_clip": {"type": "number", "minimum": 0},
    },
}

_EVICTION_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "keep_budget": {"type": "integer", "minimum": 1},
        "observation_window": {"type": "integer", "minimum": 1},
        "pooling_width": {"type": "integer", "minimum": 1},
        "prefill_tokens": {"type": "integer", "minimum": 2},
        "continue_tokens": {"type": "integer", "minimum": 1},
    },
    "required": ["keep_budget"],
}

SCHEMAS = {
    "calibrate": {
        "type": "object",
        "additionalProperties": False,
        "required": ["schema_version", "corpus", "out_dir"],
        "properties": {
            "schema_version": {"const": 1},
            "model": _MODEL_SCHEMA,
            "corpus": {"type": "string"},
            "tokens": {"type": "integer", "minimum": 1},
            "seq_len": {"type": "integer", "minimum": 2},
            "seed": {"type": "integer"},
            "checkpoint": {"type": ["string", "null"]},
            "out_dir": {"type": "string"},
        },
    },
    "train": {
        "type": "object",
        "additionalProperties": False,
        "required": ["schema_version", "corpus", "out_dir"],
        "properties": {
            "schema_version": {"const": 1},
            "model": _MODEL_SCHEMA,
            "train": _TRAIN_SCHEMA,
            "corpus": {"type": "string"},
            "basis_dir": {"type": ["string", "null"]},
            "init_checkpoint": {"type": ["string", "null"]},
            "seed": {"type": "integer"},
            "out_dir": {"type": "string"},
        },
    },
    "eval": {
        "type": "object",
        "additionalProperties": False,
        "required": ["schema_version", "checkpoint", "corpus", "out_dir"],
        "properties": {
            "schema_version": {"const": 1},
            "checkpoint": {"type": "string"},
            "corpus": {"type": "string"},
            "modes": {"type": "array", "items": {"enum": ["full", "soft", "hard"]}},
            "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "seq_len": {"type": "integer", "minimum": 2},
            "max_windows": {"type": ["integer", "null"], "minimum": 1},
            "seed": {"type": "integer"},
            "eviction": {"anyOf": [_EVICTION_SCHEMA, {"type": "null"}]},
            "out_dir": {"type": "string"},
        },
    },
    "analyze": {
        "type": "object",
        "additionalProperties": False,
        "required": ["schema_version", "checkpoint", "sentence", "out_dir"],
        "properties": {
            "schema_version": {"const": 1},
            "checkpoint": {"type": "string"},
            "sentence": {"type": "string"},
            "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "seed": {"type": "integer"},
            "curve_metrics": {"type": "array", "items": {"type": "string"}},
            "out_dir": {"type": "string"},
        },
    },
    "bench": {
        "type": "object",
        "additionalProperties": False,
        "required": ["schema_version", "checkpoint", "corpus", "out_dir"],
        "properties": {
            "schema_version": {"const": 1},
            "checkpoint": {"type": "string"},
            "corpus": {"type": "string"},
            "lengths": {"type": "array", "items": {"type": "integer", "minimum": 2}},
            "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "seed": {"type": "integer"},
            "out_dir": {"type": "string"},
        },
    },
}


def worker_threads():
    """Worker-thread cap from DYNAKV_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("DYNAKV_THREADS", "1")))
    except ValueError:
        return 1


def config_hash(config):
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def load_config(path, subcommand, overrides):
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if overrides.get("seed") is not None:
        raw["seed"] = overrides["seed"]
    if overrides.get("out") is not None:
        raw["out_dir"] = overrides["out"]
    try:
        jsonschema.validate(raw, SCHEMAS[subcommand])
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config rejected: {exc.message}") from exc
    return raw


def load_corpus(path):
    data = Path(path).read_bytes()
    if not data:
        raise ConfigError(f"corpus {path} is empty")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def _model_from(config):
    return tm.ModelConfig(**config.get("model", {}))


def _json_out(path, doc):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_calibrate(config, flags):
    out_dir = Path(config["out_dir"])
    seed = config.get("seed", 0)
    if config.get("checkpoint"):
        model, _ = tm.load_checkpoint(config["checkpoint"])
    else:
        model = tm.ToyTransformer(_model_from(config), seed=seed)
    ids = load_corpus(config["corpus"])
    accs = tm.collect_calibration(model, ids, n_tokens=config.get("tokens", 100_000),
                                  seq_len=config.get("seq_len", 128),
                                  workers=worker_threads())
    summary = {}
    for (layer, stream), acc in sorted(accs.items()):
        basis = spectral.compute_basis(acc, layer_id=layer, stream=stream)
        spectral.save_basis(out_dir / "bases", basis)
        summary[f"{layer}.{stream}"] = {
            "samples": acc.count,
            "top_eigenvalues": basis.eigenvalues[:5].tolist(),
            "total_variance": float(basis.eigenvalues.sum()),
        }
    _json_out(out_dir / "calibration.json", {
        "schema_version": 1,
        "config_hash": config_hash(config),
        "seed": seed,
        "bases": summary,
    })
    logger.info("calibrated %d bases into %s", len(summary), out_dir / "bases")
    return 0


def cmd_train(config, flags):
    out_dir = Path(config["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = config.get("seed", 0)
    train_fields = dict(config.get("train", {}))
    train_fields.setdefault("seed", seed)
    train_cfg = tm.TrainConfig(**train_fields)
    if config.get("init_checkpoint"):
        model, _ = tm.load_checkpoint(config["init_checkpoint"])
    else:
        model = tm.ToyTransformer(_model_from(config), seed=seed,
                                  gate_init_peak=train_cfg.gate_init_peak)
    if config.get("basis_dir"):
        for layer in range(model.config.n_layers):
            for stream in spectral.STREAMS:
                model.install_basis(spectral.load_basis(config["basis_dir"], layer, stream))
    ids = load_corpus(config["corpus"])
    steps_path = out_dir / "steps.jsonl"
    with open(steps_path, "w", encoding="utf-8") as fh:
        rows = tm.train(model, ids, train_cfg,
                        step_writer=lambda row: fh.write(json.dumps(row) + "\n"))
    tm.save_checkpoint(out_dir / "checkpoint", model, {
        "step": train_cfg.steps,
        "train_config": asdict(train_cfg),
        "config_hash": config_hash(config),
        "seed": seed,
        "metrics": rows[-1] if rows else {},
    })
    _json_out(out_dir / "metrics.json", {
        "schema_version": 1,
        "config_hash": config_hash(config),
        "seed": seed,
        "alpha": train_cfg.alpha,
        "steps": train_cfg.steps,
        "final": rows[-1] if rows else {},
    })
    logger.info("trained %d steps -> %s", train_cfg.steps, out_dir / "checkpoint")
    return 0


def _eval_eviction(model, ids, threshold, evcfg_doc, dump_path=None):
    prefill_n = evcfg_doc.get("prefill_tokens", 256)
    continue_n = evcfg_doc.get("continue_tokens", 128)
    cfg = ev.EvictionConfig(
        keep_budget=evcfg_doc["keep_budget"],
        observation_window=evcfg_doc.get("observation_window", 32),
        pooling_width=evcfg_doc.get("pooling_width", 7))
    if len(ids) < prefill_n + continue_n:
        raise ConfigError("corpus too small for the eviction prefill+continue split")
    prompt = np.concatenate([[tm.BOS_ID], ids[:prefill_n - 1]])
    continuation = ids[prefill_n - 1:prefill_n - 1 + continue_n]
    _, cache = model.decode_hard(prompt, threshold,
                                 collect_attn_last=cfg.observation_window)
    importance = np.stack([
        ev.window_scores(cache.attn_window[layer], cache.n_tokens(layer),
                         cfg.pooling_width)
        for layer in range(model.config.n_layers)])
    pruned = ev.evict(cache, importance, cfg)
    report = ev.eviction_report(cache, pruned, cfg)
    logits, pruned = model.decode_hard(continuation, threshold, cache=pruned)
    nll = tm._nll_from_logits(logits[:-1], continuation[1:])
    report["continuation_ppl"] = float(np.exp(nll / max(1, len(continuation) - 1)))
    if dump_path is not None:
        pruned.dump_jsonl(dump_path)
    return report


def cmd_eval(config, flags):
    out_dir = Path(config["out_dir"])
    model, manifest = tm.load_checkpoint(config["checkpoint"])
    ids = load_corpus(config["corpus"])
    threshold = config.get("threshold",
                           manifest.get("train_config", {}).get("threshold", 0.1))
    seq_len = config.get("seq_len", 128)
    max_windows = config.get("max_windows")
    metrics = {
        "schema_version": 1,
        "config_hash": config_hash(config),
        "seed": config.get("seed", manifest.get("seed", 0)),
        "alpha": manifest.get("train_config", {}).get("alpha"),
        "threshold": threshold,
        "ppl": {},
    }
    for mode in config.get("modes", ["full", "soft", "hard"]):
        result = tm.evaluate_ppl(model, ids, mode, seq_len=seq_len,
                                 threshold=threshold, max_windows=max_windows,
                                 workers=worker_threads())
        metrics["ppl"][mode] = result["ppl"]
        if mode == "soft":
            metrics["soft_retain_rate"] = result["soft_retain_rate"]
        if mode == "hard":
            metrics["hard_retain_rate"] = result["hard_retain_rate"]
            metrics["memory"] = result["memory"]
            metrics["clamped_zero_rank"] = result["clamped_zero_rank"]
    evcfg_doc = config.get("eviction")
    if flags.evict_budget is not None:
        evcfg_doc = dict(evcfg_doc or {})
        evcfg_doc["keep_budget"] = flags.evict_budget
    if flags.obs_window is not None:
        if evcfg_doc is None:
            raise ConfigError("--obs-window needs an eviction budget")
        evcfg_doc["observation_window"] = flags.obs_window
    dump_path = out_dir / "cache_dump.jsonl" if flags.dump_cache else None
    if evcfg_doc:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics["eviction"] = _eval_eviction(model, ids, threshold, evcfg_doc,
                                             dump_path=dump_path)
    elif flags.dump_cache:
        out_dir.mkdir(parents=True, exist_ok=True)
        window = tm.corpus_windows(ids, seq_len, 1)[0]
        x, _ = tm._window_io(window)
        _, cache = model.decode_hard(x, threshold)
        cache.dump_jsonl(dump_path)
    _json_out(out_dir / "metrics.json", metrics)
    logger.info("eval metrics -> %s", out_dir / "metrics.json")
    return 0


def _token_label(token_id):
    if token_id == tm.BOS_ID:
        return "<BOS>"
    char = chr(token_id)
    return char if char.isprintable() else f"\\x{token_id:02x}"


def cmd_analyze(config, flags):
    out_dir = Path(config["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    model, manifest = tm.load_checkpoint(config["checkpoint"])
    threshold = config.get("threshold",
                           manifest.get("train_config", {}).get("threshold", 0.1))
    ids = tm.tokenize(config["sentence"])
    trace = []
    stats = RetainStats()
    _, cache = model.decode_hard(ids, threshold, stats=stats, trace=trace)
    if flags.dump_cache:
        cache.dump_jsonl(out_dir / "cache_dump.jsonl")
    n_layers = model.config.n_layers
    n_tokens = len(ids)
    labels = [_token_label(int(t)) for t in ids]
    # layer x token matrix of hard rates (streams averaged)
    matrix = np.zeros((n_layers, n_tokens))
    counts = np.zeros((n_layers, n_tokens))
    for row in trace:
        matrix[row["layer"], row["token_index"]] += row["hard_rate"]
        counts[row["layer"], row["token_index"]] += 1
    matrix /= counts
    token_means = matrix.mean(axis=0)

    with open(out_dir / "trace.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["token_index", "token_text", "layer", "stream",
                         "soft_rate", "hard_rate"])
        for row in trace:
            writer.writerow([row["token_index"], labels[row["token_index"]],
                             row["layer"], row["stream"],
                             f"{row['soft_rate']:.6f}", f"{row['hard_rate']:.6f}"])
    with open(out_dir / "token_retention.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["token_index", "token_text", "mean_hard_rate"])
        for i, label in enumerate(labels):
            writer.writerow([i, label, f"{token_means[i]:.6f}"])
    with open(out_dir / "layer_token_matrix.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer"] + labels)
        for layer in range(n_layers):
            writer.writerow([layer] + [f"{v:.6f}" for v in matrix[layer]])

    order = np.argsort(-token_means, kind="stable")
    bos_rank = int(np.nonzero(order == 0)[0][0]) + 1
    analysis = {
        "schema_version": 1,
        "config_hash": config_hash(config),
        "seed": config.get("seed", manifest.get("seed", 0)),
        "threshold": threshold,
        "n_tokens": n_tokens,
        "n_layers": n_layers,
        "mean_hard_rate": stats.mean_rate,
        "bos_rank": bos_rank,
        "bos_mean_retention": float(token_means[0]),
        "bos_in_top3": bool(bos_rank <= 3),
    }
    if bos_rank > 3:
        analysis["sink_warning"] = ("BOS is not among the top-3 retained tokens; "
                                    "attention-sink behaviour did not emerge at this scale")
        logger.warning(analysis["sink_warning"])
    curve_paths = config.get("curve_metrics", [])
    if curve_paths:
        rows = []
        for path in curve_paths:
            doc = json.loads(Path(path).read_text())
            rows.append({"alpha": doc.get("alpha"),
                         "hard_ppl": doc.get("ppl", {}).get("hard"),
                         "hard_retain_rate": doc.get("hard_retain_rate")})
        rows.sort(key=lambda r: (r["alpha"] is None, r["alpha"]))
        with open(out_dir / "curve.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["alpha", "hard_ppl", "hard_retain_rate"])
            for row in rows:
                writer.writerow([row["alpha"], row["hard_ppl"], row["hard_retain_rate"]])
    _json_out(out_dir / "analysis.json", analysis)
    logger.info("analysis -> %s (BOS rank %d)", out_dir / "analysis.json", bos_rank)
    return 0


def cmd_bench(config, flags):
    out_dir = Path(config["out_dir"])
    model, manifest = tm.load_checkpoint(config["checkpoint"])
    ids = load_corpus(config["corpus"])
    threshold = config.get("threshold",
                           manifest.get("train_config", {}).get("threshold", 0.1))
    lengths = config.get("lengths", [64, 128])
    rows = []
    for length in lengths:
        if len(ids) < length:
            raise ConfigError(f"corpus shorter than bench length {length}")
        tokens = np.concatenate([[tm.BOS_ID], ids[:length - 1]])
        start = time.perf_counter()
        model.decode_full(tokens)
        full_s = time.perf_counter() - start
        start = time.perf_counter()
        model.decode_hard(tokens, threshold)
        hard_s = time.perf_counter() - start
        rows.append({
            "length": length,
            "full_tokens_per_s": length / full_s,
            "hard_tokens_per_s": length / hard_s,
            "throughput_ratio": full_s / hard_s,
        })
    _json_out(out_dir / "bench.json", {
        "schema_version": 1,
        "config_hash": config_hash(config),
        "seed": config.get("seed", manifest.get("seed", 0)),
        "threshold": threshold,
        "rows": rows,
    })
    logger.info("bench -> %s", out_dir / "bench.json")
    return 0


COMMANDS = {
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "bench": cmd_bench,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dynakv",
        description="Token-adaptive spectral KV-cache compression harness")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="JSON run configuration")
        cmd.add_argument("--seed", type=int, default=None, help="override config seed")
        cmd.add_argument("--out", default=None, help="override config out_dir")
        cmd.add_argument("--dump-cache", action="store_true",
                         help="write a cache_dump.jsonl next to the metrics")
        cmd.add_argument("--evict-budget", type=int, default=None,
                         help="token keep-budget for eviction (eval)")
        cmd.add_argument("--obs-window", type=int, default=None,
                         help="eviction observation window (eval)")
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.subcommand,
                             {"seed": args.seed, "out": args.out})
        return COMMANDS[args.subcommand](config, args)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return 2
    except NumericError as exc:
        logger.error("numeric failure: %s", exc)
        return 3
    except OSError as exc:
        logger.error("I/O failure: %s", exc)
        return 4
    except DynaKVError as exc:
        logger.error("run failed: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
