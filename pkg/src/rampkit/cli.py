"""Command-line front end.

Every subcommand works inside a run directory (``--out``, default taken
from the config). ``gen-model`` writes the effective ``config.json`` there;
later commands pick it up automatically unless ``--config`` is given.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibrate import (apply_standardization, collect_act_scales, embeddings_document, load_embeddings,
                        model_embeddings, save_embeddings, standardize)
from .config import RunConfig, load_config, save_config
from .errors import ConfigError, RampError, ValidationError
from .ggufx import inspect_json, model_from_gguf, read_gguf, write_gguf
from .oracles import brute_force_search, make_oracle
from .plotting import read_jsonl, write_report
from .quantcore import Allocation, allocation_document, apply_allocation, load_allocation, model_bytes, save_allocation
from .rlenv import QuantEnv
from .sacagent import Policy, apply_policy, make_policy, train
from .scalefold import compute_fold_params
from .seeding import derive_seed, substream
from .tinylm import (generate_model, load_model, load_sequences, make_corpus, perplexity, quantizable_layers,
                     save_model, save_sequences)

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_IO = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


# --- shared plumbing ----------------------------------------------------------

def _config(args) -> RunConfig:
    path = args.config
    if path is None and args.out is not None and (Path(args.out) / "config.json").exists():
        path = Path(args.out) / "config.json"
    cfg = load_config(path)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.validate()
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def _run_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pick(value, default: Path) -> Path:
    return Path(value) if value is not None else default


def _layer_names(model, cfg: RunConfig) -> list[str]:
    names = [l.name for l in quantizable_layers(model)]
    if cfg.layer_subset is None:
        return names
    missing = [n for n in cfg.layer_subset if n not in names]
    if missing:
        raise ConfigError(f"layer_subset names unknown layers: {missing}")
    return list(cfg.layer_subset)


def _fold_for(cfg: RunConfig, stats, model):
    if not cfg.env.fold:
        return None
    if not stats:
        raise ValidationError("folding is enabled but the embeddings file carries no calibration stats")
    return compute_fold_params(stats, model.spec.n_blocks)


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _full_allocation(model, names: list[str], bits: list[int], fill: int) -> list[int]:
    """Expand a subset allocation to every quantizable layer; layers outside
    the subset get ``fill`` bits."""
    lookup = dict(zip(names, bits))
    return [int(lookup.get(l.name, fill)) for l in quantizable_layers(model)]


# --- subcommands ----------------------------------------------------------------

def cmd_gen_model(args) -> dict:
    cfg = _config(args)
    out = _run_dir(cfg)
    spec = dataclasses.replace(cfg.model, seed=derive_seed(cfg.seed, "model"))
    model = generate_model(spec)
    c = cfg.corpus
    corpus = make_corpus(spec.vocab_size, c.n_calibration, c.n_evaluation, c.seq_len,
                         substream(cfg.seed, "corpus"), c.zipf_exponent)
    save_model(model, out / "model.rmpm")
    (out / "model.rmpm.json").write_text(json.dumps(
        {"config_hash": cfg.hash(), "spec": dataclasses.asdict(spec)}, indent=1, sort_keys=True) + "\n")
    save_sequences(corpus.calibration, out / "calibration.txt")
    save_sequences(corpus.evaluation, out / "evaluation.txt")
    save_config(cfg, out / "config.json")
    return {"model": str(out / "model.rmpm"), "layers": len(quantizable_layers(model)),
            "config_hash": cfg.hash()}


def cmd_calibrate(args) -> dict:
    cfg = _config(args)
    out = _run_dir(cfg)
    model = load_model(_pick(args.model, out / "model.rmpm"))
    seqs = load_sequences(_pick(args.corpus, out / "calibration.txt"), model.spec.vocab_size)
    stats = collect_act_scales(model, seqs, args.n_sequences)
    layers = quantizable_layers(model)
    raw = model_embeddings(model, stats, layers)
    _, mu, sigma = standardize(raw)
    doc = embeddings_document(layers, raw, mu, sigma, stats)
    doc["config_hash"] = cfg.hash()
    path = _pick(args.output, out / "embeddings.json")
    save_embeddings(path, doc)
    return {"embeddings": str(path), "layers": len(layers)}


def _environment(cfg: RunConfig, model, emb_path: Path, eval_path: Path):
    doc, raw, mu, sigma, stats = load_embeddings(emb_path)
    names = _layer_names(model, cfg)
    all_names = [l["layer_name"] for l in doc["layers"]]
    if all_names != [l.name for l in quantizable_layers(model)]:
        raise ValidationError(f"{emb_path} was not computed for this model")
    idx = [all_names.index(n) for n in names]
    raw = raw[idx]
    if cfg.layer_subset is not None:
        _, mu, sigma = standardize(raw)
    std = apply_standardization(raw, mu, sigma)
    fold = _fold_for(cfg, stats, model)
    seqs = load_sequences(eval_path, model.spec.vocab_size)
    oracle = make_oracle(model, seqs, cfg.env, fold, names)
    return QuantEnv(std, oracle, cfg.env, names), names, mu, sigma, fold


def cmd_train(args) -> dict:
    cfg = _config(args)
    out = _run_dir(cfg)
    if args.episodes is not None:
        if args.episodes < 0:
            raise ConfigError("--episodes must be >= 0")
        cfg.sac = dataclasses.replace(cfg.sac, max_episodes=args.episodes)
    model_path = _pick(args.model, out / "model.rmpm")
    model = load_model(model_path)
    env, names, mu, sigma, fold = _environment(cfg, model, _pick(args.embeddings, out / "embeddings.json"),
                                               _pick(args.eval_corpus, out / "evaluation.txt"))
    result = train(env, cfg.sac, seed=cfg.seed, log_dir=out)
    meta = {"source_model": model_path.name, "source_model_sha256": _sha256(model_path),
            "config_hash": cfg.hash(), "layer_names": names, "ppl_base": env.ppl_base}
    policy = make_policy(result, mu, sigma, cfg.palette, meta)
    policy.save(out / "policy.rmpn")
    bits = result.greedy_bits
    alloc = Allocation(bits, layer_names=names)
    info = env.evaluate(bits)
    doc = allocation_document(alloc, cfg.palette, fold=fold, extra={
        "config_hash": cfg.hash(), "source": "greedy policy", "ppl": info.ppl, "R": info.R})
    save_allocation(out / "train_allocation.json", doc)
    return {"policy": str(out / "policy.rmpn"), "episodes": len(result.episodes), "ppl_base": env.ppl_base,
            "best_bits": result.best_bits,
            "best_reward": None if result.best_bits is None else result.best_reward,
            "greedy_bits": bits, "greedy_reward": info.R}


def cmd_allocate(args) -> dict:
    cfg = _config(args)
    out = _run_dir(cfg)
    policy = Policy.load(_pick(args.policy, out / "policy.rmpn"))
    doc, raw, _, _, stats = load_embeddings(_pick(args.embeddings, out / "embeddings.json"))
    names = [l["layer_name"] for l in doc["layers"]]
    src_names = policy.manifest.get("layer_names")
    if args.model is None and src_names is not None and len(src_names) < len(names):
        # same model as training with a layer subset: allocate that subset
        idx = [names.index(n) for n in src_names if n in names]
        raw, names = raw[idx], [names[i] for i in idx]
    alloc = apply_policy(policy, raw, layer_names=names)
    extra = {"config_hash": cfg.hash(), "source": "policy",
             "policy_source_model_sha256": policy.manifest.get("source_model_sha256")}
    fold = None
    if args.model is not None:
        model = load_model(args.model)
        fold = _fold_for(cfg, stats, model)
        if len(alloc.bits) == len(quantizable_layers(model)):
            alloc.model_bytes = model_bytes(alloc, model)
    save_path = _pick(args.output, out / "allocation.json")
    save_allocation(save_path, allocation_document(alloc, policy.palette, fold=fold, extra=extra))
    return {"allocation": str(save_path), "bits": alloc.bits, "avg_bits": alloc.avg_bits}


def cmd_search(args) -> dict:
    cfg = _config(args)
    out = _run_dir(cfg)
    model = load_model(_pick(args.model, out / "model.rmpm"))
    env, names, _, _, fold = _environment(cfg, model, _pick(args.embeddings, out / "embeddings.json"),
                                          _pick(args.eval_corpus, out / "evaluation.txt"))
    result = brute_force_search(env.oracle, len(names), cfg.palette, cfg.env)
    if result.table:
        result.write_csv(out / "search.csv")
    alloc = Allocation(list(result.best_bits), layer_names=names)
    doc = allocation_document(alloc, cfg.palette, fold=fold, extra={
        "config_hash": cfg.hash(), "source": "exhaustive search", "R": result.best_reward,
        "n_evaluated": result.n_evaluated})
    save_allocation(out / "search_allocation.json", doc)
    return {"best_bits": list(result.best_bits), "best_reward": result.best_reward,
            "n_evaluated": result.n_evaluated}


def _load_for_quant(args, cfg: RunConfig, out: Path):
    model = load_model(_pick(args.model, out / "model.rmpm"))
    alloc, palette, adoc = load_allocation(_pick(args.allocation, out / "allocation.json"))
    alloc.check_palette(palette)
    _, _, _, _, stats = load_embeddings(_pick(args.embeddings, out / "embeddings.json"))
    fold = _fold_for(cfg, stats, model)
    names = alloc.layer_names or [l.name for l in quantizable_layers(model)]
    full = _full_allocation(model, names, alloc.bits, args.fill_bits)
    return model, Allocation(full), palette, fold


def cmd_quantize(args) -> dict:
    cfg = _config(args)
    out = _run_dir(cfg)
    model, alloc, palette, fold = _load_for_quant(args, cfg, out)
    qmodel, report = apply_allocation(model, alloc, fold, cfg.env.group_size)
    save_model(qmodel, out / "quantized.rmpm")
    alloc.model_bytes = model_bytes(alloc, model)
    save_allocation(out / "quant_report.json", allocation_document(
        alloc, palette, report, fold, extra={"config_hash": cfg.hash()}))
    return {"quantized": str(out / "quantized.rmpm"), "avg_bits": alloc.avg_bits,
            "mean_rel_frob_error": float(report.errors.mean())}


def cmd_export(args) -> dict:
    cfg = _config(args)
    out = _run_dir(cfg)
    model, alloc, _, fold = _load_for_quant(args, cfg, out)
    path = _pick(args.output, out / "model.gguf")
    write_gguf(model, alloc, fold, path, name=args.name, extra={"ramp.config_hash": cfg.hash()})
    read_gguf(path)  # validates what was written
    return {"gguf": str(path), "bytes": path.stat().st_size, "model_bytes": model_bytes(alloc, model)}


def cmd_eval(args) -> dict:
    cfg = _config(args)
    out = _run_dir(cfg)
    path = _pick(args.model, out / "model.rmpm")
    if path.suffix == ".gguf":
        model = model_from_gguf(read_gguf(path))
    else:
        model = load_model(path)
    seqs = load_sequences(_pick(args.corpus, out / "evaluation.txt"), model.spec.vocab_size)
    return {"model": str(path), "ppl": perplexity(model, seqs), "sequences": len(seqs)}


def cmd_report(args) -> dict:
    cfg = _config(args)
    out = _run_dir(cfg)
    log = _pick(args.log, out / "episodes.jsonl")
    episodes = read_jsonl(log) if log.exists() else None
    alloc_path = _pick(args.allocation, out / "allocation.json")
    allocation = json.loads(alloc_path.read_text()) if alloc_path.exists() else None
    summary = write_report(_pick(args.report_dir, out / "report"), episodes, allocation, cfg.sac.warmup_episodes)
    summary["config_hash"] = cfg.hash()
    return summary


def cmd_inspect(args) -> None:
    print(inspect_json(args.path))


COMMANDS = {
    "gen-model": cmd_gen_model, "calibrate": cmd_calibrate, "train": cmd_train, "allocate": cmd_allocate,
    "search": cmd_search, "quantize": cmd_quantize, "export": cmd_export, "eval": cmd_eval,
    "report": cmd_report, "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run config JSON (default: OUT/config.json when present)")
    common.add_argument("--seed", type=int, help="global seed override")
    common.add_argument("--out", help="run directory")

    p = _Parser(prog="rampkit", description="Mixed-precision bit allocation toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-model", parents=[common], help="generate a tiny model and corpus")

    s = sub.add_parser("calibrate", parents=[common], help="activation stats and layer embeddings")
    s.add_argument("--model")
    s.add_argument("--corpus", help="calibration sequences")
    s.add_argument("--n-sequences", type=int)
    s.add_argument("--output", help="embeddings JSON path")

    s = sub.add_parser("train", parents=[common], help="train the allocation policy")
    s.add_argument("--model")
    s.add_argument("--embeddings")
    s.add_argument("--eval-corpus")
    s.add_argument("--episodes", type=int)

    s = sub.add_parser("allocate", parents=[common], help="zero-shot allocation from a trained policy")
    s.add_argument("--policy")
    s.add_argument("--embeddings", help="target model embeddings")
    s.add_argument("--model", help="target model (adds size accounting and fold metadata)")
    s.add_argument("--output")

    s = sub.add_parser("search", parents=[common], help="exhaustive search over allocations")
    s.add_argument("--model")
    s.add_argument("--embeddings")
    s.add_argument("--eval-corpus")

    for name, helptext in (("quantize", "fake-quantize with an allocation"), ("export", "write a GGUF file")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--model")
        s.add_argument("--allocation")
        s.add_argument("--embeddings", help="source of calibration stats for folding")
        s.add_argument("--fill-bits", type=int, default=8, help="bits for layers the allocation does not cover")
        if name == "export":
            s.add_argument("--output")
            s.add_argument("--name", default="rampkit-tinylm")

    s = sub.add_parser("eval", parents=[common], help="perplexity of a model or GGUF file")
    s.add_argument("--model")
    s.add_argument("--corpus")

    s = sub.add_parser("report", parents=[common], help="CSV tables and figures")
    s.add_argument("--log")
    s.add_argument("--allocation")
    s.add_argument("--report-dir")

    s = sub.add_parser("inspect", parents=[common], help="structural JSON report of a GGUF file")
    s.add_argument("path")
    return p


def _fail(exc: BaseException, code: int) -> int:
    msg = str(exc) or type(exc).__name__
    print(json.dumps({"error": type(exc).__name__, "message": msg, "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        result = COMMANDS[args.command](args)
        if result is not None:
            _emit(result)
        return EXIT_OK
    except ConfigError as exc:
        return _fail(exc, EXIT_CONFIG)
    except (ValidationError, RampError) as exc:
        return _fail(exc, EXIT_VALIDATION)
    except OSError as exc:
        return _fail(exc, EXIT_IO)
    except (ValueError, KeyError) as exc:
        return _fail(exc, EXIT_VALIDATION)


if __name__ == "__main__":
    sys.exit(main())
