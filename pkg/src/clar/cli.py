"""Command-line driver: synth, train, retrieve, evaluate, export-map, grad-check."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import __version__
from .cif import TailPolicy
from .data import SynthConfig, load_dataset, read_jsonl, synthesize_dataset, write_corpus, write_jsonl
from .encoders import ClarModel, EmbeddingBank, ModelConfig, load_checkpoint, read_candidates, save_bank, save_checkpoint
from .errors import ClarError
from .matching import ShortPolicy, dumps_map
from .metrics import evaluate
from .pipeline import (
    DEFAULT_TEMPLATE,
    bank_from_candidates,
    emit_prompt,
    results_record,
    retrieve_many,
    similarity_map,
)
from .training import LossWeights, TrainConfig, expand_items, grad_check, train, write_trace

CLI_VERSION = 1
EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit_error(kind: str, message: str) -> None:
    record = {"format_version": CLI_VERSION, "error": {"type": kind, "message": message}}
    print(json.dumps(record), file=sys.stderr)


def _read_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ClarError(f"{path}: no such file")
    return json.loads(p.read_text(encoding="utf-8"))


def _write_json(path, record: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _load_bank(path, model: ClarModel | None) -> EmbeddingBank:
    rows = read_candidates(path)
    if all(r.get("embedding") is not None for r in rows):
        return EmbeddingBank([r["embedding"] for r in rows], [len(r["token_ids"]) for r in rows],
                             [r["label"] for r in rows], [list(r["token_ids"]) for r in rows])
    if model is None:
        raise ClarError(f"{path}: bank has no embeddings and no checkpoint was given")
    return bank_from_candidates(model, [(r["label"], r["token_ids"]) for r in rows])


def cmd_synth(args) -> None:
    raw = _read_json(args.config) if args.config else {}
    # a training config carries its corpus settings under "synth"
    if isinstance(raw.get("synth"), dict):
        raw = raw["synth"]
    cfg = SynthConfig.from_dict(raw)
    if args.seed is not None:
        cfg.seed = args.seed
    paths = write_corpus(synthesize_dataset(cfg), args.out)
    print(json.dumps({"format_version": CLI_VERSION, "outputs": paths}, sort_keys=True))


def cmd_train(args) -> None:
    raw = _read_json(args.config) if args.config else {}
    cfg = TrainConfig.from_dict(raw)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.model.seed = args.seed
    if args.tail:
        cfg.tail = args.tail
    if args.policy:
        cfg.policy = args.policy
    if args.data:
        cfg.train_path = args.data
    if args.heldout:
        cfg.heldout_path = args.heldout
    if args.bank:
        cfg.bank_path = args.bank
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg)
    model = result.state.model
    save_checkpoint(model, out / "checkpoint.json", extra={"train_config": cfg.to_dict()})
    write_trace(result.trace, out / "trace.csv")
    _write_json(out / "train_config.json", {"format_version": CLI_VERSION, **cfg.to_dict()})
    summary = {"format_version": CLI_VERSION, "checkpoint": str(out / "checkpoint.json"),
               "trace": str(out / "trace.csv"), "final": result.trace[-1] if result.trace else None}
    print(json.dumps(summary, sort_keys=True))


def cmd_retrieve(args) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    bank = _load_bank(args.bank, model)
    records = load_dataset(args.data)
    results = retrieve_many(records, bank, model, k=args.topk, tail=TailPolicy.parse(args.tail or "half"),
                            policy=ShortPolicy(args.policy or "full_window"))
    write_jsonl([results_record(r.id, res) for r, res in zip(records, results)], args.out)
    if args.prompts:
        template = args.template or DEFAULT_TEMPLATE
        write_jsonl([emit_prompt(res, template, r.id).to_record() for r, res in zip(records, results)], args.prompts)
    print(json.dumps({"format_version": CLI_VERSION, "results": args.out, "utterances": len(records)}))


def _text_map(path) -> dict[str, str]:
    return {row["utterance_id"]: row["text"] for row in read_jsonl(path)}


def cmd_evaluate(args) -> None:
    records = load_dataset(args.data)
    ranked = {}
    for row in read_jsonl(args.results):
        ranked[row["utterance_id"]] = [(item["label"], item["score"]) for item in row["ranked"]]
    gold = {r.id: [h.text for h in r.hotwords] for r in records}
    bank_labels = [row["label"] for row in read_candidates(args.bank)] if args.bank else None
    refs = {r.id: r.text for r in records} if (args.hyps or args.baseline) else None
    report = evaluate(ranked, gold, bank_labels,
                      hyps=_text_map(args.hyps) if args.hyps else None, refs=refs,
                      baseline=_text_map(args.baseline) if args.baseline else None,
                      threshold=args.threshold)
    _write_json(args.out, report.to_record())
    print(report.table())


def cmd_export_map(args) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    bank = _load_bank(args.bank, model)
    records = {r.id: r for r in load_dataset(args.data)}
    uid = args.utterance or next(iter(records), None)
    if uid not in records:
        raise ClarError(f"utterance {uid!r} not found in {args.data}")
    rec = similarity_map(model, records[uid], bank, args.topk, TailPolicy.parse(args.tail or "half"),
                         ShortPolicy(args.policy or "full_window"))
    Path(args.out).write_text(dumps_map(rec) + "\n", encoding="utf-8")
    print(json.dumps({"format_version": CLI_VERSION, "map": args.out, "utterance_id": uid}))


def cmd_grad_check(args) -> None:
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        cfg = ModelConfig(**_read_json(args.config).get("model", {})) if args.config else ModelConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        model = ClarModel(cfg)
    synth = SynthConfig(vocab_size=model.config.vocab_size, feat_dim=model.config.feat_dim, n_train=args.batch,
                        n_test=0, bank_size=0, seed=args.seed or 0)
    items = expand_items(synthesize_dataset(synth).train)
    out = {"format_version": CLI_VERSION, "epsilon": args.epsilon, "coords_per_group": args.coords, "terms": {}}
    worst = 0.0
    for term in ("local", "global", "cif", "total"):
        errs = grad_check(model, items, epsilon=args.epsilon, n_coords=args.coords, term=term, seed=args.seed or 0)
        out["terms"][term] = errs
        worst = max(worst, *errs.values())
    out["max_relative_error"] = worst
    if args.out:
        _write_json(args.out, out)
    print(json.dumps(out, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clar", description="CIF-localized hotword retrieval toolkit")
    p.add_argument("--version", action="version", version=f"clar {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, *flags):
        if "config" in flags:
            sp.add_argument("--config", help="JSON config file")
        if "seed" in flags:
            sp.add_argument("--seed", type=int)
        if "topk" in flags:
            sp.add_argument("--topk", type=int, default=10)
        if "bank" in flags:
            sp.add_argument("--bank", help="bank JSON-lines file")
        if "checkpoint" in flags:
            sp.add_argument("--checkpoint", required=True)
        if "align" in flags:
            sp.add_argument("--policy", choices=[s.value for s in ShortPolicy])
            sp.add_argument("--tail", choices=[t.value for t in TailPolicy])
        sp.add_argument("--out", required=True)

    s = sub.add_parser("synth", help="write a seeded synthetic corpus")
    common(s, "config", "seed")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="two-stage training")
    common(t, "config", "seed", "bank", "align")
    t.add_argument("--data", help="training JSON-lines (overrides config)")
    t.add_argument("--heldout", help="held-out JSON-lines for per-epoch recall")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("retrieve", help="rank bank hotwords per utterance")
    common(r, "topk", "bank", "checkpoint", "align")
    r.add_argument("--data", required=True)
    r.add_argument("--prompts", help="also write rendered prompts here")
    r.add_argument("--template", help="prompt template containing {hotwords}")
    r.set_defaults(func=cmd_retrieve)

    e = sub.add_parser("evaluate", help="score retrieval results")
    common(e, "bank")
    e.add_argument("--results", required=True)
    e.add_argument("--data", required=True, help="utterances with gold hotwords")
    e.add_argument("--hyps", help="JSON-lines {utterance_id, text} ASR hypotheses")
    e.add_argument("--baseline", help="baseline ASR hypotheses for the hard-hotword subset")
    e.add_argument("--threshold", type=float, help="score threshold for F1 (default: top-1)")
    e.set_defaults(func=cmd_evaluate)

    m = sub.add_parser("export-map", help="similarity map of one utterance")
    common(m, "topk", "bank", "checkpoint", "align")
    m.add_argument("--data", required=True)
    m.add_argument("--utterance", help="utterance id (default: first)")
    m.set_defaults(func=cmd_export_map)

    g = sub.add_parser("grad-check", help="finite-difference gradient check")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--checkpoint")
    g.add_argument("--out")
    g.add_argument("--epsilon", type=float, default=1e-4)
    g.add_argument("--coords", type=int, default=100)
    g.add_argument("--batch", type=int, default=2, help="synthetic utterances in the check batch")
    g.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    torch.set_num_threads(1)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ClarError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        _emit_error(type(exc).__name__, str(exc))
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
