"""Single entry point wiring the pipeline stages.

Subcommands: ingest -> distill -> build -> train -> eval, plus gradcheck.
All artifacts live under a work directory whose manifest records the
config hash each stage ran with, so stale upstream outputs are refused.
Exit codes: 0 success, 1 validation/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import config as cfgmod
from . import corpus, dataset, distiller, evalharness, tape, tinylm, trainer
from .backend import HttpLlmBackend, MockLlmBackend, RetryPolicy
from .errors import (
    ConfigError,
    GranaryError,
    InvalidEncoding,
    NonFiniteLoss,
    SchemaViolation,
    StaleArtifact,
)
from .jsonl import read_jsonl, write_jsonl


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="pipeline config JSON file")
    parser.add_argument("--workdir", default=None, help="artifact directory (overrides config)")
    parser.add_argument("--seed", type=int, default=None, help="global seed override")
    parser.add_argument("--mock-llm", action="store_true", help="force the deterministic mock backend")
    parser.add_argument("--parallelism", type=int, default=None, help="worker count override")
    parser.add_argument("--dry-run", action="store_true", help="validate and print the plan; no side effects")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="granary", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="parse books and emit nodes.jsonl")
    p_ingest.add_argument("--corpus-dir", default=None)
    p_ingest.add_argument("--manifest", default=None)

    p_distill = sub.add_parser("distill", help="run the agents over every node (resumable)")

    p_build = sub.add_parser("build", help="render, mix, and tokenize the training datasets")
    p_build.add_argument("--max-len", type=int, default=None)
    p_build.add_argument("--general", default=None, help="general-domain sft JSONL to mix in")

    p_train = sub.add_parser("train", help="train the tiny model and emit a report")
    p_train.add_argument("--mode", choices=trainer.MODES, default=None)
    p_train.add_argument("--lambda", dest="kl_weight", type=float, default=None)
    p_train.add_argument("--steps", type=int, default=None)
    p_train.add_argument("--lr", type=float, default=None)
    p_train.add_argument("--max-len", type=int, default=None)
    p_train.add_argument("--init-checkpoint", default=None)

    p_eval = sub.add_parser("eval", help="grade a quiz with a checkpoint or backend")
    p_eval.add_argument("--quiz", default=None, help="quiz JSONL (defaults to the packaged one)")
    p_eval.add_argument("--checkpoint", default=None, help="tiny-model checkpoint to grade")

    sub.add_parser("gradcheck", help="finite-difference check of analytic gradients")

    for p in sub.choices.values():
        _add_common_flags(p)
    return parser


def _apply_overrides(cfg: cfgmod.PipelineConfig, args: argparse.Namespace) -> cfgmod.PipelineConfig:
    if args.workdir is not None:
        cfg.workdir = args.workdir
    if args.seed is not None:
        cfg.seed = args.seed
    if args.mock_llm:
        cfg.backend.mock = True
    if args.parallelism is not None:
        cfg.parallelism = args.parallelism
    if getattr(args, "corpus_dir", None) is not None:
        cfg.corpus_dir = args.corpus_dir
    if getattr(args, "manifest", None) is not None:
        cfg.manifest = args.manifest
    if getattr(args, "max_len", None) is not None:
        cfg.dataset.max_len = args.max_len
    if getattr(args, "general", None) is not None:
        cfg.dataset.general_path = args.general
    if getattr(args, "mode", None) is not None:
        cfg.train.mode = args.mode
    if getattr(args, "kl_weight", None) is not None:
        cfg.train.kl_weight = args.kl_weight
    if getattr(args, "steps", None) is not None:
        cfg.train.total_steps = args.steps
    if getattr(args, "lr", None) is not None:
        cfg.train.lr_max = args.lr
    return cfg


def _workdir(cfg: cfgmod.PipelineConfig) -> Path:
    path = Path(cfg.workdir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _backend_for(cfg: cfgmod.PipelineConfig, node_ids: list[str] | None = None):
    if cfg.backend.mock:
        return MockLlmBackend(
            seed=cfg.seed,
            node_ids=node_ids,
            n_samples=cfg.n_samples,
            malform_answer_every=cfg.backend.mock_malform_answer_every,
        )
    return HttpLlmBackend(
        base_url=cfg.backend.base_url,
        model=cfg.backend.model,
        retry=RetryPolicy(
            max_attempts=cfg.backend.max_attempts,
            base_backoff=cfg.backend.base_backoff,
        ),
        timeout=cfg.backend.timeout,
        supports_seed=cfg.backend.supports_seed,
    )


def _model_config(cfg: cfgmod.PipelineConfig) -> tinylm.ModelConfig:
    m = cfg.model
    return tinylm.ModelConfig(
        d_model=m.d_model,
        n_layers=m.n_layers,
        n_heads=m.n_heads,
        context_window=m.context_window,
        init_std=m.init_std,
        seed=cfg.seed,
    )


def _plan(command: str, cfg: cfgmod.PipelineConfig, inputs: list[str], outputs: list[str]) -> int:
    print(
        json.dumps(
            {
                "command": command,
                "dry_run": True,
                "inputs": inputs,
                "outputs": outputs,
                "config": dataclasses.asdict(cfg),
            },
            indent=2,
        )
    )
    return 0


def cmd_ingest(cfg: cfgmod.PipelineConfig, args: argparse.Namespace) -> int:
    nodes_path = Path(cfg.workdir) / "nodes.jsonl"
    if args.dry_run:
        return _plan("ingest", cfg, [cfg.corpus_dir, cfg.manifest], [str(nodes_path)])
    workdir = _workdir(cfg)
    decompose_cfg = corpus.DecomposeConfig(
        min_node_tokens=cfg.min_node_tokens,
        stop_headings=tuple(cfg.stop_headings),
    )
    nodes: list[corpus.LearningNode] = []
    for doc in corpus.load_corpus(cfg.corpus_dir, cfg.manifest):
        tree = corpus.parse_markdown_tree(doc)
        nodes.extend(corpus.decompose_to_nodes(tree, doc.doc_id, decompose_cfg))
    write_jsonl(nodes_path, [corpus.node_to_record(n) for n in nodes], schema=corpus.NODE_KEYS)
    stats = corpus.corpus_stats(nodes)
    cfgmod.record_stage(workdir, "ingest", cfg, ["nodes.jsonl"])
    print(json.dumps(dataclasses.asdict(stats)))
    return 0


def cmd_distill(cfg: cfgmod.PipelineConfig, args: argparse.Namespace) -> int:
    workdir = Path(cfg.workdir)
    nodes_path = workdir / "nodes.jsonl"
    out_path = workdir / "qtsa.jsonl"
    if args.dry_run:
        return _plan("distill", cfg, [str(nodes_path)], [str(out_path)])
    cfgmod.check_upstream(workdir, "distill", cfg)
    nodes = [corpus.node_from_record(r) for r in read_jsonl(nodes_path, schema=corpus.NODE_KEYS)]
    backend = _backend_for(cfg, node_ids=[n.node_id for n in nodes])
    distill_cfg = distiller.DistillConfig(
        n_samples=cfg.n_samples,
        parallelism=cfg.parallelism,
        retry=RetryPolicy(
            max_attempts=cfg.backend.max_attempts, base_backoff=cfg.backend.base_backoff
        ),
        journal_path=workdir / "journal.jsonl",
    )
    entries = distiller.distill_corpus(nodes, distill_cfg, backend)
    write_jsonl(
        out_path, [distiller.entry_to_record(e) for e in entries], schema=distiller.QTSA_KEYS
    )
    kept = sum(e.kept for e in entries)
    cfgmod.record_stage(workdir, "distill", cfg, ["qtsa.jsonl", "journal.jsonl"])
    print(json.dumps({"attempted": len(entries), "kept": kept, "rejected": len(entries) - kept}))
    return 0


def cmd_build(cfg: cfgmod.PipelineConfig, args: argparse.Namespace) -> int:
    workdir = Path(cfg.workdir)
    outputs = ["sft_dataset.jsonl", "cpt_dataset.jsonl"]
    if cfg.dataset.pack_cpt:
        outputs += ["packed.bin", "packed.bin.json"]
    if args.dry_run:
        return _plan(
            "build",
            cfg,
            [str(workdir / "qtsa.jsonl"), str(workdir / "nodes.jsonl")],
            [str(workdir / o) for o in outputs],
        )
    cfgmod.check_upstream(workdir, "build", cfg)

    entries = [
        distiller.entry_from_record(r)
        for r in read_jsonl(workdir / "qtsa.jsonl", schema=distiller.QTSA_KEYS)
    ]
    domain = [
        (e.entry_id, dataset.render_chat_template(e, cfg.dataset.system_prompt))
        for e in entries
        if e.kept
    ]
    general: list[tuple[str, dataset.ChatExample]] = []
    if cfg.dataset.general_path:
        for rec in read_jsonl(cfg.dataset.general_path, schema=dataset.SFT_KEYS):
            ex = dataset.chat_example_from_record(rec)
            general.append(
                (rec["id"], dataset.ChatExample(ex.system, ex.user, ex.assistant, dataset.ORIGIN_GENERAL))
            )
    if general:
        mixed = dataset.mix_datasets(domain, general, cfg.dataset.mix_ratio, cfg.seed)
    else:
        mixed = domain
    write_jsonl(
        workdir / "sft_dataset.jsonl",
        [dataset.chat_example_to_record(ex, example_id) for example_id, ex in mixed],
        schema=dataset.SFT_KEYS,
    )

    nodes = [
        corpus.node_from_record(r)
        for r in read_jsonl(workdir / "nodes.jsonl", schema=corpus.NODE_KEYS)
    ]
    write_jsonl(
        workdir / "cpt_dataset.jsonl",
        [{"node_id": n.node_id, "text": n.text} for n in nodes],
        schema=dataset.CPT_KEYS,
    )
    if cfg.dataset.pack_cpt:
        tokenizer = tinylm.ByteTokenizer()
        pieces: list[dataset.TokenizedExample] = []
        for node in nodes:
            tokenized = dataset.tokenize_cpt(node.text, tokenizer)
            pieces.extend(dataset.chunk_tokenized(tokenized, cfg.dataset.max_len))
        packs = dataset.pack_sequences(pieces, cfg.dataset.max_len)
        dataset.save_packed(workdir / "packed.bin", packs, max_len=cfg.dataset.max_len)

    cfgmod.record_stage(workdir, "build", cfg, outputs)
    print(json.dumps({"sft_examples": len(mixed), "cpt_records": len(nodes)}))
    return 0


def cmd_train(cfg: cfgmod.PipelineConfig, args: argparse.Namespace) -> int:
    workdir = Path(cfg.workdir)
    outputs = ["model.ckpt", "train_report.jsonl", "train_summary.json"]
    if args.dry_run:
        return _plan(
            "train",
            cfg,
            [str(workdir / "sft_dataset.jsonl"), str(workdir / "cpt_dataset.jsonl")],
            [str(workdir / o) for o in outputs],
        )
    cfgmod.check_upstream(workdir, "train", cfg)

    model_cfg = _model_config(cfg)
    if args.init_checkpoint:
        init_params = tinylm.load_checkpoint(args.init_checkpoint)
        model_cfg = init_params.config
    else:
        init_params = tinylm.init(model_cfg)

    tokenizer = tinylm.ByteTokenizer()
    fit_len = min(cfg.dataset.max_len, model_cfg.context_window)
    mode = cfg.train.mode
    if mode == "cpt":
        cache = workdir / "packed.bin"
        if cache.exists() and dataset.packed_max_len(cache) == fit_len:
            data: list = dataset.load_packed(cache)
        else:
            pieces: list[dataset.TokenizedExample] = []
            for rec in read_jsonl(workdir / "cpt_dataset.jsonl", schema=dataset.CPT_KEYS):
                tokenized = dataset.tokenize_cpt(rec["text"], tokenizer)
                pieces.extend(dataset.chunk_tokenized(tokenized, fit_len))
            data = dataset.pack_sequences(pieces, fit_len)
    else:
        data = [
            dataset.truncate_chat_example(dataset.chat_example_from_record(rec), tokenizer, fit_len)
            for rec in read_jsonl(workdir / "sft_dataset.jsonl", schema=dataset.SFT_KEYS)
        ]

    train_cfg = trainer.TrainConfig(
        mode=mode,
        total_steps=cfg.train.total_steps,
        lr_max=cfg.train.lr_max,
        warmup_frac=cfg.train.warmup_frac,
        kl_weight=cfg.train.kl_weight,
        seed=cfg.seed,
        grad_check_every=cfg.train.grad_check_every,
        optimizer=cfg.train.optimizer,
    )
    ref_params = tinylm.freeze_reference(init_params) if mode == "nsc_sft" else None
    try:
        report = trainer.train(train_cfg, data, init_params, ref_params=ref_params)
    except NonFiniteLoss as exc:
        if exc.report is not None:
            trainer.write_report(
                exc.report, workdir / "train_report.jsonl", workdir / "train_summary.json"
            )
        raise

    tinylm.save_checkpoint(workdir / "model.ckpt", report.final_params)
    trainer.write_report(report, workdir / "train_report.jsonl", workdir / "train_summary.json")
    cfgmod.record_stage(workdir, "train", cfg, outputs)
    print(json.dumps(report.summary()))
    return 0


def cmd_eval(cfg: cfgmod.PipelineConfig, args: argparse.Namespace) -> int:
    workdir = Path(cfg.workdir)
    quiz_path = args.quiz or str(evalharness.default_quiz_path())
    out_path = workdir / "eval_report.json"
    if args.dry_run:
        return _plan("eval", cfg, [quiz_path], [str(out_path)])
    _workdir(cfg)

    items = evalharness.read_quiz(quiz_path)
    checkpoint = args.checkpoint
    if checkpoint is None and not cfg.backend.mock:
        responder = _backend_for(cfg)
    elif checkpoint is not None:
        responder = evalharness.TinyLmResponder(tinylm.load_checkpoint(checkpoint))
    elif (workdir / "model.ckpt").exists():
        cfgmod.check_upstream(workdir, "eval", cfg)
        responder = evalharness.TinyLmResponder(tinylm.load_checkpoint(workdir / "model.ckpt"))
    else:
        responder = _backend_for(cfg)

    # Local greedy decode stays sequential; parallelism applies to backends.
    local = isinstance(responder, evalharness.TinyLmResponder)
    report = evalharness.grade(items, responder, parallelism=1 if local else cfg.parallelism)
    out_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(json.dumps({"accuracy": report.accuracy, "unparsable": report.unparsable}))
    return 0


def cmd_gradcheck(cfg: cfgmod.PipelineConfig, args: argparse.Namespace) -> int:
    if args.dry_run:
        return _plan("gradcheck", cfg, [], [])
    model_cfg = _model_config(cfg)
    params = tinylm.init(model_cfg)
    ref = tinylm.freeze_reference(tinylm.init(dataclasses.replace(model_cfg, seed=cfg.seed + 101)))

    tokenizer = tinylm.ByteTokenizer()
    probe = dataset.tokenize_and_mask(
        dataset.ChatExample(
            system="",
            user="State the loop law.",
            assistant="<think>\nsum drops\n</think>\n\nAdd voltages around the loop.\n\n<answer>They sum to zero.</answer>",
        ),
        tokenizer,
    )
    batch = trainer._batch_from_examples([probe])
    ref_lp = tinylm.batched_logprobs(tinylm.build_leaves(ref), ref.config, batch.ids).data
    leaves, _, _, total = trainer._graph_losses(params, batch, ref_lp, cfg.train.kl_weight)
    tape.backward(total)
    analytic = tinylm.collect_flat_grad(params, leaves)
    worst, _ = tinylm.gradient_check(
        params,
        lambda p: trainer._batch_loss_value(p, batch, ref_lp, cfg.train.kl_weight),
        analytic,
        n_coords=200,
        seed=cfg.seed,
    )
    passed = worst <= 1e-4
    print(json.dumps({"max_rel_err": worst, "tolerance": 1e-4, "pass": passed}))
    return 0 if passed else 2


_COMMANDS = {
    "ingest": cmd_ingest,
    "distill": cmd_distill,
    "build": cmd_build,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}

_VALIDATION_ERRORS = (
    ConfigError,
    StaleArtifact,
    SchemaViolation,
    InvalidEncoding,
    FileNotFoundError,
    ValueError,
)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(cfgmod.load_config(args.config), args)
        return _COMMANDS[args.command](cfg, args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except GranaryError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
