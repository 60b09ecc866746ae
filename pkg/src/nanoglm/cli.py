"""Unified command-line interface.

Subcommands: init-model, train, quantize, serve, chat, ingest,
ingest-library, translate, probe, eval-ppl. ``serve`` and ``chat`` read an
optional INI config file with [model], [sampler], and [service] sections;
explicit flags win over config values.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from pathlib import Path

from . import PROMPT_TEMPLATE, TOY_LIBRARY, data_path
from .adapters import init_lora, init_prefix, load_adapter, save_adapter
from .corpus import (
    DEFAULT_INSTRUCTION,
    HttpChatTransport,
    RetryPolicy,
    TranslatorClient,
    export_training_pairs,
    load_qa_corpus,
    translate_batch,
)
from .errors import NanoglmError
from .model import ModelConfig, init_model, load_model, save_model
from .prompt import DEFAULT_TEMPLATE, load_library, load_template, save_library
from .quant import QuantPolicy, load_quantized, quantize_model, save_quantized
from .sampling import SamplerConfig
from .service import ChatService, build_app
from .train import DEFAULT_PROBE_PROMPTS, TrainConfig, perplexity, run_probes, train


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", help="path to an NGLM weight file")
    p.add_argument("--adapter", help="path to an NGLA adapter file")
    p.add_argument("--quantized", help="path to an NGQ4 quantized weight file")


def _load_runtime(args):
    """Resolve (bundle, adapters, info) from --model/--adapter/--quantized."""
    info: dict = {}
    adapter = None
    if args.adapter:
        adapter = load_adapter(args.adapter)
        info["adapter"] = str(args.adapter)
    if getattr(args, "quantized", None):
        qb = load_quantized(args.quantized)
        info["quantized"] = qb.footprint_report()
        info["quant_policy"] = qb.policy.value
        bundle = qb.to_bundle()
        if qb.policy is QuantPolicy.MERGE_THEN_QUANTIZE and adapter is not None:
            print("warning: merged-quantized model ignores --adapter", file=sys.stderr)
            adapter = None
    elif args.model:
        bundle = load_model(args.model)
        info["model"] = str(args.model)
    else:
        raise SystemExit("either --model or --quantized is required")
    return bundle, adapter, info


def cmd_init_model(args) -> int:
    config = ModelConfig(n_layers=args.layers, d_model=args.d_model, n_heads=args.heads,
                         d_ff=args.d_ff, max_seq_len=args.max_seq_len)
    bundle = init_model(config, seed=args.seed)
    save_model(bundle, args.out)
    print(f"wrote {args.out}: {bundle.param_count()} parameters, config {config.to_dict()}")
    return 0


def cmd_train(args) -> int:
    bundle = load_model(args.model)
    report = load_qa_corpus(args.corpus, strict=True)
    if args.method == "lora":
        adapter = init_lora(bundle.config, rank=args.rank, alpha=args.alpha, seed=args.seed)
    else:
        adapter = init_prefix(bundle.config, prefix_len=args.prefix_len, seed=args.seed)
    config = TrainConfig(batch_size=args.batch_size, learning_rate=args.lr,
                         probe_interval=args.probe_interval, seed=args.seed,
                         max_steps=args.steps)
    result = train(bundle, adapter, report.records, config, out_dir=args.out_dir)
    save_adapter(result.adapter, Path(args.out_dir) / "adapter.ngla")
    final = result.reports[-1].eval_loss if result.reports else None
    print(f"trained {result.steps} steps; final eval loss: {final}; "
          f"checkpoints: {len(result.checkpoints)}; aborted: {result.aborted}")
    return 1 if result.aborted else 0


def cmd_quantize(args) -> int:
    bundle = load_model(args.model)
    adapter = load_adapter(args.adapter) if args.adapter else None
    policy = QuantPolicy(args.policy)
    qb = quantize_model(bundle, adapter, policy, group_size=args.group_size)
    save_quantized(qb, args.out)
    rep = qb.footprint_report()
    print(f"wrote {args.out}: {rep['quantized_tensors']} tensors quantized, "
          f"{rep['reduction_factor']:.2f}x smaller than float32 on those tensors")
    return 0


def _sampler_from(args, config_file: configparser.ConfigParser) -> SamplerConfig:
    def fallback(key, cast, default):
        if config_file.has_option("sampler", key):
            return cast(config_file.get("sampler", key))
        return default

    return SamplerConfig(
        temperature=args.temperature if args.temperature is not None else fallback("temperature", float, 0.95),
        top_p=args.top_p if args.top_p is not None else fallback("top_p", float, 0.7),
        seed=args.seed if args.seed is not None else fallback("seed", int, 0),
        max_new_tokens=args.max_new_tokens if args.max_new_tokens is not None
        else fallback("max_new_tokens", int, 128),
    )


def _build_service(args) -> ChatService:
    config_file = configparser.ConfigParser()
    if getattr(args, "config", None):
        config_file.read_string(Path(args.config).read_text(encoding="utf-8"))
    for key in ("model", "adapter", "quantized", "library", "template"):
        if getattr(args, key, None) is None and config_file.has_option("model", key):
            setattr(args, key, config_file.get("model", key))
    bundle, adapter, info = _load_runtime(args)
    library = load_library(args.library) if args.library else None
    template = load_template(args.template) if args.template else DEFAULT_TEMPLATE
    persist = getattr(args, "persist_dir", None)
    if persist is None and config_file.has_option("service", "persist_dir"):
        persist = config_file.get("service", "persist_dir")
    return ChatService(bundle, adapter, library, template,
                       sampler_defaults=_sampler_from(args, config_file),
                       persist_dir=persist, model_info=info)


def cmd_serve(args) -> int:
    import uvicorn

    service = _build_service(args)
    app = build_app(service)
    if args.static_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=args.static_dir, html=True), name="ui")
    print(f"serving on http://{args.host}:{args.port} "
          f"({len(service.library) if service.library else 0} library docs)")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_chat(args) -> int:
    service = _build_service(args)
    session = service.create_session({})
    print("interactive chat; empty line or Ctrl-D exits")
    while True:
        try:
            text = input("you> ").strip()
        except EOFError:
            break
        if not text:
            break
        print("bot> ", end="", flush=True)
        for event in service.post_message(session.session_id, text, debug=args.debug):
            if event["event"] == "token":
                print(event["data"]["text"], end="", flush=True)
            else:
                data = event["data"]
                print()
                if data["repetition_flagged"]:
                    print(f"[flagged: repetition ratio {data['repetition_ratio']:.2f}]")
                if args.debug and data.get("designed_prompt"):
                    print(f"[designed prompt]\n{data['designed_prompt']}")
    return 0


def cmd_ingest(args) -> int:
    report = load_qa_corpus(args.path, strict=args.strict)
    print(json.dumps(report.stats.to_dict(), ensure_ascii=False, indent=2))
    if report.errors:
        print(f"{len(report.errors)} malformed line(s):", file=sys.stderr)
        for err in report.errors[:20]:
            print(f"  line {err.line_no}: {err.reason}", file=sys.stderr)
        return 1
    return 0


def cmd_ingest_library(args) -> int:
    library = load_library(args.path)
    print(f"{len(library)} disease documents, {sum(len(d.terms()) for d in library.docs.values())} terms")
    if args.out:
        save_library(library, args.out)
        print(f"normalized library written to {args.out}")
    return 0


def cmd_translate(args) -> int:
    sources = [line.strip() for line in Path(args.infile).read_text(encoding="utf-8").splitlines()
               if line.strip()]
    if args.mock:
        transport = lambda s: s.upper()  # offline demo transport
        name = "mock-upper"
    else:
        if not args.endpoint:
            raise SystemExit("--endpoint is required without --mock")
        transport = HttpChatTransport(args.endpoint, model=args.model_name,
                                      auth_token_env=args.token_env)
        name = args.endpoint
    client = TranslatorClient(transport=transport, name=name,
                              retry=RetryPolicy(max_attempts=args.max_attempts),
                              parallelism=args.parallelism)
    report = translate_batch(client, sources, out_path=args.out)
    print(f"{len(report.records)} translated, {len(report.failures)} failed, "
          f"{sum(report.retries.values())} retries")
    if args.qa_out:
        n = export_training_pairs(report.records, args.qa_out, instruction=DEFAULT_INSTRUCTION)
        print(f"exported {n} training pairs to {args.qa_out}")
    return 0 if report.ok else 1


def cmd_probe(args) -> int:
    bundle, adapter, _ = _load_runtime(args)
    prompts = args.prompts or list(DEFAULT_PROBE_PROMPTS)
    report = run_probes(bundle, adapter, prompts, step=0)
    print(json.dumps(report.to_dict(), ensure_ascii=False, indent=2))
    return 0


def cmd_eval_ppl(args) -> int:
    bundle, adapter, _ = _load_runtime(args)
    corpus = load_qa_corpus(args.corpus, strict=True)
    ppl = perplexity(bundle, adapter, corpus.records)
    print(f"perplexity: {ppl:.4f} over {len(corpus.records)} pairs")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nanoglm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-model", help="create a fresh seeded weight file")
    p.add_argument("--out", required=True)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=256)
    p.add_argument("--max-seq-len", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("train", help="fine-tune an adapter on a QA corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--method", choices=("lora", "prefix"), default="lora")
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--alpha", type=float, default=16.0)
    p.add_argument("--prefix-len", type=int, default=4)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3,
                   help="desk-scale default; the full-scale recipe value is 2e-5")
    p.add_argument("--probe-interval", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantize", help="write an INT4 quantized weight file")
    p.add_argument("--model", required=True)
    p.add_argument("--adapter")
    p.add_argument("--policy", choices=[pol.value for pol in QuantPolicy], default="keep-float")
    p.add_argument("--group-size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    for name, fn in (("serve", cmd_serve), ("chat", cmd_chat)):
        p = sub.add_parser(name, help=f"{name} the chat pipeline")
        _add_model_args(p)
        p.add_argument("--library", help=f"disease library JSON (bundled: {data_path(TOY_LIBRARY)})")
        p.add_argument("--template", help=f"prompt template (bundled: {data_path(PROMPT_TEMPLATE)})")
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--temperature", type=float)
        p.add_argument("--top-p", dest="top_p", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--max-new-tokens", dest="max_new_tokens", type=int)
        p.add_argument("--persist-dir")
        if name == "serve":
            p.add_argument("--host", default="127.0.0.1")
            p.add_argument("--port", type=int, default=8000)
            p.add_argument("--static-dir", help="serve a built web UI from this directory")
        else:
            p.add_argument("--debug", action="store_true", help="show designed prompts")
        p.set_defaults(func=fn)

    p = sub.add_parser("ingest", help="validate a QA corpus and print stats")
    p.add_argument("--path", required=True)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("ingest-library", help="validate (and normalize) a disease library")
    p.add_argument("--path", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ingest_library)

    p = sub.add_parser("translate", help="build a parallel corpus through a translator endpoint")
    p.add_argument("--in", dest="infile", required=True, help="one source text per line")
    p.add_argument("--out", required=True, help="parallel corpus JSONL output")
    p.add_argument("--endpoint")
    p.add_argument("--model-name", default="gpt-3.5-turbo")
    p.add_argument("--token-env", default="NANOGLM_TRANSLATOR_TOKEN")
    p.add_argument("--max-attempts", type=int, default=3)
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--mock", action="store_true", help="offline uppercase transport")
    p.add_argument("--qa-out", help="also export trainer-ready QA pairs here")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("probe", help="run collapse probes against a checkpoint")
    _add_model_args(p)
    p.add_argument("--prompts", nargs="*")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval-ppl", help="perplexity of a model on a QA corpus")
    _add_model_args(p)
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_eval_ppl)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NanoglmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
