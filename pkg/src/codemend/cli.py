"""Command line interface.

Commands: build-dataset, train, infer, eval, rl-finetune, scan, ablate.
Every command takes --seed and is deterministic given it (wall-time columns
excepted), and supports --dump-config to print its resolved settings and
exit. Exit codes: 0 success, 1 usage error, 2 data error, 3 integrity error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time

import torch

from . import checkpoint as ckpt
from . import corpus, dataset, decode, metrics, ppo, trainer
from .errors import CodemendError, DataError, IntegrityError, UsageError
from .model import ModelConfig, build_model
from .tokenizer import EOS_ID, TokenizerModel, train_bpe

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTEGRITY = 3


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as UsageError (exit code 1)."""

    def error(self, message):
        raise UsageError(message)


def _dump_config(args: argparse.Namespace) -> int:
    for k in sorted(vars(args)):
        if k in ("func", "dump_config"):
            continue
        print(f"{k}={getattr(args, k)}")
    return EXIT_OK


def _read_text_arg(value: str) -> str:
    """--input accepts literal text, or @path to read a file."""
    if value.startswith("@"):
        path = value[1:]
        if not os.path.exists(path):
            raise DataError(f"input file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return f.read()
    return value


def _load_model(path: str):
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    return ckpt.load_checkpoint(path)


def _load_tokenizer(path: str) -> TokenizerModel:
    if not os.path.exists(path):
        raise DataError(f"tokenizer not found: {path}")
    return TokenizerModel.load(path)


def _pack_all(records, tokenizer, max_len, mask_inputs=False):
    return [
        dataset.pack_sequence(r, tokenizer, max_len, mask_inputs=mask_inputs)
        for r in records
    ]


# --- build-dataset ----------------------------------------------------------


def cmd_build_dataset(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if args.source_dir:
        fragments = []
        for root, _dirs, files in os.walk(args.source_dir):
            for fname in sorted(files):
                if not fname.endswith((".c", ".h")):
                    continue
                path = os.path.join(root, fname)
                with open(path, "r", encoding="utf-8", errors="replace") as f:
                    text = f.read()
                for fn in corpus.extract_functions(text):
                    fragments.append(
                        corpus.Fragment(
                            frag_id=f"{fname}:{fn.name}:{fn.line_start}",
                            code=fn.code,
                            source_file=path,
                            line_start=fn.line_start,
                        )
                    )
        if not args.sidecar:
            raise UsageError("--source-dir requires --sidecar metadata")
        rows = []
        with open(args.sidecar, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    rows.append(json.loads(line))
        pairs, report = corpus.pair_functions(fragments, rows)
        print(
            f"paired {report.pairs} functions ({report.with_fix} with fix, "
            f"{report.without_fix} without, {report.unreferenced_fragments} unreferenced)"
        )
    else:
        pairs = corpus.synthesize_pairs(args.pairs, seed=args.seed)
        print(f"synthesized {len(pairs)} pairs across {len(corpus.TEMPLATES)} templates")

    records, rep = dataset.build_records(pairs, seed=args.seed)
    print(f"built {len(records)} records: {rep.per_task}")
    texts = [f"{r.instruction}\n{r.input}\n{r.output}" for r in records]
    tok = train_bpe(texts, args.vocab_size)
    print(f"trained tokenizer: vocab {tok.vocab_size}")
    manifest = dataset.split_dataset(records, seed=args.seed)
    print(
        f"split {len(manifest.train)}/{len(manifest.valid)}/{len(manifest.test)} "
        f"(train/valid/test)"
    )
    dataset.save_records(records, os.path.join(args.out, "dataset.jsonl"))
    dataset.save_manifest(manifest, os.path.join(args.out, "manifest.json"))
    tok.save(os.path.join(args.out, "tokenizer.txt"))
    print(f"wrote {args.out}/dataset.jsonl, manifest.json, tokenizer.txt")
    return EXIT_OK


# --- train ------------------------------------------------------------------


def cmd_train(args) -> int:
    tok = _load_tokenizer(args.tokenizer)
    records = dataset.load_records(args.dataset)
    manifest = dataset.load_manifest(args.manifest)
    manifest.check(len(records))
    vocab = max(args.vocab_size or 0, tok.vocab_size)
    mcfg = ModelConfig(
        n_layers=args.layers,
        n_heads=args.heads,
        d_model=args.d_model,
        d_ff=args.d_ff,
        vocab_size=vocab,
        max_len=args.max_len,
    )
    model = build_model(mcfg, seed=args.seed)
    packed = _pack_all(records, tok, args.max_len, mask_inputs=args.mask_inputs)
    tcfg = trainer.TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        grad_clip=args.grad_clip,
        max_steps=args.max_steps,
        log_every=args.log_every,
    )
    result = trainer.train_supervised(model, packed, manifest, tcfg)
    print(f"trained {result.steps} steps, final train loss {result.final_train_loss:.4f}")
    ckpt.save_checkpoint(model, args.out)
    print(f"wrote checkpoint {args.out}")
    if args.curve_out:
        trainer.write_loss_curve(result.curve, args.curve_out)
        print(f"wrote loss curve {args.curve_out}")
    return EXIT_OK


# --- infer ------------------------------------------------------------------


def cmd_infer(args) -> int:
    model = _load_model(args.checkpoint)
    tok = _load_tokenizer(args.tokenizer)
    task = dataset.Task(args.task)
    instruction = args.instruction or dataset.DEFAULT_INSTRUCTIONS[task][0]
    input_text = _read_text_arg(args.input)
    prompt = decode.build_prompt(
        tok, instruction, input_text, model.config.max_len, args.max_new_tokens
    )
    dcfg = decode.DecodeConfig(
        beam_size=args.beam,
        temperature=args.temperature,
        max_new_tokens=args.max_new_tokens,
        seed=args.seed,
        eos_id=EOS_ID,
    )
    if args.sample:
        ids = decode.sample_temperature(model, prompt, dcfg)
        print(tok.decode(ids))
        return EXIT_OK
    hyps = decode.beam_search(model, prompt, dcfg)
    for rank, h in enumerate(hyps[: args.n_best]):
        text = tok.decode(h.ids)
        if args.n_best > 1:
            print(f"[{rank}] logprob={h.logprob_sum:.3f}")
        print(text)
    return EXIT_OK


# --- eval -------------------------------------------------------------------


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    tok = _load_tokenizer(args.tokenizer)
    records = dataset.load_records(args.dataset)
    manifest = dataset.load_manifest(args.manifest)
    manifest.check(len(records))
    split_ids = getattr(manifest, args.split)
    if args.task:
        split_ids = [i for i in split_ids if records[i].task == dataset.Task(args.task)]
    if args.limit:
        split_ids = split_ids[: args.limit]
    if not split_ids:
        raise DataError("no records selected for evaluation")

    dcfg = decode.DecodeConfig(
        beam_size=args.beam,
        max_new_tokens=args.max_new_tokens,
        seed=args.seed,
        eos_id=EOS_ID,
    )
    rows = []
    outputs: dict[str, list[tuple[str, str]]] = {}
    for i in split_ids:
        rec = records[i]
        prompt = decode.build_prompt(
            tok, rec.instruction, rec.input, model.config.max_len, args.max_new_tokens
        )
        hyps = decode.beam_search(model, prompt, dcfg)
        text = tok.decode(hyps[0].ids)
        outputs.setdefault(rec.task.value, []).append((text, rec.output))
        rep = metrics.generation_metrics(text, rec.output)
        rows.append(
            {
                "kind": "record",
                "task": rec.task.value,
                "index": i,
                "bleu": f"{rep.bleu:.6f}",
                "rouge_l": f"{rep.rouge_l:.6f}",
                "prediction": text,
                "label": rec.output,
            }
        )

    agg_rows = []
    for task_name, pairs in sorted(outputs.items()):
        mean_bleu = sum(metrics.generation_metrics(c, r).bleu for c, r in pairs) / len(pairs)
        mean_rouge = sum(metrics.generation_metrics(c, r).rouge_l for c, r in pairs) / len(pairs)
        agg = {
            "kind": "aggregate",
            "task": task_name,
            "index": len(pairs),
            "bleu": f"{mean_bleu:.6f}",
            "rouge_l": f"{mean_rouge:.6f}",
            "prediction": "",
            "label": "",
        }
        if task_name == dataset.Task.IDENTIFY.value:
            cls = metrics.classification_metrics([c for c, _ in pairs], [r for _, r in pairs])
            agg.update(
                precision=f"{cls.precision:.6f}",
                recall=f"{cls.recall:.6f}",
                f1=f"{cls.f1:.6f}",
                accuracy=f"{cls.accuracy:.6f}",
            )
            print(
                f"{task_name}: f1={cls.f1:.4f} acc={cls.accuracy:.4f} "
                f"(tp={cls.tp} fp={cls.fp} tn={cls.tn} fn={cls.fn}) n={len(pairs)}"
            )
        else:
            print(f"{task_name}: bleu={mean_bleu:.4f} rouge_l={mean_rouge:.4f} n={len(pairs)}")
        agg_rows.append(agg)

    fieldnames = [
        "kind", "task", "index", "bleu", "rouge_l", "prediction", "label",
        "precision", "recall", "f1", "accuracy",
    ]
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames, restval="")
        w.writeheader()
        for row in rows + agg_rows:
            w.writerow(row)
    print(f"wrote {args.out}")
    return EXIT_OK


# --- rl-finetune ------------------------------------------------------------


def cmd_rl_finetune(args) -> int:
    model = _load_model(args.checkpoint)
    tok = _load_tokenizer(args.tokenizer)
    records = dataset.load_records(args.dataset)
    manifest = dataset.load_manifest(args.manifest)
    manifest.check(len(records))
    comment_records = [
        records[i] for i in manifest.train if records[i].task == dataset.Task.COMMENT
    ]
    if not comment_records:
        raise DataError("no comment-task records in the training split")
    length_cap = None
    if args.length_cap == "auto":
        length_cap = ppo.percentile_length_cap(comment_records, tok)
        print(f"derived length cap: {length_cap} tokens (95th percentile)")
    elif args.length_cap:
        length_cap = int(args.length_cap)
    pcfg = ppo.PPOConfig(
        updates=args.updates,
        rollouts_per_update=args.rollouts,
        ppo_epochs=args.ppo_epochs,
        clip_epsilon=args.clip_epsilon,
        kl_coef=args.kl_coef,
        kl_target=args.kl_target,
        learning_rate=args.lr,
        max_new_tokens=args.max_new_tokens,
        temperature=args.temperature,
        length_penalty=args.length_penalty,
        length_cap=length_cap,
        reward_source=args.reward_source,
        seed=args.seed,
    )
    result = ppo.rl_finetune(model, comment_records, tok, pcfg)
    if result.curve:
        last = result.curve[-1]
        print(
            f"{len(result.curve)} updates: reward {result.curve[0].mean_reward:.4f} "
            f"-> {last.mean_reward:.4f}, final kl {last.kl:.4f}"
        )
    ckpt.save_checkpoint(result.policy, args.out)
    print(f"wrote checkpoint {args.out}")
    if args.curve_out:
        ppo.write_reward_curve(result.curve, args.curve_out)
        print(f"wrote reward curve {args.curve_out}")
    return EXIT_OK


# --- scan -------------------------------------------------------------------


def cmd_scan(args) -> int:
    model = _load_model(args.checkpoint)
    tok = _load_tokenizer(args.tokenizer)
    paths = []
    if os.path.isdir(args.source):
        for root, _dirs, files in os.walk(args.source):
            paths.extend(
                os.path.join(root, f) for f in sorted(files) if f.endswith((".c", ".h"))
            )
    elif os.path.exists(args.source):
        paths = [args.source]
    else:
        raise DataError(f"source not found: {args.source}")
    instruction = dataset.DEFAULT_INSTRUCTIONS[dataset.Task.IDENTIFY][0]
    dcfg = decode.DecodeConfig(
        beam_size=args.beam, max_new_tokens=args.max_new_tokens, seed=args.seed, eos_id=EOS_ID
    )
    findings = []
    for path in paths:
        with open(path, "r", encoding="utf-8", errors="replace") as f:
            text = f.read()
        for fn in corpus.extract_functions(text):
            prompt = decode.build_prompt(
                tok, instruction, fn.code, model.config.max_len, args.max_new_tokens
            )
            hyps = decode.beam_search(model, prompt, dcfg)
            answer = tok.decode(hyps[0].ids)
            verdict = metrics.parse_yes_no(answer) or "unparsed"
            findings.append(
                {
                    "file": path,
                    "line_start": fn.line_start,
                    "verdict": verdict,
                    "top_beam_confidence": math.exp(hyps[0].logprob_sum),
                }
            )
    with open(args.out, "w", encoding="utf-8") as f:
        for row in findings:
            f.write(json.dumps(row) + "\n")
    flagged = sum(1 for r in findings if r["verdict"] == "yes")
    print(f"scanned {len(paths)} files, {len(findings)} functions, {flagged} flagged")
    print(f"wrote {args.out}")
    return EXIT_OK


# --- ablate -----------------------------------------------------------------


def cmd_ablate(args) -> int:
    model = _load_model(args.checkpoint)
    tok = _load_tokenizer(args.tokenizer)
    records = dataset.load_records(args.dataset)
    manifest = dataset.load_manifest(args.manifest)
    manifest.check(len(records))
    task = dataset.Task(args.task)
    ids = [i for i in manifest.test if records[i].task == task][: args.limit]
    if not ids:
        raise DataError(f"no {task.value} records in the test split")

    if args.grid:
        grid = [float(x) for x in args.grid.split(",")]
    else:
        grid = [1, 2, 4, 6, 8] if args.sweep == "beam" else [0.0, 0.25, 0.5, 0.75, 1.0]
    if args.sweep == "beam":
        grid = [int(v) for v in grid]

    rows = []
    for value in grid:
        t0 = time.perf_counter()
        bleus, rouges = [], []
        for i in ids:
            rec = records[i]
            prompt = decode.build_prompt(
                tok, rec.instruction, rec.input, model.config.max_len, args.max_new_tokens
            )
            if args.sweep == "beam":
                dcfg = decode.DecodeConfig(
                    beam_size=int(value), max_new_tokens=args.max_new_tokens,
                    seed=args.seed, eos_id=EOS_ID,
                )
                text = tok.decode(decode.beam_search(model, prompt, dcfg)[0].ids)
            else:
                dcfg = decode.DecodeConfig(
                    beam_size=1, temperature=value, max_new_tokens=args.max_new_tokens,
                    seed=args.seed, eos_id=EOS_ID,
                )
                text = tok.decode(decode.sample_temperature(model, prompt, dcfg))
            rep = metrics.generation_metrics(text, rec.output)
            bleus.append(rep.bleu)
            rouges.append(rep.rouge_l)
        wall = time.perf_counter() - t0
        rows.append(
            {
                "sweep": args.sweep,
                "value": value,
                "records": len(ids),
                "wall_time_s": f"{wall:.4f}",
                "mean_bleu": f"{sum(bleus)/len(bleus):.6f}",
                "mean_rouge_l": f"{sum(rouges)/len(rouges):.6f}",
            }
        )
        print(
            f"{args.sweep}={value}: wall={wall:.3f}s bleu={rows[-1]['mean_bleu']} "
            f"rouge_l={rows[-1]['mean_rouge_l']}"
        )
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(
            f, fieldnames=["sweep", "value", "records", "wall_time_s", "mean_bleu", "mean_rouge_l"]
        )
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {args.out}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def _add_common(p: _Parser) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    p.add_argument(
        "--dump-config", action="store_true", help="print resolved settings and exit"
    )


def make_parser() -> _Parser:
    parser = _Parser(prog="codemend", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("build-dataset", help="synthesize or extract a dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pairs", type=int, default=200, help="synthetic pairs to generate")
    p.add_argument("--vocab-size", type=int, default=512)
    p.add_argument("--source-dir", help="extract from C files under this directory instead")
    p.add_argument("--sidecar", help="JSONL metadata pairing fragments (with --source-dir)")
    _add_common(p)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="supervised training")
    p.add_argument("--dataset", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--curve-out", help="loss curve CSV path")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--d-ff", type=int, default=512)
    p.add_argument("--max-len", type=int, default=256)
    p.add_argument("--vocab-size", type=int, help="override (must cover the tokenizer)")
    p.add_argument("--lr", type=float, default=2e-5)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--grad-clip", type=float, default=1.0)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--log-every", type=int, default=25)
    p.add_argument("--mask-inputs", action="store_true",
                   help="score only output tokens instead of the whole sequence")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="generate for one input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--task", required=True, choices=[t.value for t in dataset.Task])
    p.add_argument("--input", required=True, help="literal text or @path")
    p.add_argument("--instruction", help="override the default instruction")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--temperature", type=float, default=0.5)
    p.add_argument("--max-new-tokens", type=int, default=64)
    p.add_argument("--n-best", type=int, default=1, help="print this many hypotheses")
    p.add_argument("--sample", action="store_true", help="temperature sampling instead of beam")
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--task", choices=[t.value for t in dataset.Task])
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--max-new-tokens", type=int, default=64)
    p.add_argument("--limit", type=int, help="evaluate at most this many records")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rl-finetune", help="PPO-tune comment generation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--curve-out", help="reward curve CSV path")
    p.add_argument("--updates", type=int, default=50)
    p.add_argument("--rollouts", type=int, default=16)
    p.add_argument("--ppo-epochs", type=int, default=4)
    p.add_argument("--clip-epsilon", type=float, default=0.2)
    p.add_argument("--kl-coef", type=float, default=0.1)
    p.add_argument("--kl-target", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--max-new-tokens", type=int, default=16)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--length-penalty", type=float, default=0.0)
    p.add_argument("--length-cap", help="token cap, or 'auto' for the 95th percentile")
    p.add_argument("--reward-source", default="semantic_f1", choices=list(ppo.REWARD_SOURCES))
    _add_common(p)
    p.set_defaults(func=cmd_rl_finetune)

    p = sub.add_parser("scan", help="flag vulnerable functions in C sources")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--source", required=True, help="a .c file or a directory")
    p.add_argument("--out", required=True, help="findings JSONL path")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--max-new-tokens", type=int, default=8)
    _add_common(p)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("ablate", help="sweep beam size or temperature")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="sweep CSV path")
    p.add_argument("--sweep", required=True, choices=["beam", "temperature"])
    p.add_argument("--grid", help="comma-separated values overriding the default grid")
    p.add_argument("--task", default="comment", choices=[t.value for t in dataset.Task])
    p.add_argument("--limit", type=int, default=8, help="records per sweep point")
    p.add_argument("--max-new-tokens", type=int, default=24)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        if args.dump_config:
            return _dump_config(args)
        torch.manual_seed(args.seed)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityError as e:
        print(f"integrity error: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except CodemendError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
