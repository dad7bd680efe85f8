"""Command line entry points: data building, training, evaluation, inference."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import torch

from . import data_pipeline as dpl
from . import evaluation as evl
from . import training as trn
from .core_model import GenSettings, ModelConfig, load_checkpoint, respond
from .scene_world import caption, render, sample_scene
from .speech_codec import OUTPUT_ACCENT, OUTPUT_SPEED, CodecConfig, asr_decode, tts_encode
from .vision_encoder import VisionConfig


def _apply_sets(obj, pairs: list[str]):
    """Apply key=value overrides to a frozen dataclass, casting per field type."""
    if not pairs:
        return obj
    values = {}
    names = {f.name: f for f in dataclasses.fields(obj)}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"bad override {pair!r}; expected key=value")
        key, _, raw = pair.partition("=")
        if key not in names:
            raise ValueError(f"unknown option {key!r} for {type(obj).__name__}")
        current = getattr(obj, key)
        if isinstance(current, bool):
            values[key] = raw.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            values[key] = int(raw)
        elif isinstance(current, float):
            values[key] = float(raw)
        elif isinstance(current, tuple):
            kind = float if current and isinstance(current[0], float) else str
            values[key] = tuple(kind(x) for x in raw.split(",") if x)
        else:
            values[key] = raw
    return dataclasses.replace(obj, **values)


def _cmd_gen_data(args) -> int:
    counts = dpl.parse_counts(args.counts)
    pcfg = _apply_sets(dpl.PipelineConfig(), args.set or [])
    examples, _scenes, stats = dpl.build_dataset(
        args.out, args.stage, counts, pcfg, seed=args.seed
    )
    print(f"wrote {len(examples)} examples to {args.out}")
    print(stats.to_text(), end="")
    return 0


def _cmd_train(args) -> int:
    preset = trn.full_schedule if args.preset == "full" else trn.toy_schedule
    sched = preset(args.stage, args.steps, seed=args.seed)
    overrides = {}
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.lr is not None:
        overrides["peak_lr"] = args.lr
    if args.warmup_ratio is not None:
        overrides["warmup_ratio"] = args.warmup_ratio
    if args.save_every is not None:
        overrides["save_every"] = args.save_every
    if overrides:
        sched = dataclasses.replace(sched, **overrides)

    model_cfg = None
    vis_cfg = None
    if args.model_set:
        from .tokenizer import build_vocab

        base = ModelConfig(vocab_size=build_vocab().size)
        model_cfg = _apply_sets(base, args.model_set)
    if args.vision_set:
        vis_cfg = _apply_sets(VisionConfig(), args.vision_set)

    def hook(step, lr, loss):
        if step % args.log_every == 0 or step == 1:
            print(f"step {step:>6}  lr {lr:.3e}  loss {loss:.4f}", flush=True)

    _model, info = trn.run_stage(
        args.data,
        sched,
        args.out,
        init_from=args.init_from,
        model_cfg=model_cfg,
        vis_cfg=vis_cfg,
        stop_after=args.stop_after,
        log_hook=hook,
    )
    print(
        f"stage {info['stage']} {'completed' if info['completed'] else 'paused'} "
        f"at step {info['step_in_stage']} (global {info['global_step']}), "
        f"final loss {info['final_loss']:.4f}"
    )
    if info["skipped_rows"]:
        print(f"skipped {info['skipped_rows']} rows over the sequence budget")
    return 0


def _progress_printer(every: int = 16):
    state = {"n": 0}

    def progress(*parts):
        state["n"] += 1
        if state["n"] % every == 0:
            print("  " + " ".join(str(p) for p in parts), flush=True)

    return progress


def _cmd_eval(args) -> int:
    paradigms = ("direct", "chain") if args.paradigm == "both" else (args.paradigm,)
    report = evl.evaluate_checkpoint(
        args.checkpoint,
        args.data,
        args.out,
        settings=GenSettings.toy(),
        seed=args.seed,
        paradigms=paradigms,
        max_per_combo=args.max_per_combo,
        progress=_progress_printer() if args.verbose else None,
    )
    print(evl.report_to_text(report), end="")
    return 0


def _cmd_ablate(args) -> int:
    accents = tuple(args.accents.split(",")) if args.accents else None
    speeds = tuple(float(s) for s in args.speeds.split(",")) if args.speeds else None
    result = evl.ablation_grid(
        args.checkpoint,
        args.data,
        args.out,
        accents=accents,
        speeds=speeds,
        settings=GenSettings.toy(),
        max_clips=args.max_clips,
        seed=args.seed,
        progress=_progress_printer(1) if args.verbose else None,
    )
    print(evl.ablation_to_text(result), end="")
    return 0


def _cmd_attention(args) -> int:
    result = evl.attention_report(
        args.checkpoint,
        args.out,
        n_scenes=args.scenes,
        dump_first=args.dump_first,
        settings=GenSettings.toy(),
        seed=args.seed,
        progress=_progress_printer() if args.verbose else None,
    )
    for paradigm, row in result["paradigms"].items():
        print(
            f"{paradigm}: localization {row['accuracy']:.3f} "
            f"({row['hits']}/{row['defined']}, chance {result['chance']:.3f})"
        )
    return 0


def _cmd_trace(args) -> int:
    rows = trn.read_loss_csv(args.loss_csv)
    losses = [r[2] for r in rows]
    smooth = trn.smooth_trace(losses, args.window)
    print(f"steps {rows[0][0]}..{rows[-1][0]}")
    print(f"raw loss   first {losses[0]:.4f}  last {losses[-1]:.4f}")
    print(f"smoothed   first {smooth[0]:.4f}  last {smooth[-1]:.4f}  window {args.window}")
    return 0


def _cmd_infer(args) -> int:
    model, _info = load_checkpoint(args.checkpoint)
    model.eval()
    codec = CodecConfig()
    task, io_config = args.task, args.io_config

    image = None
    if task in ("IC", "VQA"):
        spec = sample_scene(args.scene_seed)
        image = torch.as_tensor(render(spec), dtype=torch.float32)
        print(f"scene {args.scene_seed}: {caption(spec)}")

    payload = None
    if io_config in ("STT", "STS"):
        if task == "ASR" or task == "VQA":
            if not args.payload:
                raise ValueError("speech input needs --payload text to voice")
            spoken = args.payload
        else:
            spoken = dpl.prompt_speech_text(task, io_config, pool="eval")
        payload = tts_encode(codec, spoken, args.accent, args.speed)
        print(f"voiced input ({args.accent}, x{args.speed}): {spoken!r}")
    elif task in ("TTS", "VQA"):
        if not args.payload:
            raise ValueError(f"{task} {io_config} needs --payload")
        payload = args.payload

    resp = respond(
        model,
        task,
        io_config,
        image=image,
        payload=payload,
        paradigm=args.paradigm,
        settings=GenSettings.toy(),
        seed=args.seed,
    )
    out = {"task": task, "io_config": io_config, "paradigm": args.paradigm}
    if resp.text is not None:
        out["text"] = resp.text
    if resp.clip is not None:
        out["speech_units"] = len(resp.clip.units)
        out["speech_decoded"] = asr_decode(codec, resp.clip)
    if resp.flags:
        out["flags"] = resp.flags
    if args.json:
        print(json.dumps(out, sort_keys=True))
    else:
        for key, value in out.items():
            print(f"{key}: {value}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="trimodal",
        description="Tri-modal speech/vision/text model: data, training, evaluation.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="build a dataset directory for one stage")
    g.add_argument("--stage", required=True, choices=("pre1", "pre2", "sft", "eval"))
    g.add_argument("--counts", required=True, help="asr=100,tts=100,ic=40,vqa_tts=10")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="pipeline config override, repeatable")
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="run or resume one training stage")
    t.add_argument("--stage", required=True, choices=trn.STAGE_ORDER)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--init-from", default=None)
    t.add_argument("--preset", choices=("toy", "full"), default="toy")
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--warmup-ratio", type=float, default=None)
    t.add_argument("--save-every", type=int, default=None)
    t.add_argument("--stop-after", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--log-every", type=int, default=25)
    t.add_argument("--model-set", action="append", metavar="KEY=VALUE")
    t.add_argument("--vision-set", action="append", metavar="KEY=VALUE")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a built eval set")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default=None)
    e.add_argument("--paradigm", choices=("direct", "chain", "both"), default="both")
    e.add_argument("--max-per-combo", type=int, default=None)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--verbose", action="store_true")
    e.set_defaults(fn=_cmd_eval)

    a = sub.add_parser("ablate", help="accent/speed robustness grid")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", default=None)
    a.add_argument("--accents", default=None, help="comma separated")
    a.add_argument("--speeds", default=None, help="comma separated")
    a.add_argument("--max-clips", type=int, default=32)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--verbose", action="store_true")
    a.set_defaults(fn=_cmd_ablate)

    n = sub.add_parser("attention", help="answer-attention localization probe")
    n.add_argument("--checkpoint", required=True)
    n.add_argument("--out", default=None)
    n.add_argument("--scenes", type=int, default=60)
    n.add_argument("--dump-first", type=int, default=4)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--verbose", action="store_true")
    n.set_defaults(fn=_cmd_attention)

    c = sub.add_parser("trace", help="summarize a training loss curve")
    c.add_argument("--loss-csv", required=True)
    c.add_argument("--window", type=int, default=25)
    c.set_defaults(fn=_cmd_trace)

    i = sub.add_parser("infer", help="run one task on a fresh scene or payload")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--task", required=True, choices=("ASR", "TTS", "IC", "VQA"))
    i.add_argument("--io-config", required=True, choices=("TTT", "TTS", "STT", "STS"))
    i.add_argument("--paradigm", choices=("direct", "chain"), default="direct")
    i.add_argument("--payload", default=None,
                   help="transcript, question, or text to voice for speech input")
    i.add_argument("--scene-seed", type=int, default=0)
    i.add_argument("--accent", default=OUTPUT_ACCENT)
    i.add_argument("--speed", type=float, default=OUTPUT_SPEED)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--json", action="store_true")
    i.set_defaults(fn=_cmd_infer)

    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
