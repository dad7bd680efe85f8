"""Metrics and the held-out evaluation driver.

Text metrics: word error rate, a plain consensus captioning score, and
normalized answer accuracy. Speech outputs are scored twice: once through
the codec decoder against the reference transcript, once as cosine
similarity between clip embeddings. The driver also covers the input
robustness grid over accents and speeds and an attention localization
probe comparing the two speech-generation routes.
"""

from __future__ import annotations

import json
import math
import os
import random
import string
from collections import Counter

import numpy as np
import torch

from . import data_pipeline as dpl
from .core_model import (
    GenSettings,
    TrimodalLM,
    _IO_IN,
    _IO_OUT,
    load_checkpoint,
    respond,
)
from .scene_world import ground_truth, queried_cell, render, sample_scene
from .speech_codec import (
    HELD_OUT_ACCENT,
    CodecConfig,
    SpeechClip,
    asr_decode,
    resynthesize,
    speech_embedding,
)
from .tokenizer import TokenSeq

# ---------------------------------------------------------------------------
# Word error rate


def wer(ref: str, hyp: str) -> float:
    """(substitutions + deletions + insertions) / reference length, words."""
    r = ref.split()
    h = hyp.split()
    if not r:
        return 0.0 if not h else float(len(h))
    prev = list(range(len(h) + 1))
    for i in range(1, len(r) + 1):
        cur = [i] + [0] * len(h)
        for j in range(1, len(h) + 1):
            sub = prev[j - 1] + (r[i - 1] != h[j - 1])
            cur[j] = min(sub, prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[len(h)] / len(r)


# ---------------------------------------------------------------------------
# Consensus captioning score


def _ngrams(words: list[str], n: int) -> Counter:
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def _cosine(a: dict, b: dict) -> float:
    dot = sum(v * b.get(k, 0.0) for k, v in a.items())
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def cider(refs: dict[str, list[str]], hyps: dict[str, str], max_n: int = 4) -> float:
    """tf-idf n-gram consensus, averaged over n = 1..max_n, scaled by 10.

    Document frequencies come from the reference sets, so the score does not
    depend on the order the items are visited in.
    """
    if set(refs) != set(hyps):
        raise ValueError("refs and hyps must cover the same ids")
    if not refs:
        raise ValueError("empty evaluation set")
    n_docs = len(refs)
    df = [Counter() for _ in range(max_n)]
    for rid in refs:
        for n in range(1, max_n + 1):
            seen = set()
            for sent in refs[rid]:
                seen.update(_ngrams(sent.split(), n))
            for g in seen:
                df[n - 1][g] += 1

    def vec(sent: str, n: int) -> dict:
        counts = _ngrams(sent.split(), n)
        return {
            g: c * (math.log(n_docs) - math.log(max(1.0, df[n - 1][g])))
            for g, c in counts.items()
        }

    total = 0.0
    for rid in refs:
        per_n = []
        for n in range(1, max_n + 1):
            hv = vec(hyps[rid], n)
            sims = [_cosine(hv, vec(r, n)) for r in refs[rid]]
            per_n.append(sum(sims) / len(sims))
        total += 10.0 * sum(per_n) / max_n
    return total / n_docs


# ---------------------------------------------------------------------------
# Answer accuracy


_ARTICLES = {"a", "an", "the"}
_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    words = text.lower().translate(_PUNCT).split()
    return " ".join(w for w in words if w not in _ARTICLES)


def answer_accuracy(refs: list[str], hyps: list[str]) -> float:
    if len(refs) != len(hyps):
        raise ValueError("refs and hyps differ in length")
    if not refs:
        raise ValueError("empty evaluation set")
    hits = sum(normalize_answer(r) == normalize_answer(h) for r, h in zip(refs, hyps))
    return hits / len(refs)


# ---------------------------------------------------------------------------
# Speech output scoring


def clip_similarity(codec: CodecConfig, a: SpeechClip, b: SpeechClip) -> float:
    ea = speech_embedding(codec, a)
    eb = speech_embedding(codec, b)
    na = float(np.linalg.norm(ea))
    nb = float(np.linalg.norm(eb))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(ea, eb) / (na * nb))


def speech_scores(
    codec: CodecConfig,
    ref_texts: list[str],
    ref_clips: list[SpeechClip],
    hyp_clips: list[SpeechClip | None],
) -> dict:
    """Transcription WER plus embedding similarity; a missing or empty
    hypothesis counts as a full miss on both branches."""
    if not ref_texts or not (len(ref_texts) == len(ref_clips) == len(hyp_clips)):
        raise ValueError("inputs must be equal-length and non-empty")
    wers = []
    sims = []
    texts = []
    empty = 0
    for text, ref, hyp in zip(ref_texts, ref_clips, hyp_clips):
        if hyp is None or len(hyp.units) == 0:
            empty += 1
            wers.append(wer(text, ""))
            sims.append(0.0)
            texts.append("")
            continue
        decoded = asr_decode(codec, hyp)
        texts.append(decoded)
        wers.append(wer(text, decoded))
        sims.append(clip_similarity(codec, ref, hyp))
    return {
        "wer": sum(wers) / len(wers),
        "similarity": sum(sims) / len(sims),
        "empty_rate": empty / len(hyp_clips),
        "decoded": texts,
    }


# ---------------------------------------------------------------------------
# Held-out evaluation driver


def _payload_clip(ex: dpl.TrimodalExample) -> SpeechClip | None:
    for seg in ex.turns[0]["segments"]:
        if seg["kind"] == "speech":
            return seg["clip"]
    return None


def _target_clip(ex: dpl.TrimodalExample) -> SpeechClip | None:
    for seg in ex.turns[-1]["segments"]:
        if seg["kind"] == "speech":
            return seg["clip"]
    return None


def _payload_for(ex: dpl.TrimodalExample):
    if _IO_IN[ex.io_config] == "S":
        return _payload_clip(ex)
    if ex.task == "TTS":
        return ex.meta["ref_text"]
    if ex.task == "VQA":
        return ex.meta["question"]
    return None


def run_example(
    model: TrimodalLM,
    ex: dpl.TrimodalExample,
    pixels: np.ndarray | None,
    *,
    paradigm: str,
    settings: GenSettings,
    seed: int,
    collect_trace: bool = False,
):
    image = None
    if ex.scene_id is not None:
        if pixels is None:
            raise ValueError("example references a scene but no pixels were given")
        image = torch.as_tensor(pixels[ex.scene_id], dtype=torch.float32)
    return respond(
        model,
        ex.task,
        ex.io_config,
        image=image,
        payload=_payload_for(ex),
        paradigm=paradigm,
        settings=settings,
        seed=seed,
        prompt_pool="eval",
        prompt_seed=0,
        collect_trace=collect_trace,
    )


def _score_rows(codec, task, io_config, paradigm, rows) -> dict:
    """rows: list of (example, response)."""
    out = {"task": task, "io_config": io_config, "paradigm": paradigm, "n": len(rows)}
    refs = [ex.meta["ref_text"] for ex, _ in rows]
    if _IO_OUT[io_config] == "T":
        hyps = [r.text or "" for _, r in rows]
        if task == "ASR":
            out["wer"] = sum(wer(a, b) for a, b in zip(refs, hyps)) / len(rows)
        elif task == "IC":
            out["cider"] = cider(
                {ex.id: [ex.meta["ref_text"]] for ex, _ in rows},
                {ex.id: (r.text or "") for ex, r in rows},
            )
        else:
            out["accuracy"] = answer_accuracy(refs, hyps)
        return out

    ref_clips = [_target_clip(ex) for ex, _ in rows]
    hyp_clips = [r.clip for _, r in rows]
    scores = speech_scores(codec, refs, ref_clips, hyp_clips)
    out["wer"] = scores["wer"]
    out["similarity"] = scores["similarity"]
    out["empty_rate"] = scores["empty_rate"]
    if task == "IC":
        out["cider"] = cider(
            {ex.id: [ex.meta["ref_text"]] for ex, _ in rows},
            {ex.id: d for (ex, _), d in zip(rows, scores["decoded"])},
        )
    elif task == "VQA":
        out["accuracy"] = answer_accuracy(refs, scores["decoded"])
    return out


def evaluate_checkpoint(
    ckpt_path: str,
    eval_dir: str,
    out_dir: str | None = None,
    *,
    settings: GenSettings | None = None,
    seed: int = 0,
    paradigms: tuple[str, ...] = ("direct", "chain"),
    max_per_combo: int | None = None,
    codec: CodecConfig | None = None,
    progress=None,
) -> dict:
    """Score a checkpoint on a built eval set; text outputs take the direct
    route, speech outputs are scored once per requested paradigm."""
    model, info = load_checkpoint(ckpt_path)
    model.eval()
    settings = settings or GenSettings.toy()
    codec = codec or CodecConfig()
    examples, _specs, pixels, _meta = dpl.load_dataset(eval_dir)

    by_combo: dict[tuple[str, str], list] = {}
    for ex in examples:
        by_combo.setdefault((ex.task, ex.io_config), []).append(ex)

    rows = []
    for (task, io_config), group in by_combo.items():
        if max_per_combo is not None:
            group = group[:max_per_combo]
        run_paradigms = (
            ("direct",) if _IO_OUT[io_config] == "T" else tuple(paradigms)
        )
        for paradigm in run_paradigms:
            pairs = []
            for k, ex in enumerate(group):
                resp = run_example(
                    model, ex, pixels,
                    paradigm=paradigm, settings=settings, seed=seed * 100003 + k,
                )
                pairs.append((ex, resp))
                if progress is not None:
                    progress(task, io_config, paradigm, k + 1, len(group))
            rows.append(_score_rows(codec, task, io_config, paradigm, pairs))

    report = {
        "checkpoint": os.path.abspath(ckpt_path),
        "global_step": info["global_step"],
        "stages_done": info["stages_done"],
        "eval_dir": os.path.abspath(eval_dir),
        "seed": seed,
        "settings": {
            "text_beam": settings.text_beam,
            "text_max_new": settings.text_max_new,
            "speech_top_p": settings.speech_top_p,
            "speech_max_new": settings.speech_max_new,
            "speech_rep_penalty": settings.speech_rep_penalty,
        },
        "rows": rows,
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_report(report, out_dir)
    return report


_METRIC_ORDER = ("wer", "cider", "accuracy", "similarity", "empty_rate")


def report_to_text(report: dict) -> str:
    lines = []
    header = ("task", "io", "paradigm", "n", "metrics")
    table = [header]
    for row in report["rows"]:
        metrics = "  ".join(
            f"{k}={row[k]:.4f}" for k in _METRIC_ORDER if k in row
        )
        table.append((row["task"], row["io_config"], row["paradigm"], str(row["n"]), metrics))
    widths = [max(len(r[c]) for r in table) for c in range(len(header))]
    for r in table:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _write_report(report: dict, out_dir: str) -> None:
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(_dumps(report) + "\n")
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report_to_text(report))


# ---------------------------------------------------------------------------
# Accent/speed robustness grid


def ablation_grid(
    ckpt_path: str,
    eval_dir: str,
    out_dir: str | None = None,
    *,
    accents: tuple[str, ...] | None = None,
    speeds: tuple[float, ...] | None = None,
    settings: GenSettings | None = None,
    codec: CodecConfig | None = None,
    max_clips: int = 32,
    seed: int = 0,
    progress=None,
) -> dict:
    """Transcription WER per (accent, speed) cell; each cell re-voices the
    same clean reference clips, so only the input conditions vary."""
    model, _info = load_checkpoint(ckpt_path)
    model.eval()
    settings = settings or GenSettings.toy()
    codec = codec or CodecConfig()
    if accents is None:
        accents = tuple(codec.accents)
    if speeds is None:
        speeds = tuple(codec.speed_grid)
    for a in accents:
        if a not in codec.accents:
            raise ValueError(f"unknown accent {a!r}")
    for s in speeds:
        if s not in codec.speed_grid:
            raise ValueError(f"speed {s} not in the codec grid")

    examples, _specs, _pixels, _meta = dpl.load_dataset(eval_dir)
    base = [ex for ex in examples if ex.task == "ASR"][:max_clips]
    if not base:
        raise ValueError("eval set has no ASR rows for the robustness grid")
    refs = [ex.meta["ref_text"] for ex in base]
    clean = [_payload_clip(ex) for ex in base]

    grid = []
    for accent in accents:
        row = []
        for speed in speeds:
            wers = []
            for k, (text, clip) in enumerate(zip(refs, clean)):
                voiced = resynthesize(codec, clip, accent, speed)
                resp = respond(
                    model, "ASR", "STT",
                    payload=voiced, settings=settings,
                    seed=seed * 7919 + k, prompt_pool="eval", prompt_seed=0,
                )
                wers.append(wer(text, resp.text or ""))
            row.append(sum(wers) / len(wers))
            if progress is not None:
                progress(accent, speed, row[-1])
        grid.append(row)

    result = {
        "accents": list(accents),
        "speeds": list(speeds),
        "held_out_accent": HELD_OUT_ACCENT,
        "n_per_cell": len(base),
        "wer": grid,
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.json"), "w", encoding="utf-8") as fh:
            fh.write(_dumps(result) + "\n")
        with open(os.path.join(out_dir, "ablation.csv"), "w", encoding="utf-8") as fh:
            fh.write(ablation_to_csv(result))
        with open(os.path.join(out_dir, "ablation.txt"), "w", encoding="utf-8") as fh:
            fh.write(ablation_to_text(result))
    return result


def ablation_to_csv(result: dict) -> str:
    lines = ["accent," + ",".join(repr(s) for s in result["speeds"])]
    for accent, row in zip(result["accents"], result["wer"]):
        lines.append(accent + "," + ",".join(repr(v) for v in row))
    return "\n".join(lines) + "\n"


def ablation_to_text(result: dict) -> str:
    speeds = result["speeds"]
    lines = ["accent".ljust(12) + "  ".join(f"{s:>6}" for s in speeds)]
    for accent, row in zip(result["accents"], result["wer"]):
        marker = "*" if accent == result["held_out_accent"] else " "
        lines.append(
            f"{accent:<11}{marker}" + "  ".join(f"{v:6.3f}" for v in row)
        )
    lines.append("* accent unseen in training")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Attention localization probe


def _viridis_like(v: float) -> tuple[int, int, int]:
    # Tiny fixed gradient: dark blue -> teal -> yellow.
    stops = [
        (0.0, (68, 1, 84)),
        (0.5, (33, 145, 140)),
        (1.0, (253, 231, 37)),
    ]
    v = min(1.0, max(0.0, v))
    for (x0, c0), (x1, c1) in zip(stops, stops[1:]):
        if v <= x1:
            t = (v - x0) / (x1 - x0)
            return tuple(int(round(a + t * (b - a))) for a, b in zip(c0, c1))
    return stops[-1][1]


def write_heatmap_ppm(grid: np.ndarray, path: str, scale: int = 16) -> None:
    """Binary P6 image of a (g, g) attention grid, row 0 on top."""
    g = grid.shape[0]
    top = float(grid.max())
    norm = grid / top if top > 0 else grid
    with open(path, "wb") as fh:
        fh.write(f"P6\n{g * scale} {g * scale}\n255\n".encode("ascii"))
        for r in range(g):
            row = bytearray()
            for c in range(g):
                row += bytes(_viridis_like(float(norm[r, c]))) * scale
            fh.write(bytes(row) * scale)


def attention_probe(
    model: TrimodalLM,
    image: torch.Tensor,
    question: str,
    *,
    paradigm: str,
    settings: GenSettings | None = None,
    seed: int = 0,
) -> dict:
    """Where does the answer attend inside the image?

    Runs speech-answer VQA, then replays prompt + generated ids through the
    model and reads the final layer, head-averaged. Chain uses the generated
    text-answer positions of the first call; direct uses the generated
    speech-unit positions. Rows are restricted to the image span and
    renormalized, then averaged into one grid cell distribution.
    """
    settings = settings or GenSettings.toy()
    resp = respond(
        model, "VQA", "TTS",
        image=image, payload=question, paradigm=paradigm,
        settings=settings, seed=seed, prompt_pool="eval", prompt_seed=0,
        collect_trace=True,
    )
    call = resp.trace[0]
    want = "text" if paradigm == "chain" else "speech"
    if call.mode != want:
        raise RuntimeError(f"unexpected first call mode {call.mode!r}")
    vocab = model.vocab
    full_ids = list(call.tokens.ids) + list(call.out_ids)
    seq = TokenSeq.from_ids(vocab, full_ids)
    img_emb = model.encode_image(image)
    fused = model.fuse(seq, image_embedding=img_emb)
    _logits, attns = model.forward(fused, need_attn=True)
    att = attns[-1].mean(dim=0)  # (n', n') head-averaged, final layer

    s, e = fused.img_span
    offset = len(call.tokens.ids) + (e - s) - 1
    positions = [
        offset + j
        for j, tid in enumerate(call.out_ids)
        if vocab.class_of(tid) == want
    ]
    n_v = e - s
    side = int(round(math.sqrt(n_v)))
    if not positions:
        return {
            "grid": np.zeros((side, side)),
            "matrix": np.zeros((0, n_v)),
            "cell": None,
            "response": resp,
        }
    rows = att[positions, s:e]
    sums = rows.sum(dim=1, keepdim=True).clamp_min(1e-12)
    rows = (rows / sums).detach().cpu().numpy()
    mean = rows.mean(axis=0)
    grid = mean.reshape(side, side)
    flat = int(mean.argmax())
    return {
        "grid": grid,
        "matrix": rows,
        "cell": (flat // side, flat % side),
        "response": resp,
    }


def attention_report(
    ckpt_path: str,
    out_dir: str | None = None,
    *,
    n_scenes: int = 60,
    dump_first: int = 4,
    settings: GenSettings | None = None,
    seed: int = 0,
    progress=None,
) -> dict:
    """Localization accuracy of the answer's image attention for both speech
    routes, over scenes with an unambiguous color question."""
    model, _info = load_checkpoint(ckpt_path)
    model.eval()
    settings = settings or GenSettings.toy()

    rng = random.Random(seed)
    probes = []
    while len(probes) < n_scenes:
        spec = sample_scene(rng.getrandbits(48))
        gt = ground_truth(spec)
        color_qs = [q for q, _a in gt["qa"][1:-12]]
        if not color_qs:
            continue
        question = rng.choice(color_qs)
        cell = queried_cell(spec, question)
        if cell is None:
            continue
        probes.append((spec, question, cell))

    results = {"n": n_scenes, "paradigms": {}}
    dumps = []
    for paradigm in ("chain", "direct"):
        hits = 0
        defined = 0
        for k, (spec, question, cell) in enumerate(probes):
            image = torch.as_tensor(render(spec), dtype=torch.float32)
            probe = attention_probe(
                model, image, question,
                paradigm=paradigm, settings=settings, seed=seed * 31 + k,
            )
            if probe["cell"] is not None:
                defined += 1
                hits += probe["cell"] == cell
            if out_dir is not None and k < dump_first:
                os.makedirs(out_dir, exist_ok=True)
                stem = f"attn_{paradigm}_{k:02d}"
                write_heatmap_ppm(probe["grid"], os.path.join(out_dir, stem + ".ppm"))
                np.savetxt(
                    os.path.join(out_dir, stem + ".csv"),
                    probe["matrix"], fmt="%.8f", delimiter=",",
                )
                dumps.append(
                    {
                        "file": stem + ".ppm",
                        "matrix_file": stem + ".csv",
                        "paradigm": paradigm,
                        "question": question,
                        "true_cell": list(cell),
                        "predicted_cell": (
                            list(probe["cell"]) if probe["cell"] is not None else None
                        ),
                    }
                )
            if progress is not None:
                progress(paradigm, k + 1, n_scenes)
        results["paradigms"][paradigm] = {
            "accuracy": hits / defined if defined else 0.0,
            "defined": defined,
            "hits": hits,
        }
    results["chance"] = 1.0 / 16.0
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        results["dumps"] = dumps
        with open(os.path.join(out_dir, "attention.json"), "w", encoding="utf-8") as fh:
            fh.write(_dumps(results) + "\n")
    return results
