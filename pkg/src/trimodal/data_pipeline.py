"""Dataset construction: prompts, chat-style examples, stages, and batching.

Every training or evaluation row is a short chat: user turns carry an
optional image slot, prompt text, and speech spans; assistant turns carry
the target text or speech. Prompt sentences come from fixed pools so the
model sees varied instructions for the same task. The loss mask covers
assistant tokens only.
"""

from __future__ import annotations

import json
import os
import random
import string
from dataclasses import dataclass, field

import numpy as np

from . import scene_world
from .core_model import BRIDGE_TEMPLATES, IO_CONFIGS, _IO_IN, _IO_OUT
from .scene_world import SceneSpec, caption, ground_truth, sample_scene
from .speech_codec import (
    OUTPUT_ACCENT,
    OUTPUT_SPEED,
    SPEED_GRID,
    SPOKEN_ALPHABET,
    TRAIN_ACCENTS,
    CodecConfig,
    SpeechClip,
    clip_from_dict,
    clip_to_dict,
    speakable_text,
    tokens_per_char,
    tts_encode,
)
from .tokenizer import TokenSeq, UnifiedVocab, encode_text

TASKS = ("ASR", "TTS", "IC", "VQA")
STAGES = ("pre1", "pre2", "sft")

# Speech duration convention: one second of audio covers this many characters
# at unit speed, so the unit rate is base_rate * CHARS_PER_SECOND per second.
CHARS_PER_SECOND = 10
PRE_CAP_SECONDS = 5
SFT_CAP_SECONDS = 10

# Canonical example-count keys, also the emission order inside a stage.
COUNT_KEYS = (
    "asr",
    "tts",
    "ic_ttt",
    "ic_tts",
    "ic_stt",
    "ic_sts",
    "vqa_ttt",
    "vqa_tts",
    "vqa_stt",
    "vqa_sts",
)
_PRE1_KEYS = ("asr", "tts")


def units_per_second(codec: CodecConfig) -> int:
    return codec.base_rate * CHARS_PER_SECOND


def stage_cap_units(codec: CodecConfig, stage: str) -> int:
    seconds = SFT_CAP_SECONDS if stage in ("sft", "eval") else PRE_CAP_SECONDS
    return seconds * units_per_second(codec)


@dataclass(frozen=True)
class PipelineConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    accents: tuple[str, ...] = TRAIN_ACCENTS
    speeds: tuple[float, ...] = SPEED_GRID
    noise_rate: float = 0.05
    noisy_fraction: float = 0.2
    # Chain-style rows exist only in sft. Speech-answer rows for IC/VQA are
    # chain by default; direct decoding of those combos is learned in pre2.
    tts_chain_fraction: float = 0.5
    speech_answer_chain_fraction: float = 1.0
    multiturn_fraction: float = 0.25
    max_turns: int = 3

    def validate(self) -> None:
        self.codec.validate()
        for a in self.accents:
            if a not in self.codec.accents:
                raise ValueError(f"accent {a!r} not defined by the codec")
        for s in self.speeds:
            if s not in self.codec.speed_grid:
                raise ValueError(f"speed {s} not in the codec speed grid")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError("noise_rate must lie in [0, 1)")


@dataclass
class TrimodalExample:
    """One chat row. turns is a list of {"role", "segments"} dicts; segments
    are {"kind": "image"} | {"kind": "text", "text"} | {"kind": "speech", "clip"}.
    Held-out rows carry their references in meta (ref_text, question)."""

    id: str
    task: str
    io_config: str
    stage: str
    scene_id: int | None
    turns: list[dict]
    meta: dict | None = None


def text_seg(text: str) -> dict:
    return {"kind": "text", "text": text}


def image_seg() -> dict:
    return {"kind": "image"}


def speech_seg(clip: SpeechClip) -> dict:
    return {"kind": "speech", "clip": clip}


# ---------------------------------------------------------------------------
# Prompt pools and plans


_POOLS: dict | None = None


def _pools() -> dict:
    global _POOLS
    if _POOLS is None:
        path = os.path.join(os.path.dirname(__file__), "prompts", "pools.json")
        with open(path, encoding="utf-8") as fh:
            _POOLS = json.load(fh)
    return _POOLS


_TRAIN_POOL_KEY = {
    ("ASR", "STT"): "ASR",
    ("TTS", "TTS"): "TTS",
    ("IC", "TTT"): "IC_TTT_STS",
    ("IC", "STS"): "IC_TTT_STS",
    ("IC", "TTS"): "IC_TTS",
    ("IC", "STT"): "IC_STT",
    ("VQA", "TTS"): "VQA_TTS",
    ("VQA", "STT"): "VQA_STT",
}


def _check_pair(task: str, io_config: str) -> None:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if io_config not in IO_CONFIGS:
        raise ValueError(f"unknown io_config {io_config!r}")
    if task == "ASR" and io_config != "STT":
        raise ValueError("ASR is speech-to-text only")
    if task == "TTS" and io_config != "TTS":
        raise ValueError("TTS is text-to-speech only")


def plan_prompt(
    task: str,
    io_config: str,
    *,
    question: str | None = None,
    transcript: str | None = None,
    pool: str = "train",
    seed: int = 0,
    with_image: bool | None = None,
    spoken_alphabet: str = SPOKEN_ALPHABET,
) -> list[tuple[str, str | None]]:
    """Lay out one user prompt as (kind, value) parts.

    kind "image" -> the image slot, "text" -> literal text, "speech" -> a
    speech span; a str value on a speech part is the sentence to voice, None
    means the caller supplies the clip (the task payload).
    """
    _check_pair(task, io_config)
    if pool not in ("train", "eval"):
        raise ValueError(f"unknown prompt pool {pool!r}")
    if with_image is None:
        with_image = task in ("IC", "VQA")
    pools = _pools()
    suffix = pools["VQA_SUFFIX"]
    q = question if question is not None else "{question}"
    t = transcript if transcript is not None else "{transcript}"

    parts: list[tuple[str, str | None]] = []
    if with_image:
        parts += [("image", None), ("text", "\n")]

    if pool == "eval":
        ev = pools["EVAL"][f"{task}_{io_config}"]
        if task == "ASR":
            parts += [("text", ev["prompt"]), ("speech", None)]
        elif task == "TTS":
            parts += [("text", ev["prompt"] + t)]
        elif task == "IC":
            if _IO_IN[io_config] == "S":
                parts += [("speech", speakable_text(ev["prompt"], spoken_alphabet))]
            else:
                parts += [("text", ev["prompt"])]
        else:
            if io_config == "TTT":
                parts += [("text", q)]
            elif io_config == "STS":
                parts += [("speech", question)]
            elif io_config == "TTS":
                parts += [("text", ev["prompt"] + "\n" + q)]
            else:
                parts += [("text", ev["prompt"] + "\n"), ("speech", question)]
            parts += [("text", "\n" + suffix)]
        return _merge_text(parts)

    rng = random.Random(seed)
    if task == "ASR":
        parts += [("text", rng.choice(pools["ASR"])), ("speech", None)]
    elif task == "TTS":
        parts += [("text", rng.choice(pools["TTS"]) + t)]
    elif task == "IC":
        sentence = rng.choice(pools[_TRAIN_POOL_KEY[(task, io_config)]])
        if _IO_IN[io_config] == "S":
            parts += [("speech", speakable_text(sentence, spoken_alphabet))]
        else:
            parts += [("text", sentence)]
    else:
        if io_config == "TTT":
            parts += [("text", q)]
        elif io_config == "STS":
            parts += [("speech", question)]
        else:
            sentence = rng.choice(pools[_TRAIN_POOL_KEY[(task, io_config)]])
            if io_config == "TTS":
                parts += [("text", sentence + "\n" + q)]
            else:
                parts += [("text", sentence + "\n"), ("speech", question)]
        parts += [("text", "\n" + suffix)]
    return _merge_text(parts)


def _merge_text(parts: list[tuple[str, str | None]]) -> list[tuple[str, str | None]]:
    out: list[tuple[str, str | None]] = []
    for kind, value in parts:
        if kind == "text" and out and out[-1][0] == "text":
            out[-1] = ("text", out[-1][1] + value)
        else:
            out.append((kind, value))
    return out


def render_prompt(
    task: str,
    io_config: str,
    *,
    question: str | None = None,
    transcript: str | None = None,
    pool: str = "train",
    seed: int = 0,
) -> str:
    """Human-readable prompt string: the image slot prints as its marker and
    speech spans print as a bracketed span placeholder."""
    parts = plan_prompt(
        task, io_config, question=question, transcript=transcript, pool=pool, seed=seed
    )
    pieces = []
    for kind, value in parts:
        if kind == "image":
            pieces.append("⟨image⟩")
        elif kind == "speech":
            pieces.append("⟨boa⟩…⟨eoa⟩")
        else:
            pieces.append(value)
    return "".join(pieces)


def prompt_speech_text(
    task: str,
    io_config: str,
    *,
    question: str | None = None,
    pool: str = "eval",
    seed: int = 0,
    spoken_alphabet: str = SPOKEN_ALPHABET,
) -> str | None:
    """The sentence a speech-input prompt voices, or None when the speech
    span is an opaque payload (ASR) or the question text is unknown."""
    parts = plan_prompt(
        task,
        io_config,
        question=question,
        pool=pool,
        seed=seed,
        spoken_alphabet=spoken_alphabet,
    )
    for kind, value in parts:
        if kind == "speech" and isinstance(value, str):
            return value
    return None


# ---------------------------------------------------------------------------
# Token assembly


def _segments_to_ids(vocab: UnifiedVocab, segments: list[dict]) -> list[int]:
    ids: list[int] = []
    for seg in segments:
        kind = seg["kind"]
        if kind == "image":
            ids += [vocab.boi, vocab.img, vocab.eoi]
        elif kind == "text":
            ids += encode_text(vocab, seg["text"])
        elif kind == "speech":
            clip = seg["clip"]
            ids.append(vocab.boa)
            ids += [vocab.speech_id(u) for u in clip.units]
            ids.append(vocab.eoa)
        else:
            raise ValueError(f"unknown segment kind {kind!r}")
    return ids


def build_prompt_tokens(
    vocab: UnifiedVocab,
    task: str,
    io_config: str,
    *,
    payload=None,
    pool: str = "eval",
    seed: int = 0,
    with_image: bool | None = None,
) -> TokenSeq:
    """Tokens for one user turn, ready for fusion: leading bos, the prompt
    parts, and the newline that closes the turn."""
    question = payload if task == "VQA" and isinstance(payload, str) else None
    transcript = payload if task == "TTS" and isinstance(payload, str) else None
    clip = payload if isinstance(payload, SpeechClip) else None
    if task == "TTS" and transcript is None:
        raise ValueError("TTS prompts need the transcript text")
    if task == "VQA" and _IO_IN[io_config] == "T" and question is None:
        raise ValueError("text-input VQA prompts need the question string")

    parts = plan_prompt(
        task,
        io_config,
        question=question,
        transcript=transcript,
        pool=pool,
        seed=seed,
        with_image=with_image,
    )
    segments: list[dict] = []
    for kind, value in parts:
        if kind == "image":
            segments.append(image_seg())
        elif kind == "text":
            segments.append(text_seg(value))
        else:
            if clip is None:
                raise ValueError("prompt has a speech span but no SpeechClip payload")
            segments.append(speech_seg(clip))
    ids = [vocab.bos] + _segments_to_ids(vocab, segments) + encode_text(vocab, "\n")
    return TokenSeq.from_ids(vocab, ids)


def extend_with_bridge(
    vocab: UnifiedVocab, prompt: TokenSeq, task: str, intermediate: str
) -> TokenSeq:
    """Append the chain hand-off: the intermediate text answer as a finished
    assistant turn (skipped for TTS, whose transcript is already in the
    prompt), then the bridge sentence as a fresh user turn."""
    if task not in ("IC", "VQA", "TTS"):
        raise ValueError(f"no bridge defined for task {task!r}")
    ids = list(prompt.ids)
    if task != "TTS":
        ids += encode_text(vocab, intermediate) + [vocab.eos]
    template = BRIDGE_TEMPLATES[task]
    bridge = template.format(text=intermediate) if "{text}" in template else template
    ids += encode_text(vocab, bridge) + encode_text(vocab, "\n")
    return TokenSeq.from_ids(vocab, ids)


def example_to_tokens(vocab: UnifiedVocab, ex: TrimodalExample) -> tuple[TokenSeq, list[bool]]:
    """Flatten a chat row into ids plus the assistant-only loss mask.

    User turns close with a newline, assistant turns with eos; both the
    markers and the payload of assistant turns are supervised.
    """
    if not ex.turns:
        raise ValueError("example has no turns")
    if ex.turns[0]["role"] != "user":
        raise ValueError("first turn must be a user turn")
    if ex.turns[-1]["role"] != "assistant":
        raise ValueError("last turn must be an assistant turn")

    ids = [vocab.bos]
    mask = [False]
    images = 0
    for turn_idx, turn in enumerate(ex.turns):
        role = turn["role"]
        seg_ids = _segments_to_ids(vocab, turn["segments"])
        n_img = sum(1 for seg in turn["segments"] if seg["kind"] == "image")
        images += n_img
        if n_img and turn_idx != 0:
            raise ValueError("the image slot may only appear in the first turn")
        if role == "user":
            seg_ids += encode_text(vocab, "\n")
            ids += seg_ids
            mask += [False] * len(seg_ids)
        elif role == "assistant":
            seg_ids += [vocab.eos]
            ids += seg_ids
            mask += [True] * len(seg_ids)
        else:
            raise ValueError(f"unknown role {role!r}")
    if images > 1:
        raise ValueError("at most one image slot per example")
    return TokenSeq.from_ids(vocab, ids), mask


# ---------------------------------------------------------------------------
# Example builders


_LETTERS = string.ascii_lowercase


def _sample_payload_text(rng: random.Random, max_chars: int) -> str:
    """Speakable text for ASR/TTS payloads: scene captions, scene questions,
    or random letter strings."""
    roll = rng.random()
    if roll < 0.5:
        text = caption(sample_scene(rng.getrandbits(48)))
    elif roll < 0.75:
        gt = ground_truth(sample_scene(rng.getrandbits(48)))
        text = rng.choice(gt["qa"])[0]
    else:
        words = [
            "".join(rng.choice(_LETTERS) for _ in range(rng.randint(2, 7)))
            for _ in range(rng.randint(2, 5))
        ]
        text = " ".join(words)
    text = text[:max_chars].strip()
    return text or "a"


def _input_clip(pcfg: PipelineConfig, rng: random.Random, stage: str, text: str,
                accent: str | None = None, speed: float | None = None) -> SpeechClip:
    if accent is None:
        accent = rng.choice(pcfg.accents)
    if speed is None:
        # The stage duration cap binds every speech segment, so slow speeds
        # are off the table for long sentences; failing even the fastest
        # speed, the sentence itself is cut to fit.
        cap = stage_cap_units(pcfg.codec, stage)
        fits = [s for s in pcfg.speeds if tokens_per_char(pcfg.codec, s) * len(text) <= cap]
        speed = rng.choice(fits or [max(pcfg.speeds)])
        text = text[: max(1, cap // tokens_per_char(pcfg.codec, speed))]
    noise = 0.0
    if stage != "eval" and rng.random() < pcfg.noisy_fraction:
        noise = pcfg.noise_rate
    return tts_encode(
        pcfg.codec, text, accent, speed, noise_rate=noise, seed=rng.getrandbits(32)
    )


def _output_clip(pcfg: PipelineConfig, text: str) -> SpeechClip:
    # Model-side speech is always the canonical voice at unit speed.
    return tts_encode(pcfg.codec, text, OUTPUT_ACCENT, OUTPUT_SPEED, noise_rate=0.0)


def _user_turn(parts: list[tuple[str, str | None]], clip: SpeechClip | None) -> dict:
    segments: list[dict] = []
    for kind, value in parts:
        if kind == "image":
            segments.append(image_seg())
        elif kind == "text":
            segments.append(text_seg(value))
        else:
            if clip is None:
                raise ValueError("speech part without a clip")
            segments.append(speech_seg(clip))
            clip = None
    return {"role": "user", "segments": segments}


def _assistant(segments: list[dict]) -> dict:
    return {"role": "assistant", "segments": segments}


def _build_asr(stage: str, pcfg: PipelineConfig, rng: random.Random, pool: str):
    cap = stage_cap_units(pcfg.codec, stage)
    speed = rng.choice(pcfg.speeds)
    max_chars = max(1, cap // tokens_per_char(pcfg.codec, speed))
    text = _sample_payload_text(rng, max_chars)
    clip = _input_clip(pcfg, rng, stage, text, speed=speed)
    parts = plan_prompt(
        "ASR", "STT", pool=pool, seed=rng.getrandbits(32),
        spoken_alphabet=pcfg.codec.alphabet,
    )
    turns = [_user_turn(parts, clip), _assistant([text_seg(text)])]
    return "ASR", "STT", None, turns, {"ref_text": text}


def _build_tts(stage: str, pcfg: PipelineConfig, rng: random.Random, pool: str):
    cap = stage_cap_units(pcfg.codec, stage)
    max_chars = max(1, cap // tokens_per_char(pcfg.codec, OUTPUT_SPEED))
    text = _sample_payload_text(rng, max_chars)
    target = _output_clip(pcfg, text)
    parts = plan_prompt(
        "TTS", "TTS", transcript=text, pool=pool, seed=rng.getrandbits(32),
        spoken_alphabet=pcfg.codec.alphabet,
    )
    turns = [_user_turn(parts, None)]
    if stage == "sft" and rng.random() < pcfg.tts_chain_fraction:
        turns.append(_user_turn([("text", BRIDGE_TEMPLATES["TTS"])], None))
    turns.append(_assistant([speech_seg(target)]))
    return "TTS", "TTS", None, turns, {"ref_text": text}


def _speech_answer_turns(
    pcfg: PipelineConfig,
    rng: random.Random,
    stage: str,
    task: str,
    answer_text: str,
) -> tuple[list[dict], bool]:
    """Assistant side of a speech-answer row; chain rows interleave the text
    answer and the bridge turn before the speech span."""
    out_clip = _output_clip(pcfg, answer_text)
    chain = stage == "sft" and rng.random() < pcfg.speech_answer_chain_fraction
    if not chain:
        return [_assistant([speech_seg(out_clip)])], False
    bridge = BRIDGE_TEMPLATES[task].format(text=answer_text)
    return (
        [
            _assistant([text_seg(answer_text)]),
            _user_turn([("text", bridge)], None),
            _assistant([speech_seg(out_clip)]),
        ],
        True,
    )


def _build_ic(io_config: str, stage: str, pcfg: PipelineConfig, rng: random.Random, pool: str):
    spec = sample_scene(rng.getrandbits(48))
    cap_text = caption(spec)
    parts = plan_prompt(
        "IC", io_config, pool=pool, seed=rng.getrandbits(32),
        spoken_alphabet=pcfg.codec.alphabet,
    )
    clip = None
    for kind, value in parts:
        if kind == "speech":
            clip = _input_clip(pcfg, rng, stage, value)
    turns = [_user_turn(parts, clip)]
    if _IO_OUT[io_config] == "T":
        ref = cap_text
        turns.append(_assistant([text_seg(cap_text)]))
    else:
        cap = stage_cap_units(pcfg.codec, stage)
        max_chars = max(1, cap // tokens_per_char(pcfg.codec, OUTPUT_SPEED))
        ref = cap_text[:max_chars].strip()
        tail, _ = _speech_answer_turns(pcfg, rng, stage, "IC", ref)
        turns += tail
    return "IC", io_config, spec, turns, {"ref_text": ref}


def _pick_qa(rng: random.Random, gt: dict) -> tuple[str, str]:
    """Balanced over answer kinds: 1/4 counting, 1/4 color naming when a
    unique shape exists, the rest existence with yes/no evened out."""
    qa = gt["qa"]
    count_qa = qa[0]
    exist = qa[-12:]
    colors = qa[1:-12]
    roll = rng.random()
    if roll < 0.25:
        return count_qa
    if roll < 0.5 and colors:
        return rng.choice(colors)
    yes = [p for p in exist if p[1] == "yes"]
    no = [p for p in exist if p[1] == "no"]
    side = yes if (rng.random() < 0.5 and yes) else no
    return rng.choice(side or exist)


def _build_vqa(io_config: str, stage: str, pcfg: PipelineConfig, rng: random.Random, pool: str):
    spec = sample_scene(rng.getrandbits(48))
    gt = ground_truth(spec)
    text_out = _IO_OUT[io_config] == "T"
    rounds = 1
    if stage == "sft" and text_out and rng.random() < pcfg.multiturn_fraction:
        rounds = rng.randint(2, pcfg.max_turns)

    seen: set[str] = set()
    picks: list[tuple[str, str]] = []
    for _ in range(rounds):
        for _attempt in range(8):
            q, a = _pick_qa(rng, gt)
            if q not in seen:
                break
        seen.add(q)
        picks.append((q, a))

    turns: list[dict] = []
    for round_idx, (q, a) in enumerate(picks):
        parts = plan_prompt(
            "VQA", io_config, question=q, pool=pool, seed=rng.getrandbits(32),
            with_image=round_idx == 0, spoken_alphabet=pcfg.codec.alphabet,
        )
        clip = _input_clip(pcfg, rng, stage, q) if _IO_IN[io_config] == "S" else None
        turns.append(_user_turn(parts, clip))
        if text_out:
            turns.append(_assistant([text_seg(a)]))
        else:
            tail, _ = _speech_answer_turns(pcfg, rng, stage, "VQA", a)
            turns += tail
    q0, a0 = picks[0]
    return "VQA", io_config, spec, turns, {"question": q0, "ref_text": a0}


def _build_one(key: str, stage: str, pcfg: PipelineConfig, rng: random.Random, pool: str):
    if key == "asr":
        return _build_asr(stage, pcfg, rng, pool)
    if key == "tts":
        return _build_tts(stage, pcfg, rng, pool)
    task, io = key.split("_")
    io = io.upper()
    if task == "ic":
        return _build_ic(io, stage, pcfg, rng, pool)
    return _build_vqa(io, stage, pcfg, rng, pool)


def build_stage(
    stage: str,
    counts: dict[str, int],
    pcfg: PipelineConfig | None = None,
    seed: int = 0,
) -> tuple[list[TrimodalExample], list[SceneSpec]]:
    """Deterministic example set for one training stage.

    Stage pre1 admits only speech<->text pairs; pre2 and sft admit every
    count key. Scenes are returned side by side and referenced by index.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    pcfg = pcfg or PipelineConfig()
    pcfg.validate()
    _check_counts(counts)
    if stage == "pre1":
        bad = [k for k, v in counts.items() if v > 0 and k not in _PRE1_KEYS]
        if bad:
            raise ValueError(f"stage pre1 is speech/text alignment only; got {bad}")
    return _emit(stage, counts, pcfg, seed, pool="train")


def build_eval_set(
    counts: dict[str, int],
    pcfg: PipelineConfig | None = None,
    seed: int = 0,
) -> tuple[list[TrimodalExample], list[SceneSpec]]:
    """Held-out rows: fixed eval prompts, clean input speech, direct targets."""
    pcfg = pcfg or PipelineConfig()
    pcfg.validate()
    _check_counts(counts)
    return _emit("eval", counts, pcfg, seed, pool="eval")


def _check_counts(counts: dict[str, int]) -> None:
    for key, value in counts.items():
        if key not in COUNT_KEYS:
            raise ValueError(f"unknown count key {key!r}")
        if not isinstance(value, int) or value < 0:
            raise ValueError(f"count for {key!r} must be a non-negative int")


def _emit(stage, counts, pcfg, seed, pool):
    rng = random.Random(seed)
    examples: list[TrimodalExample] = []
    scenes: list[SceneSpec] = []
    for key in COUNT_KEYS:
        for i in range(counts.get(key, 0)):
            task, io, spec, turns, meta = _build_one(key, stage, pcfg, rng, pool)
            scene_id = None
            if spec is not None:
                scene_id = len(scenes)
                scenes.append(spec)
            examples.append(
                TrimodalExample(
                    id=f"{stage}-{key}-{i:06d}",
                    task=task,
                    io_config=io,
                    stage=stage,
                    scene_id=scene_id,
                    turns=turns,
                    meta=meta if pool == "eval" else None,
                )
            )
    return examples, scenes


def parse_counts(text: str) -> dict[str, int]:
    """Parse "asr=1000,ic=400,vqa_tts=64". Task-level keys (ic, vqa) spread
    evenly over the four io configs, earlier configs absorbing the remainder;
    explicit task_io keys override the spread."""
    groups: dict[str, int] = {}
    explicit: dict[str, int] = {}
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "=" not in chunk:
            raise ValueError(f"bad count entry {chunk!r}; expected key=value")
        key, _, value = chunk.partition("=")
        key = key.strip().lower()
        try:
            n = int(value)
        except ValueError:
            raise ValueError(f"bad count value in {chunk!r}") from None
        if n < 0:
            raise ValueError(f"negative count in {chunk!r}")
        if key in ("ic", "vqa"):
            groups[key] = n
        elif key in COUNT_KEYS:
            explicit[key] = n
        else:
            raise ValueError(f"unknown count key {key!r}")
    counts: dict[str, int] = {}
    for task, total in groups.items():
        ios = ["ttt", "tts", "stt", "sts"]
        base, rem = divmod(total, len(ios))
        for j, io in enumerate(ios):
            counts[f"{task}_{io}"] = base + (1 if j < rem else 0)
    counts.update(explicit)
    return counts


# ---------------------------------------------------------------------------
# Statistics


@dataclass
class DatasetStats:
    rows: list[dict]
    totals: dict

    def to_json_dict(self) -> dict:
        return {"rows": self.rows, "totals": self.totals}

    def to_text(self) -> str:
        header = ("group", "samples", "images", "text_tok", "speech_tok", "speech_s")
        table = [header]
        for row in self.rows + [dict(self.totals, group="total")]:
            table.append(
                (
                    row["group"],
                    str(row["samples"]),
                    str(row["images"]),
                    str(row["text_tokens"]),
                    str(row["speech_tokens"]),
                    f"{row['speech_seconds']:.1f}",
                )
            )
        widths = [max(len(r[c]) for r in table) for c in range(len(header))]
        lines = []
        for r in table:
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
        return "\n".join(lines) + "\n"


def compute_stats(examples: list[TrimodalExample], codec: CodecConfig) -> DatasetStats:
    rate = units_per_second(codec)
    acc: dict[str, dict] = {}
    order: list[str] = []
    for ex in examples:
        source = "synthtext" if ex.task in ("ASR", "TTS") else "scenes"
        label = ex.task if ex.task in ("ASR", "TTS") else f"{ex.task}-{ex.io_config}"
        group = f"{source}/{label}"
        if group not in acc:
            acc[group] = {
                "group": group,
                "samples": 0,
                "images": 0,
                "text_tokens": 0,
                "speech_tokens": 0,
                "speech_seconds": 0.0,
            }
            order.append(group)
        row = acc[group]
        row["samples"] += 1
        text_tok = 0
        speech_tok = 0
        has_img = False
        for turn in ex.turns:
            for seg in turn["segments"]:
                if seg["kind"] == "text":
                    text_tok += len(seg["text"])
                elif seg["kind"] == "speech":
                    speech_tok += len(seg["clip"].units)
                else:
                    has_img = True
        row["images"] += int(has_img)
        row["text_tokens"] += text_tok
        row["speech_tokens"] += speech_tok
        row["speech_seconds"] += speech_tok / rate
    totals = {
        "samples": sum(r["samples"] for r in acc.values()),
        "images": sum(r["images"] for r in acc.values()),
        "text_tokens": sum(r["text_tokens"] for r in acc.values()),
        "speech_tokens": sum(r["speech_tokens"] for r in acc.values()),
        "speech_seconds": sum(r["speech_seconds"] for r in acc.values()),
    }
    return DatasetStats(rows=[acc[g] for g in order], totals=totals)


# ---------------------------------------------------------------------------
# Batching


@dataclass
class PackedBatch:
    tokens: list[list[int]]
    loss_masks: list[list[bool]]
    ids: np.ndarray
    mask: np.ndarray
    lengths: list[int]
    fused_lengths: list[int]
    img_pos: list[int | None]
    scene_ids: list[int | None]


def pack_batch(
    vocab: UnifiedVocab,
    examples: list[TrimodalExample],
    *,
    n_v: int,
    max_tokens: int,
    overlength: str = "error",
) -> PackedBatch:
    """Flatten examples to padded id arrays plus the bookkeeping the trainer
    needs for embedding-level image splicing. Lengths are checked against the
    post-splice budget, where the image slot grows by n_v - 1 positions."""
    if overlength not in ("error", "skip"):
        raise ValueError("overlength must be 'error' or 'skip'")
    tokens: list[list[int]] = []
    masks: list[list[bool]] = []
    img_pos: list[int | None] = []
    scene_ids: list[int | None] = []
    fused_lengths: list[int] = []
    for ex in examples:
        seq, mask = example_to_tokens(vocab, ex)
        pos = seq.ids.index(vocab.img) if vocab.img in seq.ids else None
        fused = len(seq) + (n_v - 1 if pos is not None else 0)
        if fused > max_tokens:
            if overlength == "skip":
                continue
            raise ValueError(
                f"example {ex.id} needs {fused} positions after fusion, budget {max_tokens}"
            )
        tokens.append(seq.ids)
        masks.append(mask)
        img_pos.append(pos)
        scene_ids.append(ex.scene_id)
        fused_lengths.append(fused)
    lengths = [len(t) for t in tokens]
    width = max(lengths, default=0)
    ids = np.full((len(tokens), width), vocab.pad, dtype=np.int64)
    lm = np.zeros((len(tokens), width), dtype=bool)
    for i, (t, m) in enumerate(zip(tokens, masks)):
        ids[i, : len(t)] = t
        lm[i, : len(t)] = m
    return PackedBatch(
        tokens=tokens,
        loss_masks=masks,
        ids=ids,
        mask=lm,
        lengths=lengths,
        fused_lengths=fused_lengths,
        img_pos=img_pos,
        scene_ids=scene_ids,
    )


# ---------------------------------------------------------------------------
# Serialization


def example_to_dict(ex: TrimodalExample) -> dict:
    turns = []
    for turn in ex.turns:
        segs = []
        for seg in turn["segments"]:
            if seg["kind"] == "speech":
                segs.append({"kind": "speech", "clip": clip_to_dict(seg["clip"])})
            else:
                segs.append(dict(seg))
        turns.append({"role": turn["role"], "segments": segs})
    out = {
        "id": ex.id,
        "task": ex.task,
        "io_config": ex.io_config,
        "stage": ex.stage,
        "scene_id": ex.scene_id,
        "turns": turns,
    }
    if ex.meta is not None:
        out["meta"] = ex.meta
    return out


def example_from_dict(d: dict) -> TrimodalExample:
    turns = []
    for turn in d["turns"]:
        segs = []
        for seg in turn["segments"]:
            if seg["kind"] == "speech":
                segs.append({"kind": "speech", "clip": clip_from_dict(seg["clip"])})
            else:
                segs.append(dict(seg))
        turns.append({"role": turn["role"], "segments": segs})
    return TrimodalExample(
        id=d["id"],
        task=d["task"],
        io_config=d["io_config"],
        stage=d["stage"],
        scene_id=d["scene_id"],
        turns=turns,
        meta=d.get("meta"),
    )


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_manifest(examples: list[TrimodalExample], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(_dumps(example_to_dict(ex)) + "\n")


def load_manifest(path: str) -> list[TrimodalExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(example_from_dict(json.loads(line)))
    return out


def build_dataset(
    out_dir: str,
    stage: str,
    counts: dict[str, int],
    pcfg: PipelineConfig | None = None,
    seed: int = 0,
) -> tuple[list[TrimodalExample], list[SceneSpec], DatasetStats]:
    """Build one stage (or the eval set for stage "eval") and write the
    manifest, scene store, stats, and meta files under out_dir."""
    pcfg = pcfg or PipelineConfig()
    if stage == "eval":
        examples, scenes = build_eval_set(counts, pcfg, seed)
    else:
        examples, scenes = build_stage(stage, counts, pcfg, seed)
    os.makedirs(out_dir, exist_ok=True)
    save_manifest(examples, os.path.join(out_dir, "manifest.jsonl"))
    scene_world.save_scene_store(scenes, out_dir)
    stats = compute_stats(examples, pcfg.codec)
    with open(os.path.join(out_dir, "stats.json"), "w", encoding="utf-8") as fh:
        fh.write(_dumps(stats.to_json_dict()) + "\n")
    with open(os.path.join(out_dir, "stats.txt"), "w", encoding="utf-8") as fh:
        fh.write(stats.to_text())
    meta = {
        "stage": stage,
        "counts": {k: counts.get(k, 0) for k in COUNT_KEYS},
        "seed": seed,
        "accents": list(pcfg.accents),
        "speeds": list(pcfg.speeds),
        "noise_rate": pcfg.noise_rate,
        "noisy_fraction": pcfg.noisy_fraction,
        "cap_units": stage_cap_units(pcfg.codec, stage),
        "speech_token_count": pcfg.codec.d_s,
        "base_rate": pcfg.codec.base_rate,
    }
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        fh.write(_dumps(meta) + "\n")
    return examples, scenes, stats


def load_dataset(out_dir: str):
    """Returns (examples, scene specs, scene pixels, meta)."""
    examples = load_manifest(os.path.join(out_dir, "manifest.jsonl"))
    specs, pixels = scene_world.load_scene_store(out_dir)
    with open(os.path.join(out_dir, "meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    return examples, specs, pixels, meta
