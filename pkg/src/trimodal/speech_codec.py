"""Synthetic invertible speech codec.

A clip is a sequence of discrete unit ids in [0, d_s). Encoding maps each
character to one unit repeated according to speaking speed; an accent is a
named permutation of the unit inventory, so every (accent, speed) pair has an
exact inverse. Decoding majority-votes each repetition group, which also
absorbs light substitution noise. There is no waveform anywhere: the unit
sequence itself plays the role of audio.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

# Characters that may appear inside spoken payloads. A strict subset of the
# text alphabet so any decoded transcript is also encodable as text tokens.
SPOKEN_ALPHABET = "abcdefghijklmnopqrstuvwxyz 1234?"

SPEED_GRID = (0.7, 0.85, 1.0, 1.15, 1.3)

# Multiplier for the bigram bucket hash. Chosen odd and not a divisor-friendly
# power of two so (u, u) bigrams of distinct units land in distinct buckets
# for the default d_s.
_BIGRAM_MULT = 131


def _rotation(d_s: int, shift: int) -> tuple[int, ...]:
    return tuple((i + shift) % d_s for i in range(d_s))


@dataclass(frozen=True)
class CodecConfig:
    d_s: int = 128
    base_rate: int = 2
    base_stride: int = 1
    alphabet: str = SPOKEN_ALPHABET
    accents: dict[str, tuple[int, ...]] = None
    speed_grid: tuple[float, ...] = SPEED_GRID
    noise_rate: float = 0.0

    def __post_init__(self):
        if self.accents is None:
            object.__setattr__(self, "accents", default_accents(self.d_s))
        self.validate()

    def validate(self) -> None:
        if self.d_s <= 0:
            raise ValueError("d_s must be positive")
        if self.base_rate < 1:
            raise ValueError("base_rate must be at least 1")
        if len(set(self.alphabet)) != len(self.alphabet):
            raise ValueError("codec alphabet contains duplicates")
        slots = {(a * self.base_stride) % self.d_s for a in range(len(self.alphabet))}
        if len(slots) != len(self.alphabet):
            raise ValueError("base_stride folds distinct characters onto one unit slot")
        for name, perm in self.accents.items():
            if sorted(perm) != list(range(self.d_s)):
                raise ValueError(f"accent {name!r} is not a permutation of [0, {self.d_s})")
        for s in self.speed_grid:
            if not 0.5 <= s <= 2.0:
                raise ValueError(f"speed {s} outside the supported range [0.5, 2.0]")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must be a probability")

    def char_index(self, ch: str) -> int:
        idx = self.alphabet.find(ch)
        if idx < 0:
            raise ValueError(f"character {ch!r} not in codec alphabet")
        return idx


def default_accents(d_s: int) -> dict[str, tuple[int, ...]]:
    """Block rotations: each accent realises the alphabet in a distinct unit range.

    The quarter-turn accents are the conventional training set; "scottish" sits
    between two of them so its units collide with theirs, which makes it a
    natural held-out accent for robustness sweeps.
    """
    quarter = d_s // 4
    return {
        "american": _rotation(d_s, 0),
        "british": _rotation(d_s, quarter),
        "indian": _rotation(d_s, 2 * quarter),
        "australian": _rotation(d_s, 3 * quarter),
        "scottish": _rotation(d_s, quarter // 2),
    }

TRAIN_ACCENTS = ("american", "british", "indian", "australian")
HELD_OUT_ACCENT = "scottish"

# Speech produced by the model is always graded and synthesised in this voice.
OUTPUT_ACCENT = "american"
OUTPUT_SPEED = 1.0


@dataclass(frozen=True)
class SpeechClip:
    units: tuple[int, ...]
    accent: str
    speed: float
    noise_rate: float = 0.0
    source_len: int | None = None

    def __len__(self) -> int:
        return len(self.units)


def tokens_per_char(cfg: CodecConfig, speed: float) -> int:
    if speed <= 0:
        raise ValueError("speed must be positive")
    return math.ceil(cfg.base_rate / speed)


def tts_encode(
    cfg: CodecConfig,
    text: str,
    accent: str,
    speed: float,
    noise_rate: float | None = None,
    seed: int = 0,
) -> SpeechClip:
    if not text:
        raise ValueError("cannot encode empty text")
    if accent not in cfg.accents:
        raise ValueError(f"unknown accent {accent!r}")
    if speed not in cfg.speed_grid:
        raise ValueError(f"speed {speed} not in the configured grid {cfg.speed_grid}")
    if noise_rate is None:
        noise_rate = cfg.noise_rate

    perm = cfg.accents[accent]
    r = tokens_per_char(cfg, speed)
    units = []
    for ch in text:
        unit = perm[(cfg.char_index(ch) * cfg.base_stride) % cfg.d_s]
        units.extend([unit] * r)

    if noise_rate > 0.0:
        rng = random.Random(seed)
        units = [
            rng.randrange(cfg.d_s) if rng.random() < noise_rate else u for u in units
        ]
    return SpeechClip(
        units=tuple(units),
        accent=accent,
        speed=speed,
        noise_rate=noise_rate,
        source_len=len(text),
    )


@dataclass(frozen=True)
class DecodeResult:
    text: str
    truncated: bool
    dropped_groups: int


def asr_decode_detail(cfg: CodecConfig, clip: SpeechClip, accent: str | None = None) -> DecodeResult:
    """Majority-vote each repetition group, then invert the accent permutation.

    Ties go to the smaller unit id. Groups whose voted unit does not map back
    to an alphabet character are dropped and counted; a trailing partial group
    sets the truncation flag.
    """
    if accent is None:
        accent = clip.accent
    if accent not in cfg.accents:
        raise ValueError(f"unknown accent {accent!r}")
    perm = cfg.accents[accent]
    inv = {u: slot for slot, u in enumerate(perm)}
    r = tokens_per_char(cfg, clip.speed)

    n_groups, leftover = divmod(len(clip.units), r)
    chars, dropped = [], 0
    for g in range(n_groups):
        group = clip.units[g * r : (g + 1) * r]
        counts: dict[int, int] = {}
        for u in group:
            counts[u] = counts.get(u, 0) + 1
        winner = min(counts, key=lambda u: (-counts[u], u))
        slot = inv[winner]
        a, rem = divmod(slot, cfg.base_stride) if cfg.base_stride > 1 else (slot, 0)
        if rem != 0 or a >= len(cfg.alphabet):
            dropped += 1
            continue
        chars.append(cfg.alphabet[a])
    return DecodeResult("".join(chars), truncated=leftover != 0, dropped_groups=dropped)


def asr_decode(cfg: CodecConfig, clip: SpeechClip, accent: str | None = None) -> str:
    return asr_decode_detail(cfg, clip, accent).text


def speakable_text(text: str, alphabet: str = SPOKEN_ALPHABET) -> str:
    """Normalize written text into the spoken character inventory.

    Lowercases, turns dashes and line breaks into spaces, drops anything
    still outside the alphabet, and collapses whitespace runs. Mirrors the
    text normalization a synthesis front end applies before voicing.
    """
    kept = []
    for ch in text.lower():
        if ch in "-\n\t":
            ch = " "
        if ch in alphabet:
            kept.append(ch)
    return " ".join("".join(kept).split())


def _l2(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    return v / norm if norm > 0 else v


def speech_embedding(cfg: CodecConfig, clip: SpeechClip) -> np.ndarray:
    """Unigram histogram next to a hashed bigram histogram, each L2-normalised."""
    uni = np.zeros(cfg.d_s)
    for u in clip.units:
        uni[u] += 1.0
    bi = np.zeros(cfg.d_s)
    for u, v in zip(clip.units, clip.units[1:]):
        bi[(u * _BIGRAM_MULT + v) % cfg.d_s] += 1.0
    return np.concatenate([_l2(uni), _l2(bi)])


def clip_to_dict(clip: SpeechClip) -> dict:
    d = {
        "units": list(clip.units),
        "accent": clip.accent,
        "speed": clip.speed,
        "noise_rate": clip.noise_rate,
    }
    if clip.source_len is not None:
        d["source_len"] = clip.source_len
    return d


def clip_from_dict(d: dict) -> SpeechClip:
    return SpeechClip(
        units=tuple(d["units"]),
        accent=d["accent"],
        speed=d["speed"],
        noise_rate=d.get("noise_rate", 0.0),
        source_len=d.get("source_len"),
    )


def save_clips(clips: Iterable[SpeechClip], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for clip in clips:
            f.write(json.dumps(clip_to_dict(clip), sort_keys=True) + "\n")


def load_clips(path: str) -> list[SpeechClip]:
    clips = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                clips.append(clip_from_dict(json.loads(line)))
    return clips


def resynthesize(cfg: CodecConfig, clip: SpeechClip, accent: str, speed: float) -> SpeechClip:
    """Re-encode a clean clip's transcript under a different accent and speed."""
    text = asr_decode(cfg, clip)
    return replace(
        tts_encode(cfg, text, accent, speed, noise_rate=0.0),
        source_len=clip.source_len,
    )
