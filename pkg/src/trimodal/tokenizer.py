"""Unified token vocabulary over text characters, speech units, and markers.

The id space is partitioned into three contiguous classes:

    [0, 8)                      structural marker tokens, fixed order
    [8, 8 + |alphabet|)         text characters, alphabet order
    [8 + |alphabet|, size)      discrete speech units

Speech units share the same id space as text so a single language model head
covers both output modalities.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

SPECIAL_NAMES = ("bos", "eos", "boi", "eoi", "img", "boa", "eoa", "pad")

# Default character inventory for text tokens. Prompt templates need both
# cases plus light punctuation; spoken payloads use a subset (see speech_codec).
TEXT_ALPHABET = (
    "abcdefghijklmnopqrstuvwxyz"
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    "0123456789"
    " \n.,:;?!'-\"()"
)


class Modality(enum.Enum):
    TEXT = "text"
    SPEECH = "speech"
    SPECIAL = "special"
    IMAGE = "image"


@dataclass(frozen=True)
class UnifiedVocab:
    alphabet: str
    speech_token_count: int
    surfaces: tuple[str, ...] = field(repr=False)
    text_to_id: dict[str, int] = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.surfaces)

    @property
    def text_start(self) -> int:
        return len(SPECIAL_NAMES)

    @property
    def speech_start(self) -> int:
        return len(SPECIAL_NAMES) + len(self.alphabet)

    def __getattr__(self, name: str) -> int:
        # vocab.bos, vocab.eoa, ... resolve to the marker ids.
        if name in SPECIAL_NAMES:
            return SPECIAL_NAMES.index(name)
        raise AttributeError(name)

    def class_of(self, token_id: int) -> str:
        if not 0 <= token_id < self.size:
            raise ValueError(f"token id {token_id} outside vocabulary of size {self.size}")
        if token_id < self.text_start:
            return "special"
        if token_id < self.speech_start:
            return "text"
        return "speech"

    def surface(self, token_id: int) -> str:
        if not 0 <= token_id < self.size:
            raise ValueError(f"token id {token_id} outside vocabulary of size {self.size}")
        return self.surfaces[token_id]

    def text_id(self, ch: str) -> int:
        try:
            return self.text_to_id[ch]
        except KeyError:
            raise ValueError(f"character {ch!r} not in text alphabet") from None

    def char_for(self, token_id: int) -> str:
        if self.class_of(token_id) != "text":
            raise ValueError(f"token id {token_id} is not a text token")
        return self.alphabet[token_id - self.text_start]

    def speech_id(self, unit: int) -> int:
        if not 0 <= unit < self.speech_token_count:
            raise ValueError(f"speech unit {unit} outside [0, {self.speech_token_count})")
        return self.speech_start + unit

    def unit_for(self, token_id: int) -> int:
        if self.class_of(token_id) != "speech":
            raise ValueError(f"token id {token_id} is not a speech token")
        return token_id - self.speech_start

    def modality_of(self, token_id: int) -> Modality:
        cls = self.class_of(token_id)
        if cls == "special":
            return Modality.IMAGE if token_id == self.img else Modality.SPECIAL
        return Modality(cls)


def build_vocab(text_alphabet: str = TEXT_ALPHABET, speech_token_count: int = 128) -> UnifiedVocab:
    if len(set(text_alphabet)) != len(text_alphabet):
        raise ValueError("text alphabet contains duplicate characters")
    if speech_token_count <= 0:
        raise ValueError("speech_token_count must be positive")
    surfaces = ["⟨%s⟩" % name for name in SPECIAL_NAMES]
    surfaces.extend(text_alphabet)
    surfaces.extend("⟨speech-%d⟩" % i for i in range(speech_token_count))
    text_to_id = {ch: len(SPECIAL_NAMES) + i for i, ch in enumerate(text_alphabet)}
    return UnifiedVocab(
        alphabet=text_alphabet,
        speech_token_count=speech_token_count,
        surfaces=tuple(surfaces),
        text_to_id=text_to_id,
    )


def encode_text(vocab: UnifiedVocab, text: str) -> list[int]:
    ids = []
    for pos, ch in enumerate(text):
        if ch not in vocab.text_to_id:
            raise ValueError(f"character {ch!r} at position {pos} not in text alphabet")
        ids.append(vocab.text_to_id[ch])
    return ids


def decode_text(vocab: UnifiedVocab, ids: list[int]) -> str:
    return "".join(vocab.char_for(i) for i in ids)


@dataclass
class TokenSeq:
    """Token ids with a parallel per-position modality tag."""

    ids: list[int]
    modality: list[Modality]

    def __post_init__(self):
        if len(self.ids) != len(self.modality):
            raise ValueError("ids and modality mask differ in length")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_ids(cls, vocab: UnifiedVocab, ids: list[int]) -> "TokenSeq":
        return cls(list(ids), [vocab.modality_of(i) for i in ids])

    def extend(self, other: "TokenSeq") -> None:
        self.ids.extend(other.ids)
        self.modality.extend(other.modality)


_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n"}
_UNESCAPES = {"\\\\": "\\", "\\t": "\t", "\\n": "\n"}


def _escape(surface: str) -> str:
    return "".join(_ESCAPES.get(ch, ch) for ch in surface)


def _unescape(surface: str) -> str:
    out, i = [], 0
    while i < len(surface):
        if surface[i] == "\\" and i + 1 < len(surface):
            pair = surface[i : i + 2]
            if pair in _UNESCAPES:
                out.append(_UNESCAPES[pair])
                i += 2
                continue
        out.append(surface[i])
        i += 1
    return "".join(out)


def save_vocab(vocab: UnifiedVocab, path: str) -> None:
    """One surface<TAB>id<TAB>class row per token, file order equal to id order."""
    with open(path, "w", encoding="utf-8") as f:
        for token_id, surface in enumerate(vocab.surfaces):
            f.write(f"{_escape(surface)}\t{token_id}\t{vocab.class_of(token_id)}\n")


def load_vocab(path: str) -> UnifiedVocab:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ValueError(f"line {lineno}: expected 3 tab-separated fields")
            surface, id_text, cls = parts
            if int(id_text) != lineno:
                raise ValueError(f"line {lineno}: id {id_text} out of order")
            rows.append((_unescape(surface), cls))

    classes = [cls for _, cls in rows]
    n_special = classes.count("special")
    n_text = classes.count("text")
    n_speech = classes.count("speech")
    expected = ["special"] * n_special + ["text"] * n_text + ["speech"] * n_speech
    if classes != expected:
        raise ValueError("token classes are not contiguous blocks in special/text/speech order")
    if n_special != len(SPECIAL_NAMES):
        raise ValueError(f"expected {len(SPECIAL_NAMES)} special tokens, found {n_special}")
    for i, name in enumerate(SPECIAL_NAMES):
        if rows[i][0] != "⟨%s⟩" % name:
            raise ValueError(f"special token {i} has surface {rows[i][0]!r}, expected {name}")

    alphabet = "".join(surface for surface, _ in rows[n_special : n_special + n_text])
    vocab = build_vocab(alphabet, n_speech)
    actual = [surface for surface, _ in rows]
    if list(vocab.surfaces) != actual:
        raise ValueError("vocabulary file surfaces do not match the rebuilt vocabulary")
    return vocab
