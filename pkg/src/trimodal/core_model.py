"""Decoder-only transformer over the unified token space.

Text characters and speech units share one embedding table and one output
head. Images enter late: a single placeholder token in the id sequence is
replaced by the projected patch representations, so a sequence of n tokens
with one image becomes n_v + n - 1 embedded positions. Learned absolute
positions are added after that splice, and attention applies a rotary
position encoding so its logits depend on relative offsets — the alignment
between a speech clip and its transcript then transfers across prompts of
different lengths instead of being relearned per absolute position.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .speech_codec import OUTPUT_ACCENT, OUTPUT_SPEED, SpeechClip
from .tokenizer import Modality, TokenSeq, UnifiedVocab, build_vocab, decode_text
from .vision_encoder import PatchEncoder, VisionConfig

IGNORE_INDEX = -100

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_h: int = 128
    n_layers: int = 4
    n_heads: int = 4
    ffn_mult: int = 4
    max_seq: int = 512
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_h % self.n_heads != 0:
            raise ValueError("d_h must be divisible by n_heads")
        if (self.d_h // self.n_heads) % 2 != 0:
            raise ValueError("head dimension must be even for rotary attention")


@dataclass(frozen=True)
class GenSettings:
    """Decode settings; the reference values, overridable per call."""

    text_beam: int = 5
    text_max_new: int = 256
    text_rep_penalty: float = 1.0
    speech_top_p: float = 0.7
    speech_beam: int = 1
    speech_max_new: int = 1024
    speech_rep_penalty: float = 1.3

    @classmethod
    def toy(cls, text_max_new: int = 128, speech_max_new: int = 224) -> "GenSettings":
        # Desk-scale caps; everything else keeps the reference values.
        return cls(text_max_new=text_max_new, speech_max_new=speech_max_new)


@dataclass
class FusedSequence:
    """Token sequence with image patches spliced into the embedding stream."""

    tokens: TokenSeq
    embeddings: torch.Tensor
    spans: list[tuple[int, int]]
    img_span: tuple[int, int] | None

    def __len__(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class GenResult:
    ids: list[int]
    truncated: bool


@dataclass
class GenCall:
    tokens: TokenSeq
    used_image: bool
    out_ids: list[int]
    mode: str


@dataclass
class Response:
    text: str | None = None
    clip: SpeechClip | None = None
    flags: list[str] = field(default_factory=list)
    trace: list[GenCall] = field(default_factory=list)


def _rotate_pairs(q: torch.Tensor, k: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Rotary position encoding: rotate query/key feature pairs by
    position-proportional angles so q_i . k_j depends on i - j only."""
    half = q.shape[-1] // 2
    dev, dt = q.device, q.dtype
    inv_freq = torch.exp(
        torch.arange(half, device=dev, dtype=dt) * (-math.log(10000.0) / half)
    )
    angles = torch.arange(q.shape[-2], device=dev, dtype=dt)[:, None] * inv_freq
    cos, sin = angles.cos(), angles.sin()

    def rot(x: torch.Tensor) -> torch.Tensor:
        a, b = x[..., :half], x[..., half:]
        return torch.cat([a * cos - b * sin, a * sin + b * cos], dim=-1)

    return rot(q), rot(k)


class _Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.ln1 = nn.LayerNorm(cfg.d_h)
        self.ln2 = nn.LayerNorm(cfg.d_h)
        self.qkv = nn.Linear(cfg.d_h, 3 * cfg.d_h)
        self.out = nn.Linear(cfg.d_h, cfg.d_h)
        self.ff1 = nn.Linear(cfg.d_h, cfg.ffn_mult * cfg.d_h)
        self.ff2 = nn.Linear(cfg.ffn_mult * cfg.d_h, cfg.d_h)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, bias: torch.Tensor, need_attn: bool):
        B, T, d = x.shape
        nh = self.cfg.n_heads
        hd = d // nh
        h = self.ln1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q = q.view(B, T, nh, hd).transpose(1, 2)
        k = k.view(B, T, nh, hd).transpose(1, 2)
        v = v.view(B, T, nh, hd).transpose(1, 2)
        q, k = _rotate_pairs(q, k)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        att = (att + bias).softmax(dim=-1)
        mixed = (att @ v).transpose(1, 2).reshape(B, T, d)
        x = x + self.drop(self.out(mixed))
        x = x + self.drop(self.ff2(F.gelu(self.ff1(self.ln2(x)))))
        return x, att if need_attn else None


class TrimodalLM(nn.Module):
    def __init__(self, vocab: UnifiedVocab, cfg: ModelConfig, vis_cfg: VisionConfig):
        super().__init__()
        if cfg.vocab_size != vocab.size:
            raise ValueError("model vocab_size does not match the vocabulary")
        if cfg.d_h != vis_cfg.d_h:
            raise ValueError("vision projection width must equal the model width")
        self.vocab = vocab
        self.cfg = cfg
        self.vis_cfg = vis_cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_h)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_seq, cfg.d_h))
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_h)
        self.vision = PatchEncoder(vis_cfg)
        self.vis_proj = nn.Linear(vis_cfg.d_v, cfg.d_h, bias=False)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb, std=0.02)

    # The output head is tied to the token embedding table.
    def logits_from_hidden(self, h: torch.Tensor) -> torch.Tensor:
        return h @ self.tok_emb.weight.T

    def encode_image(self, img: torch.Tensor) -> torch.Tensor:
        """Pixels (H, W, C) or batch (B, H, W, C) -> projected patch rows."""
        return self.vis_proj(self.vision(img))

    def fuse(
        self,
        tokens: TokenSeq,
        image: torch.Tensor | None = None,
        image_embedding: torch.Tensor | None = None,
    ) -> FusedSequence:
        img_positions = [i for i, m in enumerate(tokens.modality) if m is Modality.IMAGE]
        if len(img_positions) > 1:
            raise ValueError("sequence holds more than one image placeholder")
        if image is not None and image_embedding is not None:
            raise ValueError("pass either pixels or a precomputed image embedding, not both")
        have_img = image is not None or image_embedding is not None
        if img_positions and not have_img:
            raise ValueError("sequence has an image placeholder but no image was given")
        if have_img and not img_positions:
            raise ValueError("an image was given but the sequence has no placeholder")

        ids = torch.tensor(tokens.ids, dtype=torch.long, device=self.tok_emb.weight.device)
        emb = self.tok_emb(ids)
        if not img_positions:
            fused = emb
            spans = [(i, i + 1) for i in range(len(tokens))]
            img_span = None
        else:
            p = img_positions[0]
            h_v = image_embedding if image_embedding is not None else self.encode_image(image)
            if h_v.dim() != 2 or h_v.shape[1] != self.cfg.d_h:
                raise ValueError("image embedding must be (n_v, d_h)")
            n_v = h_v.shape[0]
            fused = torch.cat([emb[:p], h_v, emb[p + 1 :]], dim=0)
            spans = [(i, i + 1) for i in range(p)]
            spans.append((p, p + n_v))
            spans.extend((i + n_v - 1, i + n_v) for i in range(p + 1, len(tokens)))
            img_span = (p, p + n_v)
        if fused.shape[0] > self.cfg.max_seq:
            raise ValueError(f"fused length {fused.shape[0]} exceeds max_seq {self.cfg.max_seq}")
        return FusedSequence(tokens=tokens, embeddings=fused, spans=spans, img_span=img_span)

    def backbone(
        self,
        x: torch.Tensor,
        pad_mask: torch.Tensor | None = None,
        need_attn: bool = False,
    ):
        """x: (B, T, d_h) fused embeddings. pad_mask True marks real positions."""
        B, T, _ = x.shape
        if T > self.cfg.max_seq:
            raise ValueError(f"sequence length {T} exceeds max_seq {self.cfg.max_seq}")
        x = x + self.pos_emb[:T]
        causal = torch.triu(torch.ones(T, T, dtype=torch.bool, device=x.device), diagonal=1)
        bias = torch.zeros(T, T, dtype=x.dtype, device=x.device)
        bias.masked_fill_(causal, float("-inf"))
        if pad_mask is not None:
            # Padding sits at the end, so every real query still sees key 0.
            key_pad = ~pad_mask
            bias = bias.unsqueeze(0) + torch.where(
                key_pad, torch.tensor(float("-inf"), dtype=x.dtype, device=x.device), torch.tensor(0.0, dtype=x.dtype, device=x.device)
            ).unsqueeze(1)
            bias = bias.unsqueeze(1)
        attns = []
        for blk in self.blocks:
            x, att = blk(x, bias, need_attn)
            if need_attn:
                attns.append(att)
        h = self.ln_f(x)
        return h, attns

    def forward(self, fused: FusedSequence, need_attn: bool = True):
        """Single fused sequence -> (logits (n', vocab), attentions per layer)."""
        h, attns = self.backbone(fused.embeddings.unsqueeze(0), need_attn=need_attn)
        logits = self.logits_from_hidden(h[0])
        return logits, [a[0] for a in attns] if need_attn else []

    def loss(self, fused: FusedSequence, target_mask: list[bool]) -> torch.Tensor:
        labels, mask = expand_targets(fused, target_mask)
        if not any(mask):
            raise ValueError("target mask selects no positions")
        logits, _ = self.forward(fused, need_attn=False)
        labels_t = torch.tensor(labels, dtype=torch.long, device=logits.device)
        mask_t = torch.tensor(mask, dtype=torch.bool, device=logits.device)
        sel = mask_t[1:]
        return F.cross_entropy(logits[:-1][sel], labels_t[1:][sel])


def expand_targets(fused: FusedSequence, target_mask: list[bool]) -> tuple[list[int], list[bool]]:
    """Map token-aligned targets onto the fused stream; image span is ignored."""
    tokens = fused.tokens
    if len(target_mask) != len(tokens):
        raise ValueError("target mask length does not match the token sequence")
    n = len(fused)
    labels = [IGNORE_INDEX] * n
    mask = [False] * n
    for p, (s, e) in enumerate(fused.spans):
        if e - s == 1:
            labels[s] = tokens.ids[p]
            mask[s] = target_mask[p]
        elif target_mask[p]:
            raise ValueError("image placeholder cannot be a prediction target")
    return labels, mask


def masked_lm_loss(logits: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Batched shifted cross-entropy; mask marks label positions."""
    sel = mask[:, 1:]
    if not bool(sel.any()):
        raise ValueError("loss mask selects no positions")
    pred = logits[:, :-1][sel]
    tgt = labels[:, 1:][sel]
    return F.cross_entropy(pred, tgt)


# ---------------------------------------------------------------- generation

_IO_IN = {"TTT": "T", "TTS": "T", "STT": "S", "STS": "S"}
_IO_OUT = {"TTT": "T", "TTS": "S", "STT": "T", "STS": "S"}
IO_CONFIGS = ("TTT", "TTS", "STT", "STS")


def _allowed(vocab: UnifiedVocab, mode: str, gen_ids: list[int], constrained: bool) -> torch.Tensor:
    allow = torch.ones(vocab.size, dtype=torch.bool)
    if not constrained:
        return allow
    for tid in (vocab.pad, vocab.img, vocab.boi, vocab.eoi, vocab.bos):
        allow[tid] = False
    open_span = gen_ids.count(vocab.boa) > gen_ids.count(vocab.eoa)
    speech_lo, speech_hi = vocab.speech_start, vocab.size
    if mode == "speech" and not gen_ids:
        allow[:] = False
        allow[vocab.boa] = True
    elif open_span:
        allow[:] = False
        allow[speech_lo:speech_hi] = True
        allow[vocab.eoa] = True
    else:
        allow[speech_lo:speech_hi] = False
    return allow


def _apply_rep_penalty(logits: torch.Tensor, ids: list[int], penalty: float) -> torch.Tensor:
    if penalty == 1.0 or not ids:
        return logits
    out = logits.clone()
    for tid in set(ids):
        v = out[tid]
        out[tid] = v / penalty if v > 0 else v * penalty
    return out


def _span_units(vocab: UnifiedVocab, gen_ids: list[int]) -> list[int]:
    """Speech ids emitted since the most recent boa."""
    try:
        start = len(gen_ids) - 1 - gen_ids[::-1].index(vocab.boa)
    except ValueError:
        return []
    return [t for t in gen_ids[start + 1 :] if vocab.class_of(t) == "speech"]


@torch.inference_mode()
def generate(
    model: TrimodalLM,
    fused_prompt: FusedSequence,
    mode: str,
    settings: GenSettings = GenSettings(),
    rng: random.Random | None = None,
    constrained: bool = True,
    max_new: int | None = None,
) -> GenResult:
    if mode not in ("text", "speech"):
        raise ValueError(f"unknown generation mode {mode!r}")
    vocab = model.vocab
    prompt_len = len(fused_prompt)
    if prompt_len >= model.cfg.max_seq:
        raise ValueError("prompt already fills max_seq; nothing can be generated")
    if max_new is None:
        max_new = settings.text_max_new if mode == "text" else settings.speech_max_new
    budget = min(max_new, model.cfg.max_seq - prompt_len)
    rng = rng or random.Random(0)

    if mode == "text":
        return _beam_search(model, fused_prompt, settings, constrained, budget)
    return _sample_speech(model, fused_prompt, settings, rng, constrained, budget)


def _step_logits(model: TrimodalLM, fused_prompt: FusedSequence, beams_ids: list[list[int]]) -> torch.Tensor:
    dev = fused_prompt.embeddings.device
    rows = []
    for ids in beams_ids:
        if ids:
            gen_emb = model.tok_emb(torch.tensor(ids, dtype=torch.long, device=dev))
            rows.append(torch.cat([fused_prompt.embeddings, gen_emb], dim=0))
        else:
            rows.append(fused_prompt.embeddings)
    x = torch.stack(rows)
    h, _ = model.backbone(x, need_attn=False)
    return model.logits_from_hidden(h[:, -1])


def _beam_search(model, fused_prompt, settings, constrained, budget) -> GenResult:
    vocab = model.vocab
    width = settings.text_beam
    beams: list[tuple[list[int], float, bool]] = [([], 0.0, False)]
    for _ in range(budget):
        live = [b for b in beams if not b[2]]
        if not live:
            break
        logits = _step_logits(model, fused_prompt, [b[0] for b in live])
        logits = torch.where(
            torch.stack([_allowed(vocab, "text", b[0], constrained) for b in live]).to(logits.device),
            logits,
            torch.tensor(float("-inf"), dtype=logits.dtype, device=logits.device),
        )
        logprobs = logits.log_softmax(dim=-1)
        candidates: list[tuple[list[int], float, bool]] = [b for b in beams if b[2]]
        for (ids, score, _), row in zip(live, logprobs):
            if settings.text_rep_penalty != 1.0:
                row = _apply_rep_penalty(row, ids, settings.text_rep_penalty)
            for tid in range(vocab.size):
                lp = float(row[tid])
                if lp == float("-inf"):
                    continue
                candidates.append((ids + [tid], score + lp, tid == vocab.eos))
        # Ties break toward the lexicographically smaller id sequence.
        candidates.sort(key=lambda c: (-c[1], c[0]))
        beams = candidates[:width]
        if all(b[2] for b in beams):
            break
    for ids, _, done in beams:
        if done:
            return GenResult(ids=ids, truncated=False)
    return GenResult(ids=beams[0][0], truncated=True)


def _sample_speech(model, fused_prompt, settings, rng, constrained, budget) -> GenResult:
    vocab = model.vocab
    ids: list[int] = []
    for _ in range(budget):
        logits = _step_logits(model, fused_prompt, [ids])[0]
        allow = _allowed(vocab, "speech", ids, constrained).to(logits.device)
        logits = torch.where(allow, logits, torch.tensor(float("-inf"), dtype=logits.dtype, device=logits.device))
        logits = _apply_rep_penalty(logits, _span_units(vocab, ids), settings.speech_rep_penalty)
        probs = logits.softmax(dim=-1)
        tid = _top_p_sample(probs, settings.speech_top_p, rng)
        ids.append(tid)
        if tid in (vocab.eoa, vocab.eos):
            return GenResult(ids=ids, truncated=False)
    return GenResult(ids=ids, truncated=True)


def _top_p_sample(probs: torch.Tensor, top_p: float, rng: random.Random) -> int:
    order = sorted(range(probs.shape[0]), key=lambda t: (-float(probs[t]), t))
    kept, total = [], 0.0
    for tid in order:
        p = float(probs[tid])
        if p <= 0.0 and kept:
            break
        kept.append((tid, p))
        total += p
        if total >= top_p:
            break
    u = rng.random() * total
    acc = 0.0
    for tid, p in kept:
        acc += p
        if u <= acc:
            return tid
    return kept[-1][0]


# ---------------------------------------------------------------- responding

BRIDGE_TEMPLATES = {
    "IC": "The textual caption is '{text}'. Therefore, the audio caption is:",
    "VQA": "The textual answer is '{text}'. Therefore, the audio answer is:",
    "TTS": "This is how your text sounds in speech:",
}


def respond(
    model: TrimodalLM,
    task: str,
    io_config: str,
    *,
    image: torch.Tensor | None = None,
    payload=None,
    paradigm: str = "direct",
    settings: GenSettings | None = None,
    seed: int = 0,
    prompt_pool: str = "eval",
    prompt_seed: int = 0,
    constrained: bool = True,
    collect_trace: bool = False,
) -> Response:
    """Run one task end to end and return text and/or a speech clip.

    Speech outputs support two routes: "direct" emits units straight away,
    "chain" first produces the text answer, then re-prompts with a bridge
    turn and speaks. Text outputs always take the direct route.
    """
    from . import data_pipeline as dp

    settings = settings or GenSettings.toy()
    if task not in ("ASR", "TTS", "IC", "VQA"):
        raise ValueError(f"unknown task {task!r}")
    if io_config not in IO_CONFIGS:
        raise ValueError(f"unknown io_config {io_config!r}")
    if task == "ASR" and io_config != "STT":
        raise ValueError("ASR is speech-to-text only")
    if task == "TTS" and io_config != "TTS":
        raise ValueError("TTS is text-to-speech only")
    needs_image = task in ("IC", "VQA")
    if needs_image and image is None:
        raise ValueError(f"{task} requires an image")
    if not needs_image and image is not None:
        raise ValueError(f"{task} takes no image")
    out_mod = _IO_OUT[io_config]
    if paradigm not in ("direct", "chain"):
        raise ValueError(f"unknown paradigm {paradigm!r}")
    if out_mod == "T" and paradigm == "chain":
        raise ValueError("text outputs are always direct; chain applies to speech outputs")
    in_mod = _IO_IN[io_config]
    if in_mod == "S" and not isinstance(payload, SpeechClip):
        raise ValueError("speech-input tasks need a SpeechClip payload")
    if task == "VQA" and in_mod == "T" and not isinstance(payload, str):
        raise ValueError("VQA with text input needs the question string")
    if task == "IC" and in_mod == "T" and payload is not None:
        raise ValueError("IC with text input takes no payload")
    if task == "TTS" and not isinstance(payload, str):
        raise ValueError("TTS needs the transcript string")
    if task == "IC" and in_mod == "S" and not isinstance(payload, SpeechClip):
        raise ValueError("spoken captioning prompts need a SpeechClip payload")

    vocab = model.vocab
    prompt = dp.build_prompt_tokens(
        vocab, task, io_config, payload=payload, pool=prompt_pool, seed=prompt_seed, with_image=needs_image
    )
    img_emb = model.encode_image(image) if needs_image else None
    fused = model.fuse(prompt, image_embedding=img_emb)
    rng = random.Random(seed)
    resp = Response()

    def record(tokens, out_ids, mode):
        if collect_trace:
            resp.trace.append(GenCall(tokens=tokens, used_image=needs_image, out_ids=list(out_ids), mode=mode))

    if out_mod == "T":
        result = generate(model, fused, "text", settings, rng, constrained)
        record(prompt, result.ids, "text")
        if result.truncated:
            resp.flags.append("text-truncated")
        resp.text = _ids_to_text(vocab, result.ids)
        return resp

    if paradigm == "direct":
        result = generate(model, fused, "speech", settings, rng, constrained)
        record(prompt, result.ids, "speech")
        resp.clip = _ids_to_clip(vocab, result.ids, resp.flags, result.truncated)
        return resp

    # Chain route. TTS already has its text in hand; IC/VQA generate it.
    if task == "TTS":
        intermediate = payload
    else:
        r1 = generate(model, fused, "text", settings, rng, constrained)
        record(prompt, r1.ids, "text")
        if r1.truncated:
            resp.flags.append("text-truncated")
        intermediate = _ids_to_text(vocab, r1.ids)
    resp.text = intermediate

    chained = dp.extend_with_bridge(vocab, prompt, task, intermediate)
    fused2 = model.fuse(chained, image_embedding=img_emb)
    r2 = generate(model, fused2, "speech", settings, rng, constrained)
    record(chained, r2.ids, "speech")
    resp.clip = _ids_to_clip(vocab, r2.ids, resp.flags, r2.truncated)
    return resp


def _ids_to_text(vocab: UnifiedVocab, ids: list[int]) -> str:
    return decode_text(vocab, [i for i in ids if vocab.class_of(i) == "text"])


def _ids_to_clip(vocab: UnifiedVocab, ids: list[int], flags: list[str], truncated: bool) -> SpeechClip:
    units = [vocab.unit_for(i) for i in ids if vocab.class_of(i) == "speech"]
    if truncated or (ids and ids[-1] not in (vocab.eoa, vocab.eos)):
        flags.append("missing-eoa")
    return SpeechClip(units=tuple(units), accent=OUTPUT_ACCENT, speed=OUTPUT_SPEED)


# ---------------------------------------------------------------- checkpoints


def vocab_fingerprint(vocab: UnifiedVocab) -> str:
    payload = "\n".join(
        f"{s}\t{i}\t{vocab.class_of(i)}" for i, s in enumerate(vocab.surfaces)
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def save_checkpoint(model: TrimodalLM, path: str, *, stages_done: list[str], global_step: int, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.cfg),
        "vision_config": asdict(model.vis_cfg),
        "alphabet": model.vocab.alphabet,
        "speech_token_count": model.vocab.speech_token_count,
        "vocab_sha": vocab_fingerprint(model.vocab),
        "stages_done": list(stages_done),
        "global_step": int(global_step),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str) -> tuple[TrimodalLM, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format {version!r}")
    vocab = build_vocab(payload["alphabet"], payload["speech_token_count"])
    if vocab_fingerprint(vocab) != payload["vocab_sha"]:
        raise ValueError("checkpoint vocabulary fingerprint mismatch")
    model = TrimodalLM(vocab, ModelConfig(**payload["model_config"]), VisionConfig(**payload["vision_config"]))
    model.load_state_dict(payload["state_dict"])
    meta = {
        "stages_done": payload["stages_done"],
        "global_step": payload["global_step"],
        "extra": payload.get("extra", {}),
    }
    return model, meta
