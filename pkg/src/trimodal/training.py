"""Stage-wise training: deterministic batching, warmup+cosine lr, resume.

Stages run in a fixed order (pre1 speech/text alignment, pre2 multimodal
pre-training, sft instruction tuning); a checkpoint records which stages it
has completed and a later stage refuses to start until the earlier ones are
done. Batches are length-bucketed, the bucket order reshuffled each epoch
from the stage seed, so a rerun reproduces the same step sequence.
"""

from __future__ import annotations

import math
import os
import random
from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import data_pipeline as dpl
from .core_model import (
    IGNORE_INDEX,
    ModelConfig,
    TrimodalLM,
    load_checkpoint,
    masked_lm_loss,
    save_checkpoint,
)
from .tokenizer import UnifiedVocab, build_vocab
from .vision_encoder import VisionConfig

STAGE_ORDER = ("pre1", "pre2", "sft")


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def configure_determinism() -> None:
    """Honor TRIMODAL_DETERMINISTIC=1: one thread, deterministic kernels."""
    if os.environ.get("TRIMODAL_DETERMINISTIC") == "1":
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


@dataclass(frozen=True)
class StageSchedule:
    stage: str
    steps: int
    batch_size: int
    peak_lr: float
    warmup_ratio: float
    seed: int = 0
    save_every: int = 500

    def validate(self) -> None:
        if self.stage not in STAGE_ORDER:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1)")


def full_schedule(stage: str, steps: int, seed: int = 0) -> StageSchedule:
    """Reference hyperparameters for the full-size setup."""
    if stage in ("pre1", "pre2"):
        return StageSchedule(stage, steps, 32, 2e-5, 0.03, seed)
    return StageSchedule(stage, steps, 8, 1e-5, 0.02, seed)


def toy_schedule(stage: str, steps: int, seed: int = 0) -> StageSchedule:
    """Desk-scale setup: same shape, a learning rate the small model can use."""
    ratio = 0.03 if stage in ("pre1", "pre2") else 0.02
    return StageSchedule(stage, steps, 32, 3e-4, ratio, seed)


def lr_at(step: int, total: int, peak: float, warmup_ratio: float) -> float:
    """Piecewise schedule over 1-based steps: linear 0 -> peak across the
    warmup span, then cosine peak -> 0 across the remainder."""
    if not 1 <= step <= total:
        raise ValueError(f"step {step} outside [1, {total}]")
    warm = round(warmup_ratio * total)
    if warm > 0 and step <= warm:
        return peak * step / warm
    span = max(1, total - warm)
    progress = (step - warm) / span
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def smooth_trace(values: list[float], window: int) -> list[float]:
    """Centered moving average; the window truncates at both edges."""
    if window < 1:
        raise ValueError("window must be at least 1")
    left = (window - 1) // 2
    right = window // 2
    n = len(values)
    out = []
    for i in range(n):
        lo = max(0, i - left)
        hi = min(n, i + right + 1)
        out.append(sum(values[lo:hi]) / (hi - lo))
    return out


def epoch_batches(lengths: list[int], batch_size: int, seed: int) -> list[list[int]]:
    """Length-bucketed batches in a seed-shuffled order."""
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    random.Random(seed).shuffle(batches)
    return batches


def assemble_batch(
    model: TrimodalLM,
    packed: dpl.PackedBatch,
    idxs: list[int],
    pixels: np.ndarray,
):
    """Fused embedding grid plus shifted-CE targets for a batch of rows."""
    device = model.tok_emb.weight.device
    dtype = model.tok_emb.weight.dtype
    n_v = model.vis_cfg.n_v
    d = model.cfg.d_h

    img_rows = [i for i in idxs if packed.img_pos[i] is not None]
    img_emb = {}
    if img_rows:
        stack = np.stack([pixels[packed.scene_ids[i]] for i in img_rows])
        enc = model.encode_image(torch.as_tensor(stack, dtype=dtype, device=device))
        for row, i in enumerate(img_rows):
            img_emb[i] = enc[row]

    fused_lens = [packed.fused_lengths[i] for i in idxs]
    width = max(fused_lens)
    B = len(idxs)
    emb = torch.zeros(B, width, d, dtype=dtype, device=device)
    pad = torch.zeros(B, width, dtype=torch.bool, device=device)
    labels = torch.full((B, width), IGNORE_INDEX, dtype=torch.long, device=device)
    lmask = torch.zeros(B, width, dtype=torch.bool, device=device)

    for row, i in enumerate(idxs):
        ids = torch.tensor(packed.tokens[i], dtype=torch.long, device=device)
        tok_e = model.tok_emb(ids)
        pos = packed.img_pos[i]
        n = len(ids)
        if pos is None:
            emb[row, :n] = tok_e
            labels[row, :n] = ids
            m = torch.tensor(packed.loss_masks[i], dtype=torch.bool, device=device)
            lmask[row, :n] = m
            pad[row, :n] = True
        else:
            fused_n = n + n_v - 1
            emb[row, :pos] = tok_e[:pos]
            emb[row, pos : pos + n_v] = img_emb[i]
            emb[row, pos + n_v : fused_n] = tok_e[pos + 1 :]
            labels[row, :pos] = ids[:pos]
            labels[row, pos + n_v : fused_n] = ids[pos + 1 :]
            m = packed.loss_masks[i]
            lmask[row, :pos] = torch.tensor(m[:pos], dtype=torch.bool, device=device)
            lmask[row, pos + n_v : fused_n] = torch.tensor(
                m[pos + 1 :], dtype=torch.bool, device=device
            )
            pad[row, :fused_n] = True
    return emb, pad, labels, lmask


def _loss_for_batch(model, packed, idxs, pixels) -> torch.Tensor:
    emb, pad, labels, lmask = assemble_batch(model, packed, idxs, pixels)
    h, _ = model.backbone(emb, pad_mask=pad, need_attn=False)
    logits = model.logits_from_hidden(h)
    return masked_lm_loss(logits, labels, lmask)


def _fresh_model(
    model_cfg: ModelConfig | None, vis_cfg: VisionConfig | None, vocab: UnifiedVocab | None
) -> TrimodalLM:
    vocab = vocab or build_vocab()
    vis = vis_cfg or VisionConfig()
    cfg = model_cfg or ModelConfig(vocab_size=vocab.size)
    return TrimodalLM(vocab, cfg, vis)


def run_stage(
    data_dir: str,
    schedule: StageSchedule,
    out_dir: str,
    *,
    init_from: str | None = None,
    model_cfg: ModelConfig | None = None,
    vis_cfg: VisionConfig | None = None,
    vocab: UnifiedVocab | None = None,
    stop_after: int | None = None,
    log_hook=None,
) -> tuple[TrimodalLM, dict]:
    """Run (or resume) one stage over a built dataset directory.

    A fresh run of pre2 or sft must start from a checkpoint whose completed
    stages are exactly the preceding ones. An existing checkpoint in out_dir
    that is mid-way through this stage is resumed at its saved step.
    stop_after ends the run early after that many steps without marking the
    stage complete, leaving a resumable checkpoint behind.
    """
    schedule.validate()
    configure_determinism()
    seed_everything(schedule.seed)

    examples, _specs, pixels, meta = dpl.load_dataset(data_dir)
    if meta.get("stage") != schedule.stage:
        raise ValueError(
            f"dataset in {data_dir} was built for stage {meta.get('stage')!r}, "
            f"schedule wants {schedule.stage!r}"
        )
    if schedule.stage == "pre1" and any(ex.scene_id is not None for ex in examples):
        raise ValueError("stage pre1 data must not contain images")

    stage_idx = STAGE_ORDER.index(schedule.stage)
    required = list(STAGE_ORDER[:stage_idx])

    ckpt_path = os.path.join(out_dir, "checkpoint.pt")
    start_step = 0
    base_global = 0
    opt_state = None
    if os.path.exists(ckpt_path):
        model, info = load_checkpoint(ckpt_path)
        stages_done = info["stages_done"]
        extra = info.get("extra") or {}
        if schedule.stage in stages_done:
            raise ValueError(f"stage {schedule.stage!r} already completed in {ckpt_path}")
        if stages_done != required or extra.get("stage") != schedule.stage:
            raise ValueError(
                f"checkpoint in {out_dir} is not a resumable {schedule.stage} run"
            )
        start_step = extra["step_in_stage"]
        base_global = info["global_step"] - start_step
        opt_state = extra.get("optimizer")
    elif init_from is not None:
        model, info = load_checkpoint(init_from)
        if info["stages_done"] != required:
            raise ValueError(
                f"stage {schedule.stage!r} needs completed stages {required}, "
                f"checkpoint has {info['stages_done']}"
            )
        base_global = info["global_step"]
    else:
        if required:
            raise ValueError(
                f"stage {schedule.stage!r} needs an init_from checkpoint that "
                f"completed {required}"
            )
        model = _fresh_model(model_cfg, vis_cfg, vocab)

    model.train()
    packed = dpl.pack_batch(
        model.vocab,
        examples,
        n_v=model.vis_cfg.n_v,
        max_tokens=model.cfg.max_seq,
        overlength="skip",
    )
    skipped = len(examples) - len(packed.tokens)
    if not packed.tokens:
        raise ValueError("no examples fit the sequence budget")

    opt = torch.optim.Adam(
        model.parameters(), lr=schedule.peak_lr, betas=(0.9, 0.999), eps=1e-8
    )
    if opt_state is not None:
        opt.load_state_dict(opt_state)

    os.makedirs(out_dir, exist_ok=True)
    loss_path = os.path.join(out_dir, "loss.csv")
    loss_file = open(loss_path, "a" if start_step > 0 else "w", encoding="utf-8")
    if start_step == 0:
        loss_file.write("step,lr,loss\n")

    def save(step_in_stage: int, done: bool) -> None:
        stages = required + [schedule.stage] if done else required
        extra = {
            "stage": schedule.stage,
            "step_in_stage": step_in_stage,
            "schedule": asdict(schedule),
        }
        if not done:
            extra["optimizer"] = opt.state_dict()
        save_checkpoint(
            model,
            ckpt_path,
            stages_done=stages,
            global_step=base_global + step_in_stage,
            extra=extra,
        )

    step = start_step
    losses = []
    limit = schedule.steps if stop_after is None else min(schedule.steps, stop_after)
    epoch = 0
    try:
        while step < limit:
            batches = epoch_batches(
                packed.fused_lengths, schedule.batch_size, schedule.seed + 1000 * epoch
            )
            consumed = step - epoch * len(batches)
            # Replay skips batches already used when resuming mid-epoch.
            for b, idxs in enumerate(batches):
                if b < consumed:
                    continue
                if step >= limit:
                    break
                step += 1
                lr = lr_at(step, schedule.steps, schedule.peak_lr, schedule.warmup_ratio)
                for group in opt.param_groups:
                    group["lr"] = lr
                loss = _loss_for_batch(model, packed, idxs, pixels)
                opt.zero_grad()
                loss.backward()
                opt.step()
                value = float(loss.detach())
                losses.append(value)
                loss_file.write(f"{step},{lr!r},{value!r}\n")
                if log_hook is not None:
                    log_hook(step, lr, value)
                if schedule.save_every and step % schedule.save_every == 0 and step < schedule.steps:
                    loss_file.flush()
                    save(step, done=False)
            epoch += 1
    finally:
        loss_file.close()

    done = step >= schedule.steps
    save(step, done=done)
    return model, {
        "stage": schedule.stage,
        "steps_run": step - start_step,
        "step_in_stage": step,
        "completed": done,
        "global_step": base_global + step,
        "skipped_rows": skipped,
        "final_loss": losses[-1] if losses else None,
        "mean_recent_loss": (
            sum(losses[-20:]) / len(losses[-20:]) if losses else None
        ),
    }


def read_loss_csv(path: str) -> list[tuple[int, float, float]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            step, lr, loss = line.strip().split(",")
            rows.append((int(step), float(lr), float(loss)))
    return rows
