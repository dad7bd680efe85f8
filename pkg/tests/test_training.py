import math

import numpy as np
import pytest
import torch

from trimodal import data_pipeline as dp
from trimodal import training as tr
from trimodal.core_model import IGNORE_INDEX, ModelConfig, load_checkpoint
from trimodal.tokenizer import build_vocab
from trimodal.vision_encoder import VisionConfig

TINY_CFG = dict(
    model_cfg=None,  # filled per-call: needs vocab size
    vis_cfg=VisionConfig(d_v=16, d_h=32, n_layers=1, n_heads=2),
)


def _tiny_model_cfg(vocab):
    return ModelConfig(vocab_size=vocab.size, d_h=32, n_layers=1, n_heads=2, max_seq=256)


@pytest.fixture
def deterministic(monkeypatch):
    monkeypatch.setenv("TRIMODAL_DETERMINISTIC", "1")
    threads = torch.get_num_threads()
    yield
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(False)


def test_schedule_validation():
    tr.StageSchedule("pre1", 10, 4, 1e-3, 0.03).validate()
    with pytest.raises(ValueError):
        tr.StageSchedule("warmup", 10, 4, 1e-3, 0.03).validate()
    with pytest.raises(ValueError):
        tr.StageSchedule("pre1", 0, 4, 1e-3, 0.03).validate()
    with pytest.raises(ValueError):
        tr.StageSchedule("pre1", 10, 4, 1e-3, 1.0).validate()


def test_reference_schedules():
    pre = tr.full_schedule("pre2", 100)
    assert (pre.batch_size, pre.peak_lr, pre.warmup_ratio) == (32, 2e-5, 0.03)
    sft = tr.full_schedule("sft", 100)
    assert (sft.batch_size, sft.peak_lr, sft.warmup_ratio) == (8, 1e-5, 0.02)
    toy = tr.toy_schedule("sft", 100)
    assert (toy.batch_size, toy.peak_lr, toy.warmup_ratio) == (32, 3e-4, 0.02)
    assert tr.toy_schedule("pre1", 100).warmup_ratio == 0.03


def test_lr_schedule_shape():
    peak, total = 1e-3, 100
    warm = round(0.03 * total)  # 3
    assert tr.lr_at(1, total, peak, 0.03) == pytest.approx(peak / 3)
    assert tr.lr_at(warm, total, peak, 0.03) == pytest.approx(peak)
    assert tr.lr_at(total, total, peak, 0.03) == pytest.approx(0.0, abs=1e-12)
    mid = warm + (total - warm) // 2
    assert tr.lr_at(mid, total, peak, 0.03) < peak
    # Monotone up through warmup, monotone down after.
    values = [tr.lr_at(s, total, peak, 0.03) for s in range(1, total + 1)]
    assert all(a < b for a, b in zip(values[: warm - 1], values[1:warm]))
    assert all(a >= b for a, b in zip(values[warm:], values[warm + 1 :]))
    with pytest.raises(ValueError):
        tr.lr_at(0, total, peak, 0.03)
    with pytest.raises(ValueError):
        tr.lr_at(total + 1, total, peak, 0.03)
    # No warmup: step 1 already on the cosine.
    assert tr.lr_at(1, 10, peak, 0.0) < peak


def test_smooth_trace():
    assert tr.smooth_trace([0, 1, 2, 3, 4], 3) == [0.5, 1, 2, 3, 3.5]
    assert tr.smooth_trace([5.0, 7.0], 1) == [5.0, 7.0]
    assert tr.smooth_trace([], 3) == []
    with pytest.raises(ValueError):
        tr.smooth_trace([1.0], 0)


def test_epoch_batches_cover_and_bucket():
    lengths = [9, 3, 7, 3, 5, 8, 1, 6, 2, 4]
    batches = tr.epoch_batches(lengths, 3, seed=5)
    flat = [i for b in batches for i in b]
    assert sorted(flat) == list(range(10))
    assert max(len(b) for b in batches) == 3
    # Each batch is a contiguous run of the length-sorted order.
    order = sorted(range(10), key=lambda i: (lengths[i], i))
    pos = {idx: p for p, idx in enumerate(order)}
    for b in batches:
        ps = [pos[i] for i in b]
        assert ps == list(range(ps[0], ps[0] + len(ps)))
    assert tr.epoch_batches(lengths, 3, seed=5) == batches
    assert tr.epoch_batches(lengths, 3, seed=6) != batches


def test_seed_everything_controls_global_rngs():
    import random

    tr.seed_everything(123)
    a = (random.random(), float(np.random.rand()), float(torch.rand(1)))
    tr.seed_everything(123)
    b = (random.random(), float(np.random.rand()), float(torch.rand(1)))
    assert a == b


@pytest.fixture(scope="module")
def pre1_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("data") / "pre1")
    dp.build_dataset(out, "pre1", {"asr": 24}, seed=1)
    return out


def _run(data_dir, out_dir, vocab, *, steps=8, stop_after=None, init_from=None, stage="pre1"):
    sched = tr.StageSchedule(stage, steps, 8, 1e-3, 0.25, seed=3)
    return tr.run_stage(
        data_dir,
        sched,
        out_dir,
        init_from=init_from,
        model_cfg=_tiny_model_cfg(build_vocab()) if vocab is None else _tiny_model_cfg(vocab),
        vis_cfg=TINY_CFG["vis_cfg"],
        vocab=vocab,
        stop_after=stop_after,
    )


def test_run_stage_completes_and_checkpoints(pre1_dir, tmp_path, vocab, deterministic):
    out = str(tmp_path / "run")
    model, info = _run(pre1_dir, out, vocab)
    assert info["completed"] and info["steps_run"] == 8
    assert info["stage"] == "pre1" and info["global_step"] == 8
    assert info["skipped_rows"] == 0
    _, meta = load_checkpoint(f"{out}/checkpoint.pt")
    assert meta["stages_done"] == ["pre1"]
    assert meta["global_step"] == 8
    rows = tr.read_loss_csv(f"{out}/loss.csv")
    assert [r[0] for r in rows] == list(range(1, 9))
    assert rows[0][1] == pytest.approx(tr.lr_at(1, 8, 1e-3, 0.25))
    assert all(math.isfinite(r[2]) and r[2] > 0 for r in rows)
    # A completed stage refuses to run again in the same out_dir.
    with pytest.raises(ValueError):
        _run(pre1_dir, out, vocab)


def test_resume_reproduces_uninterrupted_run(pre1_dir, tmp_path, vocab, deterministic):
    a = str(tmp_path / "a")
    b = str(tmp_path / "b")
    _run(pre1_dir, a, vocab)
    _, part = _run(pre1_dir, b, vocab, stop_after=4)
    assert not part["completed"] and part["step_in_stage"] == 4
    _, meta = load_checkpoint(f"{b}/checkpoint.pt")
    assert meta["stages_done"] == [] and meta["extra"]["step_in_stage"] == 4
    assert "optimizer" in meta["extra"]
    _, rest = _run(pre1_dir, b, vocab)
    assert rest["completed"] and rest["steps_run"] == 4
    with open(f"{a}/loss.csv", "rb") as fa, open(f"{b}/loss.csv", "rb") as fb:
        assert fa.read() == fb.read()
    wa, _ = load_checkpoint(f"{a}/checkpoint.pt")
    wb, _ = load_checkpoint(f"{b}/checkpoint.pt")
    for ta, tb in zip(wa.state_dict().values(), wb.state_dict().values()):
        assert torch.equal(ta, tb)


def test_run_stage_gatekeeping(pre1_dir, tmp_path, vocab):
    with pytest.raises(ValueError):
        _run(pre1_dir, str(tmp_path / "x"), vocab, stage="pre2")  # stage mismatch
    pre2_dir = str(tmp_path / "pre2data")
    dp.build_dataset(pre2_dir, "pre2", {"asr": 8}, seed=2)
    with pytest.raises(ValueError):  # fresh pre2 needs an init checkpoint
        _run(pre2_dir, str(tmp_path / "y"), vocab, stage="pre2")

    done = str(tmp_path / "done")
    _run(pre1_dir, done, vocab)
    sft_dir = str(tmp_path / "sftdata")
    dp.build_dataset(sft_dir, "sft", {"asr": 8}, seed=2)
    with pytest.raises(ValueError):  # sft needs pre1+pre2, checkpoint has pre1 only
        _run(sft_dir, str(tmp_path / "z"), vocab, stage="sft", init_from=f"{done}/checkpoint.pt")
    with pytest.raises(ValueError):  # completed pre1 checkpoint is not a resumable sft run
        _run(sft_dir, done, vocab, stage="sft")


def test_run_stage_rejects_images_in_pre1(tmp_path, vocab):
    data = str(tmp_path / "bad")
    dp.build_dataset(data, "pre2", {"vqa_ttt": 2}, seed=1)
    import json

    meta_path = f"{data}/meta.json"
    meta = json.load(open(meta_path))
    meta["stage"] = "pre1"
    with open(meta_path, "w") as fh:
        json.dump(meta, fh)
    with pytest.raises(ValueError, match="must not contain images"):
        _run(data, str(tmp_path / "out"), vocab)


def test_assemble_batch_splices_images(tmp_path, vocab):
    data = str(tmp_path / "mix")
    dp.build_dataset(data, "pre2", {"asr": 1, "ic_ttt": 1}, seed=4)
    examples, _specs, pixels, _meta = dp.load_dataset(data)
    torch.manual_seed(0)
    from trimodal.core_model import TrimodalLM

    model = TrimodalLM(vocab, _tiny_model_cfg(vocab), TINY_CFG["vis_cfg"])
    packed = dp.pack_batch(vocab, examples, n_v=16, max_tokens=256)
    emb, pad, labels, lmask = tr.assemble_batch(model, packed, [0, 1], pixels)

    width = max(packed.fused_lengths)
    assert emb.shape == (2, width, 32) and pad.shape == (2, width)
    for row in (0, 1):
        n = packed.fused_lengths[row]
        assert pad[row, :n].all() and not pad[row, n:].any()
        assert (labels[row, n:] == IGNORE_INDEX).all()
        assert not lmask[row, n:].any()

    plain = packed.img_pos.index(None)
    img = 1 - plain
    ids = packed.tokens[plain]
    assert labels[plain, : len(ids)].tolist() == ids
    assert lmask[plain, : len(ids)].tolist() == packed.loss_masks[plain]
    assert torch.allclose(
        emb[plain, : len(ids)], model.tok_emb(torch.tensor(ids)), atol=1e-6
    )

    pos = packed.img_pos[img]
    enc = model.encode_image(torch.as_tensor(pixels[packed.scene_ids[img]], dtype=torch.float32))
    assert torch.allclose(emb[img, pos : pos + 16], enc, atol=1e-5)
    assert (labels[img, pos : pos + 16] == IGNORE_INDEX).all()
    assert not lmask[img, pos : pos + 16].any()
    ids = packed.tokens[img]
    assert labels[img, pos + 16 : len(ids) + 15].tolist() == ids[pos + 1 :]


def test_read_loss_csv_roundtrip(tmp_path):
    path = str(tmp_path / "loss.csv")
    with open(path, "w") as fh:
        fh.write("step,lr,loss\n")
        fh.write(f"1,{0.1**20!r},{math.pi!r}\n")
    rows = tr.read_loss_csv(path)
    assert rows == [(1, 0.1**20, math.pi)]


