import itertools
import json
import pathlib
from functools import lru_cache

import numpy as np
import pytest
import torch

from trimodal import data_pipeline as dp
from trimodal import evaluation as ev
from trimodal.core_model import GenSettings, ModelConfig, TrimodalLM, save_checkpoint
from trimodal.scene_world import ground_truth, queried_cell, render, sample_scene
from trimodal.speech_codec import SpeechClip, tts_encode
from trimodal.vision_encoder import VisionConfig


def test_wer_fixtures():
    assert ev.wer("a b c", "a b c") == 0.0
    assert ev.wer("a b c", "a x c") == pytest.approx(1 / 3)
    assert ev.wer("a b c", "a c") == pytest.approx(1 / 3)
    assert ev.wer("a b", "a x b") == pytest.approx(1 / 2)
    assert ev.wer("", "") == 0.0
    assert ev.wer("", "x y") == 2.0
    assert ev.wer("a", "") == 1.0
    assert ev.wer("a b c d", "d c b a") == pytest.approx(1.0)  # 3 subs or mix, /4... see oracle


def _edit_distance(r: tuple, h: tuple) -> int:
    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(
            d(i - 1, j - 1) + (r[i - 1] != h[j - 1]),
            d(i - 1, j) + 1,
            d(i, j - 1) + 1,
        )

    return d(len(r), len(h))


def test_wer_matches_brute_force_alignment():
    words = ("w1", "w2", "w3")
    seqs = [
        s for n in range(0, 4) for s in itertools.product(words, repeat=n)
    ]
    for r in seqs:
        for h in seqs:
            got = ev.wer(" ".join(r), " ".join(h))
            if r:
                assert got == pytest.approx(_edit_distance(r, h) / len(r))
            else:
                assert got == float(len(h))


def test_cider_identical_unique_ngrams_scores_ten():
    refs = {"im1": ["a b c d e"], "im2": ["f g h i j"]}
    hyps = {"im1": "a b c d e", "im2": "f g h i j"}
    assert ev.cider(refs, hyps) == pytest.approx(10.0, abs=1e-6)


def test_cider_disjoint_scores_zero():
    refs = {"im1": ["a b c"], "im2": ["d e f"]}
    hyps = {"im1": "x y z", "im2": "u v w"}
    assert ev.cider(refs, hyps) == pytest.approx(0.0, abs=1e-9)


def test_cider_short_sentence_hand_value():
    # Doc x matches exactly on n=1,2; n=3,4 grams do not exist -> 0 there.
    # Doc y shares nothing with its reference. Mean over docs of the
    # n-averaged similarity, scaled by 10: ((1+1+0+0)/4*10 + 0)/2 = 2.5.
    refs = {"x": ["a b"], "y": ["c d"]}
    hyps = {"x": "a b", "y": "a b"}
    assert ev.cider(refs, hyps) == pytest.approx(2.5, abs=1e-9)


def test_cider_is_order_invariant_and_validates():
    refs = {"x": ["a b c"], "y": ["c d e"], "z": ["e f a"]}
    hyps = {"x": "a b", "y": "c e", "z": "f a"}
    forward = ev.cider(refs, hyps)
    back = ev.cider(
        dict(reversed(list(refs.items()))), dict(reversed(list(hyps.items())))
    )
    assert forward == pytest.approx(back, abs=1e-12)
    with pytest.raises(ValueError):
        ev.cider({"x": ["a"]}, {"y": "a"})
    with pytest.raises(ValueError):
        ev.cider({}, {})


def test_normalize_answer():
    assert ev.normalize_answer("The Red!") == "red"
    assert ev.normalize_answer("A blue square") == "blue square"
    assert ev.normalize_answer("YES.") == "yes"
    assert ev.normalize_answer("  two   words ") == "two words"
    assert ev.normalize_answer("an") == ""


def test_answer_accuracy():
    assert ev.answer_accuracy(["red", "2", "yes"], ["The red.", "3", "Yes!"]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        ev.answer_accuracy(["a"], [])
    with pytest.raises(ValueError):
        ev.answer_accuracy([], [])


def test_clip_similarity(codec):
    a = tts_encode(codec, "a red circle", "american", 1.0)
    b = tts_encode(codec, "a red circle", "british", 1.15)
    c = tts_encode(codec, "qq zz pp", "american", 1.0)
    assert ev.clip_similarity(codec, a, a) == pytest.approx(1.0)
    ab = ev.clip_similarity(codec, a, b)
    ac = ev.clip_similarity(codec, a, c)
    assert ac < ab
    empty = SpeechClip(units=(), accent="american", speed=1.0)
    assert ev.clip_similarity(codec, a, empty) == 0.0


def test_speech_scores(codec):
    ref_texts = ["red circle", "blue square"]
    ref_clips = [tts_encode(codec, t, "american", 1.0) for t in ref_texts]
    hyp = [ref_clips[0], None]
    scores = ev.speech_scores(codec, ref_texts, ref_clips, hyp)
    assert scores["wer"] == pytest.approx((0.0 + 1.0) / 2)
    assert scores["empty_rate"] == 0.5
    assert scores["decoded"] == ["red circle", ""]
    assert 0.0 < scores["similarity"] <= 1.0
    with pytest.raises(ValueError):
        ev.speech_scores(codec, [], [], [])
    with pytest.raises(ValueError):
        ev.speech_scores(codec, ["a"], ref_clips, hyp)


def test_report_to_text_shape():
    report = {
        "rows": [
            {"task": "ASR", "io_config": "STT", "paradigm": "direct", "n": 4, "wer": 0.25},
            {"task": "VQA", "io_config": "TTS", "paradigm": "chain", "n": 2,
             "accuracy": 0.5, "wer": 1.0, "similarity": 0.5, "empty_rate": 0.0},
        ]
    }
    text = ev.report_to_text(report)
    lines = text.splitlines()
    assert lines[0].split() == ["task", "io", "paradigm", "n", "metrics"]
    assert "wer=0.2500" in lines[1]
    # Metric order is fixed: wer before accuracy before similarity.
    row = lines[2]
    assert row.index("wer=") < row.index("accuracy=") < row.index("similarity=")


def test_ablation_serializers():
    result = {
        "accents": ["american", "scottish"],
        "speeds": [0.7, 1.3],
        "held_out_accent": "scottish",
        "n_per_cell": 3,
        "wer": [[0.0, 0.125], [0.5, 1.0]],
    }
    csv = ev.ablation_to_csv(result)
    lines = csv.splitlines()
    assert lines[0] == "accent,0.7,1.3"
    assert lines[1] == "american,0.0,0.125"
    parsed = [float(v) for v in lines[2].split(",")[1:]]
    assert parsed == [0.5, 1.0]
    text = ev.ablation_to_text(result)
    assert "scottish" in text and "*" in text
    assert text.splitlines()[1].startswith("american ")


def test_write_heatmap_ppm(tmp_path):
    grid = np.array([[0.0, 1.0], [0.5, 0.25]])
    path = str(tmp_path / "a.ppm")
    ev.write_heatmap_ppm(grid, path, scale=2)
    blob = pathlib.Path(path).read_bytes()
    assert blob.startswith(b"P6\n4 4\n255\n")
    assert len(blob) == len(b"P6\n4 4\n255\n") + 4 * 4 * 3
    ev.write_heatmap_ppm(grid, str(tmp_path / "b.ppm"), scale=2)
    assert blob == (tmp_path / "b.ppm").read_bytes()
    # All-zero grids must not divide by zero.
    ev.write_heatmap_ppm(np.zeros((2, 2)), str(tmp_path / "z.ppm"), scale=1)


@pytest.fixture(scope="module")
def tiny_model(vocab):
    torch.manual_seed(3)
    cfg = ModelConfig(vocab_size=vocab.size, d_h=32, n_layers=1, n_heads=2, max_seq=320)
    model = TrimodalLM(vocab, cfg, VisionConfig(d_v=16, d_h=32, n_layers=1, n_heads=2))
    model.eval()
    return model


@pytest.fixture(scope="module")
def tiny_ckpt(tiny_model, tmp_path_factory):
    path = str(tmp_path_factory.mktemp("ckpt") / "checkpoint.pt")
    save_checkpoint(tiny_model, path, stages_done=["pre1", "pre2", "sft"], global_step=0)
    return path


def test_attention_probe_contract(tiny_model):
    spec = None
    for seed in range(64):
        cand = sample_scene(seed)
        colors = ground_truth(cand)["qa"][1:-12]
        if colors and queried_cell(cand, colors[0][0]) is not None:
            spec, question = cand, colors[0][0]
            break
    assert spec is not None
    image = torch.as_tensor(render(spec), dtype=torch.float32)
    for paradigm in ("direct", "chain"):
        probe = ev.attention_probe(
            tiny_model, image, question,
            paradigm=paradigm,
            settings=GenSettings.toy(text_max_new=8, speech_max_new=12),
            seed=1,
        )
        assert probe["grid"].shape == (4, 4)
        assert probe["matrix"].ndim == 2 and probe["matrix"].shape[1] == 16
        if probe["cell"] is None:
            assert probe["matrix"].shape[0] == 0
            assert float(np.abs(probe["grid"]).sum()) == 0.0
        else:
            r, c = probe["cell"]
            assert 0 <= r < 4 and 0 <= c < 4
            assert np.allclose(probe["matrix"].sum(axis=1), 1.0, atol=1e-5)
            assert float(probe["grid"].sum()) == pytest.approx(1.0, abs=1e-5)
            assert probe["grid"][r, c] == pytest.approx(float(probe["grid"].max()))


def test_run_example_needs_pixels(tiny_model):
    examples, _ = dp.build_eval_set({"vqa_ttt": 1}, seed=2)
    with pytest.raises(ValueError):
        ev.run_example(
            tiny_model, examples[0], None,
            paradigm="direct", settings=GenSettings.toy(text_max_new=4), seed=0,
        )


@pytest.fixture(scope="module")
def tiny_eval_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("eval") / "ds")
    dp.build_dataset(out, "eval", {"asr": 2, "vqa_ttt": 2, "ic_tts": 1}, seed=6)
    return out


def test_evaluate_checkpoint_report(tiny_ckpt, tiny_eval_dir, tmp_path):
    out = str(tmp_path / "rep")
    settings = GenSettings.toy(text_max_new=6, speech_max_new=10)
    report = ev.evaluate_checkpoint(
        tiny_ckpt, tiny_eval_dir, out, settings=settings, seed=4, max_per_combo=1
    )
    combos = {(r["task"], r["io_config"], r["paradigm"]) for r in report["rows"]}
    assert ("ASR", "STT", "direct") in combos
    assert ("VQA", "TTT", "direct") in combos
    assert ("IC", "TTS", "direct") in combos and ("IC", "TTS", "chain") in combos
    assert ("VQA", "TTT", "chain") not in combos  # text outputs stay direct
    for row in report["rows"]:
        assert row["n"] == 1
        if row["task"] == "ASR":
            assert "wer" in row
        if row["task"] == "IC":
            assert "cider" in row
    assert report["stages_done"] == ["pre1", "pre2", "sft"]
    assert report["settings"]["speech_max_new"] == 10
    saved = json.loads(pathlib.Path(f"{out}/report.json").read_text())
    assert saved == json.loads(ev._dumps(report))
    assert pathlib.Path(f"{out}/report.txt").read_text() == ev.report_to_text(report)

    again = ev.evaluate_checkpoint(
        tiny_ckpt, tiny_eval_dir, None, settings=settings, seed=4, max_per_combo=1
    )
    assert ev._dumps(again) == ev._dumps(report)


def test_ablation_grid_tiny(tiny_ckpt, tiny_eval_dir, tmp_path):
    out = str(tmp_path / "abl")
    result = ev.ablation_grid(
        tiny_ckpt, tiny_eval_dir, out,
        accents=("american", "scottish"), speeds=(1.0,),
        settings=GenSettings.toy(text_max_new=4, speech_max_new=8),
        max_clips=2, seed=9,
    )
    assert result["accents"] == ["american", "scottish"]
    assert result["n_per_cell"] == 2
    assert len(result["wer"]) == 2 and len(result["wer"][0]) == 1
    for row in result["wer"]:
        assert all(v >= 0.0 for v in row)
    saved = json.loads(pathlib.Path(f"{out}/ablation.json").read_text())
    assert saved == json.loads(ev._dumps(result))
    csv_lines = pathlib.Path(f"{out}/ablation.csv").read_text().splitlines()
    assert csv_lines[0] == "accent,1.0"
    assert float(csv_lines[1].split(",")[1]) == result["wer"][0][0]
    assert "* accent unseen in training" in pathlib.Path(f"{out}/ablation.txt").read_text()


def test_ablation_grid_rejects_bad_inputs(tiny_ckpt, tiny_eval_dir, tmp_path):
    with pytest.raises(ValueError):
        ev.ablation_grid(tiny_ckpt, tiny_eval_dir, accents=("martian",), speeds=(1.0,))
    with pytest.raises(ValueError):
        ev.ablation_grid(tiny_ckpt, tiny_eval_dir, accents=("american",), speeds=(0.9,))
    no_asr = str(tmp_path / "noasr")
    dp.build_dataset(no_asr, "eval", {"vqa_ttt": 1}, seed=1)
    with pytest.raises(ValueError):
        ev.ablation_grid(
            tiny_ckpt, no_asr, accents=("american",), speeds=(1.0,), max_clips=1
        )
