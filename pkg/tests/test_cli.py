import filecmp
import json
import os
import pathlib

import pytest

from trimodal.cli import main

TINY_MODEL_ARGS = [
    "--model-set", "d_h=32",
    "--model-set", "n_layers=1",
    "--model-set", "n_heads=2",
    "--model-set", "max_seq=1024",
    "--vision-set", "d_v=16",
    "--vision-set", "d_h=32",
    "--vision-set", "n_layers=1",
    "--vision-set", "n_heads=2",
]


def test_no_command_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_command_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_gen_data_writes_and_reruns_identically(tmp_path, capsys):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    argv = ["gen-data", "--stage", "pre1", "--counts", "asr=3,tts=2", "--seed", "5"]
    assert main(argv + ["--out", a]) == 0
    out = capsys.readouterr().out
    assert "wrote 5 examples" in out
    assert "total" in out
    for name in ("manifest.jsonl", "meta.json", "stats.json", "stats.txt"):
        assert os.path.exists(os.path.join(a, name))
    assert main(argv + ["--out", b]) == 0
    for name in ("manifest.jsonl", "meta.json", "stats.json"):
        assert filecmp.cmp(os.path.join(a, name), os.path.join(b, name), shallow=False)


def test_gen_data_set_overrides(tmp_path, capsys):
    out = str(tmp_path / "d")
    rc = main([
        "gen-data", "--stage", "pre1", "--counts", "asr=2", "--out", out,
        "--set", "noisy_fraction=0.0",
    ])
    assert rc == 0
    meta = json.loads(pathlib.Path(out, "meta.json").read_text())
    assert meta["noisy_fraction"] == 0.0
    capsys.readouterr()
    rc = main([
        "gen-data", "--stage", "pre1", "--counts", "asr=2",
        "--out", str(tmp_path / "e"), "--set", "bogus_key=1",
    ])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


def test_gen_data_rejects_bad_counts(tmp_path, capsys):
    rc = main(["gen-data", "--stage", "pre1", "--counts", "vqa_ttt=1",
               "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    """One tiny end-to-end pass shared by the command tests below."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    evaldir = str(root / "eval")
    run = str(root / "run")
    assert main(["gen-data", "--stage", "pre1", "--counts", "asr=8,tts=4",
                 "--out", data, "--seed", "3"]) == 0
    assert main(["gen-data", "--stage", "eval", "--counts", "asr=1",
                 "--out", evaldir, "--seed", "4"]) == 0
    rc = main([
        "train", "--stage", "pre1", "--data", data, "--out", run,
        "--steps", "3", "--batch-size", "4", "--seed", "2", "--log-every", "1",
        *TINY_MODEL_ARGS,
    ])
    assert rc == 0
    return {"data": data, "eval": evaldir, "run": run,
            "ckpt": os.path.join(run, "checkpoint.pt")}


def test_train_outputs(cli_run, capsys):
    assert os.path.exists(cli_run["ckpt"])
    loss_csv = os.path.join(cli_run["run"], "loss.csv")
    lines = pathlib.Path(loss_csv).read_text().splitlines()
    assert lines[0] == "step,lr,loss"
    assert len(lines) == 4
    capsys.readouterr()
    # A second run over a finished stage is refused, not silently redone.
    rc = main([
        "train", "--stage", "pre1", "--data", cli_run["data"],
        "--out", cli_run["run"], "--steps", "3", "--batch-size", "4",
        *TINY_MODEL_ARGS,
    ])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


def test_train_missing_data_dir(tmp_path, capsys):
    rc = main(["train", "--stage", "pre1", "--data", str(tmp_path / "nope"),
               "--out", str(tmp_path / "run"), "--steps", "1"])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


def test_eval_command(cli_run, tmp_path, capsys):
    out = str(tmp_path / "report")
    rc = main([
        "eval", "--checkpoint", cli_run["ckpt"], "--data", cli_run["eval"],
        "--out", out, "--max-per-combo", "1",
    ])
    assert rc == 0
    printed = capsys.readouterr().out
    assert printed.splitlines()[0].split() == ["task", "io", "paradigm", "n", "metrics"]
    assert "ASR" in printed
    report = json.loads(pathlib.Path(out, "report.json").read_text())
    assert [r["task"] for r in report["rows"]] == ["ASR"]


def test_ablate_command(cli_run, capsys):
    rc = main([
        "ablate", "--checkpoint", cli_run["ckpt"], "--data", cli_run["eval"],
        "--accents", "american", "--speeds", "1.0", "--max-clips", "1",
    ])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].startswith("accent")
    assert "american" in out


def test_attention_command(cli_run, tmp_path, capsys):
    out = str(tmp_path / "attn")
    rc = main([
        "attention", "--checkpoint", cli_run["ckpt"], "--out", out,
        "--scenes", "1", "--dump-first", "1", "--seed", "6",
    ])
    assert rc == 0
    printed = capsys.readouterr().out
    assert "chain: localization" in printed
    assert "direct: localization" in printed
    assert os.path.exists(os.path.join(out, "attention.json"))
    dumped = json.loads(pathlib.Path(out, "attention.json").read_text())
    for entry in dumped["dumps"]:
        assert os.path.exists(os.path.join(out, entry["file"]))
        assert os.path.exists(os.path.join(out, entry["matrix_file"]))


def test_trace_command(cli_run, capsys):
    rc = main(["trace", "--loss-csv", os.path.join(cli_run["run"], "loss.csv"),
               "--window", "3"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "steps 1..3" in out
    assert "smoothed" in out


def test_infer_asr(cli_run, capsys):
    rc = main([
        "infer", "--checkpoint", cli_run["ckpt"], "--task", "ASR",
        "--io-config", "STT", "--payload", "hi there", "--json",
    ])
    assert rc == 0
    lines = capsys.readouterr().out.splitlines()
    payload = json.loads(lines[-1])
    assert payload["task"] == "ASR" and payload["io_config"] == "STT"
    assert "text" in payload


def test_infer_vqa_chain(cli_run, capsys):
    rc = main([
        "infer", "--checkpoint", cli_run["ckpt"], "--task", "VQA",
        "--io-config", "TTS", "--paradigm", "chain",
        "--payload", "what is the color of the circle?", "--json",
    ])
    assert rc == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("scene 0: ")
    payload = json.loads(lines[-1])
    assert "speech_units" in payload and "speech_decoded" in payload
    assert "text" in payload  # chain keeps the intermediate answer


def test_infer_missing_payload(cli_run, capsys):
    rc = main(["infer", "--checkpoint", cli_run["ckpt"], "--task", "TTS",
               "--io-config", "TTS"])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


def test_infer_rejects_bad_combo(cli_run, capsys):
    rc = main(["infer", "--checkpoint", cli_run["ckpt"], "--task", "ASR",
               "--io-config", "TTT", "--payload", "hi"])
    assert rc == 2
    assert "error:" in capsys.readouterr().err
