import json

import numpy as np
import pytest

from attnaspp import cli, gradcheck
from attnaspp.data import SynthConfig, gen_synthetic, write_samples, write_nifti, write_tensor
from attnaspp.data.samples import decode_pgm
from attnaspp.models import ModelSpec, build, save_checkpoint
from attnaspp.tensor import Tensor, record_op


def tiny_checkpoint(path, variant="att_unet", size=16):
    net = build(ModelSpec(variant=variant, depth=4, base_channels=2, input_size=size), 0)
    save_checkpoint(path, net.state_dict())
    return path


def test_synth_writes_manifest_and_is_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["synth", "--n", "250", "--seed", "4", "--split", "200,25,25"]
    assert cli.main(args + ["--out", str(a)]) == 0
    assert cli.main(args + ["--out", str(b)]) == 0
    assert len((a / "manifest.tsv").read_text().splitlines()) == 250
    assert [len((a / f"{k}.tsv").read_text().splitlines()) for k in ("train", "val", "test")] \
        == [200, 25, 25]
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_output_dir_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("ATTNASPP_OUTPUT_DIR", str(tmp_path / "env"))
    assert cli.main(["synth", "--n", "3", "--size", "16", "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "env" / "manifest.tsv").is_file()
    assert not (tmp_path / "flag").exists()


def test_eval_emits_one_row_per_sample(tmp_path, capsys):
    samples = gen_synthetic(SynthConfig(size=16), 126)
    manifest = write_samples(samples, tmp_path / "data")
    ckpt = tiny_checkpoint(tmp_path / "m.ckpt")
    out = tmp_path / "ev"
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--manifest", str(manifest),
                     "--out", str(out)]) == 0
    lines = (out / "eval_metrics.csv").read_text().splitlines()
    assert lines[0] == "sample_id,dsc,miou,acc" and len(lines) == 127
    summary = json.loads((out / "eval_summary.json").read_text())
    assert summary["n"] == 126
    assert all(0 <= summary[k] <= 1 for k in ("dsc", "miou", "acc"))
    assert "DSC" in capsys.readouterr().out


def test_eval_missing_checkpoint(tmp_path):
    manifest = write_samples(gen_synthetic(SynthConfig(size=16), 1), tmp_path)
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"),
                     "--manifest", str(manifest)]) == 2


def test_predict_masks_and_attention(tmp_path):
    img = tmp_path / "img.ten"
    write_tensor(img, np.random.default_rng(0).uniform(size=(16, 16)).astype(np.float32))
    ckpt = tiny_checkpoint(tmp_path / "att.ckpt")
    out = tmp_path / "pred"
    assert cli.main(["predict", "--checkpoint", str(ckpt), str(img), "--out", str(out),
                     "--attention"]) == 0
    assert decode_pgm((out / "img_mask.pgm").read_bytes()).shape == (16, 16)
    alphas = sorted(out.glob("img_alpha*.pgm"))
    assert len(alphas) == 4
    # untrained gates: every coefficient is 0.5 -> grey level 128
    assert all(np.all(decode_pgm(p.read_bytes()) == 128) for p in alphas)
    unet = tiny_checkpoint(tmp_path / "unet.ckpt", "unet")
    assert cli.main(["predict", "--checkpoint", str(unet), str(img), "--out", str(out),
                     "--attention"]) == 1


def test_slices_command(tmp_path):
    img, lab = tmp_path / "case.nii", tmp_path / "case_seg.nii"
    img.write_bytes(write_nifti(np.random.default_rng(0).normal(size=(8, 8, 5)).astype(np.float32)))
    seg = np.zeros((8, 8, 5), np.uint8)
    seg[2:4, 2:4, 3] = 1
    lab.write_bytes(write_nifti(seg))
    out = tmp_path / "sl"
    assert cli.main(["slices", "--image", str(img), "--label", str(lab), "--out", str(out)]) == 0
    assert len((out / "manifest.tsv").read_text().splitlines()) == 5
    assert cli.main(["slices", "--image", str(img), "--label", str(lab), "--policy", "max_area",
                     "--out", str(tmp_path / "one")]) == 0
    assert (tmp_path / "one" / "manifest.tsv").read_text().startswith("case_z003\t")


def test_corrupt_nifti_reports_offset(tmp_path, capsys):
    bad = tmp_path / "bad.nii"
    buf = bytearray(write_nifti(np.zeros((4, 4, 2), np.float32)))
    buf[344:348] = b"zzzz"
    bad.write_bytes(bytes(buf))
    assert cli.main(["slices", "--image", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "offset 344" in capsys.readouterr().err


def test_gradcheck_command_lists_layers(capsys):
    assert cli.main(["gradcheck", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    for name in gradcheck.CASES:
        assert name in out
    assert "FAIL" not in out


def _broken_scale_case(rng):
    x = Tensor(rng.uniform(-1, 1, (1, 2, 3, 3)), requires_grad=True)

    def f():
        # forward doubles, backward claims the derivative is 3
        return record_op(x.data * 2.0, (x,), lambda g: (3.0 * g,))
    return f, [x]


def test_gradcheck_reports_broken_backward(monkeypatch, capsys):
    monkeypatch.setattr(gradcheck, "CASES", {"broken_scale": _broken_scale_case,
                                             "relu": gradcheck.CASES["relu"]})
    assert cli.main(["gradcheck", "--seeds", "2"]) == 3
    out = capsys.readouterr().out
    lines = {ln.split()[0]: ln for ln in out.splitlines()[1:]}
    assert lines["broken_scale"].endswith("FAIL")
    assert lines["relu"].endswith("PASS")


def test_train_with_config_file_and_flag_override(tmp_path):
    data = tmp_path / "data"
    assert cli.main(["synth", "--n", "12", "--size", "16", "--split", "8,2,2",
                     "--out", str(data)]) == 0
    cfg = {"model.variant": "att_unet_aspp", "base_channels": 2, "input_size": 16,
           "train.epochs": 5, "batch_size": 4, "seed": 1,
           "train_manifest": str(data / "train.tsv"), "val_manifest": str(data / "val.tsv"),
           "test_manifest": str(data / "test.tsv")}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(tmp_path / "cfg.json"), "--epochs", "2",
                     "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["epochs"] == 2
    assert report["config"]["effective_aspp_rates"] == [1]
    assert len(report["lr_trace"]) == 2 and report["lr_trace"][0] == 1e-3
    assert {"best.ckpt", "last.ckpt", "test_metrics.csv"} <= {p.name for p in out.iterdir()}


def test_usage_errors(tmp_path):
    assert cli.main(["train", "--variant", "unet", "--epochs", "1"]) == 1  # no data
    assert cli.main(["train", "--variant", "nope", "--epochs", "1"]) == 1
    assert cli.main(["synth", "--n", "2", "--p-empty", "2", "--out", str(tmp_path)]) == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 1
