import json

import numpy as np
import pytest

from scenegen import formats
from scenegen.cli import main

VAE_MODEL = {"latents": 2, "channels": 8, "n_points": 32, "depth": 1, "heads": 2, "n_freq": 2, "head_width": 8, "enc_width": 8}
DEN_MODEL = {"width": 16, "layers": 1, "heads": 2, "pe_dim": 4, "T": 100}


def run(*argv):
    assert main([str(a) for a in argv]) == 0


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    run("synth", "--style", "blocks", "--seed", 1, "--dims", 64, 32, 64, "--chunk", 8, "--out", d / "a.nuiv")
    run("synth", "--style", "arches", "--seed", 2, "--dims", 64, 32, 64, "--chunk", 8, "--out", d / "b.nuiv")
    run("sample-chunks", d / "a.nuiv", d / "b.nuiv", "--quads-per-scene", 6, "--chunk", 8, "--out", d / "ds")
    (d / "vae.json").write_text(json.dumps({"model": VAE_MODEL, "n_queries": 64, "batch_size": 4}))
    run("train-vae", "--config", d / "vae.json", "--data", d / "ds", "--steps", 2, "--out", d / "vae.ckpt")
    run("encode-latents", "--data", d / "ds", "--vae", d / "vae.ckpt", "--out", d / "lat.bin")
    (d / "den.json").write_text(json.dumps({"model": DEN_MODEL, "batch_size": 4}))
    run("train-diffusion", "--config", d / "den.json", "--latents", d / "lat.bin", "--steps", 2,
        "--out", d / "den.ckpt")
    return d


def test_info_reports_header_dims(work, capsys):
    run("info", work / "a.nuiv")
    out = json.loads(capsys.readouterr().out)
    assert out == {"type": "voxels", "dims": list(formats.nuiv_dims(work / "a.nuiv"))} == \
        {"type": "voxels", "dims": [64, 32, 64]}
    run("info", work / "ds")
    ds = json.loads(capsys.readouterr().out)
    assert ds["quads"] == 12 and ds["val"] == 1
    run("info", work / "vae.ckpt")
    assert json.loads(capsys.readouterr().out)["kind"] == "vae"


def test_generate_smallest_scene(work, capsys):
    out = work / "g22.nuig"
    run("generate", "--diffusion", work / "den.ckpt", "--vae", work / "vae.ckpt", "--rows", 2, "--cols", 2,
        "--steps", 5, "--out", out)
    report = json.loads(capsys.readouterr().out.splitlines()[0])
    assert report["quads"] == 1 and report["recorded_calls"] == 5
    lines = (work / "g22.trace").read_text().splitlines()
    assert len(lines) == 1 and lines[0].split()[:3] == ["0", "0", "full"]
    assert (work / "g22.obj").exists()
    assert formats.read_latent_grid(out).shape == (2, 2, 2, 8)
    run("info", work / "g22.trace")
    assert json.loads(capsys.readouterr().out)["configs"]["full"] == 1


def test_generate_replays_byte_identically(work):
    for name, par in (("r1", 1), ("r2", 1), ("r3", 3)):
        run("generate", "--diffusion", work / "den.ckpt", "--rows", 3, "--cols", 4, "--seed", 9,
            "--steps", 4, "--parallel", par, "--out", work / f"{name}.nuig")
    a, b, c = ((work / f"{n}.nuig").read_bytes() for n in ("r1", "r2", "r3"))
    assert a == b == c
    run("generate", "--diffusion", work / "den.ckpt", "--rows", 3, "--cols", 4, "--seed", 10,
        "--steps", 4, "--out", work / "r4.nuig")
    assert (work / "r4.nuig").read_bytes() != a


def test_repaint_method_counts(work, capsys):
    run("generate", "--diffusion", work / "den.ckpt", "--rows", 2, "--cols", 3, "--method", "repaint",
        "--resample-r", 3, "--steps", 4, "--out", work / "rp.nuig")
    report = json.loads(capsys.readouterr().out.splitlines()[0])
    assert report["recorded_calls"] == report["expected_calls"] == 2 * (4 + 2 * 3)


def test_decode_and_eval(work, capsys):
    run("generate", "--diffusion", work / "den.ckpt", "--rows", 2, "--cols", 2, "--steps", 3,
        "--out", work / "d.nuig")
    run("decode", "--vae", work / "vae.ckpt", "--grid", work / "d.nuig", "--out", work / "d.obj",
        "--voxels", work / "d.nuiv")
    assert (work / "d.obj").exists()
    capsys.readouterr()
    run("eval", "--vae", work / "vae.ckpt", "--data", work / "ds", "--n-queries", 40, "--n-points", 200,
        "--out", work / "m.json")
    summary = json.loads(capsys.readouterr().out)
    assert summary["chunks"] == 4 and 0 <= summary["iou"] <= 1
    doc = json.loads((work / "m.json").read_text())
    assert doc["header"]["fpd"] == "unavailable"


def test_flags_override_config(work, tmp_path):
    cfg = tmp_path / "gen.json"
    cfg.write_text(json.dumps({"rows": 5, "cols": 5, "steps": 2, "diffusion": str(work / "den.ckpt")}))
    run("generate", "--config", cfg, "--rows", 2, "--out", tmp_path / "o.nuig")
    assert formats.read_latent_grid(tmp_path / "o.nuig").shape[:2] == (2, 5)


def test_errors_exit_nonzero(work, tmp_path, capsys):
    assert main(["info", str(tmp_path / "missing.nuiv")]) == 1
    assert "error" in capsys.readouterr().err
    assert main(["generate", "--diffusion", str(work / "den.ckpt"), "--rows", "1", "--out",
                 str(tmp_path / "x.nuig")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bogus": 1}))
    assert main(["generate", "--config", str(bad)]) == 1
    v = bytearray((work / "a.nuiv").read_bytes())
    v[4] = 9
    (tmp_path / "v.nuiv").write_bytes(bytes(v))
    assert main(["info", str(tmp_path / "v.nuiv")]) == 1
    assert "version" in capsys.readouterr().err
    assert main(["decode", "--vae", str(work / "den.ckpt"), "--grid", str(work / "r1.nuig")]) == 1


def test_preprocess_cleans_voxels(work, tmp_path):
    data = np.zeros((12, 10, 12), bool)
    data[:, :3] = True
    data[4:8, 3:8, 4:8] = True
    data[5:7, 4:6, 5:7] = False  # hollow core
    formats.write_nuiv(tmp_path / "raw.nuiv", type(formats.read_nuiv(work / "a.nuiv"))(data))
    run("preprocess", tmp_path / "raw.nuiv", "--ground-level", 5, "--out", tmp_path / "clean.nuiv")
    clean = formats.read_nuiv(tmp_path / "clean.nuiv").data
    assert clean[5:7, 4:6, 5:7].all()
    assert clean[:, :5].all() and not clean[0, 5:, 0].any()
