import json
import re
import subprocess
import sys

import numpy as np
import pytest

from assocdetr import cli
from assocdetr.autodiff import ops, serialize
from assocdetr.imageio import decode, write_image
from assocdetr.pretrain import synth_corpus
from assocdetr.pretrain.synth import LabeledPatch

MANIFEST_KEYS = ["command", "config", "seed", "version", "started", "finished"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def manifest_of(text):
    lines = text.splitlines()
    head = [ln for ln in lines[:len(MANIFEST_KEYS)]]
    assert [ln.split(":", 1)[0] for ln in head] == [f"# {k}" for k in MANIFEST_KEYS]
    return {ln.split(":", 1)[0][2:]: ln.split(":", 1)[1].strip() for ln in head}, lines[len(MANIFEST_KEYS):]


# --- gradcheck ------------------------------------------------------------------------------

def test_gradcheck_ops_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--scope", "ops", "--seed", "0")
    assert code == 0
    meta, body = manifest_of(out)
    assert meta["command"] == "gradcheck" and json.loads(meta["config"]) == {"scope": "ops"}
    assert body[0] == "op,input-shape,rel-err,pass"
    rows = [ln for ln in body[1:] if not ln.startswith("#")]
    assert len(rows) >= 60
    for row in rows:
        assert re.fullmatch(r"[\w\-\[\]+]+,[\dx]+,\d\.\d{3}e[+-]\d+,pass", row), row


def test_gradcheck_sabotage_names_the_op(capsys, monkeypatch):
    monkeypatch.setattr(ops, "_sigmoid_grad", lambda y, g: g * y)  # drops the (1 - y) factor
    code, out, err = run(capsys, "gradcheck", "--scope", "ops")
    assert code == 1
    assert "sigmoid" in err
    assert any(ln.startswith("sigmoid,") and ln.endswith(",fail") for ln in out.splitlines())
    assert all(ln.endswith(",pass") for ln in out.splitlines() if ln.startswith("relu,"))


def test_gradcheck_bad_scope(capsys):
    code, _, _ = run(capsys, "gradcheck", "--scope", "everything")
    assert code == 2


# --- shapes -------------------------------------------------------------------------------------

def test_shapes_non_divisible(capsys):
    code, out, err = run(capsys, "shapes", "100")
    assert code == 2 and out == ""
    assert "multiple of 32" in err and "Traceback" not in err


def test_shapes_toy_64(capsys):
    code, out, _ = run(capsys, "shapes", "--size", "64")
    assert code == 0
    meta, body = manifest_of(out)
    assert len(body) >= 11
    assert body[0] == "image\t1,3,64,64"
    assert "queries\t1,84,32" not in body  # width is the embed dim
    assert body[-1] == "queries\t1,84,256"


def test_shapes_needs_a_size(capsys):
    assert run(capsys, "shapes")[0] == 2


# --- params -----------------------------------------------------------------------------------------

def test_params_toy_table(capsys):
    code, out, _ = run(capsys, "params", "--preset", "toy")
    assert code == 0
    _, body = manifest_of(out)
    assert body[0] == "component,params,reference,deviation,status"
    rows = {r.split(",")[0]: r.split(",") for r in body[1:]}
    for comp in ("backbone", "bam", "am", "encoder_stub", "ae_total", "total", "shared_stem_unique"):
        assert comp in rows
        assert rows[comp][1].isdigit()
    assert rows["bam"][2] == "" and rows["am"][4] == "ok"   # budgets only apply to full-width presets
    assert int(rows["ae_total"][1]) == int(rows["bam"][1]) + int(rows["am"][1])


def test_params_r34_within_budgets(capsys):
    code, out, _ = run(capsys, "params", "--preset", "r34-shape")
    assert code == 0
    rows = {r.split(",")[0]: r.split(",") for r in manifest_of(out)[1][1:]}
    for comp, ref in (("bam", 2_400_000), ("am", 700_000), ("ae_total", 3_100_000)):
        assert int(rows[comp][2]) == ref and rows[comp][4] == "ok"
    assert "FLAG" not in out


def test_params_flags_out_of_budget(capsys, monkeypatch):
    monkeypatch.setitem(cli.BUDGETS, "am", 100_000)
    code, out, _ = run(capsys, "params", "--preset", "r34-shape")
    assert code == 0
    assert [r for r in out.splitlines() if r.startswith("am,")][0].endswith(",FLAG")


# --- bench ---------------------------------------------------------------------------------------------

def test_bench_format(capsys, tmp_path):
    dest = tmp_path / "bench.csv"
    code, out, _ = run(capsys, "bench", "--attention", "window", "--sizes", "16,64,256", "--repeats", "3",
                       "--out", dest)
    text = dest.read_text()
    meta, body = manifest_of(text)
    assert "machine" in json.loads(meta["config"])
    assert body[0] == "impl,n,median_seconds"
    assert [r.split(",")[:2] for r in body[1:4]] == [["window", "16"], ["window", "64"], ["window", "256"]]
    assert re.fullmatch(r"# fitted_slope\[window\]=-?\d+\.\d+ bounds=\[0\.8,1\.3\] (ok|FLAG)", body[4])
    assert code == (0 if body[4].endswith("ok") else 1)


@pytest.mark.parametrize("argv", [["--sizes", "64,16"], ["--repeats", "2"], ["--sizes", "15,64"],
                                  ["--sizes", "a,b"]])
def test_bench_rejects_bad_arguments(capsys, argv):
    assert run(capsys, "bench", *argv)[0] == 2


# --- pretrain ---------------------------------------------------------------------------------------------

SMALL = ["--synthetic", "--per-class", "4", "--patch", "32", "--epochs", "1", "--batch-size", "8"]


def test_pretrain_requires_a_source(capsys, tmp_path):
    assert run(capsys, "pretrain", "--out", tmp_path / "x")[0] == 2
    code, _, err = run(capsys, "pretrain", tmp_path / "missing", "--out", tmp_path / "x")
    assert code == 2 and "images/" in err
    assert run(capsys, "pretrain", tmp_path, "--synthetic")[0] == 2


def test_pretrain_outputs_and_determinism(capsys, tmp_path):
    code, out, _ = run(capsys, "pretrain", *SMALL, "--seed", "1", "--out", tmp_path / "a")
    assert code == 0
    assert re.search(r"^initial_loss=\d+\.\d+$", out, re.M) and re.search(r"^val_accuracy=[01]\.\d+$", out, re.M)
    meta, body = manifest_of((tmp_path / "a.metrics.csv").read_text())
    assert json.loads(meta["config"])["learning_rate"] == cli.PRETRAIN_LR
    assert body[0] == "epoch,split,loss,accuracy" and len(body) == 3
    side = json.loads((tmp_path / "a.aew1.manifest.json").read_text())
    assert side["command"] == "pretrain" and side["seed"] == 1
    state = serialize.load(tmp_path / "a.aew1")
    assert {"head.weight", "head.bias"} <= set(state)
    assert any(k.startswith("backbone.stem.") for k in state) and any(k.startswith("bam.") for k in state)
    run(capsys, "pretrain", *SMALL, "--seed", "1", "--out", tmp_path / "b")
    assert (tmp_path / "a.aew1").read_bytes() == (tmp_path / "b.aew1").read_bytes()


def test_pretrain_zero_lr_keeps_initial_weights(capsys, tmp_path):
    assert run(capsys, "pretrain", *SMALL, "--lr", "0", "--out", tmp_path / "z")[0] == 0
    saved = serialize.load(tmp_path / "z.aew1")
    _, fresh = cli.build_classifier("toy", 0)
    params = dict(fresh.named_parameters())
    assert set(params) <= set(saved)
    for name, p in params.items():
        assert np.array_equal(saved[name], p.data), name


def test_pretrain_from_directory(capsys, tmp_path):
    from pathlib import Path
    root = Path(__file__).parent / "fixtures" / "dataset"
    code, out, _ = run(capsys, "pretrain", root, "--patch", "32", "--epochs", "1", "--batch-size", "2",
                       "--out", tmp_path / "d")
    assert code == 0 and (tmp_path / "d.aew1").exists()
    code, _, err = run(capsys, "pretrain", root, "--patch", "16", "--out", tmp_path / "e")
    assert code == 2 and "multiple of 32" in err


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_pretrain_non_finite_exit_1(capsys, tmp_path, monkeypatch):
    import assocdetr.pretrain as pretrain

    def poisoned(seed, per_class, patch):
        corpus = synth_corpus(seed, per_class, patch)
        return [LabeledPatch(np.full_like(p.pixels, np.nan), p.label) for p in corpus]

    monkeypatch.setattr(pretrain, "synth_corpus", poisoned)
    code, _, err = run(capsys, "pretrain", *SMALL, "--out", tmp_path / "n")
    assert code == 1 and "non-finite loss" in err and "step 0" in err


# --- attnmap -----------------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def weights(tmp_path_factory):
    path = tmp_path_factory.mktemp("w") / "clf.aew1"
    _, clf = cli.build_classifier("toy", 0)
    serialize.save(clf, path)
    return path


@pytest.fixture(scope="module")
def zero_weights(tmp_path_factory):
    path = tmp_path_factory.mktemp("w") / "zero.aew1"
    _, clf = cli.build_classifier("toy", 0)
    clf.bam.zero_init_outputs()
    serialize.save(clf, path)
    return path


def read_csv_map(path):
    return np.array([[float(v) for v in ln.split(",")] for ln in path.read_text().splitlines()
                     if not ln.startswith("#")])


def test_attnmap_dimensions_and_agreement(capsys, tmp_path, weights):
    img = tmp_path / "img.ppm"
    write_image(img, np.random.default_rng(0).uniform(0, 1, (70, 100, 3)))
    code, out, _ = run(capsys, "attnmap", "--weights", weights, "--image", img, "--out", tmp_path / "m")
    assert code == 0
    fb_pgm = decode((tmp_path / "m_fb.pgm").read_bytes())
    # 70 x 100 crops to 64 x 96; F_b sits at stride 32
    assert fb_pgm.shape == (2, 3)
    for kind in ("fb", "attn"):
        raw = read_csv_map(tmp_path / f"m_{kind}.csv")
        pgm = np.rint(decode((tmp_path / f"m_{kind}.pgm").read_bytes()) * 255).astype(int)
        lo, hi = raw.min(), raw.max()
        assert np.array_equal(pgm, np.rint((raw - lo) / (hi - lo) * 255).astype(int))
    attn = read_csv_map(tmp_path / "m_attn.csv")
    assert attn.shape == (16, 16)
    # window 0 of a 2 x 3 map holds 4 real tokens; padded keys carry no weight
    np.testing.assert_allclose(attn.sum(axis=1), 1.0, atol=1e-12)
    assert manifest_of((tmp_path / "m_fb.csv").read_text())[0]["command"] == "attnmap"
    assert b"# command: attnmap" in (tmp_path / "m_fb.pgm").read_bytes()[:200]


def test_attnmap_constant_maps_to_zero(capsys, tmp_path, zero_weights):
    img = tmp_path / "flat.pgm"
    write_image(img, np.full((64, 64), 0.5))
    assert run(capsys, "attnmap", "--weights", zero_weights, "--image", img, "--out", tmp_path / "c")[0] == 0
    # F_b is identically zero, so its heatmap is all-equal and maps to 0
    assert np.all(decode((tmp_path / "c_fb.pgm").read_bytes()) == 0)
    assert np.all(read_csv_map(tmp_path / "c_fb.csv") == 0)
    # zero tokens give uniform weights over the 4 real keys of window 0 and none on padding
    attn = read_csv_map(tmp_path / "c_attn.csv")
    real = np.zeros(16, dtype=bool)
    real[[0, 1, 4, 5]] = True
    assert np.all(attn[:, real] == 0.25) and np.all(attn[:, ~real] == 0.0)


def test_normalize_guard():
    assert np.all(cli.normalize_u8(np.full((3, 3), 7.0)) == 0)
    assert cli.normalize_u8(np.array([[0.0, 1.0, 0.5]])).tolist() == [[0, 255, 128]]


def test_attnmap_errors(capsys, tmp_path, weights):
    img = tmp_path / "img.pgm"
    write_image(img, np.full((64, 64), 0.5))
    assert run(capsys, "attnmap", "--weights", tmp_path / "none", "--image", img)[0] == 2
    (tmp_path / "junk.ppm").write_bytes(b"P9 nonsense")
    assert run(capsys, "attnmap", "--weights", weights, "--image", tmp_path / "junk.ppm")[0] == 2
    other = tmp_path / "other.aew1"
    serialize.save({"unrelated": np.ones(2)}, other)
    assert run(capsys, "attnmap", "--weights", other, "--image", img)[0] == 2
    code, _, err = run(capsys, "attnmap", "--weights", weights, "--image", img, "--window-index", "99",
                       "--out", tmp_path / "q")
    assert code == 2 and "window-index" in err
    small = tmp_path / "small.pgm"
    write_image(small, np.full((16, 16), 0.5))
    assert run(capsys, "attnmap", "--weights", weights, "--image", small)[0] == 2


# --- entry points ---------------------------------------------------------------------------------------------

def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "assocdetr", "shapes", "64"], capture_output=True, text=True)
    assert res.returncode == 0 and "F3_hat\t1,256,2,2" in res.stdout


def test_help_and_unknown_command(capsys):
    assert run(capsys, "--help")[0] == 0
    assert run(capsys, "frobnicate")[0] == 2
