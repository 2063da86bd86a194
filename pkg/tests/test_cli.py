import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from scalable_vit import serialize
from scalable_vit.backbone import build_model
from scalable_vit.cli import main
from scalable_vit.config import toy_spec, variant
from scalable_vit.imageio import read_pgm, read_ppm, to_uint8, write_pgm, write_ppm
from scalable_vit.errors import FormatError


@pytest.fixture
def run(capsys):
    def _run(*argv):
        code = main([str(a) for a in argv])
        out, err = capsys.readouterr()
        return code, out, err
    return _run


@pytest.fixture
def toy_files(tmp_path):
    spec = toy_spec()
    spec_path = tmp_path / "toy.json"
    spec_path.write_text(spec.to_json())
    weights = tmp_path / "toy.svtw"
    serialize.save(weights, build_model(spec, seed=1).state_dict())
    img = tmp_path / "img.ppm"
    write_ppm(img, np.random.default_rng(0).random((32, 32, 3)))
    return spec_path, weights, img


# -- summary --------------------------------------------------------------------

def test_summary_variant_s(run, tmp_path):
    code, out, _ = run("summary", "--variant", "S", "--csv", tmp_path / "s.csv")
    assert code == 0
    row3 = next(line for line in out.splitlines() if line.strip().startswith("3 "))
    assert " 20 " in row3 and "1/4" in row3 and "1.25" in row3
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["path", "params", "flops_analytic", "flops_measured"]


def test_summary_variant_b_totals(run, tmp_path):
    code, _, _ = run("summary", "--variant", "B", "--csv", tmp_path / "b.csv")
    total = list(csv.reader(open(tmp_path / "b.csv")))[-1]
    assert code == 0 and total[0] == "total"
    assert abs(int(total[1]) / 81e6 - 1) <= 0.15 and abs(int(total[2]) / 8.6e9 - 1) <= 0.15


def test_summary_bad_spec_exit_2(run, tmp_path):
    d = variant("S").to_dict()
    d["stages"][0]["heads"] = 3
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(d))
    code, _, err = run("summary", "--spec", bad)
    assert code == 2 and "divisible" in err


def test_missing_spec_exit_2(run, tmp_path):
    assert run("summary", "--spec", tmp_path / "nope.json")[0] == 2


# -- infer ----------------------------------------------------------------------

def test_infer_probabilities_and_determinism(run, toy_files):
    spec, weights, img = toy_files
    code, out, _ = run("infer", "--spec", spec, "--weights", weights, img, "--topk", "2")
    assert code == 0
    scores = [float(line.split(",")[2]) for line in out.splitlines()[1:]]
    assert len(scores) == 2 and all(np.isfinite(scores)) and sum(scores) <= 1 + 1e-9
    assert run("infer", "--spec", spec, "--weights", weights, img, "--topk", "2")[1] == out


def test_infer_random_weights_variant(run, tmp_path):
    img = tmp_path / "big.ppm"
    write_ppm(img, np.full((64, 64, 3), 0.5))
    code, out, _ = run("infer", "--variant", "S", img, "--topk", "5")
    scores = [float(line.split(",")[2]) for line in out.splitlines()[1:]]
    assert code == 0 and len(scores) == 5 and sum(scores) <= 1


def test_infer_malformed_ppm_exit_3(run, toy_files, tmp_path):
    spec, weights, _ = toy_files
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P6\n4 4\n255\n" + b"\x00" * 10)
    assert run("infer", "--spec", spec, "--weights", weights, bad)[0] == 3
    bad.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    assert run("infer", "--spec", spec, "--weights", weights, bad)[0] == 3


def test_infer_weight_mismatch_exit_4(run, toy_files):
    _, weights, img = toy_files
    assert run("infer", "--variant", "S", "--weights", weights, img)[0] == 4


def test_infer_missing_image_exit_2(run, toy_files):
    spec, weights, _ = toy_files
    assert run("infer", "--spec", spec, "--weights", weights, "missing.ppm")[0] == 2


def test_corrupt_weights_exit_3(run, toy_files, tmp_path):
    spec, _, img = toy_files
    bad = tmp_path / "bad.svtw"
    bad.write_bytes(b"SVTX")
    assert run("infer", "--spec", spec, "--weights", bad, img)[0] == 3


# -- featmap ----------------------------------------------------------------------

def test_featmap_sizes_and_csv_consistency(run, tmp_path):
    img = tmp_path / "img.ppm"
    write_ppm(img, np.random.default_rng(1).random((224, 224, 3)))
    out = tmp_path / "fm"
    code, _, _ = run("featmap", "--variant", "S", img, "--stage", 1, "--block", 2, "--global-block", 4,
                     "--global-block", 24, "--outdir", out)
    assert code == 0
    for name, side in [("stage1_block2", 56), ("stage2_block2", 28), ("stage3_block20", 14)]:
        pgm = read_pgm(out / f"{name}.pgm")
        assert pgm.shape == (side, side)
        raw = np.loadtxt(out / f"{name}.csv", delimiter=",", ndmin=2)
        assert raw.shape == (side, side)
        np.testing.assert_array_equal(pgm, to_uint8(raw))
        assert pgm.min() == 0 and pgm.max() == 255


def test_featmap_zeroed_network_constant_input_is_uniform(run, tmp_path):
    spec = toy_spec()
    spec_path = tmp_path / "toy.json"
    spec_path.write_text(spec.to_json())
    weights = tmp_path / "zero.svtw"
    serialize.save(weights, {k: np.zeros_like(v) for k, v in build_model(spec).state_dict().items()})
    img = tmp_path / "flat.ppm"
    write_ppm(img, np.full((32, 32, 3), 0.4))
    code, _, _ = run("featmap", "--spec", spec_path, "--weights", weights, img, "--stage", 2, "--block", 1,
                     "--outdir", tmp_path / "fm")
    assert code == 0
    pgm = read_pgm(tmp_path / "fm" / "stage2_block1.pgm")
    assert pgm.min() == pgm.max()


def test_featmap_random_seed_changes_output(run, toy_files, tmp_path):
    spec, _, img = toy_files
    outs = []
    for seed in (1, 1, 2):
        d = tmp_path / f"fm{len(outs)}"
        assert run("featmap", "--spec", spec, "--random-seed", seed, img, "--stage", 1, "--block", 1,
                   "--outdir", d)[0] == 0
        outs.append((d / "stage1_block1.csv").read_bytes())
    assert outs[0] == outs[1] != outs[2]


@pytest.mark.parametrize("args", [("--stage", 5, "--block", 1), ("--stage", 1, "--block", 3),
                                  ("--global-block", 27), ()])
def test_featmap_bad_index_exit_2(run, tmp_path, args):
    img = tmp_path / "img.ppm"
    write_ppm(img, np.zeros((32, 32, 3)))
    assert run("featmap", "--variant", "S", img, *args, "--outdir", tmp_path / "fm")[0] == 2


# -- bench / verify / train ---------------------------------------------------------

def test_bench_output(run):
    code, out, _ = run("bench", "--mechanisms", "vanilla", "WSA", "--channels", 32)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "mechanism,N,macs" and len(lines[1:9]) == 8
    exps = dict(line.split(",") for line in lines[lines.index("mechanism,exponent") + 1:])
    assert abs(float(exps["vanilla"]) - 2) < 0.1 and abs(float(exps["WSA"]) - 1) < 0.05


def test_bench_too_few_sizes_exit_2(run):
    assert run("bench", "--sizes", 196, 784, 3136)[0] == 2


def test_verify_oracle_suite(run):
    code, out, _ = run("verify", "--suite", "oracle")
    assert code == 0
    assert all(line.startswith(("CHECK oracle/", "SUMMARY")) for line in out.splitlines())
    assert "FAIL" not in out


@pytest.mark.slow
def test_verify_detects_injected_softmax_fault(run):
    code, out, _ = run("verify", "--suite", "grad", "--inject-fault", "softmax_scale")
    assert code == 1
    assert "CHECK grad/vanilla_attention FAIL" in out


def test_train_toy_outputs(run, tmp_path):
    out = tmp_path / "run"
    code, text, _ = run("train-toy", "--outdir", out, "--samples", 8, "--steps", 60)
    assert code == 0 and (out / "toy.svtw").exists()
    spec = out / "toy_spec.json"
    ppms = sorted(out.glob("blob_*.ppm"))
    assert len(ppms) == 8
    assert "final accuracy 1.000" in text
    for p in ppms:
        label = int(p.stem[-1])
        code, res, _ = run("infer", "--spec", spec, "--weights", out / "toy.svtw", p, "--topk", 1)
        assert int(res.splitlines()[1].split(",")[1]) == label


def test_thread_env_is_honoured(run, monkeypatch):
    monkeypatch.setenv("SVT_THREADS", "1")
    assert run("bench", "--mechanisms", "WSA")[0] == 0
    monkeypatch.setenv("SVT_THREADS", "many")
    assert run("bench", "--mechanisms", "WSA")[0] == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "scalable_vit", "bench", "--mechanisms", "IWSA"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "IWSA,1.0000" in res.stdout


# -- image io ---------------------------------------------------------------------

def test_ppm_roundtrip(tmp_path):
    rgb = np.random.default_rng(2).integers(0, 256, (5, 7, 3)).astype(np.uint8)
    write_ppm(tmp_path / "a.ppm", rgb)
    np.testing.assert_array_equal(np.rint(read_ppm(tmp_path / "a.ppm") * 255), rgb)


def test_pgm_roundtrip_and_header_comments(tmp_path):
    g = np.arange(12, dtype=np.uint8).reshape(3, 4)
    write_pgm(tmp_path / "a.pgm", g)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), g)
    (tmp_path / "c.pgm").write_bytes(b"P5\n# comment\n4 3\n255\n" + g.tobytes())
    np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm"), g)


def test_sixteen_bit_ppm(tmp_path):
    data = np.array([[[0, 32768, 65535]]], dtype=">u2")
    (tmp_path / "d.ppm").write_bytes(b"P6 1 1 65535\n" + data.tobytes())
    np.testing.assert_allclose(read_ppm(tmp_path / "d.ppm")[0, 0], [0, 32768 / 65535, 1])


def test_to_uint8_constant_map():
    np.testing.assert_array_equal(to_uint8(np.full((2, 2), 3.0)), 0)


def test_read_ppm_rejects_pgm(tmp_path):
    write_pgm(tmp_path / "g.pgm", np.zeros((2, 2)))
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "g.pgm")
