import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from hemgs import cli
from hemgs.codec import decompress, inspect
from hemgs.context import context_stats, scene_coding_order
from hemgs.errors import CausalityError
from hemgs.report import format_rows
from hemgs.scene import SynthSpec, load_scene, save_scene, synth_scene


def _kv(text):
    return dict(line.split("=", 1) for line in text.strip().splitlines())


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, small_model):
    d = tmp_path_factory.mktemp("cli")
    save_scene(synth_scene(SynthSpec(300, seed=11, pattern="clustered")), d / "s.a3gs")
    (d / "m.hmgsw").write_bytes(small_model.to_bytes())
    return d


def run(argv, capsys):
    code = cli.run([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_stats_matches_library(workdir, capsys):
    code, out, _ = run(["stats", workdir / "s.a3gs", "--rf", 25, "--n", 20], capsys)
    assert code == 0
    kv = _kv(out)
    _, order = scene_coding_order(load_scene(workdir / "s.a3gs"))
    avg, mx, sparse = context_stats(order, 25, 20)
    assert kv["avg_selected"] == repr(avg)
    assert kv["max_selected"] == str(mx)
    assert kv["sparse_fraction"] == repr(sparse)


def test_compress_inspect_decompress(workdir, capsys):
    src, model = workdir / "s.a3gs", workdir / "m.hmgsw"
    before = (_digest(src), _digest(model))
    out_path = workdir / "s.hmgs"
    code, out, _ = run(["compress", "--in", src, "--model", model, "--lambda", "2e-3",
                        "--out", out_path, "--plot", workdir / "figs"], capsys)
    assert code == 0 and out_path.exists()
    data = out_path.read_bytes()
    rep = inspect(data)
    assert out == format_rows([("output", str(out_path))] + rep.rows(), "kv")
    assert (workdir / "figs" / "storage.png").stat().st_size > 0

    code, out, _ = run(["inspect", out_path], capsys)
    kv = _kv(out)
    for col in ("Location", "Feature", "Scaling", "Offsets", "Others", "Total"):
        assert f"storage.{col}" in kv
    assert kv["storage.Total"] == str(len(data))

    code, out, _ = run(["--format", "tsv", "inspect", out_path], capsys)
    assert code == 0 and out.splitlines()[0].startswith("anchors\t")

    dec = workdir / "d.a3gs"
    code, _, _ = run(["decompress", "--in", out_path, "--out", dec], capsys)
    assert code == 0
    got, ref = load_scene(dec), decompress(data)
    for col in ("locations", "features", "scaling", "offsets"):
        assert np.array_equal(getattr(got, col), getattr(ref, col).astype(np.float32))
    assert (_digest(src), _digest(model)) == before


def test_model_dir_env(workdir, capsys, monkeypatch):
    monkeypatch.setenv(cli.MODEL_DIR_ENV, str(workdir))
    monkeypatch.chdir(workdir.parent)
    code, _, err = run(["compress", "--in", workdir / "s.a3gs", "--model", "m.hmgsw",
                        "--out", workdir / "env.hmgs"], capsys)
    assert code == 0, err


def test_refuses_to_overwrite_input(workdir, capsys):
    before = _digest(workdir / "s.a3gs")
    code, _, err = run(["compress", "--in", workdir / "s.a3gs", "--model", workdir / "m.hmgsw",
                        "--out", workdir / "s.a3gs"], capsys)
    assert code == 2 and err.startswith("error=")
    assert _digest(workdir / "s.a3gs") == before


def test_train_writes_model_log_and_figures(workdir, capsys):
    code, out, err = run(["train", "--in", workdir / "s.a3gs", "--out", workdir / "t.hmgsw",
                          "--iterations", 6, "--batch-size", 32, "--lambdas", "1e-3,4e-3",
                          "--log", workdir / "log.tsv", "--eval", "--plot", workdir / "tf"],
                         capsys)
    assert code == 0, err
    lines = (workdir / "log.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["iteration", "lambda", "distortion", "rate_bits", "total"]
    assert len(lines) == 7
    for name in ("training.png", "rd.png"):
        assert (workdir / "tf" / name).stat().st_size > 0
    assert sum(line.startswith("lambda=") for line in out.splitlines()) == 2


def test_synth_and_histogram(workdir, capsys):
    p = workdir / "syn.txt"
    code, out, _ = run(["synth", "--n", 50, "--pattern", "planar", "--out", p], capsys)
    assert code == 0 and len(load_scene(p)) == 50
    code, _, _ = run(["stats", p, "--plot", workdir / "h"], capsys)
    assert (workdir / "h" / "context_hist.png").exists()


def test_show_config(capsys):
    code, out, _ = run(["--show-config"], capsys)
    kv = _kv(out)
    assert code == 0
    assert kv["context.rf"] == "25" and kv["context.n"] == "20"
    assert kv["lambda.grid"] == "0.001,0.002,0.003,0.004"
    assert kv["train.iterations"] == "2000"


@pytest.mark.parametrize("argv", [[], ["bogus"], ["compress", "--in", "x"],
                                  ["compress", "--in", "a", "--model", "b", "--out", "c",
                                   "--lambda", "5"],
                                  ["stats"], ["--format", "yaml", "inspect", "x"]])
def test_usage_errors(argv, capsys):
    code, out, err = run(argv, capsys)
    assert code == 1 and out == ""
    assert len(err.strip().splitlines()) == 1 and err.startswith("error=usage detail=")


def test_data_errors(workdir, capsys):
    code, _, err = run(["inspect", workdir / "missing.hmgs"], capsys)
    assert code == 2 and "error=FileNotFoundError" in err
    bad = workdir / "bad.hmgs"
    bad.write_bytes((workdir / "s.hmgs").read_bytes()[:100]
                    if (workdir / "s.hmgs").exists() else b"HMGS")
    code, _, err = run(["decompress", "--in", bad, "--out", workdir / "x.a3gs"], capsys)
    assert code == 2 and err.startswith("error=TruncatedStreamError")
    json.loads(err.split("detail=", 1)[1])


def test_internal_errors(workdir, capsys, monkeypatch):
    def boom(args):
        raise CausalityError("neighbour 3 not decoded")
    monkeypatch.setitem(cli.COMMANDS, "inspect", boom)
    code, _, err = run(["inspect", "whatever"], capsys)
    assert code == 3 and err.startswith("error=CausalityError")

    def crash(args):
        raise RuntimeError("bug")
    monkeypatch.setitem(cli.COMMANDS, "inspect", crash)
    assert run(["inspect", "whatever"], capsys)[0] == 3


def test_bench_small_with_baseline(workdir, capsys):
    base = workdir / "bench" / "baseline.json"
    code, out, _ = run(["bench", "--n", 400, "--baseline", base, "--write-baseline"], capsys)
    assert code == 0 and base.exists()
    code, out, _ = run(["bench", "--n", 400, "--baseline", base, "--plot", workdir / "b"], capsys)
    kv = _kv(out)
    assert float(kv["encode_anchors_per_s"]) > 0 and float(kv["decode_anchors_per_s"]) > 0
    assert "relative.encode_anchors_per_s" in kv
    assert (workdir / "b" / "bench.png").exists()


def test_console_script_entry_point(workdir):
    res = subprocess.run([sys.executable, "-m", "hemgs.cli", "--show-config", "--format",
                          "table"], capture_output=True, text=True)
    assert res.returncode == 0 and "context.rf" in res.stdout
