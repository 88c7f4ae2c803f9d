import json
import shutil
import subprocess

import pandas as pd
import pytest

from scalesim import cli
from scalesim.mln import MlnFitError


def _run(*argv):
    return cli.main([str(a) for a in argv])


def _header(path):
    return path.read_text().splitlines()[0]


def test_simulate_outputs(tmp_path):
    assert _run("simulate", "--scenario", "antibiotic", "--n", 50, "--out", tmp_path) == 0
    assert _header(tmp_path / "counts.tsv").startswith("taxon\t")
    assert _header(tmp_path / "metadata.csv") == "sample,condition,log_scale"
    assert _header(tmp_path / "truth.csv") == "taxon,lambda_pre,lambda_post,truth,lfc"
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["outputs"] == ["counts.tsv", "metadata.csv", "truth.csv"]
    assert "out" not in man["config"] and man["config"]["n"] == 50


def test_fit_from_files(tmp_path):
    _run("simulate", "--n", 40, "--out", tmp_path / "sim")
    out = tmp_path / "fit"
    rc = _run(
        "fit", "--counts", tmp_path / "sim/counts.tsv", "--metadata", tmp_path / "sim/metadata.csv",
        "--scale", "relaxed", "--alpha", 0.6, "--gamma", 0.2, "--S", 16, "--out", out,
    )
    assert rc == 0
    assert _header(out / "decisions.csv") == ",".join(cli.decisions.COLUMNS)
    assert _header(out / "draws_summary.csv") == "quantity,id,mean,sd,q025,q50,q975"
    df = pd.read_csv(out / "decisions.csv")
    assert len(df) == 21 and set(df.direction) <= {"increase", "decrease", "none"}


def test_fit_mln_pipeline(tmp_path):
    assert _run("fit", "--pipeline", "mln", "--n", 20, "--S", 50, "--out", tmp_path) == 0
    s = pd.read_csv(tmp_path / "draws_summary.csv")
    assert set(s.quantity) == {"lfc", "log_scale"}


def test_manifest_replays_byte_identically(tmp_path):
    _run("fit", "--n", 30, "--S", 8, "--scale", "relaxed", "--alpha", 0.6, "--gamma", 0.2, "--out", tmp_path / "a")
    _run("fit", "--config", tmp_path / "a/manifest.json", "--out", tmp_path / "b")
    for name in ("decisions.csv", "draws_summary.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "n": 20, "S": 4}))
    monkeypatch.setenv("SCALESIM_SEED", "9")
    _run("fit", "--config", cfg, "--out", tmp_path / "env")
    assert json.loads((tmp_path / "env/manifest.json").read_text())["config"]["seed"] == 9
    _run("fit", "--config", cfg, "--seed", 11, "--out", tmp_path / "flag")
    assert json.loads((tmp_path / "flag/manifest.json").read_text())["config"]["seed"] == 11


def test_other_commands_headers(tmp_path):
    assert _run("sensitivity", "--n", 20, "--S", 8, "--grid", "0:0.2:0.1", "--out", tmp_path / "s") == 0
    assert _header(tmp_path / "s/sensitivity.csv") == "parameter,value,taxon,effect_size,lfc_mean,logit_ecdf0,significant"
    assert len(pd.read_csv(tmp_path / "s/sensitivity.csv")) == 3 * 21
    assert _run("fdr-curve", "--n-grid", "20", "--replicates", 1, "--S", 8, "--out", tmp_path / "f") == 0
    assert _header(tmp_path / "f/fdr_curve.csv") == "estimator,n,replicate,tp,fp,tn,fn,fdr,sensitivity,specificity"
    assert _header(tmp_path / "f/fdr_summary.csv") == "estimator,n,mean_fdr,se,replicates"
    assert _run("bootstrap", "--vessels", "1", "--replicates", 1, "--S", 20, "--estimators", "clr", "--out", tmp_path / "b") == 0
    assert _header(tmp_path / "b/bootstrap.csv") == "estimator,n_vessels,replicate,tp,fp,tn,fn,fdr,sensitivity,specificity"
    assert _header(tmp_path / "b/bootstrap_summary.csv") == "estimator,n_vessels,mean_fdr"
    assert _run("effective-scale", "--n", 40, "--S", 200, "--out", tmp_path / "e") == 0
    assert _header(tmp_path / "e/effective_scale.csv") == "log_scale_ratio,density"
    assert _header(tmp_path / "e/effective_scale_summary.csv") == "mean,sd,q025,q975"


@pytest.mark.parametrize(
    "argv",
    [
        ["fit", "--scale", "relaxed", "--alpha", "-1", "--gamma", "0.2"],
        ["fit", "--S", "0"],
        ["fdr-curve", "--estimators", "bogus"],
        ["fit", "--threads", "0"],
    ],
)
def test_config_errors_exit_2(tmp_path, argv, capsys):
    assert cli.main(argv + ["--out", str(tmp_path)]) == 2
    assert "scalesim:" in capsys.readouterr().err


def test_bad_config_file_exit_2(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"S": "many"}))
    assert cli.main(["fit", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "config error at S" in capsys.readouterr().err
    cfg.write_text("{not json")
    assert cli.main(["fit", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_bad_counts_exit_2(tmp_path, capsys):
    (tmp_path / "c.tsv").write_text("taxon\ts1\ts2\nt1\t1\t-1\n")
    assert cli.main(["fit", "--counts", str(tmp_path / "c.tsv"), "--out", str(tmp_path)]) == 2
    assert "sample 's2'" in capsys.readouterr().err


def test_numerical_failure_exit_3(tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise MlnFitError("did not converge", {"grad_norm": 1.0})

    monkeypatch.setattr(cli, "run_mln_scale_sim", boom)
    assert cli.main(["fit", "--pipeline", "mln", "--n", "10", "--out", str(tmp_path)]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_parse_grid():
    assert cli.parse_grid("0:1:0.25").tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert cli.parse_grid("0.1,0.3").tolist() == [0.1, 0.3]


@pytest.mark.skipif(shutil.which("scalesim") is None, reason="console script not installed")
def test_console_script(tmp_path):
    r = subprocess.run(["scalesim", "simulate", "--n", "10", "--out", str(tmp_path)], capture_output=True)
    assert r.returncode == 0 and (tmp_path / "counts.tsv").exists()
