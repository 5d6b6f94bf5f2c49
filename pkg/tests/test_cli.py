import json
import subprocess
import sys
from pathlib import Path

import pytest

from sslmark import cli

TINY = str(Path(__file__).parent / "configs" / "tiny.yaml")


def run(capsys, *argv):
    code = cli.main(list(argv))
    return code, capsys.readouterr().out


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """pretrain -> embed -> transfer through the CLI on the toy config."""
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["pretrain", "--config", TINY, "--out", str(d / "enc")]) == 0
    assert cli.main(["embed", "--config", TINY, "--encoder", str(d / "enc"), "--out", str(d / "wm")]) == 0
    assert cli.main(["transfer", "--config", TINY, "--encoder", str(d / "wm" / "encoder"),
                     "--out", str(d / "ds")]) == 0
    return d


def test_help_lists_subcommands():
    text = cli.build_parser().format_help()
    for name in ("pretrain", "embed", "transfer", "attack", "verify-eaas", "verify-mlaas", "diagnose",
                 "sweep", "plot", "run-plan"):
        assert name in text


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "sslmark", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "run-plan" in res.stdout


def test_chain_outputs(chain):
    assert (chain / "enc" / "manifest.json").exists()
    assert (chain / "wm" / "shadow" / "shadow.json").exists()
    assert (chain / "wm" / "trace.csv").exists()
    assert json.loads((chain / "ds" / "manifest.json").read_text())["kind"] == "downstream"


def test_verify_exit_codes(chain, capsys, tmp_path):
    sh = str(chain / "wm" / "shadow")
    code, out = run(capsys, "verify-mlaas", "--model", str(chain / "ds"), "--shadow", sh, "--out", str(tmp_path))
    rep = json.loads(out)
    assert code == (2 if rep["decision"] == "pirated" else 0)
    assert (tmp_path / "pairs.csv").exists() and (tmp_path / "report.json").exists()
    code, out = run(capsys, "verify-eaas", "--encoder", str(chain / "enc"), "--shadow", sh)
    assert code == (2 if json.loads(out)["decision"] == "pirated" else 0)
    # an encoder checkpoint is not a classifier: error exit
    code, _ = run(capsys, "verify-mlaas", "--model", str(chain / "enc"), "--shadow", sh)
    assert code == 1
    code, _ = run(capsys, "verify-eaas", "--encoder", str(tmp_path / "missing"), "--shadow", sh)
    assert code == 1


def test_attack_diagnose_sweep(chain, capsys, tmp_path):
    sh = str(chain / "wm" / "shadow")
    code, _ = run(capsys, "attack", "--config", TINY, "--kind", "PRUNE", "--r", "0.3",
                  "--model", str(chain / "ds"), "--out", str(tmp_path / "pr"))
    assert code == 0 and (tmp_path / "pr" / "model.pt").exists()
    code, _ = run(capsys, "attack", "--config", TINY, "--kind", "UNLEARN", "--model", str(chain / "wm" / "encoder"),
                  "--shadow", sh, "--out", str(tmp_path / "ul"))
    assert code == 0
    code, out = run(capsys, "diagnose", "--config", TINY, "--encoder", str(chain / "wm" / "encoder"),
                    "--shadow", sh, "--model", str(chain / "ds"), "--out", str(tmp_path / "dg"))
    assert code == 0 and "cluster" in json.loads(out) and (tmp_path / "dg" / "pca.png").exists()
    code, out = run(capsys, "sweep", "--model", str(chain / "ds"), "--shadow", sh, "--sizes", "5,10")
    assert code == 0 and [l.split(",")[0] for l in out.split()] == ["5", "10"]


def test_run_plan_and_plot(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("SSLMARK_CACHE", str(tmp_path / "cache"))
    code, out = run(capsys, "run-plan", "--preset", "pairs-sweep", "--config", TINY, "--out", str(tmp_path / "r"),
                    "--jobs", "2")
    assert code == 0 and "suspect,scenario,acc,p_value,decision,attack,params" in out
    code, out = run(capsys, "plot", "--run", str(tmp_path / "r"))
    assert code == 0 and "pairs_sweep.png" in out
