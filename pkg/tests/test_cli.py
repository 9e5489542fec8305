import json
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from gigpricing.cli import STAGES, main

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.yaml"


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert main(["all", "--config", str(SMOKE), "--out", str(out)]) == 0
    return out


def test_all_stages_write_their_artifacts(smoke_run):
    for name in ("scenario.json", "observations.jsonl", "mnl.json", "training.json", "tuned.json",
                 "evaluation.json", "oracle_cache.json", "report_instances.csv", "report_summary.csv",
                 "report_long.csv", "manifest.json"):
        assert (smoke_run / name).exists(), name
    labels = [r["summary"]["policy"] for r in json.loads((smoke_run / "evaluation.json").read_text())["reports"]]
    assert labels == ["PP", "FP", "VFA", "PERT-eps0-s0", "PERT-eps2-s0"]
    for label in labels[2:]:
        assert (smoke_run / "checkpoints" / f"{label}.ckpt").exists()
    manifest = json.loads((smoke_run / "manifest.json").read_text())
    assert set(manifest["stages"]) == set(STAGES)
    assert "output" not in manifest["config"]


def test_rerun_is_a_no_op(smoke_run, capsys):
    before = {p: p.read_bytes() for p in smoke_run.rglob("*") if p.is_file()}
    assert main(["all", "--config", str(SMOKE), "--out", str(smoke_run)]) == 0
    printed = capsys.readouterr().out.splitlines()
    assert printed == [f"{s}: up to date" for s in STAGES]
    after = {p: p.read_bytes() for p in smoke_run.rglob("*") if p.is_file()}
    assert before == after


def test_forced_stage_reproduces_bytes(smoke_run):
    before = (smoke_run / "evaluation.json").read_bytes()
    assert main(["evaluate", "--config", str(SMOKE), "--out", str(smoke_run), "--force"]) == 0
    assert (smoke_run / "evaluation.json").read_bytes() == before


def test_stage_reruns_when_an_output_is_damaged(smoke_run, capsys):
    path = smoke_run / "report_summary.csv"
    good = path.read_bytes()
    path.write_text("tampered\n")
    assert main(["report", "--config", str(SMOKE), "--out", str(smoke_run)]) == 0
    assert capsys.readouterr().out.strip() == "report: done"
    assert path.read_bytes() == good


def test_missing_seed_is_a_config_error(tmp_path, capsys):
    cfg = yaml.safe_load(SMOKE.read_text())
    del cfg["seed"]
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["generate", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "seed" in capsys.readouterr().err


def test_unknown_key_is_named(tmp_path, capsys):
    cfg = yaml.safe_load(SMOKE.read_text())
    cfg["collect"]["epsiodes"] = 3
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["generate", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "collect.epsiodes" in capsys.readouterr().err


def test_missing_input_exit_code(tmp_path, capsys):
    assert main(["evaluate", "--config", str(SMOKE), "--out", str(tmp_path / "empty")]) == 3
    assert "scenario.json" in capsys.readouterr().err


def test_unknown_subcommand_exits_with_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["bake"])
    assert exc.value.code == 2


def test_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "gigpricing", "--help"], capture_output=True, text=True)
    assert done.returncode == 0 and "generate" in done.stdout
