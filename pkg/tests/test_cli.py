import json
import subprocess
import sys

import pytest

from irlalign.cli import main
from irlalign.workbench import METRICS_HEADER, ExperimentConfig


@pytest.fixture(scope="module")
def instance_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("inst")
    assert main(["gen", "--out", str(out), "--n-demos", "150", "--n-prefs", "20"]) == 0
    return out


def test_gen_writes_instance_files(instance_dir):
    for name in ("instance.json", "r_star.json", "pi_ref.json", "pi_expert.json", "demos.jsonl", "prefs.jsonl"):
        assert (instance_dir / name).exists()
    assert len((instance_dir / "demos.jsonl").read_text().splitlines()) == 150


def test_gen_from_spec_file(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"V": 3, "H": 2, "prompt_count": 2, "prompt_length": 1}))
    assert main(["gen", "--spec", str(spec), "--out", str(tmp_path / "i"), "--n-demos", "0"]) == 0
    meta = json.loads((tmp_path / "i" / "instance.json").read_text())
    assert meta["spec"]["V"] == 3
    assert not (tmp_path / "i" / "demos.jsonl").exists()


@pytest.mark.parametrize("method", ["sft", "spin", "irl"])
def test_train_and_eval(instance_dir, tmp_path, method):
    out = tmp_path / method
    code = main([method, "--instance", str(instance_dir), "--demos", str(instance_dir / "demos.jsonl"),
                 "--out", str(out)])
    assert code == 0
    assert (out / "policy.json").exists()
    assert (out / "reward.json").exists() == (method == "irl")
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == ",".join(METRICS_HEADER)
    args = ["eval", "--instance", str(instance_dir), "--policy", str(out / "policy.json"), "--out", str(tmp_path / "e.csv")]
    if method == "irl":
        args += ["--reward", str(out / "reward.json")]
    assert main(args) == 0
    rows = (tmp_path / "e.csv").read_text().splitlines()
    assert rows[0].startswith("reward_accuracy,")
    assert len(rows) == 2


def test_verify_identities(capsys):
    assert main(["verify", "identities", "--seed", "1"]) == 0
    assert "passed: True" in capsys.readouterr().out


def test_verify_gradient(capsys):
    assert main(["verify", "gradient", "--seed", "2"]) == 0


def test_dump_defaults(capsys):
    assert main(["--dump-defaults"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert ExperimentConfig.from_dict(d) == ExperimentConfig()


def test_bad_config_is_an_error(instance_dir, tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"irl": {"K": 1, "bogus": 1}}))
    code = main(["irl", "--instance", str(instance_dir), "--demos", str(instance_dir / "demos.jsonl"),
                 "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "bogus" in capsys.readouterr().err


def test_unknown_method_is_a_usage_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"methods": ["dpo"]}))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) != 0


def test_no_subcommand_prints_usage():
    assert main([]) == 2


def test_module_entry_point(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"methods": ["sft"], "n_heldout_demos": 100, "n_heldout_prefs": 100, "n_matches": 100}))
    proc = subprocess.run([sys.executable, "-m", "irlalign", "--threads", "1", "run", "--config", str(cfg),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.startswith("sft")
