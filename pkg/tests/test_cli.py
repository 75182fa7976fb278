import hashlib
import json
import subprocess
import sys
import time

import pytest

from semxfer import cli
from semxfer.dataset import read_manifest

GEN = {"seed": 0, "base_scenes": 30, "pairs": 20, "train_triplets": 200, "test_triplets": 40, "queries_per_test_scene": 20}
TRAIN = {"seed": 0, "iterations": 50, "augment": {"onfly_per_step": 0}}


def write_config(path, **over):
    doc = {"gen": GEN, "train": TRAIN, "eval": {"regimes": ["transfer"], "ks": [1, 5]}, "output_dir": "out"}
    doc.update(over)
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture()
def config(tmp_path):
    return write_config(tmp_path / "exp.json")


@pytest.fixture()
def data(tmp_path, config):
    assert cli.main(["gen", "--config", str(config), "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data"


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestGen:
    def test_files_and_manifest(self, data):
        names = sorted(p.name for p in data.iterdir())
        assert names == ["manifest.json", "pairs.jsonl", "scenes.jsonl", "test.jsonl", "train.jsonl"]
        m = read_manifest(data)
        for key, fname in m["files"].items():
            assert m["hashes"][key] == sha(data / fname)

    def test_rerun_identical(self, data, config, tmp_path):
        cli.main(["gen", "--config", str(config), "--out", str(tmp_path / "again")])
        for f in data.iterdir():
            assert f.read_bytes() == (tmp_path / "again" / f.name).read_bytes()


class TestTrain:
    def test_smoke_fast(self, data, config, tmp_path):
        t0 = time.perf_counter()
        code = cli.main(["train", "--config", str(config), "--data", str(data), "--out", str(tmp_path / "m.ckpt")])
        assert code == 0 and time.perf_counter() - t0 < 10
        log = [json.loads(x) for x in (tmp_path / "m.ckpt.log.jsonl").read_text().splitlines()]
        assert log[-1]["step"] == 50 and set(log[0]) == {"step", "loss_embed", "loss_transform"}

    def test_identical_invocations(self, data, config, tmp_path):
        for name in ("a", "b"):
            cli.main(["train", "--config", str(config), "--data", str(data), "--out", str(tmp_path / f"{name}.ckpt")])
        assert sha(tmp_path / "a.ckpt") == sha(tmp_path / "b.ckpt")

    def test_stale_data_refused(self, data, config, tmp_path):
        with (data / "train.jsonl").open("a") as fh:
            fh.write("\n")
        code = cli.main(["train", "--config", str(config), "--data", str(data), "--out", str(tmp_path / "m.ckpt")])
        assert code == cli.EXIT_DATA and not (tmp_path / "m.ckpt").exists()

    def test_transfer_without_pairs(self, tmp_path):
        cfg = write_config(tmp_path / "np.json", gen={**GEN, "pairs": 0})
        cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")])
        code = cli.main(["train", "--config", str(cfg), "--data", str(tmp_path / "d"), "--out", str(tmp_path / "m.ckpt"),
                         "--regime", "transfer"])
        assert code == cli.EXIT_CONFIG
        assert not (tmp_path / "m.ckpt").exists()

    def test_numerical_abort_exit_code(self, data, config, tmp_path, monkeypatch):
        from semxfer.trainer import NumericalAbort

        def boom(*a, **k):
            raise NumericalAbort(7, {"loss_embed": float("nan")})

        monkeypatch.setattr(cli, "train", boom)
        code = cli.main(["train", "--config", str(config), "--data", str(data), "--out", str(tmp_path / "m.ckpt")])
        assert code == cli.EXIT_NUMERIC


class TestEval:
    def test_table_matches_json(self, data, config, tmp_path, capsys):
        ck = tmp_path / "m.ckpt"
        cli.main(["train", "--config", str(config), "--data", str(data), "--out", str(ck)])
        capsys.readouterr()
        code = cli.main(["eval", "--ckpt", str(ck), "--data", str(data), "--k", "1,5,10", "--baselines", "all",
                         "--out", str(tmp_path / "rep")])
        out = capsys.readouterr().out
        assert code == 0
        reports = json.loads((tmp_path / "rep" / "report_transfer.json").read_text())
        methods = {r["method"] for r in reports}
        assert methods == {"composed", "image_only", "arithmetic", "roundtrip"}
        for r in reports:
            for k, v in r["r_at"].items():
                assert f"{v:.2f}" in out
            assert r["dataset_hash"] == read_manifest(data)["dataset_hash"]
            assert r["checkpoint_hash"] == sha(ck)

    def test_untrained_is_not_an_error(self, data, config, tmp_path):
        cfg = write_config(tmp_path / "one.json", train={**TRAIN, "iterations": 1})
        ck = tmp_path / "u.ckpt"
        cli.main(["train", "--config", str(cfg), "--data", str(data), "--out", str(ck), "--regime", "in_domain_B"])
        assert cli.main(["eval", "--ckpt", str(ck), "--data", str(data)]) == 0

    def test_version_mismatch(self, data, config, tmp_path):
        ck = tmp_path / "m.ckpt"
        cli.main(["train", "--config", str(config), "--data", str(data), "--out", str(ck)])
        raw = bytearray(ck.read_bytes())
        raw[4] = 9
        ck.write_bytes(bytes(raw))
        assert cli.main(["eval", "--ckpt", str(ck), "--data", str(data)]) == cli.EXIT_DATA

    def test_bad_k(self, data, tmp_path):
        assert cli.main(["eval", "--ckpt", str(tmp_path / "x"), "--data", str(data), "--k", "one"]) == cli.EXIT_CONFIG


class TestConfigFile:
    def test_unknown_key(self, tmp_path):
        cfg = write_config(tmp_path / "bad.json", extra=1)
        assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == cli.EXIT_CONFIG

    def test_unknown_nested_key(self, tmp_path):
        cfg = write_config(tmp_path / "bad.json", train={"iterations": 5, "speed": "fast"})
        assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == cli.EXIT_CONFIG

    def test_malformed_json_reports_line(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text('{\n  "gen": {,\n}')
        assert cli.main(["gen", "--config", str(p), "--out", str(tmp_path / "d")]) == cli.EXIT_CONFIG
        assert "bad.json:2" in capsys.readouterr().err

    def test_output_dir_relative_to_config(self, tmp_path):
        sub = tmp_path / "cfgs"
        sub.mkdir()
        exp = cli.ExperimentConfig.load(write_config(sub / "e.json", output_dir="../runs/x"))
        assert exp.output_dir == sub / "../runs/x"

    def test_usage_error_exit_code(self):
        with pytest.raises(SystemExit) as info:
            cli.main(["train", "--config"])
        assert info.value.code == cli.EXIT_CONFIG


def test_run_pipeline_and_module_entry(tmp_path):
    cfg = write_config(tmp_path / "exp.json")
    proc = subprocess.run([sys.executable, "-m", "semxfer", "run", "--config", str(cfg)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "R@1" in proc.stdout and "transfer" in proc.stdout
    out = tmp_path / "out"
    assert (out / "ckpt" / "transfer.ckpt").exists()
    assert (out / "reports" / "report_transfer.json").exists()
    assert (out / "logs" / "transfer.jsonl").exists()
