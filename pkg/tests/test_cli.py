import pytest

from gainmap.cli import dispatch
from gainmap.config import ConfigError, default_config, parse_config


def run(workdir, *args):
    return dispatch(["--workdir", str(workdir), *args])


TINY_GEN = [
    "--set", "dataset.num_train_envs=2",
    "--set", "dataset.num_test_envs=2",
    "--set", "dataset.num_terminals=8",
    "--set", "environment.max_buildings=2",
]

TINY_TRAIN = [
    "--set", "model.num_blocks=1",
    "--set", "model.embed_dim=16",
    "--set", "trainer.steps=3",
    "--set", "trainer.batch_episodes=1",
    "--set", "trainer.context_max=8",
    "--set", "trainer.target_cap=4",
]


class TestConfig:
    def test_defaults_complete(self):
        cfg = default_config()
        assert cfg.get("run", "seed") == 0
        assert cfg.get("model", "embed_dim") == 64

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config("[bogus]\nx = 1\n")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("[run]\nbogus = 1\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="bad value"):
            parse_config("[run]\nseed = not_a_number\n")

    def test_serialize_parse_round_trip(self):
        cfg = default_config()
        cfg.set("trainer", "steps", "7")
        cfg.set("evaluation", "sweep", "1,2,3")
        again = parse_config(cfg.serialize())
        assert again.get("trainer", "steps") == 7
        assert again.get("evaluation", "sweep") == (1.0, 2.0, 3.0)

    def test_manifest_sections_ignored_on_load(self):
        text = default_config().serialize(
            extra_sections={"manifest": {"command": "gen-data"}, "artifacts": {"a.bin": "ff"}}
        )
        cfg = parse_config(text)
        assert cfg.get("run", "seed") == 0


class TestCliErrors:
    def test_unknown_override_exits_nonzero(self, tmp_path, capsys):
        assert run(tmp_path, "--set", "run.bogus=1", "check") == 2
        assert "unknown key" in capsys.readouterr().err

    def test_malformed_override(self, tmp_path, capsys):
        assert run(tmp_path, "--set", "nodot", "check") == 2

    def test_train_without_data(self, tmp_path, capsys):
        assert run(tmp_path, "train") == 2
        assert "gen-data" in capsys.readouterr().err


class TestGenData:
    def test_deterministic_across_runs(self, tmp_path):
        d1, d2 = tmp_path / "one", tmp_path / "two"
        assert run(d1, *TINY_GEN, "gen-data") == 0
        assert run(d2, *TINY_GEN, "gen-data") == 0
        files1 = sorted((d1 / "data").iterdir())
        files2 = sorted((d2 / "data").iterdir())
        assert [f.name for f in files1] == [f.name for f in files2]
        for f1, f2 in zip(files1, files2):
            assert f1.read_bytes() == f2.read_bytes(), f1.name

    def test_manifest_rerun_reproduces_bytes(self, tmp_path):
        d1, d2 = tmp_path / "one", tmp_path / "two"
        assert run(d1, *TINY_GEN, "gen-data") == 0
        manifest = d1 / "manifest_gen_data.txt"
        assert manifest.exists()
        assert run(d2, "--config", str(manifest), "gen-data") == 0
        for f1 in sorted((d1 / "data").iterdir()):
            assert (d2 / "data" / f1.name).read_bytes() == f1.read_bytes()

    def test_manifest_hashes_artifacts(self, tmp_path):
        import hashlib

        assert run(tmp_path, *TINY_GEN, "gen-data") == 0
        manifest = (tmp_path / "manifest_gen_data.txt").read_text()
        artifacts = [
            line.split(" = ") for line in manifest.splitlines()[manifest.splitlines().index("[artifacts]") + 1 :]
            if " = " in line
        ]
        assert artifacts
        for rel, digest in artifacts:
            actual = hashlib.sha256((tmp_path / rel).read_bytes()).hexdigest()
            assert actual == digest, rel

    def test_csv_export_flag(self, tmp_path):
        assert run(tmp_path, *TINY_GEN, "--set", "dataset.write_csv=true", "gen-data") == 0
        csvs = list((tmp_path / "data").glob("*.csv"))
        assert len(csvs) == 4
        header = csvs[0].read_text().splitlines()[0]
        assert header == "tx_x,tx_y,tx_z,rx_x,rx_y,rx_z,gain_db"


class TestTrainCli:
    def test_train_writes_checkpoint_and_trace(self, tmp_path):
        assert run(tmp_path, *TINY_GEN, "gen-data") == 0
        assert run(tmp_path, *TINY_GEN, *TINY_TRAIN, "train") == 0
        assert (tmp_path / "checkpoints" / "crete.ckpt").exists()
        trace = (tmp_path / "results" / "train_trace.csv").read_text().splitlines()
        assert trace[0] == "step,train_loss,val_loss"
        assert len(trace) == 4

    def test_repeated_training_byte_identical(self, tmp_path):
        d1, d2 = tmp_path / "one", tmp_path / "two"
        for d in (d1, d2):
            assert run(d, *TINY_GEN, "gen-data") == 0
            assert run(d, *TINY_GEN, *TINY_TRAIN, "train") == 0
        c1 = (d1 / "checkpoints" / "crete.ckpt").read_bytes()
        c2 = (d2 / "checkpoints" / "crete.ckpt").read_bytes()
        assert c1 == c2
        assert (d1 / "results" / "train_trace.csv").read_bytes() == (d2 / "results" / "train_trace.csv").read_bytes()


class TestFitBaselineCli:
    def test_writes_selected_parameters(self, tmp_path):
        code = run(
            tmp_path,
            "--set", "dataset.num_terminals=10",
            "--set", "environment.max_buildings=1",
            "--set", "baselines.iterations=100",
            "--set", "baselines.selection_context=20",
            "fit-baseline",
        )
        assert code == 0
        text = (tmp_path / "results" / "baseline_params.txt").read_text()
        keys = {line.split(" = ")[0] for line in text.splitlines()}
        assert keys == {"lambda_l1", "lambda_total_variation", "lambda_tikhonov", "knn_k"}

    def test_configured_lambda_passes_through(self, tmp_path):
        code = run(
            tmp_path,
            "--set", "dataset.num_terminals=10",
            "--set", "environment.max_buildings=1",
            "--set", "baselines.iterations=100",
            "--set", "baselines.selection_context=20",
            "--set", "baselines.lambda_l1=0.25",
            "fit-baseline",
        )
        assert code == 0
        text = (tmp_path / "results" / "baseline_params.txt").read_text()
        assert "lambda_l1 = 0.25" in text


class TestEvalAndExperimentCli:
    def test_eval_with_knn(self, tmp_path):
        assert run(tmp_path, *TINY_GEN, "gen-data") == 0
        code = run(
            tmp_path, *TINY_GEN,
            "--set", "evaluation.estimators=knn",
            "--set", "evaluation.context_size=10",
            "--set", "evaluation.num_eval_pairs=4",
            "--set", "evaluation.run_label=t1",
            "eval",
        )
        assert code == 0
        out = (tmp_path / "results" / "eval_t1.csv").read_text().splitlines()
        assert out[0] == "env_id,knn_mae_db"
        assert len(out) == 3

    def test_eval_threads_match_sequential(self, tmp_path):
        assert run(tmp_path, *TINY_GEN, "gen-data") == 0
        common = [
            *TINY_GEN,
            "--set", "evaluation.estimators=knn",
            "--set", "evaluation.context_size=10",
            "--set", "evaluation.num_eval_pairs=4",
        ]
        assert run(tmp_path, *common, "--set", "evaluation.run_label=seq", "--threads", "1", "eval") == 0
        assert run(tmp_path, *common, "--set", "evaluation.run_label=par", "--threads", "3", "eval") == 0
        seq = (tmp_path / "results" / "eval_seq.csv").read_text().splitlines()[1:]
        par = (tmp_path / "results" / "eval_par.csv").read_text().splitlines()[1:]
        assert seq == par

    def test_experiment_schema_and_determinism(self, tmp_path):
        args = [
            *TINY_GEN,
            "--set", "evaluation.estimators=knn",
            "--set", "evaluation.experiment=mae_vs_m",
            "--set", "evaluation.sweep=5,10",
            "--set", "evaluation.num_envs=2",
            "--set", "evaluation.num_eval_pairs=4",
            "--set", "evaluation.run_label=x1",
        ]
        assert run(tmp_path, *args, "experiment") == 0
        out = tmp_path / "results" / "exp_mae_vs_m_x1.csv"
        lines = out.read_text().splitlines()
        assert lines[0] == "context_size,knn_mae_db,knn_std"
        assert len(lines) == 3
        first = out.read_bytes()
        assert run(tmp_path, *args, "experiment") == 0
        assert out.read_bytes() == first

    def test_crete_estimator_requires_checkpoint(self, tmp_path, capsys):
        assert run(tmp_path, *TINY_GEN, "gen-data") == 0
        code = run(tmp_path, *TINY_GEN, "--set", "evaluation.estimators=crete", "eval")
        assert code == 2
        assert "checkpoint" in capsys.readouterr().err


class TestWorkdirResolution:
    def test_env_var_fallback(self, tmp_path, monkeypatch):
        target = tmp_path / "via_env"
        monkeypatch.setenv("CRETE_WORKDIR", str(target))
        assert dispatch([*TINY_GEN, "gen-data"]) == 0
        assert (target / "data").exists()

    def test_explicit_workdir_wins(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CRETE_WORKDIR", str(tmp_path / "ignored"))
        target = tmp_path / "explicit"
        assert dispatch(["--workdir", str(target), *TINY_GEN, "gen-data"]) == 0
        assert (target / "data").exists()
        assert not (tmp_path / "ignored").exists()
