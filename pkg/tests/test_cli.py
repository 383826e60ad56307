"""Config-file and CLI pipeline tests on a miniature preset."""

import json
from pathlib import Path

import numpy as np
import pytest

from sliceworld import config as configmod
from sliceworld.cli import main
from sliceworld.errors import ConfigError

TINY_SETS = [
    "generator.n_train=10", "generator.n_test=6", "generator.t_min=8",
    "generator.t_max=10", "generator.hu_side=16",
    "arch.image_side=16", "arch.patch=4", "arch.d_v=8", "arch.d_att=8",
    "arch.d_e=8", "arch.d_h=12", "arch.d_anat=5", "arch.d_lesion=4",
    "arch.d_unc=3", "arch.d_w=8", "arch.d_z=12", "arch.horizon=2",
    "arch.pred_hidden=8", "arch.decoder_layers=1", "arch.decoder_hidden=16",
    "loss.horizon=2",
    "pretrain.epochs=1", "pretrain.batch_size=5",
    "finetune.epochs=1", "finetune.batch_size=5",
    "eval.ks=[1,2]",
]


def run(command, out, extra_sets=(), seed=0, config=None):
    argv = [command, "--out", str(out), "--seed", str(seed)]
    if config:
        argv += ["--config", str(config)]
    for s in (*TINY_SETS, *extra_sets):
        argv += ["--set", s]
    return main(argv)


class TestConfig:
    def test_roundtrip_through_text(self, tmp_path):
        cfg = configmod.resolve(sets=["generator.t_min=5", "loss.delta=0.2",
                                      "eval.ks=[1,2]"])
        text = configmod.to_text(cfg)
        path = tmp_path / "cfg.txt"
        path.write_text(text)
        cfg2 = configmod.resolve(config_path=path)
        assert configmod.to_text(cfg2) == text
        assert cfg2.generator.t_min == 5
        assert cfg2.loss.delta == 0.2
        assert cfg2.eval.ks == (1, 2)

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            configmod.resolve(sets=["generator.bogus=1"])
        with pytest.raises(ConfigError):
            configmod.resolve(sets=["nonsense=1"])
        with pytest.raises(ConfigError):
            configmod.resolve(sets=["a.b.c=1"])

    def test_type_checking(self):
        with pytest.raises(ConfigError):
            configmod.resolve(sets=["generator.t_min=hello"])
        with pytest.raises(ConfigError):
            configmod.resolve(sets=["loss.delta=[1,2]"])

    def test_seed_propagates_to_stages(self):
        cfg = configmod.resolve(sets=[], seed=9)
        assert cfg.pretrain.seed == 9 and cfg.finetune.seed == 9
        cfg = configmod.resolve(sets=["pretrain.seed=3"], seed=9)
        assert cfg.pretrain.seed == 3 and cfg.finetune.seed == 9

    def test_comments_and_bare_strings(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("# comment\nrun_name = myrun  # trailing\nseed = 4\n")
        cfg = configmod.resolve(config_path=path)
        assert cfg.run_name == "myrun" and cfg.seed == 4

    def test_invalid_line_rejected(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("this is not a key value line\n")
        with pytest.raises(ConfigError):
            configmod.resolve(config_path=path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data -> pretrain -> finetune once; commands share the output root."""
    out = tmp_path_factory.mktemp("runs")
    assert run("gen-data", out, ["run_name=data"]) == 0
    dataset = f"dataset_dir={out / 'data' / 'dataset'}"
    assert run("pretrain", out, ["run_name=pre", dataset]) == 0
    ck = f"checkpoint={out / 'pre' / 'checkpoint'}"
    assert run("finetune", out, ["run_name=fine", dataset, ck]) == 0
    return out, dataset, f"checkpoint={out / 'fine' / 'checkpoint'}"


class TestPipeline:
    def test_artifacts_and_config_copies(self, pipeline):
        out, _, _ = pipeline
        assert (out / "data" / "dataset" / "meta.json").exists()
        for name in ("data", "pre", "fine"):
            assert (out / name / "config.txt").exists()
        assert (out / "pre" / "checkpoint" / "manifest.json").exists()
        assert (out / "pre" / "train_log.jsonl").exists()
        log = [json.loads(l) for l in
               (out / "pre" / "train_log.jsonl").read_text().splitlines()]
        assert log and log[0]["stage"] == "pretrain"

    def test_gen_data_rerun_byte_identical(self, pipeline, tmp_path):
        out, _, _ = pipeline
        assert run("gen-data", tmp_path, ["run_name=data2"]) == 0
        a_dir = out / "data" / "dataset"
        b_dir = tmp_path / "data2" / "dataset"
        for f in sorted(a_dir.iterdir()):
            assert (b_dir / f.name).read_bytes() == f.read_bytes()

    def test_gen_data_jobs_matches_serial(self, pipeline, tmp_path):
        out, _, _ = pipeline
        argv_sets = ["run_name=datap"]
        rc = main(["gen-data", "--out", str(tmp_path), "--jobs", "2",
                   "--seed", "0"]
                  + sum((["--set", s] for s in (*TINY_SETS, *argv_sets)), []))
        assert rc == 0
        a_dir = out / "data" / "dataset"
        b_dir = tmp_path / "datap" / "dataset"
        for f in sorted(a_dir.iterdir()):
            assert (b_dir / f.name).read_bytes() == f.read_bytes(), f.name

    def test_eval_predict_outputs(self, pipeline, tmp_path):
        out, dataset, _ = pipeline
        ck = f"checkpoint={out / 'pre' / 'checkpoint'}"
        assert run("eval-predict", tmp_path, ["run_name=ep", dataset, ck]) == 0
        run_dir = tmp_path / "ep"
        assert (run_dir / "predict_records.jsonl").exists()
        agg = json.loads((run_dir / "aggregate.json").read_text())
        assert "model_k1" in agg["horizon"]
        csv = (run_dir / "horizon_metrics.csv").read_text().splitlines()
        assert csv[0].startswith("system,k,mse")
        assert len(csv) == 1 + len(agg["horizon"])

    def test_eval_rerun_byte_identical(self, pipeline, tmp_path):
        out, dataset, _ = pipeline
        ck = f"checkpoint={out / 'pre' / 'checkpoint'}"
        for name in ("r1", "r2"):
            assert run("eval-predict", tmp_path, [f"run_name={name}",
                                                  dataset, ck]) == 0
        for fname in ("predict_records.jsonl", "aggregate.json",
                      "horizon_metrics.csv"):
            assert ((tmp_path / "r1" / fname).read_bytes()
                    == (tmp_path / "r2" / fname).read_bytes())

    def test_eval_probes_and_intervene_and_robustness(self, pipeline, tmp_path):
        out, dataset, fine_ck = pipeline
        assert run("eval-probes", tmp_path, ["run_name=pr", dataset,
                                             f"checkpoint={out / 'pre' / 'checkpoint'}"]) == 0
        probe_csv = (tmp_path / "pr" / "probe_results.csv").read_text()
        assert probe_csv.count("\n") == 10  # header + 9 probes
        assert run("eval-intervene", tmp_path, ["run_name=iv", dataset,
                                                fine_ck]) == 0
        table = (tmp_path / "iv" / "intervention_table.csv").read_text()
        assert table.startswith("group,mode,n")
        assert run("eval-robustness", tmp_path, ["run_name=rb", dataset,
                                                 fine_ck,
                                                 "eval.budgets=[1.0,0.5]"]) == 0
        rb = (tmp_path / "rb" / "robustness.csv").read_text().splitlines()
        assert len(rb) == 3

    def test_eval_significance_and_report(self, pipeline, tmp_path):
        out, dataset, fine_ck = pipeline
        ck = f"checkpoint={out / 'pre' / 'checkpoint'}"
        assert run("eval-predict", tmp_path, ["run_name=ea", dataset, ck]) == 0
        rec = tmp_path / "ea" / "predict_records.jsonl"
        assert run("eval-significance", tmp_path, [
            "run_name=sig",
            f"eval.sig_file_a={rec}", f"eval.sig_file_b={rec}",
            "eval.sig_metric=mse_model_k1",
            "eval.bootstrap_resamples=200"]) == 0
        sig = json.loads((tmp_path / "sig" / "significance.json").read_text())
        assert sig["p_value_b_better"] == 1.0  # identical systems
        assert run("report", tmp_path, ["run_name=rep",
                                        f"eval.report_from={tmp_path / 'ea'}"]) == 0
        curve = (tmp_path / "rep" / "horizon_curve.csv").read_text().splitlines()
        assert curve[0] == "k,system,mse,cosine"
        assert len(curve) > 1

    def test_missing_inputs_give_usage_errors(self, tmp_path):
        assert run("pretrain", tmp_path, ["run_name=x"]) == 2  # no dataset_dir
        assert run("eval-predict", tmp_path,
                   ["run_name=y", f"dataset_dir={tmp_path}"]) == 2

    def test_incompatible_checkpoint_is_version_error(self, pipeline, tmp_path):
        out, dataset, _ = pipeline
        ck_dir = out / "pre" / "checkpoint"
        # architecture mismatch: d_h differs -> missing/readable groups
        rc = run("eval-predict", tmp_path,
                 ["arch.d_h=16", "run_name=bad", dataset,
                  f"checkpoint={ck_dir}"])
        assert rc == 3

    def test_direct_finetune_runs_without_checkpoint(self, pipeline, tmp_path):
        _, dataset, _ = pipeline
        assert run("finetune", tmp_path, ["run_name=direct", dataset,
                                          "finetune.ablation=direct"]) == 0
        assert (tmp_path / "direct" / "checkpoint" / "manifest.json").exists()
