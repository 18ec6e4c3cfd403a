import json
import os

import numpy as np
import pytest

from whisq import cli, data_io, model

TOY_CONFIG = {
    "d_feat": 6, "d_text_in": 8, "d_audio_in": 6, "n_heads": 2,
    "attention_mode": "seq_coattention",
    "ot_weight": 1e-3, "ot_blur": 0.05, "ot_max_iters": 15,
    "ot_tol": 1e-6, "ot_anneal": 0.5,
    "lr": 1e-2, "momentum": 0.7435, "batch_size": 4, "epochs": 3,
    "clip_norm": 1.0, "seed": 3,
}


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_synth")
    rc = cli.main(["synth", "--n", "8", "--systems", "2", "--seed", "21",
                   "--out", str(out), "--d-audio", "6", "--d-text", "8"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps(TOY_CONFIG))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, synth_dir, config_path):
    out = tmp_path_factory.mktemp("run")
    rc = cli.main(["train", "--manifest", str(synth_dir / "manifest.csv"),
                   "--config", str(config_path), "--out", str(out)])
    assert rc == 0
    return out


class TestSynth:
    def test_outputs_exist(self, synth_dir):
        assert (synth_dir / "manifest.csv").exists()
        records = data_io.parse_manifest(synth_dir / "manifest.csv")
        assert len(records) == 8

    def test_deterministic(self, tmp_path, synth_dir):
        rc = cli.main(["synth", "--n", "8", "--systems", "2", "--seed", "21",
                       "--out", str(tmp_path), "--d-audio", "6", "--d-text", "8"])
        assert rc == 0
        a = (synth_dir / "manifest.csv").read_bytes()
        b = (tmp_path / "manifest.csv").read_bytes()
        assert a == b


class TestTrain:
    def test_artifacts_present(self, trained):
        for name in ("checkpoint.wqck", "history.jsonl", "effective-config.json"):
            assert (trained / name).exists()

    def test_missing_manifest_exits_2(self, tmp_path, capsys):
        rc = cli.main(["train", "--manifest", str(tmp_path / "nope.csv"),
                       "--out", str(tmp_path)])
        assert rc == 2
        assert "nope.csv" in capsys.readouterr().err

    def test_unknown_config_key_exits_1(self, tmp_path, synth_dir):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"nonsense": 1}))
        rc = cli.main(["train", "--manifest", str(synth_dir / "manifest.csv"),
                       "--config", str(bad), "--out", str(tmp_path)])
        assert rc == 1

    def test_flag_overrides_config(self, tmp_path, synth_dir, config_path):
        out = tmp_path / "o"
        rc = cli.main(["train", "--manifest", str(synth_dir / "manifest.csv"),
                       "--config", str(config_path), "--out", str(out),
                       "--mode", "mlp_only", "--epochs", "1"])
        assert rc == 0
        eff = json.loads((out / "effective-config.json").read_text())
        assert eff["attention_mode"] == "mlp_only"
        assert eff["epochs"] == 1

    def test_lambda_zero_reports_unweighted_ot(self, tmp_path, synth_dir, config_path):
        out = tmp_path / "o"
        rc = cli.main(["train", "--manifest", str(synth_dir / "manifest.csv"),
                       "--config", str(config_path), "--out", str(out),
                       "--lambda", "0", "--epochs", "2"])
        assert rc == 0
        lines = [json.loads(l) for l in (out / "history.jsonl").read_text().splitlines()]
        for rec in lines:
            assert rec["ot_loss"] > 0.0
            assert rec["total_loss"] == rec["task_loss"]


class TestEval:
    def test_eval_writes_report(self, trained, synth_dir, tmp_path, capsys):
        out = tmp_path / "report.json"
        rc = cli.main(["eval", "--manifest", str(synth_dir / "manifest.csv"),
                       "--checkpoint", str(trained / "checkpoint.wqck"),
                       "--out", str(out)])
        assert rc == 0
        doc = json.loads(out.read_text())
        assert "omq.utterance.srcc" in doc
        assert "OMQ" in capsys.readouterr().out

    def test_oracle_mode_all_ones(self, synth_dir, tmp_path):
        out = tmp_path / "report.json"
        rc = cli.main(["eval", "--manifest", str(synth_dir / "manifest.csv"),
                       "--oracle", "--out", str(out)])
        assert rc == 0
        doc = json.loads(out.read_text())
        for axis in ("omq", "ta"):
            for level in ("utterance", "system"):
                assert doc[f"{axis}.{level}.mse"] == 0.0
                assert abs(doc[f"{axis}.{level}.srcc"] - 1.0) < 1e-12

    def test_single_system_warns_but_succeeds(self, tmp_path, capsys):
        data_io.generate_synthetic(4, 1, 6, 8, seed=2, out_dir=tmp_path)
        rc = cli.main(["eval", "--manifest", str(tmp_path / "manifest.csv"),
                       "--oracle"])
        assert rc == 0
        captured = capsys.readouterr()
        assert "warning" in captured.err


class TestScore:
    def _score(self, trained, synth_dir, capsys, clip=0, text_clip=None):
        records = data_io.parse_manifest(synth_dir / "manifest.csv")
        text_rec = records[text_clip if text_clip is not None else clip]
        rc = cli.main(["score",
                       "--audio-emb", records[clip].audio_emb_path,
                       "--text-emb", text_rec.text_emb_path,
                       "--checkpoint", str(trained / "checkpoint.wqck")])
        assert rc == 0
        return json.loads(capsys.readouterr().out)

    def test_deterministic(self, trained, synth_dir, capsys):
        a = self._score(trained, synth_dir, capsys)
        b = self._score(trained, synth_dir, capsys)
        assert a == b

    def test_omq_is_audio_only(self, trained, synth_dir, capsys):
        base = self._score(trained, synth_dir, capsys, clip=0)
        text_swapped = self._score(trained, synth_dir, capsys, clip=0, text_clip=3)
        audio_swapped = self._score(trained, synth_dir, capsys, clip=3, text_clip=0)
        assert text_swapped["omq"] == base["omq"]
        assert text_swapped["ta"] != base["ta"]
        assert audio_swapped["omq"] != base["omq"]

    def test_zeroed_head_outputs_bias(self, synth_dir, tmp_path, capsys):
        cfg = model.WhisqConfig.from_dict(TOY_CONFIG)
        params = model.init_params(cfg, 0)
        for k in params.tensors:
            if k.startswith(("mlp_omq", "mlp_ta")):
                params.tensors[k] = np.zeros_like(params.tensors[k])
        params.tensors["mlp_omq.l2.b"] = np.array([1.25])
        params.tensors["mlp_ta.l2.b"] = np.array([-0.5])
        ckpt = tmp_path / "zero.wqck"
        model.save_checkpoint(ckpt, params, cfg)
        records = data_io.parse_manifest(synth_dir / "manifest.csv")
        rc = cli.main(["score", "--audio-emb", records[0].audio_emb_path,
                       "--text-emb", records[0].text_emb_path,
                       "--checkpoint", str(ckpt)])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc == {"omq": 1.25, "ta": -0.5}


class TestGradcheckCommand:
    def test_passes_by_default(self, capsys):
        rc = cli.main(["gradcheck", "--mode", "mlp_only"])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["passed"] is True

    def test_corrupted_backward_exits_4(self, capsys):
        rc = cli.main(["gradcheck", "--mode", "mlp_only", "--corrupt-backward"])
        assert rc == 4
