import json
import re

import pytest

from ciseg.cli import EXIT_CONFIG, EXIT_OK, ablation_rows, derived_seed, main, resolve_seed
from ciseg.config import Ablations, ExperimentConfig, ModelConfig, TrainConfig


def _tiny_experiment(out, **kw) -> ExperimentConfig:
    train = dict(protocol="4-2 (2 steps)", steps_iterations=2, eval_interval=2, batch_size=2,
                 learning_rate=1e-3, train_pool_size=4, test_size=4, instance_count_range=(1, 2),
                 model=ModelConfig(d_q=16, decoder_layers=1, backbone_channels=[8, 16, 16], image_size=(16, 16)))
    train.update(kw)
    return ExperimentConfig(train=TrainConfig(**train), output_dir=str(out))


def _write(exp, path):
    path.write_text(exp.to_json())
    return str(path)


# ---- generate-data


def test_generate_data_manifest_and_determinism(tmp_path, capsys):
    args = ["generate-data", "--protocol", "6-2 (3 steps)", "--seed", "0", "--size", "12", "--image-size", "32"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert "3 steps" in capsys.readouterr().out
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert [s["step"] for s in manifest["splits"]] == [0, 1, 2]
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_generate_data_vocabulary_overflow(tmp_path, capsys):
    code = main(["generate-data", "--protocol", "100-5 (11 steps)", "--seed", "0",
                 "--out", str(tmp_path), "--size", "5"])
    assert code == EXIT_CONFIG
    assert "vocabulary overflow" in capsys.readouterr().err


def test_generate_data_malformed_protocol(tmp_path, capsys):
    assert main(["generate-data", "--protocol", "six-two", "--out", str(tmp_path), "--size", "5"]) == EXIT_CONFIG
    assert "malformed" in capsys.readouterr().err


def test_generate_data_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code = main(["generate-data", "--protocol", "4-2", "--out", str(blocker / "sub"), "--size", "2"])
    assert code not in (EXIT_OK, EXIT_CONFIG)
    assert capsys.readouterr().err


def test_missing_arguments_is_config_error(capsys):
    assert main(["train"]) == EXIT_CONFIG


# ---- seeds and grids


def test_seed_precedence(monkeypatch):
    monkeypatch.delenv("CISEG_SEED", raising=False)
    assert resolve_seed(None, 4) == 4
    monkeypatch.setenv("CISEG_SEED", "7")
    assert resolve_seed(None, 4) == 7
    assert resolve_seed(9, 4) == 9


def test_ablation_grid_rows_and_seeds():
    rows = ablation_rows(Ablations(), ["use_query_kd", "use_pod_kd"])
    assert len(rows) == 4
    assert len({r.vector() for r in rows}) == 4
    assert all(r.freeze_queries for r in rows)
    seeds = {derived_seed(0, r) for r in rows}
    assert len(seeds) == 4
    assert derived_seed(0, rows[0]) == derived_seed(0, rows[0])


# ---- train / eval / plot


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    exp = _tiny_experiment(root / "run")
    cfg_path = _write(exp, root / "config.json")
    assert main(["train", "--config", cfg_path]) == EXIT_OK
    return exp, root


def test_train_outputs(trained):
    exp, root = trained
    run = root / "run"
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == ["step0.ckpt", "step1.ckpt"]
    lines = (run / "metrics.jsonl").read_text().splitlines()
    assert lines
    assert all(json.loads(x)["config_hash"] == exp.config_hash() for x in lines)
    assert ExperimentConfig.load(run / "config.json") == exp


def test_train_env_seed_changes_hash(tmp_path, monkeypatch):
    monkeypatch.setenv("CISEG_SEED", "5")
    exp = _tiny_experiment(tmp_path / "run")
    assert main(["train", "--config", _write(exp, tmp_path / "c.json")]) == EXIT_OK
    saved = ExperimentConfig.load(tmp_path / "run" / "config.json")
    assert saved.train.seed == 5


def test_eval_reports_grouped_miou(trained, capsys, tmp_path):
    _, root = trained
    out = tmp_path / "rec.json"
    code = main(["eval", "--checkpoint", str(root / "run" / "checkpoints" / "step1.ckpt"),
                 "--step", "1", "--json", str(out)])
    assert code == EXIT_OK
    text = capsys.readouterr().out
    assert re.search(r"old\s*\|\s*new\s*\|\s*all", text)
    rec = json.loads(out.read_text())
    assert rec["step"] == 1 and rec["miou_all"] is not None


def test_eval_refuses_mismatched_config(trained, capsys, tmp_path):
    exp, root = trained
    other = _tiny_experiment(root / "run", seed=99)
    code = main(["eval", "--checkpoint", str(root / "run" / "checkpoints" / "step0.ckpt"),
                 "--config", _write(other, tmp_path / "other.json")])
    assert code == EXIT_CONFIG
    err = capsys.readouterr().err
    assert exp.config_hash() in err and other.config_hash() in err


def test_eval_rejects_future_step(trained, capsys):
    _, root = trained
    code = main(["eval", "--checkpoint", str(root / "run" / "checkpoints" / "step0.ckpt"), "--step", "1"])
    assert code == EXIT_CONFIG


def test_plot_writes_pngs_with_hash(trained, tmp_path, capsys):
    exp, root = trained
    assert main(["plot", "--metrics", str(root / "run" / "metrics.jsonl"), "--out", str(tmp_path)]) == EXIT_OK
    for name in ("miou.png", "loss.png"):
        data = (tmp_path / name).read_bytes()
        assert data[:8] == b"\x89PNG\r\n\x1a\n"
        assert exp.config_hash().encode() in data


def test_plot_missing_file(tmp_path, capsys):
    assert main(["plot", "--metrics", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]) == 3


def test_config_with_unknown_key(tmp_path, capsys):
    d = _tiny_experiment(tmp_path).to_dict()
    d["train"]["colour"] = "red"
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(d))
    assert main(["train", "--config", str(path)]) == EXIT_CONFIG
    assert "colour" in capsys.readouterr().err


def test_ablate_grid_table(tmp_path, capsys):
    exp = _tiny_experiment(tmp_path / "abl")
    code = main(["ablate", "--config", _write(exp, tmp_path / "c.json"), "--grid", "use_query_kd,use_pod_kd"])
    assert code == EXIT_OK
    table = json.loads((tmp_path / "abl" / "ablate" / "ablation.json").read_text())
    assert len(table["rows"]) == 4
    assert table["base_config_hash"] == exp.config_hash()
    assert len({r["seed"] for r in table["rows"]}) == 4
    text = capsys.readouterr().out
    assert text.count("\n") >= 6


def test_ablate_unknown_flag(tmp_path, capsys):
    exp = _tiny_experiment(tmp_path / "abl")
    assert main(["ablate", "--config", _write(exp, tmp_path / "c.json"), "--grid", "use_magic"]) == EXIT_CONFIG
