import json

import pytest

from dlow_lab.cli import main
from dlow_lab.config import load_config, packaged_config
from dlow_lab.errors import ConfigError

from conftest import tiny_config

COMMANDS = ["gen-data", "train-cvae", "train-dlow", "eval", "ablate", "sweep-beta", "vary-eps", "control", "curve-k", "plot"]
FIGURES = {
    "eval": ["fans.png", "end_poses_joint0.png"],
    "sweep-beta": ["beta_fans.png"],
    "vary-eps": ["eps_variation.png"],
    "control": ["control.png"],
    "curve-k": ["metrics_vs_k.png"],
    "plot": ["fans.png"],
}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(root / "tiny.ini")
    out = root / "out"
    codes = {c: main([c, "--config", str(cfg), "--out", str(out)]) for c in COMMANDS}
    return cfg, out, codes


def test_every_command_succeeds_and_writes_artifacts(tiny_run):
    _, out, codes = tiny_run
    assert codes == dict.fromkeys(COMMANDS, 0)
    for c in COMMANDS:
        d = out / c
        assert (d / "report.txt").read_text().strip()
        json.loads((d / "report.json").read_text())
        manifest = json.loads((d / "manifest.json").read_text())
        assert {"config_hash", "seed", "inputs", "outputs", "experiment_config"} <= set(manifest)
        assert "report.txt" in manifest["outputs"]
        for fig in FIGURES.get(c, []):
            assert (d / fig).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_cache_directories_have_manifests(tiny_run):
    _, out, _ = tiny_run
    dirs = sorted((out / "cache").iterdir())
    kinds = {d.name.split("-")[0] for d in dirs}
    assert kinds == {"data", "cvae", "dlow"}
    for d in dirs:
        m = json.loads((d / "manifest.json").read_text())
        assert m["stage_key"].startswith(d.name.split("-")[1])
        assert m["seed"] == 0


def test_rerun_reuses_models(tiny_run, capsys):
    cfg, out, _ = tiny_run
    before = {p: p.stat().st_mtime_ns for p in (out / "cache").rglob("params.npz")}
    assert main(["ablate", "--config", str(cfg), "--out", str(out)]) == 0
    after = {p: p.stat().st_mtime_ns for p in (out / "cache").rglob("params.npz")}
    assert before == after
    assert "E_d only" in capsys.readouterr().out


def test_ablation_table_layout(tiny_run):
    _, out, _ = tiny_run
    lines = (out / "ablate" / "report.txt").read_text().splitlines()
    assert lines[1].split() == ["method", "APD", "ADE", "FDE", "MMADE", "MMFDE"]
    assert [l[:10].strip() for l in lines[3:]] == ["E_d & E_r", "E_d only", "E_r only", "neither"]


def test_flag_overrides(tmp_path):
    cfg = load_config(packaged_config(), seed=5, out=str(tmp_path), k_list=[3, 1], betas=[2.0])
    assert cfg.seed == 5 and cfg.out == str(tmp_path)
    assert cfg.eval.k_list == (3, 1) and cfg.eval.betas == (2.0,)
    assert cfg.data_spec().seed == 5


def test_k_and_beta_flags(tmp_path, capsys):
    cfg = tiny_config(tmp_path / "tiny.ini")
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "o"), "--k", "2,3"]) == 0
    text = capsys.readouterr().out
    assert "random K=2" in text and "dlow K=3" in text
    assert main(["sweep-beta", "--config", str(cfg), "--out", str(tmp_path / "o"), "--beta", "5"]) == 0
    assert json.loads((tmp_path / "o" / "sweep-beta" / "report.json").read_text()).keys() == {"5"}


@pytest.mark.parametrize(
    "text",
    [
        "[dlow]\nbogus = 1\n",
        "[nonsense]\nx = 1\n",
        "[dlow]\nbeta = -1\n",
        "[dlow]\nK = ten\n",
        "[dlow]\nJ_s = 0\nJ_d = 0, 1\n",
        "[data]\nV = 3\n",
        "[data]\nmode_weights = 1, 2\n",
        "[eval]\nk_list = 0, 1\n",
        "[cvae]\nactivation = relu6\n",
        "not an ini file",
    ],
)
def test_config_errors_exit_2(tmp_path, text, capsys):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)
    assert main(["gen-data", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_config_and_bad_flags_exit_2(tmp_path):
    assert main(["eval", "--config", str(tmp_path / "missing.ini")]) == 2
    assert main(["eval", "--config", str(packaged_config()), "--k", "a,b"]) == 2
    assert main(["no-such-command", "--config", str(packaged_config())]) == 2


def test_context_index_out_of_range_exit_2(tmp_path):
    cfg = tiny_config(tmp_path / "t.ini", **{r"(?m)^context_index = 0": "context_index = 9999"})
    assert main(["vary-eps", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_divergence_exits_3(tmp_path, capsys):
    cfg = tiny_config(tmp_path / "t.ini", **{r"(?m)^lr = 1e-3": "lr = 1e30"})
    assert main(["train-cvae", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert "training fault" in capsys.readouterr().err
