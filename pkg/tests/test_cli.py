import csv

import numpy as np
import pytest

from dyadsynth.cli import main
from dyadsynth.config import ExperimentConfig, load_config, parse_config_text
from dyadsynth.errors import ConfigError
from dyadsynth.motiondata import read_dyad_file

DESK = """
seed = 7
d_m = 6
d_a = 8
codebook_size = 24
code_dim = 16
vq_hidden = 32
vq_heads = 4
vq_layers = 1
fusion_hidden = 32
fusion_heads = 4
fusion_layers = 1
pred_hidden = 32
pred_heads = 4
pred_layers = 1
batch = 16
vq_epochs = 2
pred_epochs = 2
warmup = 50
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "desk.cfg"
    cfg.write_text(DESK)
    assert main(["synth-data", "--out", str(d / "data.dyad"), "--samples", "4",
                 "--length", "800", "--modes", "2", "--seed", "3",
                 "--config", str(cfg)]) == 0
    assert main(["train-vqvae", "--data", str(d / "data.dyad"),
                 "--out-checkpoint", str(d / "vq.ckpt"), "--config", str(cfg)]) == 0
    assert main(["train-predictor", "--data", str(d / "data.dyad"),
                 "--vqvae", str(d / "vq.ckpt"),
                 "--out-checkpoint", str(d / "pred.ckpt"), "--config", str(cfg)]) == 0
    return d, cfg


def test_config_parsing_and_validation():
    cfg = parse_config_text("window = 8\ntrain_len = 64\ncontext_len = 32")
    assert cfg.tau == 4
    with pytest.raises(ConfigError):
        parse_config_text("window = 7")
    with pytest.raises(ConfigError):
        parse_config_text("train_len = 60")  # not divisible by 8
    with pytest.raises(ConfigError):
        parse_config_text("no_such_key = 3")
    with pytest.raises(ConfigError):
        parse_config_text("train_frac = 0.5\nval_frac = 0.1\ntest_frac = 0.1")


def test_config_env_var(tmp_path, monkeypatch):
    p = tmp_path / "c.cfg"
    p.write_text("seed = 99\n")
    monkeypatch.setenv("DYADSYNTH_CONFIG", str(p))
    assert load_config().seed == 99


def test_config_override_precedence(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("seed = 99\nbatch = 8\n")
    cfg = load_config(p, overrides={"batch": "4"})
    assert cfg.seed == 99 and cfg.batch == 4


def test_bad_window_config_is_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("train_len = 60\n")
    code = main(["synth-data", "--out", str(tmp_path / "x.dyad"), "--config", str(bad)])
    assert code == 2
    err = capsys.readouterr().err
    assert err.startswith("error: ConfigError:") and err.count("\n") == 1


def test_missing_data_is_data_error(tmp_path, capsys):
    code = main(["train-vqvae", "--data", str(tmp_path / "nope.dyad"),
                 "--out-checkpoint", str(tmp_path / "x.ckpt")])
    assert code == 3
    assert capsys.readouterr().err.startswith("error: IoError:")


def test_unknown_method_is_config_error(workdir, tmp_path, capsys):
    d, cfg = workdir
    code = main(["evaluate", "--gt", str(d / "data.dyad"),
                 "--train-bank", str(d / "data.dyad"),
                 "--out-report", str(tmp_path / "rep"),
                 "--methods", "gt,flubber", "--config", str(cfg)])
    assert code == 2
    err = capsys.readouterr().err
    assert "flubber" in err and "median" in err


def test_generate_and_evaluate(workdir, tmp_path):
    d, cfg = workdir
    assert main(["generate", "--speaker-data", str(d / "data.dyad"),
                 "--vqvae", str(d / "vq.ckpt"), "--predictor", str(d / "pred.ckpt"),
                 "--samples", "2", "--seed", "5", "--out", str(d / "gen.dyad")]) == 0
    gen = read_dyad_file(d / "gen.dyad")
    assert len(gen) == 8  # 4 speakers x 2 rollouts
    assert all(s.id.split("#")[0].endswith("-generated") for s in gen)

    rep = tmp_path / "rep"
    assert main(["evaluate", "--pred", str(d / "gen.dyad"), "--gt", str(d / "data.dyad"),
                 "--train-bank", str(d / "data.dyad"), "--out-report", str(rep),
                 "--config", str(cfg)]) == 0
    assert (rep / "report.txt").exists()
    assert (rep / "tlcc_expression.png").exists()
    with open(rep / "report.csv") as f:
        rows = list(csv.DictReader(f))
    methods = [r["method"] for r in rows]
    assert "gt" in methods and "median" in methods and "model" in methods
    med = next(r for r in rows if r["method"] == "median")
    assert float(med["expr_variation"]) == 0.0
    assert float(med["expr_si"]) == 0.0
    assert med["expr_pcc"] == "-"
    mirror_row = next(r for r in rows if r["method"] == "mirror")
    assert float(mirror_row["expr_pcc"]) >= 0.98


def test_generate_same_seed_bit_identical(workdir):
    d, cfg = workdir
    assert main(["generate", "--speaker-data", str(d / "data.dyad"),
                 "--vqvae", str(d / "vq.ckpt"), "--predictor", str(d / "pred.ckpt"),
                 "--samples", "1", "--seed", "9", "--out", str(d / "gen_a.dyad")]) == 0
    assert main(["generate", "--speaker-data", str(d / "data.dyad"),
                 "--vqvae", str(d / "vq.ckpt"), "--predictor", str(d / "pred.ckpt"),
                 "--samples", "1", "--seed", "9", "--out", str(d / "gen_b.dyad")]) == 0
    assert (d / "gen_a.dyad").read_bytes() == (d / "gen_b.dyad").read_bytes()


def test_gt_vs_itself_zero_metrics(workdir, tmp_path):
    d, cfg = workdir
    rep = tmp_path / "self"
    assert main(["evaluate", "--pred", str(d / "data.dyad"), "--gt", str(d / "data.dyad"),
                 "--train-bank", str(d / "data.dyad"), "--out-report", str(rep),
                 "--methods", "gt", "--split", "all", "--config", str(cfg)]) == 0
    with open(rep / "report.csv") as f:
        rows = {r["method"]: r for r in csv.DictReader(f)}
    model = rows["model"]
    assert float(model["expr_l2"]) == 0.0
    assert float(model["expr_fd"]) < 1e-6
    assert float(model["expr_p_fd"]) < 1e-6


def test_vqvae_report_artifacts(workdir):
    d, cfg = workdir
    assert (d / "vqvae_losses.csv").exists()
    assert (d / "vqvae_losses.png").exists()
    assert (d / "vqvae_codebook_usage.png").exists()
    assert (d / "predictor_losses.csv").exists()
    assert (d / "predictor_losses.png").exists()


def test_ablation_flags(workdir, tmp_path):
    d, cfg = workdir
    for flags, _name in ((["--no-audio"], "motion"), (["--fusion", "concat"], "concat")):
        out = tmp_path / f"pred_{_name}.ckpt"
        assert main(["train-predictor", "--data", str(d / "data.dyad"),
                     "--vqvae", str(d / "vq.ckpt"), "--out-checkpoint", str(out),
                     "--config", str(cfg)] + flags) == 0
    code = main(["train-predictor", "--data", str(d / "data.dyad"),
                 "--vqvae", str(d / "vq.ckpt"),
                 "--out-checkpoint", str(tmp_path / "x.ckpt"),
                 "--config", str(cfg), "--no-audio", "--no-motion"])
    assert code == 2
