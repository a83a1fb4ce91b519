import numpy as np
import pytest

from conftest import small_experiment
from rfl.cli import config_from_ini, config_to_ini, main, parse_number, scatter_svg
from rfl.data_io import MetricRow, load_checkpoint, read_metrics_csv, write_metrics_csv
from rfl.errors import ConfigError


@pytest.fixture
def ini(tmp_path):
    cfg = small_experiment()
    cfg.schedule.epochs = 1
    cfg.pipeline.pretrain_epochs = 1
    path = tmp_path / "tiny.ini"
    path.write_text(config_to_ini(cfg))
    return path


def test_help_and_bad_flags(capsys):
    assert main(["--help"]) == 0
    assert main(["finetune", "--bogus"]) == 2
    assert main([]) == 2


def test_missing_config_is_usage_error(tmp_path):
    assert main(["pretrain", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path)]) == 2


def test_rational_and_decimal_parsing():
    assert parse_number("8/255", "k") == float(np.float32(8 / 255))
    assert parse_number("0.1", "k") == 0.1
    with pytest.raises(ConfigError):
        parse_number("1/0", "k")
    with pytest.raises(ConfigError):
        parse_number("eight", "k")


def test_config_round_trip_and_unknown_key():
    cfg = small_experiment()
    cfg.seed = 17
    back = config_from_ini(config_to_ini(cfg))
    assert back == cfg
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_ini("[optim]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="unknown section"):
        config_from_ini("[optimizer]\n")


def test_config_eps_and_extras():
    cfg = config_from_ini("[attack.train]\nepsilon = 8/255\n[strategy]\nkind = adapter\ninit = roli\n"
                          "[pipeline]\nseed = 4\n")
    assert cfg.attack_train.epsilon == float(np.float32(8 / 255))
    assert cfg.strategy.kind == "adapter" and cfg.pipeline.head_init == "roli" and cfg.seed == 4


def test_seed_precedence(ini, tmp_path, monkeypatch):
    monkeypatch.setenv("RFL_SEED", "9")
    out = tmp_path / "o"
    assert main(["analyze", str(tmp_path / "none.csv"), "--config", str(ini), "--out", str(out)]) == 2
    assert "seed = 0" in (out / "config.ini").read_text()
    ini.write_text(ini.read_text().replace("seed = 0\n", ""))
    main(["analyze", str(tmp_path / "none.csv"), "--config", str(ini), "--out", str(out)])
    assert "seed = 9" in (out / "config.ini").read_text()
    main(["analyze", str(tmp_path / "none.csv"), "--config", str(ini), "--out", str(out), "--seed", "3"])
    assert "seed = 3" in (out / "config.ini").read_text()


def _synthetic_csv(path, n_ft=5, n_lp=6):
    rng = np.random.default_rng(0)
    for kind, n in (("finetune", n_ft), ("probe", n_lp)):
        for i in range(n):
            for mode in ("std", "adv"):
                rows = [MetricRow(f"{kind}-{mode}", 1, "test", m, float(rng.uniform(0.3, 0.9)))
                        for m in ("clean_acc", "robust_acc")]
                write_metrics_csv(rows, path, run_id=f"toy/hp{i}/{kind}-{mode}")


def test_analyze_writes_thirty_points_and_svg(tmp_path):
    csv = tmp_path / "m.csv"
    _synthetic_csv(csv)
    assert main(["analyze", str(csv), "--out", str(tmp_path / "a")]) == 0
    lines = (tmp_path / "a" / "transfer_metrics.csv").read_text().splitlines()
    assert len(lines) == 31
    svg = (tmp_path / "a" / "transfer-toy.svg").read_text()
    assert svg.count("<circle") == 30 and "Transferred Robustness" in svg


def test_analyze_single_pair_reports_na(tmp_path):
    csv = tmp_path / "m.csv"
    _synthetic_csv(csv, 1, 1)
    assert main(["analyze", str(csv), "--out", str(tmp_path / "a")]) == 0
    assert (tmp_path / "a" / "transfer_summary.csv").read_text().splitlines()[1] == "toy,1,NA"


def test_analyze_lists_missing_runs(tmp_path, capsys):
    csv = tmp_path / "m.csv"
    write_metrics_csv([MetricRow("probe-std", 1, "test", "clean_acc", 0.5)], csv, run_id="toy/hp0/probe-std")
    assert main(["analyze", str(csv), "--out", str(tmp_path / "a")]) == 2
    assert "toy/hp0/probe-adv" in capsys.readouterr().err


def test_scatter_svg_handles_degenerate_axes():
    svg = scatter_svg([(0.1, 0.1), (0.1, 0.1)])
    assert svg.count("<circle") == 2


def test_finetune_end_to_end(ini, tmp_path):
    out = tmp_path / "run"
    code = main(["finetune", "--config", str(ini), "--strategy", "lora", "--init", "roli", "--out", str(out)])
    assert code == 0
    assert (out / "backbone-robust.ckpt").is_file()
    store = load_checkpoint(out / "finetune-lora-roli.ckpt")
    assert any(n.endswith("lora_A") for n in store)
    stages = {r["stage"] for r in read_metrics_csv(out / "metrics.csv")}
    assert {"pretrain-robust", "roli-probe", "finetune-adv"} <= stages
    assert main(["eval", "--config", str(out / "config.ini"), "--checkpoint",
                 str(out / "finetune-lora-roli.ckpt"), "--out", str(out)]) == 0
    assert main(["gradviz", "--config", str(ini), "--checkpoint", str(out / "backbone-robust.ckpt"),
                 "--split", "source", "--count", "2", "--out", str(out)]) == 0
    assert len(list((out / "gradviz").glob("*.pgm"))) == 2


def test_vpt_roli_is_rejected(ini, tmp_path):
    assert main(["finetune", "--config", str(ini), "--strategy", "vpt", "--init", "roli",
                 "--out", str(tmp_path / "v")]) == 2
