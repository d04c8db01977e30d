import json
import subprocess
import sys
from pathlib import Path

import pytest

from gkt.cli import EXIT_CONFIG, RunConfig, main, parse_config, read_config_file
from gkt.orchestrator import ConfigError, read_metrics_csv

FIXTURES = Path(__file__).parent / "fixtures"
SMALL = ["--per-class", "20", "--test-per-class", "10", "--k", "2", "--min-client-size", "8", "--batch-size", "16",
         "--server-epochs", "1"]


def test_flags_set_fields():
    cmd, cfg = parse_config(["sim", "--rounds", "200", "--batch-size", "256"])
    assert cmd == "sim" and cfg.rounds == 200 and cfg.batch_size == 256
    _, cfg = parse_config(["sim", "--augment"])
    assert cfg.augment is True


def test_config_file_golden_dump():
    _, cfg = parse_config(["sim", "--config", str(FIXTURES / "run.cfg"), "--rounds", "4"])
    assert cfg.to_text() == (FIXTURES / "run.golden").read_text()
    assert cfg.rounds == 4 and cfg.temperature == 2.5 and cfg.augment is False


def test_client_without_server_address_is_rejected():
    with pytest.raises(ConfigError, match="server_addr"):
        parse_config(["client", "--mode", "sync", "--client-id", "0"])


def test_problems_are_aggregated(tmp_path):
    with pytest.raises(ConfigError) as info:
        parse_config(["sim", "--rounds", "0", "--alpha", "-1", "--transport", "pigeon"])
    assert len(info.value.problems) == 3
    bad = tmp_path / "bad.cfg"
    bad.write_text("rounds=3\ncolour=blue\nnoise\nseed=x\n")
    with pytest.raises(ConfigError) as info:
        read_config_file(bad)
    assert len(info.value.problems) == 3 and "unknown key 'colour'" in str(info.value)


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour=blue\n")
    assert main(["sim", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["sim", "--no-such-flag", "1"]) == EXIT_CONFIG
    assert main(["sim", "--dataset", "cifar10", "--data-dir", str(tmp_path)]) == EXIT_CONFIG
    assert "gkt:" in capsys.readouterr().err


def test_sim_prints_one_row_per_round(capsys):
    assert main(["sim", "--toy", "--rounds", "3", *SMALL]) == 0
    rows = [line.split(",") for line in capsys.readouterr().out.strip().splitlines()]
    assert [int(r[0]) for r in rows] == [1, 2, 3]
    assert all(0 <= float(r[1]) <= 1 for r in rows)


def test_sim_outputs_rerun_bit_identically(tmp_path):
    first = tmp_path / "a"
    assert main(["sim", "--rounds", "2", "--seed", "5", "--out", str(first), *SMALL]) == 0
    manifest = json.loads((first / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 5 and manifest["partition_file"] == "partition.txt"
    assert manifest["cost"]["params"]["edge"] > 0
    again = tmp_path / "b"
    assert main(["sim", "--config", str(first / "run.cfg"), "--out", str(again)]) == 0
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]
    assert strip(read_metrics_csv(first / "metrics.csv")) == strip(read_metrics_csv(again / "metrics.csv"))
    assert (first / "partition.txt").read_text() == (again / "partition.txt").read_text()


def test_partition_is_deterministic(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    for path in (a, b):
        assert main(["partition", "--k", "16", "--alpha", "0.5", "--seed", "7", "--out", str(path)]) == 0
    assert a.read_text() == b.read_text()
    assert a.read_text().startswith("GKT-PARTITION v1\n")


def test_cost_reports_resnet8(capsys):
    assert main(["cost", "--model", "resnet8"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["params"]["resnet8"] == 10_586
    assert abs(report["params"]["resnet8"] - 11_000) <= 1_100


def test_baselines(capsys):
    assert main(["baseline", "--baseline", "centralized", "--rounds", "2", *SMALL]) == 0
    assert main(["baseline", "--baseline", "fedavg", "--rounds", "2", *SMALL]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [line.split(",")[0] for line in lines] == ["1", "2", "1", "2"]


def test_server_and_clients_over_tcp_match_sim(tmp_path):
    common = ["--rounds", "2", "--seed", "3", *SMALL]
    assert main(["sim", "--transport", "tcp", "--out", str(tmp_path / "sim"), *common]) == 0
    cmd = [sys.executable, "-m", "gkt.cli"]
    server = subprocess.Popen([*cmd, "server", "--listen", "127.0.0.1:0", "--barrier-timeout", "60",
                               "--out", str(tmp_path / "srv"), *common], stdout=subprocess.PIPE, text=True)
    try:
        line = server.stdout.readline()
        assert line.startswith("listening on ")
        addr = line.split()[-1]
        clients = [subprocess.Popen([*cmd, "client", "--server-addr", addr, "--client-id", str(k),
                                     "--barrier-timeout", "60", *common]) for k in range(2)]
        assert [c.wait(timeout=120) for c in clients] == [0, 0]
        assert server.wait(timeout=120) == 0
    finally:
        server.kill()
        server.stdout.close()
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]
    assert strip(read_metrics_csv(tmp_path / "srv" / "metrics.csv")) == \
        strip(read_metrics_csv(tmp_path / "sim" / "metrics.csv"))


def test_every_gkt_field_is_reachable():
    cfg = RunConfig(rounds=7, mode="async", kd_mode="none", temperature=1.5, lr_patience=2)
    g = cfg.gkt_config()
    assert (g.rounds, g.mode, g.kd_mode, g.temperature, g.lr_patience) == (7, "async", "none", 1.5, 2)
    assert g.server_optimizer == g.client_optimizer
    assert RunConfig(server_optimizer="sgd", server_lr=0.1).gkt_config().server_optimizer.lr == 0.1
