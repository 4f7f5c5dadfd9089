import csv
import json

import pytest
import yaml

from fedlex.__main__ import main
from fedlex.config import ConfigError, RoundConfig
from fedlex.harness import (
    Campaign,
    parse_campaign,
    parse_config,
    parse_overrides,
    run_campaign,
    summarize,
)
from fedlex.orchestrator import config_hash

TINY = dict(R=3, C=6, K=3, C_exp=3, E_exp=3, eta=0.05, classes=4, dim=8, per_class=40, hidden=[8], separation=2.0)


def write_yaml(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return path


def fake_run(root, variant, seed, acc, point="base"):
    """A finished run directory with a two-row metrics file."""
    d = root / variant / point / f"seed-{seed}"
    d.mkdir(parents=True)
    (d / "manifest.json").write_text(json.dumps({"variant": variant, "point": point, "config": {}, "config_hash": "x"}))
    (d / "metrics.csv").write_text(
        "round,mean_acc,std_acc,pooled_acc,sigma2_dw,bytes_up,bytes_down\n"
        f"1,0.0,0.0,0.0,0.0,1,1\n2,{acc!r},0.0,{acc!r},0.0,1,1\n"
    )
    return d


class TestConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        (tmp_path / "c.yaml").write_text("")
        assert parse_config(tmp_path / "c.yaml") == RoundConfig()

    def test_protocol_defaults(self):
        cfg = RoundConfig()
        assert (cfg.R, cfg.B, cfg.E, cfg.C, cfg.K, cfg.E_exp, cfg.eta) == (500, 50, 1, 20, 5, 150, 0.0003)

    @pytest.mark.parametrize("doc,key", [
        ({"K": 0}, "K"),
        ({"K": 30}, "K"),
        ({"colour": "red"}, "colour"),
        ({"eta": "fast"}, "eta"),
        ({"aggregator": "median"}, "aggregator"),
        ({"seeds": 3}, "seeds"),
    ])
    def test_invalid_keys_are_named(self, tmp_path, doc, key):
        with pytest.raises(ConfigError) as info:
            parse_config(write_yaml(tmp_path / "c.yaml", doc))
        assert info.value.key == key

    def test_overrides(self, tmp_path):
        cfg = parse_config(write_yaml(tmp_path / "c.yaml", {"K": 4}), parse_overrides(["K=2", "eta=0.01"]))
        assert cfg.K == 2 and cfg.eta == 0.01
        with pytest.raises(ConfigError):
            parse_overrides(["K2"])

    def test_manifest_round_trip(self, tmp_path):
        doc = {"C": 20, "K": 5, "E": 1, "B": 50, "eta": 0.0003, "E_exp": 150, "C_exp": 20, "R": 500,
               "aggregator": "prox", "fedlex": True}
        cfg = parse_config(write_yaml(tmp_path / "c.yaml", doc))
        main(["run", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "run"), "--R", "1", "--E_exp", "1"])
        m = json.loads((tmp_path / "run" / "manifest.json").read_text())
        back = parse_config(tmp_path / "run" / "manifest.json")
        assert back == cfg.replace(R=1, E_exp=1)
        assert m["config_hash"] == config_hash(back)


class TestCampaign:
    def test_grid_layout(self, tmp_path):
        doc = {**TINY, "seeds": [0, 1, 2], "variants": ["FedAvgM", "FedLExAvgM"], "output_dir": str(tmp_path / "out")}
        result = run_campaign(parse_campaign(write_yaml(tmp_path / "c.yaml", doc)))
        assert result.ok
        assert len(list((tmp_path / "out").rglob("metrics.csv"))) == 6
        with open(result.summary_path) as fh:
            rows = list(csv.DictReader(fh))
        assert sorted(r["variant"] for r in rows) == ["FedAvgM", "FedLExAvgM"]
        assert all(r["n_runs"] == "3" for r in rows)

    def test_sweep_points(self, tmp_path):
        c = parse_campaign(write_yaml(tmp_path / "c.yaml", {**TINY, "seeds": 2, "variants": "FedAvg",
                                                           "sweep": {"C": [6, 8], "alpha": [0.1]}}))
        assert c.seeds == [0, 1]
        labels = sorted({label for _, label, _, _ in c.jobs()})
        assert labels == ["C=6,alpha=0.1", "C=8,alpha=0.1"]
        assert len(c.jobs()) == 4

    def test_rejects_bad_campaigns(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_campaign(write_yaml(tmp_path / "a.yaml", {"variants": ["FedMedian"]}))
        with pytest.raises(ConfigError):
            Campaign(RoundConfig(), [], ["FedAvg"])
        with pytest.raises(ConfigError):
            parse_campaign(write_yaml(tmp_path / "b.yaml", {"sweep": {"seed": [1, 2]}}))

    def test_failed_run_is_recorded(self, tmp_path):
        doc = {**TINY, "eta": 1e300, "E": 5, "variants": ["FedAvg", "FedAvgM"], "output_dir": str(tmp_path / "o")}
        result = run_campaign(parse_campaign(write_yaml(tmp_path / "c.yaml", doc)))
        assert not result.ok and len(result.failures) == 2
        assert all((tmp_path / "o" / v / "base" / "seed-0" / "error.txt").exists() for v in ("FedAvg", "FedAvgM"))


class TestSummarize:
    def test_hand_fixture(self, tmp_path):
        fake_run(tmp_path, "FedAvg", 0, 50.0)
        fake_run(tmp_path, "FedAvg", 1, 70.0)
        fake_run(tmp_path, "FedLExAvg", 0, 80.0)
        rows, ranks, incomplete = summarize([tmp_path])
        by = {r.variant: r for r in rows}
        assert by["FedAvg"].mean_acc == 60.0 and by["FedAvg"].std_acc == 10.0
        assert by["FedLExAvg"].std_acc == 0.0 and by["FedLExAvg"].n_runs == 1
        assert ranks == {"FedLExAvg": 1.0, "FedAvg": 2.0}
        assert incomplete == []

    def test_tie_shares_rank(self, tmp_path):
        fake_run(tmp_path, "FedAvg", 0, 42.0)
        fake_run(tmp_path, "FedProx", 0, 42.0)
        fake_run(tmp_path, "FedSgd", 0, 10.0)
        _, ranks, _ = summarize([tmp_path])
        assert ranks == {"FedAvg": 1.5, "FedProx": 1.5, "FedSgd": 3.0}

    def test_ranks_average_over_points(self, tmp_path):
        fake_run(tmp_path, "FedAvg", 0, 90.0, point="C=10")
        fake_run(tmp_path, "FedProx", 0, 80.0, point="C=10")
        fake_run(tmp_path, "FedAvg", 0, 30.0, point="C=20")
        fake_run(tmp_path, "FedProx", 0, 40.0, point="C=20")
        fake_run(tmp_path, "FedAvg", 0, 50.0, point="C=40")
        fake_run(tmp_path, "FedProx", 0, 40.0, point="C=40")
        _, ranks, _ = summarize([tmp_path])
        assert ranks["FedAvg"] == pytest.approx(4 / 3) and ranks["FedProx"] == pytest.approx(5 / 3)

    def test_missing_metrics_is_incomplete(self, tmp_path):
        fake_run(tmp_path, "FedAvg", 0, 50.0)
        broken = fake_run(tmp_path, "FedAvg", 1, 70.0)
        (broken / "metrics.csv").unlink()
        rows, _, incomplete = summarize([tmp_path])
        assert incomplete == [broken] and rows[0].n_runs == 1 and rows[0].mean_acc == 50.0


class TestCli:
    def test_run_and_reproduce(self, tmp_path, capsys):
        cfg = write_yaml(tmp_path / "c.yaml", {**TINY, "aggregator": "opt"})
        assert main(["run", str(cfg), "--out", str(tmp_path / "a"), "--set", "R=2"]) == 0
        assert main(["run", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")]) == 0
        for name in ("metrics.csv", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert "FedLExOpt" in capsys.readouterr().out

    def test_flag_overrides(self, tmp_path):
        cfg = write_yaml(tmp_path / "c.yaml", TINY)
        assert main(["run", str(cfg), "--out", str(tmp_path / "r"), "--fedlex", "false", "--K=2"]) == 0
        m = json.loads((tmp_path / "r" / "manifest.json").read_text())
        assert m["variant"] == "FedAvgM" and m["config"]["K"] == 2

    def test_config_error_exit_code(self, tmp_path, capsys):
        cfg = write_yaml(tmp_path / "c.yaml", {"K": 0})
        assert main(["run", str(cfg), "--out", str(tmp_path / "r")]) == 2
        assert "K" in capsys.readouterr().err

    def test_campaign_and_summarize(self, tmp_path, capsys):
        cfg = write_yaml(tmp_path / "c.yaml", {**TINY, "seeds": 2, "variants": ["FedProx", "FedLExProx"]})
        assert main(["campaign", str(cfg), "--out", str(tmp_path / "runs")]) == 0
        assert main(["summarize", str(tmp_path / "runs"), "--out", str(tmp_path / "tables")]) == 0
        out = capsys.readouterr().out
        assert "FedProx" in out and "FedLExProx" in out
        assert (tmp_path / "tables" / "ranks.csv").exists()
        assert (tmp_path / "tables" / "summary.csv").read_bytes() == (tmp_path / "runs" / "summary.csv").read_bytes()
