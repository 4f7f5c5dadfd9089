"""Config files, multi-seed campaigns and summary tables.

Config files are flat YAML mappings of RoundConfig keys. A campaign file adds
``seeds``, ``variants``, ``sweep`` (the only nested key: axis name -> list of
values) and ``output_dir``. A run manifest (``manifest.json``) is also
accepted anywhere a config is, which is how runs are reproduced.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

import numpy as np
import yaml
from scipy.stats import rankdata

from fedlex.config import CONFIG_FIELDS, ConfigError, RoundConfig, variant_settings
from fedlex.orchestrator import run_experiment

log = logging.getLogger(__name__)

CAMPAIGN_KEYS = ("seeds", "variants", "sweep", "output_dir", "workers")
SUMMARY_COLUMNS = ("variant", "point", "n_runs", "mean_acc", "std_acc", "mean_rank")


# --- parsing ----------------------------------------------------------------


def coerce(key: str, value: Any) -> Any:
    """Check ``value`` against the type of config field ``key``."""
    if key not in CONFIG_FIELDS:
        raise ConfigError(key, "unknown config key")
    default = CONFIG_FIELDS[key].default
    if key == "C_exp":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a count or a fraction, got {value!r}")
        return value
    if key == "server_lr":
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number or null, got {value!r}")
        return float(value)
    if key == "hidden":
        if isinstance(value, int) and not isinstance(value, bool):
            return (value,)
        if isinstance(value, (list, tuple)) and all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            return tuple(value)
        raise ConfigError(key, f"expected a list of integers, got {value!r}")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    raise ConfigError(key, "unsupported field type")


def build_config(values: Mapping[str, Any], base: RoundConfig | None = None) -> RoundConfig:
    changes = {k: coerce(k, v) for k, v in values.items()}
    try:
        if base is None:
            return RoundConfig(**changes)
        return base.replace(**changes)
    except TypeError as err:  # pragma: no cover - coerce catches unknown keys first
        raise ConfigError("config", str(err)) from err


def read_document(path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        doc = json.loads(text) if text.strip() else {}
        # a run manifest carries the resolved config under "config"
        if "config" in doc and "config_hash" in doc:
            return dict(doc["config"])
        return doc
    doc = yaml.safe_load(text)
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError("config", f"{path} must hold a key-value mapping")
    return doc


def parse_overrides(items: Iterable[str]) -> dict:
    """``key=value`` strings, values parsed as YAML scalars."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, raw = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw)
    return out


def parse_config(path, overrides: Mapping[str, Any] | None = None) -> RoundConfig:
    doc = read_document(path)
    extra = [k for k in doc if k in CAMPAIGN_KEYS]
    if extra:
        raise ConfigError(extra[0], "campaign key in a single-run config; use the campaign command")
    doc.update(overrides or {})
    return build_config(doc)


@dataclass
class Campaign:
    base: RoundConfig
    seeds: list[int]
    variants: list[str]
    sweep: dict[str, list] = field(default_factory=dict)
    output_dir: Path = Path("runs")
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds", "need at least one seed")
        if not self.variants:
            raise ConfigError("variants", "need at least one variant")
        for v in self.variants:
            variant_settings(v)
        for key, values in self.sweep.items():
            if key in ("seed", "aggregator", "fedlex"):
                raise ConfigError(key, "use seeds/variants instead of sweeping this key")
            if not isinstance(values, list) or not values:
                raise ConfigError(key, "sweep axis must be a non-empty list")
            for v in values:
                coerce(key, v)

    def points(self) -> list[dict]:
        keys = list(self.sweep)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.sweep[k] for k in keys))]

    def jobs(self) -> list[tuple[str, str, RoundConfig, Path]]:
        """(variant, point label, config, run dir) for the whole grid, in a fixed order."""
        out = []
        for variant in self.variants:
            for point in self.points():
                label = point_label(point)
                for seed in self.seeds:
                    cfg = build_config({**point, **variant_settings(variant), "seed": seed}, base=self.base)
                    run_dir = self.output_dir / cfg.variant / label / f"seed-{seed}"
                    out.append((cfg.variant, label, cfg, run_dir))
        return out


def point_label(point: Mapping[str, Any]) -> str:
    if not point:
        return "base"
    return ",".join(f"{k}={v}" for k, v in point.items())


def parse_campaign(path, overrides: Mapping[str, Any] | None = None, output_dir=None) -> Campaign:
    doc = read_document(path)
    doc.update(overrides or {})
    seeds = doc.pop("seeds", [doc.get("seed", 0)])
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = list(range(seeds))
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds", "expected a list of integers or a count")
    variants = doc.pop("variants", None)
    sweep = doc.pop("sweep", {}) or {}
    if not isinstance(sweep, dict):
        raise ConfigError("sweep", "expected a mapping of key -> list of values")
    out = doc.pop("output_dir", "runs")
    workers = doc.pop("workers", 1)
    base = build_config({k: v for k, v in doc.items() if k != "seed"})
    if variants is None:
        variants = [base.variant]
    if isinstance(variants, str):
        variants = [variants]
    return Campaign(base, list(seeds), list(variants), dict(sweep), Path(output_dir or out), int(workers))


# --- running ----------------------------------------------------------------


def _run_job(job) -> tuple[str, Optional[str]]:
    variant, label, cfg, run_dir = job
    run_dir = Path(run_dir)
    try:
        run_experiment(cfg, run_dir)
        # the manifest written by run_experiment is extended with campaign coordinates
        manifest_path = run_dir / "manifest.json"
        m = json.loads(manifest_path.read_text())
        m["point"] = label
        manifest_path.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
        return str(run_dir), None
    except Exception:  # noqa: BLE001 - failures are recorded per run
        err = traceback.format_exc()
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "error.txt").write_text(err)
        return str(run_dir), err


@dataclass
class CampaignResult:
    run_dirs: list[Path]
    failures: dict[str, str]
    summary_path: Path
    ranks_path: Path

    @property
    def ok(self) -> bool:
        return not self.failures


def run_campaign(campaign: Campaign) -> CampaignResult:
    """Run variants x sweep grid x seeds, then write summary.csv and ranks.csv."""
    jobs = campaign.jobs()
    campaign.output_dir.mkdir(parents=True, exist_ok=True)
    if campaign.workers > 1:
        with ProcessPoolExecutor(max_workers=campaign.workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    failures = {d: e for d, e in results if e is not None}
    for d in failures:
        log.error("run failed: %s", d)
    rows, ranks, _ = summarize([campaign.output_dir])
    summary_path = campaign.output_dir / "summary.csv"
    ranks_path = campaign.output_dir / "ranks.csv"
    write_summary(rows, summary_path)
    write_ranks(ranks, ranks_path)
    return CampaignResult([Path(d) for d, _ in results], failures, summary_path, ranks_path)


# --- summaries --------------------------------------------------------------


@dataclass(frozen=True)
class SummaryRow:
    variant: str
    point: str
    n_runs: int
    mean_acc: float
    std_acc: float
    mean_rank: float


def final_accuracy(metrics_path) -> float:
    with open(metrics_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{metrics_path} has no rounds")
    return float(rows[-1]["mean_acc"])


def find_runs(paths: Iterable) -> list[Path]:
    found = set()
    for p in paths:
        p = Path(p)
        if (p / "manifest.json").exists():
            found.add(p)
        found.update(m.parent for m in p.rglob("manifest.json"))
    return sorted(found)


def summarize(run_dirs: Iterable) -> tuple[list[SummaryRow], dict[str, float], list[Path]]:
    """Per (variant, point) mean/std of final mean accuracy plus average ranks.

    Returns the rows, a variant -> mean rank table, and the run directories that
    were skipped as incomplete. Ranks are computed per config point (rank 1 =
    best mean accuracy, ties share the average rank) and averaged over points.
    """
    groups: dict[tuple[str, str], list[float]] = {}
    incomplete = []
    for run in find_runs(run_dirs):
        m = json.loads((run / "manifest.json").read_text())
        metrics = run / "metrics.csv"
        try:
            acc = final_accuracy(metrics)
        except (OSError, ValueError, KeyError):
            incomplete.append(run)
            continue
        if (run / "error.txt").exists():
            incomplete.append(run)
            continue
        groups.setdefault((m["variant"], m.get("point", "base")), []).append(acc)

    stats = {k: (len(v), float(np.mean(v)), float(np.std(v))) for k, v in groups.items()}
    variants = sorted({v for v, _ in groups})
    points = sorted({p for _, p in groups})
    per_variant: dict[str, list[float]] = {v: [] for v in variants}
    for point in points:
        present = [v for v in variants if (v, point) in stats]
        ranks = rankdata([-stats[(v, point)][1] for v in present], method="average")
        for v, r in zip(present, ranks):
            per_variant[v].append(float(r))
    mean_rank = {v: float(np.mean(r)) for v, r in per_variant.items() if r}
    rows = [
        SummaryRow(v, p, *stats[(v, p)], mean_rank[v])
        for v in variants
        for p in points
        if (v, p) in stats
    ]
    return rows, mean_rank, incomplete


def write_summary(rows: list[SummaryRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([r.variant, r.point, r.n_runs, repr(r.mean_acc), repr(r.std_acc), repr(r.mean_rank)])


def write_ranks(ranks: Mapping[str, float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("variant", "mean_rank"))
        for v in sorted(ranks, key=lambda v: (ranks[v], v)):
            w.writerow([v, repr(ranks[v])])
