"""A small multi-seed campaign, summarized into mean accuracy and average rank.

The same grid can be run from the shell with
``fedlex campaign demos/configs/campaign.yaml`` followed by
``fedlex summarize runs/demo``.

Run: python3 demos/05_campaign.py
"""

import tempfile
from pathlib import Path

from fedlex.harness import parse_campaign, run_campaign, summarize

config = Path(__file__).parent / "configs" / "campaign.yaml"

with tempfile.TemporaryDirectory() as tmp:
    campaign = parse_campaign(config, output_dir=Path(tmp) / "runs")
    print(f"{len(campaign.jobs())} runs: {campaign.variants} x {campaign.points()} x seeds {campaign.seeds}")
    result = run_campaign(campaign)
    rows, ranks, incomplete = summarize([campaign.output_dir])
    for row in rows:
        print(f"{row.variant:<12} {row.point:<10} n={row.n_runs}  {row.mean_acc:6.2f} +- {row.std_acc:5.2f}")
    print("average rank:", {v: round(r, 2) for v, r in sorted(ranks.items(), key=lambda kv: kv[1])})
    print(Path(result.summary_path).read_text())
