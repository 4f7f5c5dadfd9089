"""Every aggregator with and without guidance on a small federation.

The run uses a larger learning rate and more local epochs than the default
protocol so that forty rounds finish in seconds and accuracies move away from
chance.

Run: python3 demos/04_aggregators.py
"""

from fedlex.config import VARIANTS, RoundConfig, variant_settings
from fedlex.orchestrator import run_experiment

base = RoundConfig(C=10, K=5, R=40, E=3, eta=0.02, C_exp=10, E_exp=20, hidden=(32,))

print(f"{'variant':<12} {'mean acc':>9} {'std':>7} {'pooled':>7} {'mean var(dW)':>13} {'MB moved':>9}")
for name in sorted(VARIANTS):
    cfg = base.replace(**variant_settings(name))
    history = run_experiment(cfg)
    last = history[-1]
    training = [m for m in history if m.round > 0]
    var = sum(m.sigma2_dw for m in training) / len(training)
    moved = sum(m.bytes_up + m.bytes_down for m in history) / 1e6
    print(f"{name:<12} {last.mean_acc:>9.2f} {last.std_acc:>7.2f} {last.pooled_acc:>7.2f} {var:>13.3e} {moved:>9.2f}")
