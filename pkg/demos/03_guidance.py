"""Loss exploration and the guidance matrix it produces.

Explorers train from the shared initialization, report squared displacements,
and the server averages their min-max scaled reports. The printout shows how
the resulting factors are distributed across layers, which determines how
strongly later gradients are damped.

Run: python3 demos/03_guidance.py
"""

import numpy as np

from fedlex.config import RoundConfig
from fedlex.guidance import aggregate_global, explore, modulate, normalize_local
from fedlex.orchestrator import build_federation, select_explorers

cfg = RoundConfig(C=20, C_exp=0.25, E_exp=150, hidden=(64, 64))
fed = build_federation(cfg)
w0 = fed.model.params

reports = [explore(w0, fed.clients[cid], cfg, model=fed.model) for cid in select_explorers(cfg)]
for report in reports:
    print(f"explorer {report.client_id:>2}: final training loss {report.final_train_loss:.3f}")
locals_ = [normalize_local(r.g_local) for r in reports]

g = aggregate_global(locals_)
print(f"\nG over {len(g)} parameters: mean {g.values.mean():.4f}, median {np.median(g.values):.2e}, "
      f"max {g.values.max():.3f}")
for name, t in g.tensors().items():
    print(f"{name:>3} {str(t.shape):>9}  mean {t.mean():.4f}  max {t.max():.4f}")

# per-layer scaling lifts every tensor to a full [0, 1] range
g_layer = aggregate_global([normalize_local(r.g_local, per_layer=True) for r in reports])
print(f"\nper-layer scaling: mean {g_layer.values.mean():.4f}")

# modulation shrinks every gradient entry by its factor
grad = w0.with_values(np.ones(len(w0)))
print(f"a unit gradient keeps {modulate(grad, g).values.sum() / len(w0):.2%} of its mass, "
      f"{modulate(grad, g, floor=0.5).values.sum() / len(w0):.2%} with a 0.5 floor")
