"""Run configuration: every protocol and experiment knob in one flat record."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Union

AGGREGATORS = ("avg", "avgm", "sgd", "opt", "prox")

_VARIANT_SUFFIX = {"avg": "Avg", "avgm": "AvgM", "sgd": "Sgd", "opt": "Opt", "prox": "Prox"}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class RoundConfig:
    # protocol
    R: int = 500
    B: int = 50
    E: int = 1
    C: int = 20
    K: int = 5
    C_exp: Union[int, float] = 20
    E_exp: int = 150
    eta: float = 0.0003
    weight_decay: float = 0.0001
    seed: int = 0

    # aggregation
    aggregator: str = "avgm"
    fedlex: bool = True
    server_lr: Union[float, None] = None
    beta_momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    prox_mu: float = 0.01

    # guidance
    guidance_floor: float = 0.0
    per_layer_norm: bool = False
    delta_mode: bool = False
    force_ones_guidance: bool = False

    # model
    hidden: tuple = (64, 64)
    activation: str = "relu"

    # data
    dataset: str = "synthetic"
    classes: int = 10
    dim: int = 32
    per_class: int = 200
    separation: float = 3.0
    idx_images: str = ""
    idx_labels: str = ""
    partition: str = "pathological"
    classes_per_client: int = 2
    alpha: float = 0.3

    # stopping
    early_stop: bool = False
    early_stop_patience: int = 20
    early_stop_tol: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        self.validate()

    def validate(self) -> None:
        if self.R < 1:
            raise ConfigError("R", "need at least one round (R >= 1)")
        if self.B < 1:
            raise ConfigError("B", "batch size must be >= 1")
        if self.E < 1:
            raise ConfigError("E", "local epochs must be >= 1")
        if self.C < 1:
            raise ConfigError("C", "need at least one client")
        if not 1 <= self.K <= self.C:
            raise ConfigError("K", f"must satisfy 1 <= K <= C (K={self.K}, C={self.C})")
        if self.E_exp < 1:
            raise ConfigError("E_exp", "exploration epochs must be >= 1")
        if not self.eta > 0:
            raise ConfigError("eta", "learning rate must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError("aggregator", f"must be one of {AGGREGATORS}")
        if self.server_lr is not None and not self.server_lr > 0:
            raise ConfigError("server_lr", "must be > 0")
        if not 0 <= self.beta_momentum < 1:
            raise ConfigError("beta_momentum", "must lie in [0, 1)")
        for key in ("beta1", "beta2"):
            if not 0 <= getattr(self, key) < 1:
                raise ConfigError(key, "must lie in [0, 1)")
        if not self.adam_eps >= 0:
            raise ConfigError("adam_eps", "must be >= 0")
        if self.prox_mu < 0:
            raise ConfigError("prox_mu", "must be >= 0")
        if not 0 <= self.guidance_floor < 1:
            raise ConfigError("guidance_floor", "must lie in [0, 1)")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError("activation", "must be relu or tanh")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden", "hidden sizes must be positive")
        if self.dataset not in ("synthetic", "idx"):
            raise ConfigError("dataset", "must be synthetic or idx")
        if self.dataset == "idx" and not (self.idx_images and self.idx_labels):
            raise ConfigError("idx_images", "idx dataset needs idx_images and idx_labels")
        if self.classes < 2:
            raise ConfigError("classes", "need at least two classes")
        if self.partition not in ("pathological", "dirichlet"):
            raise ConfigError("partition", "must be pathological or dirichlet")
        if self.classes_per_client < 1:
            raise ConfigError("classes_per_client", "must be >= 1")
        if not self.alpha > 0:
            raise ConfigError("alpha", "must be > 0")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience", "must be >= 1")
        if self.fedlex and not self.force_ones_guidance:
            self.explorers  # resolves and range-checks C_exp; runs without exploration skip it

    @property
    def explorers(self) -> int:
        """C_exp as a client count: ints are counts, floats in (0, 1] are fractions of C."""
        value = self.C_exp
        if isinstance(value, bool):
            raise ConfigError("C_exp", "must be a count or a fraction")
        if isinstance(value, float) and value <= 1.0:
            if not value > 0:
                raise ConfigError("C_exp", f"fraction must lie in (0, 1], got {value}")
            count = max(1, int(round(value * self.C)))
        elif isinstance(value, float) and not value.is_integer():
            raise ConfigError("C_exp", f"{value} is neither a count nor a fraction in (0, 1]")
        else:
            count = int(value)
        if not 1 <= count <= self.C:
            raise ConfigError("C_exp", f"resolved explorer count {count} outside [1, C={self.C}]")
        return count

    @property
    def resolved_server_lr(self) -> float:
        if self.server_lr is not None:
            return float(self.server_lr)
        return {"avg": 1.0, "prox": 1.0, "avgm": 1.0, "opt": 1e-2, "sgd": self.eta}[self.aggregator]

    @property
    def variant(self) -> str:
        return ("FedLEx" if self.fedlex else "Fed") + _VARIANT_SUFFIX[self.aggregator]

    @property
    def layer_sizes(self) -> tuple:
        return (self.dim, *self.hidden, self.classes)

    def replace(self, **changes) -> "RoundConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d


VARIANTS = {
    ("Fed" if not lex else "FedLEx") + _VARIANT_SUFFIX[agg]: (agg, lex)
    for agg in AGGREGATORS
    for lex in (False, True)
}


def variant_settings(name: str) -> dict:
    """Map a variant name such as ``FedLExProx`` to config overrides."""
    for known, (agg, lex) in VARIANTS.items():
        if known.lower() == name.lower():
            return {"aggregator": agg, "fedlex": lex}
    raise ConfigError("variants", f"unknown variant {name!r}; known: {sorted(VARIANTS)}")


CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(RoundConfig)}
