"""Per-attribute evaluation of a steering module on the frozen model."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..placement import PlacementStats, attribute_rows, select_position
from ..steering import Example, SteeringModule, StateCache, build_prior_mask, gate_var, param_vars, phi_var, task_loss
from ..tensorcore import Tape
from ..toymodel import FrozenModel, run_from


@dataclass
class MetricsReport:
    accuracy: dict = field(default_factory=dict)  # attr -> fraction in [0, 1]
    mean_task_loss: dict = field(default_factory=dict)
    trajectory: list = field(default_factory=list)  # per-step loss records
    subspace: dict = field(default_factory=dict)  # ranks, energies, angles vs planted
    placement: dict = field(default_factory=dict)  # attr -> {position: count}
    fallbacks: dict = field(default_factory=dict)
    predictions: list = field(default_factory=list)  # per-sample log
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)

    def __post_init__(self):
        for a, acc in self.accuracy.items():
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy for {a!r} outside [0, 1]: {acc}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        # JSON object keys are strings; placement histograms are keyed by position.
        d["placement"] = {a: {int(p): c for p, c in h.items()} for a, h in d.get("placement", {}).items()}
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))

    def checksum(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def summary(self) -> dict:
        return {"accuracy": self.accuracy, "mean_task_loss": self.mean_task_loss}


def _logits(model: FrozenModel, module: SteeringModule | None, states: np.ndarray, position: int, layer: int, prior=None):
    tape = Tape()
    phis = {}
    if module is not None:
        pv = param_vars(tape, module)

        def phi(h):
            g = gate_var(module, pv, h)
            if prior is not None:
                p = tape.leaf(prior.reshape(1, -1))
                g = p if g is None else g * p
            return phi_var(pv, h, g)

        phis = {position: phi}
    return run_from(tape, model, tape.leaf(states), layer, phis).value[-1]


def evaluate(
    model: FrozenModel,
    module: SteeringModule | None,
    datasets: Mapping[str, Sequence[Example]],
    strategy: str = "last",
    layer: int | None = None,
    cache: StateCache | None = None,
    force_attribute: bool = False,
) -> MetricsReport:
    """Accuracy (top-1 on the last position) and mean task loss per attribute.

    ``module=None`` evaluates the unsteered base model. With
    ``force_attribute`` the learned gate is multiplied by the evaluated
    attribute's prior mask (an oracle-routing ablation; by default the
    learned mask alone routes).
    """
    if module is None and layer is None:
        layer = model.config.n_layers - 1
    layer = module.layer if module is not None else layer
    if not datasets or any(len(v) == 0 for v in datasets.values()):
        raise ValueError("evaluation needs a non-empty dataset for every attribute")
    cache = cache if cache is not None and cache.layer == layer else StateCache(model, layer)
    stats = PlacementStats()
    report = MetricsReport()
    for attr, examples in datasets.items():
        correct, losses = 0, []
        for i, ex in enumerate(examples):
            states = cache(ex.tokens)
            if module is not None:
                block = attribute_rows(module.params["R"], module.aligned, attr)
                dec = select_position(block, states, strategy, attr)
                stats.add(dec)
                pos = dec.position
            else:
                pos = len(ex.tokens) - 1
            prior = build_prior_mask(module.aligned, attr).values if module is not None and force_attribute else None
            z = _logits(model, module, states, pos, layer, prior)
            pred = int(np.argmax(z))
            loss = task_loss(z, ex.label)
            correct += pred == ex.label
            losses.append(loss)
            report.predictions.append(
                {"attribute": attr, "index": i, "position": pos, "pred": pred, "gold": ex.label, "loss": loss}
            )
        report.accuracy[attr] = correct / len(examples)
        report.mean_task_loss[attr] = float(np.mean(losses))
    report.placement = stats.counts
    report.fallbacks = stats.fallbacks
    report.config = {"strategy": strategy, "layer": layer, "force_attribute": force_attribute}
    return report
