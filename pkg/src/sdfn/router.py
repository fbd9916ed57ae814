"""Modality-specific routers and the layered dynamic fusion network.

Between consecutive layers every source module ``j`` emits a distribution
over the four target modules.  With modality-specific routing the logits are
``image_mlp(mean_K(O_j)) + text_mlp(T_s)``; the single-router ablation uses
one MLP on the concatenation, and ``none`` keeps every distribution
uniform (the unrouted baseline).  Target inputs are the probability-weighted
sum of source outputs.  After the last layer an aggregation head per module
produces one logit each, and the softmax over them mixes the final outputs
into the composed query feature.

Routing sites are ordered layer-major, sources in ``MODULES`` order, with the
aggregation site last.  Every site is 4-wide; disabled target modules get a
``-1e9`` logit offset so their probability is exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .config import MODULES
from .exceptions import InvariantError, ShapeError
from .fusion import apply_module, init_module
from .nn import MASK_VALUE, softmax, uniform_init
from .tensor import Tensor

N_MODULES = len(MODULES)
AGG = "agg"


def _init_mlp(rng, fan_in, hidden, out, prefix):
    return {
        f"{prefix}.w1": uniform_init(rng, fan_in, (fan_in, hidden)),
        f"{prefix}.b1": uniform_init(rng, fan_in, (hidden,)),
        f"{prefix}.w2": uniform_init(rng, hidden, (hidden, out)),
        f"{prefix}.b2": uniform_init(rng, hidden, (out,)),
    }


def _mlp(x, p, prefix):
    return T.relu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]) @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def init_router_head(rng, dim, kind, n_out, prefix):
    if kind == "none":
        return {}
    if kind == "msr":
        out = _init_mlp(rng, dim, dim // 2, n_out, f"{prefix}.img")
        out.update(_init_mlp(rng, dim, dim // 2, n_out, f"{prefix}.txt"))
        return out
    return _init_mlp(rng, 2 * dim, dim // 2, n_out, f"{prefix}.sr")


def route_logits(pooled, ts, p: Mapping[str, Tensor], prefix: str, kind: str = "msr",
                 n_out: int = N_MODULES) -> Tensor:
    if kind == "none":
        return T.Tensor(np.zeros(T.as_tensor(pooled).shape[:-1] + (n_out,)))
    if kind == "msr":
        return _mlp(pooled, p, f"{prefix}.img") + _mlp(ts, p, f"{prefix}.txt")
    return _mlp(T.concat([pooled, ts], axis=-1), p, f"{prefix}.sr")


def target_offsets(active: Sequence[str]) -> np.ndarray:
    return np.array([0.0 if m in active else MASK_VALUE for m in MODULES])


def route_probs(
    pooled, ts, p: Mapping[str, Tensor], prefix: str, kind: str = "msr", tau: float = 1.0,
    active: Sequence[str] = MODULES,
) -> Tuple[Tensor, Tensor]:
    """Routing distribution over the 4 target modules and its (masked) logits."""
    logits = route_logits(pooled, ts, p, prefix, kind)
    if len(active) < N_MODULES:
        logits = logits + target_offsets(active)
    return softmax(logits * (1.0 / tau), axis=-1), logits


def check_stochastic(routing: np.ndarray, atol: float = 1e-9) -> None:
    if (routing < -atol).any() or not np.allclose(routing.sum(-1), 1.0, rtol=0.0, atol=atol):
        raise InvariantError("routing rows must be non-negative and sum to 1")


def propagate(outputs: Sequence, routing) -> List[Tensor]:
    """Soft routing step: ``X_i = sum_j R[j, i] * O_j``.

    ``outputs`` holds one ``(..., K, D)`` tensor per source; ``routing`` is
    ``(..., n_sources, n_targets)`` with row-stochastic rows.
    """
    routing = T.as_tensor(routing)
    check_stochastic(routing.data)
    return _mix(outputs, routing)


def _mix(outputs: Sequence, routing: Tensor) -> List[Tensor]:
    n_src = len(outputs)
    if routing.shape[-2] != n_src:
        raise ShapeError(f"routing has {routing.shape[-2]} source rows for {n_src} outputs")
    stacked = T.stack(list(outputs), axis=-3)  # (..., S, K, D)
    lead, (k, d) = stacked.shape[:-3], stacked.shape[-2:]
    flat = T.reshape(stacked, lead + (n_src, k * d))
    mixed = T.swapaxes(routing, -1, -2) @ flat  # (..., n_targets, K*D)
    mixed = T.reshape(mixed, lead + (routing.shape[-1], k, d))
    return [mixed[..., i, :, :] for i in range(routing.shape[-1])]


def init_network(rng, dim, heads, ffn_hidden, n_layers, router="msr", active=MODULES) -> dict:
    params = {}
    for layer in range(n_layers):
        for m in active:
            params.update(init_module(m, rng, dim, ffn_hidden, f"l{layer}.{m}"))
    for layer in range(n_layers - 1):
        for m in active:
            params.update(init_router_head(rng, dim, router, N_MODULES, f"router.l{layer}.{m}"))
    for m in active:
        params.update(init_router_head(rng, dim, router, 1, f"router.{AGG}.{m}"))
    return params


def site_names(n_layers: int, active: Sequence[str] = MODULES) -> List[Tuple[object, str]]:
    """``(layer, source)`` per routing site in recording order; aggregation last."""
    return [(layer, m) for layer in range(n_layers - 1) for m in active] + [(AGG, AGG)]


@dataclass
class ForwardResult:
    f_q: Tensor  # (..., D)
    f_in: Tensor  # (..., D)
    logits: Tensor  # (..., S, 4) masked routing logits
    probs: Tensor  # (..., S, 4)
    sites: List[Tuple[object, str]]
    inputs: List[Dict[str, Tensor]] = field(default_factory=list, repr=False)
    outputs: List[Dict[str, Tensor]] = field(default_factory=list, repr=False)

    def routing_table(self) -> np.ndarray:
        return self.probs.data


def forward_network(
    x_r, tw, ts, p: Mapping[str, Tensor], n_layers: int = 3, heads: int = 4, tau_r: float = 1.0,
    router: str = "msr", active: Sequence[str] = MODULES, key_mask=None,
    force_routing: Optional[Mapping] = None,
) -> ForwardResult:
    """Run the stacked modules with soft routing.

    ``force_routing`` maps a site (``(layer, source)`` or ``(AGG, AGG)``) to a
    fixed 4-vector, replacing the learned distribution there; used to replay
    hand-chosen paths.
    """
    x_r, tw, ts = T.as_tensor(x_r), T.as_tensor(tw), T.as_tensor(ts)
    active = tuple(m for m in MODULES if m in active)
    inputs = {m: x_r for m in active}
    all_inputs, all_outputs, logits, probs = [], [], [], []
    outputs: Dict[str, Tensor] = {}
    for layer in range(n_layers):
        outputs = {m: apply_module(m, inputs[m], tw, ts, p, f"l{layer}.{m}", heads, key_mask) for m in active}
        all_inputs.append(inputs)
        all_outputs.append(outputs)
        if layer == n_layers - 1:
            break
        rows = []
        for m in active:
            pooled = T.mean(outputs[m], axis=-2)
            pr, lg = route_probs(pooled, ts, p, f"router.l{layer}.{m}", router, tau_r, active)
            if force_routing and (layer, m) in force_routing:
                pr = T.Tensor(np.broadcast_to(np.asarray(force_routing[(layer, m)], float), pr.shape))
            rows.append(pr)
            logits.append(lg)
            probs.append(pr)
        routing = T.stack(rows, axis=-2)  # (..., n_active, 4)
        mixed = propagate([outputs[m] for m in active], routing)
        inputs = {m: mixed[MODULES.index(m)] for m in active}
    agg_logits = T.concat(
        [route_logits(T.mean(outputs[m], axis=-2), ts, p, f"router.{AGG}.{m}", router, 1) for m in active], axis=-1
    )
    if len(active) < N_MODULES:
        cols = [MODULES.index(m) for m in active]
        scatter = np.zeros((len(active), N_MODULES))
        scatter[np.arange(len(active)), cols] = 1.0
        agg_logits = agg_logits @ scatter + target_offsets(active)
    agg = softmax(agg_logits * (1.0 / tau_r), axis=-1)
    if force_routing and (AGG, AGG) in force_routing:
        agg = T.Tensor(np.broadcast_to(np.asarray(force_routing[(AGG, AGG)], float), agg.shape))
    logits.append(agg_logits)
    probs.append(agg)
    check_stochastic(agg.data)
    final = _mix([outputs[m] for m in active], _agg_as_routing(agg, active))[0]
    f_q = T.mean(final, axis=-2)
    pooled_inputs = [T.mean(inputs[m], axis=-2) for m in active]
    f_in = pooled_inputs[0]
    for extra in pooled_inputs[1:]:
        f_in = f_in + extra
    return ForwardResult(
        f_q=f_q,
        f_in=f_in,
        logits=T.stack(logits, axis=-2),
        probs=T.stack(probs, axis=-2),
        sites=site_names(n_layers, active),
        inputs=all_inputs,
        outputs=all_outputs,
    )


def _agg_as_routing(agg: Tensor, active) -> Tensor:
    """Aggregation weights of the active modules as an ``(n_active, 1)`` routing column."""
    cols = [MODULES.index(m) for m in active]
    w = agg if len(active) == N_MODULES else agg[..., cols]
    return T.reshape(w, w.shape + (1,))
