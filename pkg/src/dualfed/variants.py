"""Method variants: the dual-representation protocol, its placement and
tagging ablations, and the single-classifier comparison arms.

A variant fixes four things: which slot groups are shared vs. local, whether
the model carries the second (shared) classifier and where it reads from,
whether the client talks to the server at all, and any extra loss knobs
(the proximal coefficient for FedProx).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .errors import DualFedError, SchemaMismatchError
from .model import (
    GLOBAL,
    GROUP_ENCODER,
    GROUP_GLOBAL_HEAD,
    GROUP_PERSONAL_HEAD,
    GROUP_PROJECTOR,
    GROUPS,
    PERSONAL,
    PLACEMENT_POST,
    PLACEMENT_PRE,
    ArchConfig,
    ModelParams,
    build_params,
)
from .tensor import Tensor


@dataclass(frozen=True)
class MethodVariant:
    name: str
    display_name: str
    group_tags: Mapping[str, str]
    dual_head: bool
    placement: str = PLACEMENT_PRE
    communicate: bool = True
    localize_bn_stats: bool = True
    mu: float = 0.0


def _tags(encoder: str, projector: str, personal: str,
          global_head: str | None = None) -> Mapping[str, str]:
    out = {GROUP_ENCODER: encoder, GROUP_PROJECTOR: projector,
           GROUP_PERSONAL_HEAD: personal}
    if global_head is not None:
        out[GROUP_GLOBAL_HEAD] = global_head
    return MappingProxyType(out)


_REGISTRY: dict[str, MethodVariant] = {
    "dualfed": MethodVariant(
        name="dualfed", display_name="DualFed",
        group_tags=_tags(GLOBAL, PERSONAL, PERSONAL, GLOBAL),
        dual_head=True, placement=PLACEMENT_PRE),
    "dualfed-g": MethodVariant(
        name="dualfed-g", display_name="DualFed-G",
        group_tags=_tags(GLOBAL, GLOBAL, PERSONAL, GLOBAL),
        dual_head=True, placement=PLACEMENT_POST),
    "dualfed-p": MethodVariant(
        name="dualfed-p", display_name="DualFed-P",
        group_tags=_tags(GLOBAL, PERSONAL, PERSONAL, GLOBAL),
        dual_head=True, placement=PLACEMENT_POST),
    # single-classifier arms; the classifier sits post-projection so total
    # capacity matches the dual variants
    "fedavg": MethodVariant(
        name="fedavg", display_name="FedAvg",
        group_tags=_tags(GLOBAL, GLOBAL, GLOBAL),
        dual_head=False, localize_bn_stats=False),
    "fedprox": MethodVariant(
        name="fedprox", display_name="FedProx",
        group_tags=_tags(GLOBAL, GLOBAL, GLOBAL),
        dual_head=False, localize_bn_stats=False, mu=0.01),
    "fedper": MethodVariant(
        name="fedper", display_name="FedPer",
        group_tags=_tags(GLOBAL, GLOBAL, PERSONAL),
        dual_head=False),
    "lg-fedavg": MethodVariant(
        name="lg-fedavg", display_name="LG-FedAvg",
        group_tags=_tags(PERSONAL, PERSONAL, GLOBAL),
        dual_head=False),
    "singleset": MethodVariant(
        name="singleset", display_name="SingleSet",
        group_tags=_tags(PERSONAL, PERSONAL, PERSONAL),
        dual_head=False, communicate=False),
}

VARIANT_NAMES = tuple(sorted(_REGISTRY))


def make_variant(name: str, mu: float | None = None,
                 tag_overrides: Mapping[str, str] | None = None) -> MethodVariant:
    """Look up a variant by name and apply optional per-group tag overrides."""
    key = name.strip().lower()
    if key not in _REGISTRY:
        raise DualFedError(
            f"unknown method {name!r}; known: {', '.join(VARIANT_NAMES)}")
    variant = _REGISTRY[key]
    if mu is not None:
        if mu < 0.0:
            raise DualFedError(f"mu must be >= 0, got {mu}")
        variant = replace(variant, mu=mu)
    if tag_overrides:
        merged = dict(variant.group_tags)
        for group, tag in tag_overrides.items():
            if group not in GROUPS:
                raise DualFedError(f"unknown slot group in tag override: {group!r}")
            if group not in merged:
                raise DualFedError(
                    f"group {group!r} does not exist for method {variant.display_name}")
            if tag not in (GLOBAL, PERSONAL):
                raise DualFedError(f"tag must be global or personal, got {tag!r}")
            merged[group] = tag
        variant = replace(variant, group_tags=MappingProxyType(merged))
    return variant


def build_variant_params(variant: MethodVariant, arch: ArchConfig,
                         seed: int) -> ModelParams:
    return build_params(
        arch, seed,
        dual_head=variant.dual_head,
        placement=variant.placement,
        group_tags=variant.group_tags,
        localize_bn_stats=variant.localize_bn_stats,
    )


def apply_variant(variant: MethodVariant, arch: ArchConfig) -> tuple[dict[str, str], str]:
    """Resolve a variant to its full per-slot tag map and training procedure."""
    params = build_variant_params(variant, arch, seed=0)
    procedure = "dual" if variant.dual_head else "single"
    return dict(params.tags), procedure


def fedprox_penalty(local_slots: Mapping[str, Tensor],
                    snapshot: Mapping[str, np.ndarray],
                    mu: float) -> tuple[float, dict[str, np.ndarray]]:
    """Proximal pull toward the round-start global parameters.

    Returns (mu/2) * sum ||w - w_global||^2 and the per-slot gradient
    mu * (w - w_global).
    """
    penalty = 0.0
    grads: dict[str, np.ndarray] = {}
    for name, anchor in snapshot.items():
        if name not in local_slots:
            raise SchemaMismatchError(f"snapshot slot {name!r} missing locally")
        w = local_slots[name].data
        if w.shape != anchor.shape:
            raise SchemaMismatchError(
                f"slot {name!r}: local {w.shape} vs snapshot {anchor.shape}")
        diff = w - anchor
        penalty += 0.5 * mu * float((diff * diff).sum())
        grads[name] = mu * diff
    return penalty, grads
