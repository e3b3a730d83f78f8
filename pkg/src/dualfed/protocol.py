"""The federated state machines: two-stage local training, uniform server
aggregation, the broadcast/train/upload/aggregate round loop, and exact
communication accounting.

Only GLOBAL-tagged slots ever cross the client/server boundary; every
message is validated against the tag map before it is accepted. Clients are
always processed in ascending client_id order so full runs are bit-exactly
reproducible from (config, seed).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .data import ClientData, Dataset, LabeledBatch, batch_iterator
from .errors import (
    DataError,
    DimensionError,
    DualFedError,
    ProtocolViolationError,
    SchemaMismatchError,
)
from .losses import LossConfig, cross_entropy, labels_from_one_hot, sup_con_loss
from .metrics import (
    MetricsRow,
    MetricsTable,
    STAGE_POST,
    STAGE_PRE,
    accuracy,
    class_separation,
    client_representations,
    cross_client_cka,
)
from .model import (
    GLOBAL,
    GROUP_ENCODER,
    GROUP_GLOBAL_HEAD,
    GROUP_PERSONAL_HEAD,
    GROUP_PROJECTOR,
    PLACEMENT_PRE,
    ArchConfig,
    ModelParams,
    backward_stack,
    encode,
    head_probs,
    is_running_stat,
    linear_backward,
    project,
    run_stack,
    slot_group,
)
from .tensor import EVAL, TRAIN, Tensor
from .variants import MethodVariant, build_variant_params, fedprox_penalty

STAGE_WISE = "stage_wise"
SIMULTANEOUS = "simultaneous"

BYTES_PER_PARAM = 8  # float64

DOWN = "down"
UP = "up"


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings for local training."""

    lr: float = 0.01
    momentum: float = 0.5
    batch_size: int = 256
    local_epochs: int = 1
    rounds: int = 300
    strategy: str = STAGE_WISE

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0,1), got {self.momentum}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.local_epochs < 1:
            raise ValueError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.rounds < 0:
            raise ValueError(f"rounds must be >= 0, got {self.rounds}")
        if self.strategy not in (STAGE_WISE, SIMULTANEOUS):
            raise ValueError(f"strategy must be {STAGE_WISE} or {SIMULTANEOUS}")


# -- optimizer ---------------------------------------------------------------

def sgd_step(slots: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
             lr: float, momentum: float,
             velocity: dict[str, np.ndarray]) -> None:
    """Momentum SGD applied in place to exactly the slots named in grads."""
    for name in sorted(grads):
        tensor = slots[name]
        g = grads[name]
        if g.shape != tensor.shape:
            raise DimensionError(
                f"gradient for {name!r} is {g.shape}, slot is {tensor.shape}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(tensor.data)
        v = momentum * v + g
        velocity[name] = v
        tensor.data -= lr * v


# -- communication ledger ------------------------------------------------------

@dataclass(frozen=True)
class CommRecord:
    round: int
    client_id: int
    direction: str
    param_count: int
    nbytes: int


class CommLedger:
    """Append-only log of every parameter transfer."""

    def __init__(self):
        self.records: list[CommRecord] = []

    def log(self, round_no: int, client_id: int, direction: str,
            param_count: int) -> None:
        if direction not in (UP, DOWN):
            raise ValueError(f"direction must be '{UP}' or '{DOWN}'")
        self.records.append(CommRecord(round_no, client_id, direction,
                                       param_count,
                                       param_count * BYTES_PER_PARAM))

    def total_bytes(self) -> int:
        return sum(r.nbytes for r in self.records)

    def round_bytes(self, round_no: int) -> int:
        return sum(r.nbytes for r in self.records if r.round == round_no)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "client_id", "direction",
                             "param_count", "bytes"])
            for r in self.records:
                writer.writerow([r.round, r.client_id, r.direction,
                                 r.param_count, r.nbytes])


# -- messages ------------------------------------------------------------------

def collect_global_slots(params: ModelParams) -> dict[str, np.ndarray]:
    """Copy of every GLOBAL-tagged slot, keyed by slot name."""
    return {name: tensor.data.copy() for name, tensor in params.slots()
            if params.tags[name] == GLOBAL}


def validate_message(payload: Mapping[str, np.ndarray],
                     tags: Mapping[str, str]) -> int:
    """Check a parameter message against the tag map; returns its size.

    Raises ProtocolViolationError if any PERSONAL-tagged value appears, and
    SchemaMismatchError if the payload does not cover exactly the GLOBAL
    slot set.
    """
    expected = {name for name, tag in tags.items() if tag == GLOBAL}
    for name in payload:
        if name not in tags:
            raise SchemaMismatchError(f"unknown slot in message: {name!r}")
        if tags[name] != GLOBAL:
            raise ProtocolViolationError(
                f"personal slot {name!r} must never leave the client")
    missing = expected - set(payload)
    if missing:
        raise SchemaMismatchError(f"message missing slots: {sorted(missing)}")
    return sum(arr.size for arr in payload.values())


def load_global_slots(params: ModelParams,
                      payload: Mapping[str, np.ndarray]) -> None:
    """Overwrite the GLOBAL slots of params with the payload values."""
    validate_message(payload, params.tags)
    for name, tensor in params.slots():
        if params.tags[name] == GLOBAL:
            arr = payload[name]
            if arr.shape != tensor.shape:
                raise SchemaMismatchError(
                    f"slot {name!r}: message {arr.shape} vs model {tensor.shape}")
            tensor.data[...] = arr


def aggregate(uploads: list[dict[str, np.ndarray]],
              tags: Mapping[str, str]) -> dict[str, np.ndarray]:
    """Unweighted elementwise mean of the uploaded GLOBAL slot sets.

    Computed as first + mean(other - first) so that unanimous uploads are a
    bit-exact fixed point of aggregation. Uploads must share an identical
    schema; the caller is responsible for passing them in ascending
    client_id order so the reduction order is fixed.
    """
    if not uploads:
        raise ProtocolViolationError("aggregate needs at least one upload")
    schema = [(name, arr.shape) for name, arr in sorted(uploads[0].items())]
    for payload in uploads:
        validate_message(payload, tags)
        if [(n, a.shape) for n, a in sorted(payload.items())] != schema:
            raise SchemaMismatchError("uploads disagree on slot schema")
    result: dict[str, np.ndarray] = {}
    for name, _ in schema:
        base = uploads[0][name]
        offset = np.zeros_like(base)
        for payload in uploads[1:]:
            offset += payload[name] - base
        result[name] = base + offset / len(uploads)
    return result


# -- client / server state -------------------------------------------------------

@dataclass
class ClientState:
    """One client: its model, data, RNG stream and optimizer buffers."""

    client_id: int
    params: ModelParams
    train_set: Dataset
    test_set: Dataset
    rng: np.random.Generator
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class ServerState:
    """Current GLOBAL parameter snapshot plus round index and ledger."""

    global_params: dict[str, np.ndarray]
    tags: Mapping[str, str]
    round: int = 0
    ledger: CommLedger = field(default_factory=CommLedger)


# -- local training -----------------------------------------------------------

def trainable_slots(params: ModelParams, groups: tuple[str, ...]) -> dict[str, Tensor]:
    """Gradient-carrying slots of the given groups (running stats excluded)."""
    return {name: tensor for name, tensor in params.slots()
            if slot_group(name) in groups and not is_running_stat(name)}


MAIN_BRANCH_GROUPS = (GROUP_ENCODER, GROUP_PROJECTOR, GROUP_PERSONAL_HEAD)


def _check_fresh_globals(params: ModelParams,
                         snapshot: Mapping[str, np.ndarray]) -> None:
    for name, tensor in params.slots():
        if params.tags[name] == GLOBAL:
            if name not in snapshot or not np.array_equal(tensor.data, snapshot[name]):
                raise ProtocolViolationError(
                    "stage 1 requires freshly loaded global slots")


def _main_branch_batch_grads(params: ModelParams, batch: LabeledBatch,
                             loss_cfg: LossConfig) -> dict[str, np.ndarray]:
    """Gradients of the stage-1 objective for every main-branch slot."""
    grads: dict[str, np.ndarray] = {}
    z, enc_caches = run_stack(params.encoder, batch.x, TRAIN, keep_cache=True)
    u, proj_caches = run_stack(params.projector, z, TRAIN, keep_cache=True)
    y_p = head_probs(params.personal_head, u)
    _, dlogits = cross_entropy(y_p, batch.y)
    du, gw, gb = linear_backward(u, params.personal_head.weight, dlogits)
    grads[f"{GROUP_PERSONAL_HEAD}.weight"] = gw
    grads[f"{GROUP_PERSONAL_HEAD}.bias"] = gb
    if loss_cfg.lam > 0.0:
        _, du_con = sup_con_loss(u, batch_labels(batch), loss_cfg.tau)
        du = du + loss_cfg.lam * du_con
    dz = backward_stack(params.projector, GROUP_PROJECTOR, proj_caches, du,
                        TRAIN, grads)
    backward_stack(params.encoder, GROUP_ENCODER, enc_caches, dz, TRAIN, grads)
    return grads


def batch_labels(batch: LabeledBatch) -> np.ndarray:
    return labels_from_one_hot(batch.y)


def _global_head_batch_grads(params: ModelParams, reps: Tensor,
                             y: Tensor) -> dict[str, np.ndarray]:
    head = params.global_head
    probs = head_probs(head, reps)
    _, dlogits = cross_entropy(probs, y)
    _, gw, gb = linear_backward(reps, head.weight, dlogits)
    return {f"{GROUP_GLOBAL_HEAD}.weight": gw, f"{GROUP_GLOBAL_HEAD}.bias": gb}


def _require_data(client: ClientState) -> None:
    # one sample cannot form a trainable batch (batch norm needs two rows)
    if len(client.train_set) < 2:
        raise DataError(
            f"client {client.client_id} has {len(client.train_set)} training "
            "samples; at least 2 are required")


def local_train_stage1(client: ClientState,
                       global_snapshot: Mapping[str, np.ndarray],
                       cfg: TrainConfig, loss_cfg: LossConfig) -> None:
    """Train the main branch (encoder, projector, local classifier) while the
    shared classifier stays bit-frozen."""
    _require_data(client)
    _check_fresh_globals(client.params, global_snapshot)
    slots = trainable_slots(client.params, MAIN_BRANCH_GROUPS)
    for _ in range(cfg.local_epochs):
        for batch in batch_iterator(client.train_set, cfg.batch_size, client.rng):
            grads = _main_branch_batch_grads(client.params, batch, loss_cfg)
            sgd_step(slots, grads, cfg.lr, cfg.momentum, client.velocity)


def local_train_stage2(client: ClientState, cfg: TrainConfig) -> None:
    """Fit the shared classifier on frozen representations (eval-mode BN),
    leaving every main-branch slot bit-unchanged."""
    _require_data(client)
    params = client.params
    if params.global_head is None:
        raise DualFedError("stage 2 needs a model with a global classifier")
    slots = trainable_slots(params, (GROUP_GLOBAL_HEAD,))
    for _ in range(cfg.local_epochs):
        for batch in batch_iterator(client.train_set, cfg.batch_size, client.rng):
            reps = encode(params, batch.x, EVAL)
            if params.placement != PLACEMENT_PRE:
                reps = project(params, reps, EVAL)
            grads = _global_head_batch_grads(params, reps, batch.y)
            sgd_step(slots, grads, cfg.lr, cfg.momentum, client.velocity)


def local_train_simultaneous(client: ClientState,
                             global_snapshot: Mapping[str, np.ndarray],
                             cfg: TrainConfig, loss_cfg: LossConfig) -> None:
    """Update all four parameter groups per batch in one optimizer step.

    The main branch follows the stage-1 objective; the shared classifier
    follows its own cross-entropy on the same forward pass, without pushing
    gradient into the representations.
    """
    _require_data(client)
    params = client.params
    if params.global_head is None:
        raise DualFedError("simultaneous training needs a global classifier")
    main = trainable_slots(params, MAIN_BRANCH_GROUPS)
    head = trainable_slots(params, (GROUP_GLOBAL_HEAD,))
    slots = {**main, **head}
    for _ in range(cfg.local_epochs):
        for batch in batch_iterator(client.train_set, cfg.batch_size, client.rng):
            grads: dict[str, np.ndarray] = {}
            z, enc_caches = run_stack(params.encoder, batch.x, TRAIN, keep_cache=True)
            u, proj_caches = run_stack(params.projector, z, TRAIN, keep_cache=True)
            y_p = head_probs(params.personal_head, u)
            _, dlogits = cross_entropy(y_p, batch.y)
            du, gw, gb = linear_backward(u, params.personal_head.weight, dlogits)
            grads[f"{GROUP_PERSONAL_HEAD}.weight"] = gw
            grads[f"{GROUP_PERSONAL_HEAD}.bias"] = gb
            if loss_cfg.lam > 0.0:
                _, du_con = sup_con_loss(u, batch_labels(batch), loss_cfg.tau)
                du = du + loss_cfg.lam * du_con
            dz = backward_stack(params.projector, GROUP_PROJECTOR, proj_caches,
                                du, TRAIN, grads)
            backward_stack(params.encoder, GROUP_ENCODER, enc_caches, dz,
                           TRAIN, grads)
            reps = z if params.placement == PLACEMENT_PRE else u
            grads.update(_global_head_batch_grads(params, reps, batch.y))
            sgd_step(slots, grads, cfg.lr, cfg.momentum, client.velocity)


def local_train_single(client: ClientState,
                       global_snapshot: Mapping[str, np.ndarray],
                       cfg: TrainConfig, mu: float) -> None:
    """Plain local training for single-classifier baselines.

    Cross-entropy through encoder -> projector -> classifier; when mu > 0 a
    proximal pull toward the round-start snapshot is added to the gradients
    of the shared slots.
    """
    _require_data(client)
    params = client.params
    slots = trainable_slots(params, MAIN_BRANCH_GROUPS)
    prox_anchor = None
    if mu > 0.0:
        prox_anchor = {name: arr for name, arr in global_snapshot.items()
                       if name in slots}
    for _ in range(cfg.local_epochs):
        for batch in batch_iterator(client.train_set, cfg.batch_size, client.rng):
            grads: dict[str, np.ndarray] = {}
            z, enc_caches = run_stack(params.encoder, batch.x, TRAIN, keep_cache=True)
            u, proj_caches = run_stack(params.projector, z, TRAIN, keep_cache=True)
            probs = head_probs(params.personal_head, u)
            _, dlogits = cross_entropy(probs, batch.y)
            du, gw, gb = linear_backward(u, params.personal_head.weight, dlogits)
            grads[f"{GROUP_PERSONAL_HEAD}.weight"] = gw
            grads[f"{GROUP_PERSONAL_HEAD}.bias"] = gb
            dz = backward_stack(params.projector, GROUP_PROJECTOR, proj_caches,
                                du, TRAIN, grads)
            backward_stack(params.encoder, GROUP_ENCODER, enc_caches, dz,
                           TRAIN, grads)
            if prox_anchor:
                _, prox_grads = fedprox_penalty(slots, prox_anchor, mu)
                for name, g in prox_grads.items():
                    grads[name] = grads[name] + g
            sgd_step(slots, grads, cfg.lr, cfg.momentum, client.velocity)


def train_client(client: ClientState, snapshot: Mapping[str, np.ndarray],
                 cfg: TrainConfig, loss_cfg: LossConfig,
                 variant: MethodVariant) -> None:
    if variant.dual_head:
        if cfg.strategy == SIMULTANEOUS:
            local_train_simultaneous(client, snapshot, cfg, loss_cfg)
        else:
            local_train_stage1(client, snapshot, cfg, loss_cfg)
            local_train_stage2(client, cfg)
    else:
        local_train_single(client, snapshot, cfg, variant.mu)


# -- the round loop -----------------------------------------------------------

def run_round(server: ServerState, clients: list[ClientState],
              cfg: TrainConfig, loss_cfg: LossConfig,
              variant: MethodVariant) -> None:
    """One global round: broadcast, local training, upload, aggregate."""
    ordered = sorted(clients, key=lambda c: c.client_id)
    round_no = server.round + 1
    if variant.communicate:
        for client in ordered:
            payload = {name: arr.copy()
                       for name, arr in server.global_params.items()}
            count = validate_message(payload, client.params.tags)
            load_global_slots(client.params, payload)
            server.ledger.log(round_no, client.client_id, DOWN, count)
    snapshot = server.global_params
    for client in ordered:
        train_client(client, snapshot, cfg, loss_cfg, variant)
    if variant.communicate:
        uploads = []
        for client in ordered:
            payload = collect_global_slots(client.params)
            count = validate_message(payload, server.tags)
            server.ledger.log(round_no, client.client_id, UP, count)
            uploads.append(payload)
        server.global_params = aggregate(uploads, server.tags)
    server.round = round_no


# -- full federation ------------------------------------------------------------

@dataclass
class FederationResult:
    metrics: MetricsTable
    server: ServerState
    clients: list[ClientState]
    variant: MethodVariant


def deployed_params(client: ClientState, server: ServerState,
                    variant: MethodVariant) -> ModelParams:
    """The model a client would deploy right now: its personal slots plus the
    freshest aggregated global slots."""
    if not variant.communicate:
        return client.params
    merged = client.params.clone()
    load_global_slots(merged, server.global_params)
    return merged


def build_probe_set(clients_data: list[ClientData],
                    per_client: int = 64) -> Tensor:
    """Shared probe inputs for cross-client CKA, drawn from every domain."""
    parts = [cd.test.features[:min(per_client, len(cd.test))]
             for cd in clients_data]
    return Tensor(np.vstack(parts))


def evaluate_round(server: ServerState, clients: list[ClientState],
                   variant: MethodVariant, probe: Tensor) -> MetricsRow:
    ordered = sorted(clients, key=lambda c: c.client_id)
    models = [deployed_params(c, server, variant) for c in ordered]
    acc_g, acc_p, acc_e, sep_z, sep_u = [], [], [], [], []
    for client, params in zip(ordered, models):
        x = Tensor(client.test_set.features)
        true = client.test_set.labels
        z, u = client_representations(params, x)
        y_p = head_probs(params.personal_head, u)
        if params.global_head is not None:
            global_reps = z if params.placement == PLACEMENT_PRE else u
            y_s = head_probs(params.global_head, global_reps)
            scores = y_p.data + y_s.data
            acc_g.append(accuracy(np.argmax(y_s.data, axis=1), true))
            acc_p.append(accuracy(np.argmax(y_p.data, axis=1), true))
            acc_e.append(accuracy(np.argmax(scores, axis=1), true))
        else:
            # single-classifier arms have one prediction path; report it on
            # all three columns so tables stay comparable
            acc = accuracy(np.argmax(y_p.data, axis=1), true)
            acc_g.append(acc)
            acc_p.append(acc)
            acc_e.append(acc)
        sep_z.append(class_separation(z, true))
        sep_u.append(class_separation(u, true))
    if len(models) >= 2:
        cka_z = cross_client_cka(models, probe, STAGE_PRE)
        cka_u = cross_client_cka(models, probe, STAGE_POST)
    else:
        cka_z = cka_u = 1.0
    return MetricsRow(
        round=server.round,
        acc_global=tuple(acc_g), acc_personal=tuple(acc_p),
        acc_ensemble=tuple(acc_e),
        sep_z=tuple(sep_z), sep_u=tuple(sep_u),
        mean_cka_z=cka_z, mean_cka_u=cka_u,
        comm_bytes=server.ledger.total_bytes(),
    )


def init_federation(arch: ArchConfig, clients_data: list[ClientData],
                    variant: MethodVariant, seed: int) -> tuple[ServerState, list[ClientState]]:
    """Fresh server and clients; all clients start from one seed-determined
    parameter draw and own independent RNG streams."""
    params0 = build_variant_params(variant, arch, seed)
    clients = []
    for i, cd in enumerate(clients_data):
        clients.append(ClientState(
            client_id=i,
            params=params0.clone(),
            train_set=cd.train,
            test_set=cd.test,
            rng=np.random.default_rng([seed, 1000 + i]),
        ))
    server = ServerState(global_params=collect_global_slots(params0),
                         tags=params0.tags)
    return server, clients


def run_federation(arch: ArchConfig, clients_data: list[ClientData],
                   cfg: TrainConfig, loss_cfg: LossConfig,
                   variant: MethodVariant, seed: int,
                   eval_every: int = 1,
                   checkpoint_fn=None) -> FederationResult:
    """Run the full round loop, evaluating all three prediction paths, the
    representation geometry and the communication total as it goes."""
    if eval_every < 1:
        raise ValueError(f"eval_every must be >= 1, got {eval_every}")
    server, clients = init_federation(arch, clients_data, variant, seed)
    probe = build_probe_set(clients_data)
    table = MetricsTable(num_clients=len(clients))
    for t in range(1, cfg.rounds + 1):
        run_round(server, clients, cfg, loss_cfg, variant)
        if t % eval_every == 0 or t == cfg.rounds:
            table.append(evaluate_round(server, clients, variant, probe))
        if checkpoint_fn is not None:
            checkpoint_fn(t, server, clients)
    return FederationResult(metrics=table, server=server, clients=clients,
                            variant=variant)
