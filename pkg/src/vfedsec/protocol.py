"""Round state machine for secure split learning across feature groups.

Participants are plain objects that only talk through :class:`Network`,
which frames every payload, charges it to the overhead ledger and hands the
receiver the bytes. One training round runs in a fixed order:

1. C0 samples a batch and seals each client's (sample id, batch row) slots.
2. Clients embed their own rows, zero-fill the rest, quantize and mask.
3. C0 quantizes its full-width embedding and masks segment i with pool i.
4. The server sums each complete group together with C0's segment, masks
   cancel, and decodes; incomplete groups become absent columns.
5. The server runs the head, updates it and returns gradient segments.
6. C0 and singleton-group clients update locally; multi-client groups send
   masked updates that the server aggregates, applies and broadcasts.
"""

from __future__ import annotations

import copy
import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from . import neuralnet as nn
from .datahub import PartitionView
from .ledger import BASELINE, OverheadLedger
from .qcode import (
    QConfig,
    decode_qmatrix,
    decode_real,
    dequantize_sum,
    encode_qmatrix,
    encode_real,
    quantize_matrix,
)
from .secure_layer import (
    ACTIVE_ID,
    SERVER_ID,
    NoiseTag,
    PairPool,
    Phase,
    derive_shared_secret,
    gen_keypair,
    mask_tensor,
    open_ids,
    seal_ids,
    self_noise,
    unmask_aggregate,
)

_FRAME = struct.Struct("<II")
_PAIR = struct.Struct("<QI")
_PUBKEY = struct.Struct("<IQ")

# seed namespaces
_ROUNDING, _KEYS, _BATCH, _INIT = 1, 2, 3, 5
_EVAL_COUNTER_BASE = 1 << 62


class ProtocolError(Exception):
    pass


class NoSurvivorsError(ProtocolError):
    pass


class MsgKind(enum.IntEnum):
    BATCH_ASSIGNMENT = 1
    MASKED_EMBEDDING = 2
    LABEL_VECTOR = 3
    GRADIENT_SEGMENT = 4
    MASKED_UPDATE = 5
    BOTTOM_PARAMS = 6
    PUBLIC_KEY = 7
    PREDICTION = 8


def party_name(pid: int) -> str:
    if pid == SERVER_ID:
        return "server"
    if pid == ACTIVE_ID:
        return "active"
    return f"client{pid}"


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


class Network:
    """Synchronous in-order delivery with byte accounting."""

    def __init__(self, ledger: OverheadLedger, capture: bool = False):
        self.ledger = ledger
        self.capture = capture
        self.log: list[tuple[MsgKind, int, int, bytes]] = []

    def send(self, kind: MsgKind, src: int, dst: int, payload: bytes, tag: str = BASELINE) -> bytes:
        frame = _FRAME.pack(int(kind), len(payload)) + payload
        self.ledger.add_bytes(party_name(src), party_name(dst), tag, len(frame))
        if self.capture:
            self.log.append((kind, src, dst, frame))
        return frame


def unframe(frame: bytes, kind: MsgKind) -> bytes:
    got, length = _FRAME.unpack_from(frame)
    if got != kind:
        raise ProtocolError(f"expected {kind.name}, got message kind {got}")
    payload = frame[_FRAME.size:]
    if len(payload) != length:
        raise ProtocolError("truncated frame")
    return payload


def encode_pairs(pairs) -> bytes:
    return struct.pack("<I", len(pairs)) + b"".join(_PAIR.pack(s, r) for s, r in pairs)


def decode_pairs(buf: bytes) -> list[tuple[int, int]]:
    (n,) = struct.unpack_from("<I", buf)
    return [_PAIR.unpack_from(buf, 4 + i * _PAIR.size) for i in range(n)]


def encode_floats(x: np.ndarray) -> bytes:
    return encode_real(x, "<f8")


def decode_floats(buf: bytes) -> np.ndarray:
    return decode_real(buf, "<f8")


# topology

@dataclass
class Group:
    group_id: int
    clients: tuple[int, ...]
    width: int
    in_dim: int
    offset: int = 0

    @property
    def columns(self) -> slice:
        return slice(self.offset, self.offset + self.width)


@dataclass
class Topology:
    groups: list[Group]
    active_in: int
    n_out: int = 1
    task: str = "binary"

    def __post_init__(self):
        offset = 0
        for g in self.groups:
            g.offset = offset
            offset += g.width

    @property
    def width(self) -> int:
        return sum(g.width for g in self.groups)

    @property
    def passive_clients(self) -> list[int]:
        return [c for g in self.groups for c in g.clients]

    def group_of(self, pid: int) -> Group:
        for g in self.groups:
            if pid in g.clients:
                return g
        raise KeyError(pid)

    def validate(self, qcfg: QConfig) -> None:
        if not self.groups:
            raise ProtocolError("topology needs at least one passive group")
        seen = set()
        for g in self.groups:
            if not g.clients:
                raise ProtocolError(f"group {g.group_id} has no clients")
            if g.width < 1:
                raise ProtocolError(f"group {g.group_id} needs a positive embedding width")
            if seen.intersection(g.clients) or ACTIVE_ID in g.clients:
                raise ProtocolError("client ids must be unique and distinct from C0")
            seen.update(g.clients)
            # K_i client codes plus C0's segment are summed per coordinate
            qcfg.check_summands(len(g.clients) + 1)


# participants

@dataclass
class ActiveParty:
    x: np.ndarray
    labels: np.ndarray
    train_ids: np.ndarray
    owners: dict[int, np.ndarray]  # group id -> owning client per sample id
    bottom: nn.Sequential
    pid: int = ACTIVE_ID
    pools: dict[int, PairPool] = field(default_factory=dict)


@dataclass
class PassiveClient:
    pid: int
    group_id: int
    sample_ids: np.ndarray
    x: np.ndarray
    bottom: nn.Sequential
    pool: PairPool | None = None
    rows: list[int] = field(default_factory=list)
    has_cache: bool = False

    def __post_init__(self):
        self.lookup = {int(s): i for i, s in enumerate(self.sample_ids)}

    @property
    def name(self):
        return party_name(self.pid)


@dataclass
class Server:
    top: nn.TopModel
    bottoms: dict[int, nn.Sequential]  # master copies for multi-client groups
    pid: int = SERVER_ID


@dataclass
class BatchPlan:
    round: int
    sample_ids: np.ndarray
    assignments: dict[int, list[tuple[int, int]]]
    sealed: dict[int, bytes]


@dataclass
class RoundOutcome:
    mode: str
    dropped_groups: frozenset
    loss: float
    metric: float
    served: bool


# protocol operations

def plan_batch(active: ActiveParty, topo: Topology, sample_ids, rnd: int, counter: int,
               secure: bool, slots: int) -> BatchPlan:
    assignments = {}
    for g in topo.groups:
        owner = active.owners[g.group_id]
        for pid in g.clients:
            assignments[pid] = [(int(s), row) for row, s in enumerate(sample_ids) if owner[s] == pid]
    sealed = {}
    if secure:
        for g in topo.groups:
            pool = active.pools[g.group_id]
            for pid in g.clients:
                sealed[pid] = seal_ids(pool.secret(ACTIVE_ID, pid), assignments[pid], counter, slots)
    return BatchPlan(rnd, np.asarray(sample_ids), assignments, sealed)


def select_batch(active: ActiveParty, topo: Topology, batch_size: int, rng: np.random.Generator,
                 rnd: int = 0, secure: bool = True) -> BatchPlan:
    if batch_size > active.train_ids.size:
        raise ProtocolError(f"batch size {batch_size} exceeds the {active.train_ids.size} training samples")
    ids = rng.choice(active.train_ids, size=batch_size, replace=False)
    return plan_batch(active, topo, ids, rnd, rnd, secure, batch_size)


def client_forward(client: PassiveClient, assignment: bytes, batch_size: int, width: int,
                   qcfg: QConfig, rng: np.random.Generator, tag: NoiseTag | None,
                   ledger: OverheadLedger, secure: bool = True) -> bytes:
    if secure:
        with ledger.timed(client.name, "seal_ids"):
            pairs = open_ids(client.pool.secret(ACTIVE_ID, client.pid), assignment)
    else:
        pairs = decode_pairs(assignment)
    with ledger.timed(client.name, BASELINE):
        rows = [row for _, row in pairs]
        if any(row >= batch_size or row < 0 for row in rows):
            raise ProtocolError(f"{client.name}: batch row outside [0, {batch_size})")
        local = [client.lookup[sid] for sid, _ in pairs]
        own = client.bottom.forward(client.x[local].reshape(len(local), client.x.shape[1]))
        client.rows, client.has_cache = rows, True
        h = np.zeros((batch_size, width))
        h[rows] = own
    if not secure:
        return encode_real(h)
    with ledger.timed(client.name, "quantize"):
        q = quantize_matrix(h, qcfg, rng)
    with ledger.timed(client.name, "mask_compute"):
        masked = mask_tensor(q, self_noise(client.pid, client.pool, tag))
    return encode_qmatrix(masked)


def active_forward(active: ActiveParty, topo: Topology, plan: BatchPlan, qcfg: QConfig,
                   rng: np.random.Generator, tags: dict[int, NoiseTag] | None,
                   ledger: OverheadLedger, secure: bool = True, training: bool = True) -> bytes:
    with ledger.timed("active", BASELINE):
        h0 = active.bottom.forward(active.x[plan.sample_ids], training)
    if not secure:
        return encode_real(h0)
    with ledger.timed("active", "quantize"):
        q = quantize_matrix(h0, qcfg, rng)
    with ledger.timed("active", "mask_compute"):
        for g in topo.groups:
            q[:, g.columns] = mask_tensor(q[:, g.columns], self_noise(ACTIVE_ID, active.pools[g.group_id], tags[g.group_id]))
    return encode_qmatrix(q)


def server_aggregate_forward(active_msg: np.ndarray, client_msgs: dict[int, np.ndarray], topo: Topology,
                             dropped_groups, qcfg: QConfig, secure: bool = True):
    """Sum each surviving group with C0's segment and decode.

    Returns the B x H embedding (NaN in absent columns) and the presence
    vector. A group not listed as dropped must have every member's message.
    """
    dropped = set(dropped_groups)
    rows = active_msg.shape[0]
    h = np.full((rows, topo.width), np.nan)
    presence = np.zeros(topo.width, dtype=bool)
    for g in topo.groups:
        if g.group_id in dropped:
            continue
        missing = [c for c in g.clients if c not in client_msgs]
        if missing:
            raise ProtocolError(f"group {g.group_id} is missing messages from {missing}")
        parts = [active_msg[:, g.columns]] + [client_msgs[c] for c in g.clients]
        if secure:
            s = unmask_aggregate(parts, pool_complete=True)
            h[:, g.columns] = dequantize_sum(s, len(parts), qcfg)
        else:
            h[:, g.columns] = np.sum(parts, axis=0)
        presence[g.columns] = True
    if not presence.any():
        raise NoSurvivorsError("no surviving segments")
    return h, presence


def pad_and_predict(h: np.ndarray, presence: np.ndarray, top: nn.TopModel, training: bool = True) -> np.ndarray:
    if not np.any(presence):
        raise NoSurvivorsError("no surviving segments")
    return top.forward(h, presence, training)


def server_backward(logits, labels, top: nn.TopModel, lr: float, task: str = "binary"):
    """Loss, head update, and the gradient w.r.t. the whole embedding."""
    loss, d_logits = nn.loss_and_grad(logits, labels, task)
    dh = top.backward(d_logits)
    nn.sgd_apply(top.params(), top.grads(), lr)
    return loss, dh


def client_backward(client: PassiveClient, d_segment: np.ndarray, group_size: int, qcfg: QConfig,
                    rng: np.random.Generator, lr: float, tag: NoiseTag | None, update_pool: PairPool | None,
                    ledger: OverheadLedger, secure: bool = True) -> bytes | None:
    """Gradient over owned rows; local step for a singleton group, masked update otherwise."""
    if not client.has_cache:
        raise ProtocolError(f"{client.name}: no forward cache for this round")
    client.has_cache = False
    with ledger.timed(client.name, BASELINE):
        client.bottom.backward(d_segment[client.rows])
        grads = client.bottom.grads()
        if group_size == 1:
            nn.sgd_apply(client.bottom.params(), grads, lr)
            return None
        delta = (-lr * nn.flatten(grads)).reshape(1, -1)
    if not secure:
        return encode_floats(delta)
    with ledger.timed(client.name, "quantize"):
        q = quantize_matrix(delta, qcfg.for_updates(), rng)
    with ledger.timed(client.name, "mask_compute"):
        masked = mask_tensor(q, self_noise(client.pid, update_pool, tag))
    return encode_qmatrix(masked)


def server_apply_group_update(server: Server, group: Group, msgs: dict[int, np.ndarray], qcfg: QConfig,
                              ledger: OverheadLedger, secure: bool = True) -> np.ndarray | None:
    """Aggregate one group's updates into the server copy; None leaves it untouched."""
    if any(c not in msgs for c in group.clients):
        return None
    parts = [msgs[c] for c in group.clients]
    if secure:
        with ledger.timed("server", "unmask"):
            s = unmask_aggregate(parts, pool_complete=True)
        with ledger.timed("server", "quantize"):
            delta = dequantize_sum(s, len(parts), qcfg.for_updates())
    else:
        delta = np.sum(parts, axis=0)
    bottom = server.bottoms[group.group_id]
    flat = nn.flatten(bottom.params()) + delta.ravel()
    nn.assign_flat(bottom.params(), flat)
    return flat


# orchestration

@dataclass
class ProtocolConfig:
    qcfg: QConfig = field(default_factory=QConfig)
    lr: float = 0.01
    batch_size: int = 256
    active_hidden: tuple[int, ...] = ()
    group_hidden: tuple[int, ...] = ()
    top_hidden: tuple[int, ...] = ()


class Federation:
    """All participants of one deployment plus the wire between them."""

    def __init__(self, view: PartitionView, widths, cfg: ProtocolConfig, seed: int, secure: bool = True,
                 ledger: OverheadLedger | None = None, capture: bool = False, active_width: int | None = None):
        self.cfg = cfg
        self.seed = seed
        self.secure = secure
        self.ledger = ledger if ledger is not None else OverheadLedger()
        self.eval_ledger = OverheadLedger()  # inference traffic is kept out of the training accounts
        self.net = Network(self.ledger, capture)
        table = view.table
        self.task = table.task
        n_out = 1 if table.task == "binary" else table.n_classes

        groups, pid = [], 1
        for gv, width in zip(view.groups, widths):
            ids = tuple(range(pid, pid + len(gv.shards)))
            pid += len(gv.shards)
            groups.append(Group(gv.group_id, ids, int(width), gv.x.shape[1]))
        self.topology = Topology(groups, view.x_active.shape[1], n_out, table.task)
        self.topology.validate(cfg.qcfg)
        width = self.topology.width
        if active_width is not None and active_width != width:
            raise ProtocolError(f"active embedding width {active_width} must equal the sum of group widths {width}")

        active_bottom = nn.mlp([view.x_active.shape[1], *cfg.active_hidden, width], bias=True,
                               rng=stream(seed, _INIT, ACTIVE_ID))
        owners = {}
        self.clients: dict[int, PassiveClient] = {}
        bottoms = {}
        for g, gv in zip(groups, view.groups):
            init = nn.mlp([g.in_dim, *cfg.group_hidden, g.width], bias=False, rng=stream(seed, _INIT, 1000 + g.group_id))
            owner = np.full(table.n_rows, -1, dtype=np.int64)
            for c, shard in zip(g.clients, gv.shards):
                owner[shard] = c
                self.clients[c] = PassiveClient(c, g.group_id, shard, gv.x[shard], copy.deepcopy(init))
            owners[g.group_id] = owner
            if len(g.clients) > 1:
                bottoms[g.group_id] = copy.deepcopy(init)
        self.active = ActiveParty(view.x_active, table.labels, table.train_ids(), owners, active_bottom)
        self.server = Server(nn.TopModel(width, cfg.top_hidden, n_out, rng=stream(seed, _INIT, SERVER_ID)), bottoms)
        self.epoch = -1
        self.eval_counter = 0

    # key management

    def setup_keys(self, epoch: int) -> None:
        """Fresh key pairs for every participant and new pair secrets in every pool."""
        if epoch <= self.epoch:
            raise ProtocolError(f"epoch must increase: {self.epoch} -> {epoch}")
        self.epoch = epoch
        if not self.secure:
            return
        led, net = self.ledger, self.net
        members = [ACTIVE_ID, *self.topology.passive_clients]
        keys = {}
        for m in members:
            with led.timed(party_name(m), "keygen"):
                keys[m] = gen_keypair(stream(self.seed, _KEYS, epoch, m))
            payload = _PUBKEY.pack(m, epoch) + keys[m].public_value
            net.send(MsgKind.PUBLIC_KEY, m, SERVER_ID, payload, "pubkey_exchange")
        for g in self.topology.groups:
            pool_members = (ACTIVE_ID, *g.clients)
            for m in pool_members:
                for other in pool_members:
                    if other != m:
                        payload = _PUBKEY.pack(other, epoch) + keys[other].public_value
                        net.send(MsgKind.PUBLIC_KEY, SERVER_ID, m, payload, "pubkey_exchange")
            secrets = {}
            for i, u in enumerate(pool_members):
                for v in pool_members[i + 1:]:
                    with led.timed(party_name(u), "keygen"):
                        s_u = derive_shared_secret(keys[u], keys[v].public_value)
                    with led.timed(party_name(v), "keygen"):
                        s_v = derive_shared_secret(keys[v], keys[u].public_value)
                    if s_u != s_v:
                        raise ProtocolError(f"key agreement mismatch between {u} and {v}")
                    secrets[(min(u, v), max(u, v))] = s_u
            pool = PairPool(g.group_id, pool_members, secrets, epoch,
                            {m: keys[m].public_value for m in pool_members})
            self.active.pools[g.group_id] = pool
            for c in g.clients:
                self.clients[c].pool = pool

    # helpers

    def _rounding_rng(self, pid: int, rnd: int, phase: Phase) -> np.random.Generator:
        return stream(self.seed, _ROUNDING, pid, rnd, int(phase))

    def _deliver_batch(self, plan: BatchPlan) -> dict[int, bytes]:
        """C0 -> server -> clients. Secure mode relays a padded sealed slot table to every client."""
        net, inbox = self.net, {}
        if self.secure:
            for pid, ct in plan.sealed.items():
                unframe(net.send(MsgKind.BATCH_ASSIGNMENT, ACTIVE_ID, SERVER_ID, ct, "seal_ids"), MsgKind.BATCH_ASSIGNMENT)
                frame = net.send(MsgKind.BATCH_ASSIGNMENT, SERVER_ID, pid, ct, "seal_ids")
                inbox[pid] = unframe(frame, MsgKind.BATCH_ASSIGNMENT)
        else:
            for pid, pairs in plan.assignments.items():
                payload = encode_pairs(pairs)
                if pairs:
                    net.send(MsgKind.BATCH_ASSIGNMENT, ACTIVE_ID, SERVER_ID, payload)
                    payload = unframe(net.send(MsgKind.BATCH_ASSIGNMENT, SERVER_ID, pid, payload), MsgKind.BATCH_ASSIGNMENT)
                inbox[pid] = payload
        return inbox

    def _forward(self, plan: BatchPlan, rnd: int, phase: Phase, live, training: bool):
        """Clients and C0 embed; the server decodes. Returns (h, presence, dropped groups)."""
        topo, cfg, net, led = self.topology, self.cfg, self.net, self.ledger
        b = len(plan.sample_ids)
        inbox = self._deliver_batch(plan)
        tags = {g.group_id: NoiseTag(self.epoch, rnd, phase, (b, g.width)) for g in topo.groups}
        decode = decode_qmatrix if self.secure else decode_real
        received: dict[int, np.ndarray] = {}
        for g in topo.groups:
            for pid in g.clients:
                if pid not in live:
                    continue
                client = self.clients[pid]
                payload = client_forward(client, inbox[pid], b, g.width, cfg.qcfg,
                                         self._rounding_rng(pid, rnd, phase), tags[g.group_id], led, self.secure)
                frame = net.send(MsgKind.MASKED_EMBEDDING, pid, SERVER_ID, payload)
                received[pid] = decode(unframe(frame, MsgKind.MASKED_EMBEDDING))
        payload = active_forward(self.active, topo, plan, cfg.qcfg, self._rounding_rng(ACTIVE_ID, rnd, phase),
                                 tags, led, self.secure, training)
        active_msg = decode(unframe(net.send(MsgKind.MASKED_EMBEDDING, ACTIVE_ID, SERVER_ID, payload),
                                    MsgKind.MASKED_EMBEDDING))
        dropped = frozenset(g.group_id for g in topo.groups if any(c not in received for c in g.clients))
        tag = "unmask" if self.secure else BASELINE
        with led.timed("server", tag):
            h, presence = server_aggregate_forward(active_msg, received, topo, dropped, cfg.qcfg, self.secure)
        return h, presence, dropped

    def train_round(self, rnd: int, dropped_clients=frozenset()) -> RoundOutcome:
        topo, cfg, net, led = self.topology, self.cfg, self.net, self.ledger
        if self.epoch < 0:
            raise ProtocolError("keys not set up")
        dropped_clients = frozenset(dropped_clients)
        live = set(topo.passive_clients) - dropped_clients
        with led.timed("active", "seal_ids" if self.secure else BASELINE):
            plan = select_batch(self.active, topo, cfg.batch_size, stream(self.seed, _BATCH, rnd), rnd, self.secure)
        labels = self.active.labels[plan.sample_ids]
        frame = net.send(MsgKind.LABEL_VECTOR, ACTIVE_ID, SERVER_ID, labels.astype("<u4").tobytes())
        labels = np.frombuffer(unframe(frame, MsgKind.LABEL_VECTOR), dtype="<u4").astype(np.int64)

        h, presence, dropped = self._forward(plan, rnd, Phase.FORWARD_EMBEDDING, live, training=True)
        with led.timed("server", BASELINE):
            logits = pad_and_predict(h, presence, self.server.top, training=True)
            loss, dh = server_backward(logits, labels, self.server.top, cfg.lr, self.task)
        metric = _batch_metric(logits, labels, self.task)

        # gradients: full width to C0, one segment to each member of each surviving group
        dh0 = decode_floats(unframe(net.send(MsgKind.GRADIENT_SEGMENT, SERVER_ID, ACTIVE_ID, encode_floats(dh)),
                                    MsgKind.GRADIENT_SEGMENT))
        with led.timed("active", BASELINE):
            self.active.bottom.backward(dh0)
            nn.sgd_apply(self.active.bottom.params(), self.active.bottom.grads(), cfg.lr)

        for g in topo.groups:
            if g.group_id in dropped:
                continue
            seg = encode_floats(dh[:, g.columns])
            update_pool = self.active.pools[g.group_id].subpool(g.clients) if self.secure and len(g.clients) > 1 else None
            tag = NoiseTag(self.epoch, rnd, Phase.BACKWARD_UPDATE, (1, _param_count(self.clients[g.clients[0]].bottom)))
            updates = {}
            for pid in g.clients:
                d_seg = decode_floats(unframe(net.send(MsgKind.GRADIENT_SEGMENT, SERVER_ID, pid, seg),
                                              MsgKind.GRADIENT_SEGMENT))
                msg = client_backward(self.clients[pid], d_seg, len(g.clients), cfg.qcfg,
                                      self._rounding_rng(pid, rnd, Phase.BACKWARD_UPDATE), cfg.lr, tag,
                                      update_pool, led, self.secure)
                if msg is not None:
                    frame = net.send(MsgKind.MASKED_UPDATE, pid, SERVER_ID, msg)
                    payload = unframe(frame, MsgKind.MASKED_UPDATE)
                    updates[pid] = decode_qmatrix(payload) if self.secure else decode_floats(payload)
            if len(g.clients) > 1:
                flat = server_apply_group_update(self.server, g, updates, cfg.qcfg, led, self.secure)
                if flat is not None:
                    self._broadcast_params(g, flat)
        mode = "pad" if dropped_clients else "clean"
        return RoundOutcome(mode, dropped, loss, metric, True)

    def _broadcast_params(self, g: Group, flat: np.ndarray) -> None:
        payload = encode_floats(flat.reshape(1, -1))
        for pid in g.clients:
            frame = self.net.send(MsgKind.BOTTOM_PARAMS, SERVER_ID, pid, payload)
            received = decode_floats(unframe(frame, MsgKind.BOTTOM_PARAMS))
            nn.assign_flat(self.clients[pid].bottom.params(), received.ravel())

    def predict(self, sample_ids) -> np.ndarray:
        """Forward-only secure inference for ``sample_ids`` in batches; no labels leave C0."""
        if self.epoch < 0:
            raise ProtocolError("keys not set up")
        sample_ids = np.asarray(sample_ids)
        if sample_ids.size == 0:
            raise ProtocolError("empty evaluation set")
        train_ledger = self.ledger
        self.ledger = self.net.ledger = self.eval_ledger
        try:
            return self._predict(sample_ids)
        finally:
            self.ledger = self.net.ledger = train_ledger

    def _predict(self, sample_ids) -> np.ndarray:
        out = []
        live = set(self.topology.passive_clients)
        b = self.cfg.batch_size
        for start in range(0, sample_ids.size, b):
            chunk = sample_ids[start:start + b]
            seq = self.eval_counter
            self.eval_counter += 1
            plan = plan_batch(self.active, self.topology, chunk, seq, _EVAL_COUNTER_BASE + seq,
                              self.secure, len(chunk))
            h, presence, _ = self._forward(plan, seq, Phase.EVAL_EMBEDDING, live, training=False)
            logits = pad_and_predict(h, presence, self.server.top, training=False)
            frame = self.net.send(MsgKind.PREDICTION, SERVER_ID, ACTIVE_ID, encode_floats(logits))
            out.append(decode_floats(unframe(frame, MsgKind.PREDICTION)))
        return np.vstack(out)

    def evaluate(self, sample_ids=None) -> float:
        ids = self.active_test_ids() if sample_ids is None else np.asarray(sample_ids)
        logits = self.predict(ids)
        return score(logits, self.active.labels[ids], self.task)

    def active_test_ids(self) -> np.ndarray:
        train = np.zeros(self.active.labels.size, dtype=bool)
        train[self.active.train_ids] = True
        return np.flatnonzero(~train)

    # state

    def state_tensors(self) -> list[np.ndarray]:
        out = list(self.active.bottom.params())
        for pid in sorted(self.clients):
            out.extend(self.clients[pid].bottom.params())
        for gid in sorted(self.server.bottoms):
            out.extend(self.server.bottoms[gid].params())
        out.extend(self.server.top.params())
        out.extend(self.server.top.bn.buffers())
        return out

    def checkpoint(self) -> bytes:
        return nn.dump_tensors(self.state_tensors())

    def restore(self, blob: bytes) -> None:
        nn.restore_tensors(self.state_tensors(), nn.load_tensors(blob))


def _param_count(stack: nn.Sequential) -> int:
    return sum(p.size for p in stack.params())


def score(logits: np.ndarray, labels: np.ndarray, task: str) -> float:
    if task == "binary":
        return nn.metric_auc(logits.ravel(), labels)
    return nn.metric_accuracy(np.argmax(logits, axis=1), labels)


def _batch_metric(logits, labels, task) -> float:
    try:
        return score(logits, labels, task)
    except ValueError:
        return float("nan")
