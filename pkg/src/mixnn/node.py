"""Layer-server packet handling.

A node unwraps one onion layer, dispatches on the op code, performs its DL
or relay role, re-seals whatever it must forward, and hands back a single
outbound (address, packet) action. All state lives in NodeState; nothing
here touches a transport, so the same logic runs under the simulated
scheduler and real sockets.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn, onion
from .crypto import Address, KeyPair, DecryptionError, seal
from .onion import OpCode, OnionRecord, FramingError

log = logging.getLogger("mixnn.node")


class ProtocolError(RuntimeError):
    """A validly decrypted packet that the node's state machine must reject."""


@dataclass
class Send:
    dst: Address
    data: bytes


@dataclass
class Drop:
    reason: str


ROLE_UNINIT = "uninitialized"
ROLE_ACTUAL = "actual"
ROLE_DUMMY = "dummy"


@dataclass
class NodeState:
    node_id: str
    keypair: KeyPair
    packet_len: int = onion.DEFAULT_PACKET_LEN
    role: str = ROLE_UNINIT
    spec: nn.LayerSpec | None = None
    params: list | None = None
    opt: nn.OptimizerState | None = None
    cache: nn.LayerCache | None = None
    peers: dict = field(default_factory=dict)  # Address -> pk learned from records
    compute_count: int = 0  # DL kernel invocations, for instrumentation
    forward_count: int = 0
    backward_count: int = 0
    tamper_gradients: bool = False

    def _learn_peer(self, record: OnionRecord):
        if record.next is not None and record.next_pk is not None:
            self.peers[record.next] = record.next_pk
        if record.return_addr is not None and record.return_pk is not None:
            self.peers[record.return_addr] = record.return_pk


def handle_packet(state: NodeState, packet: bytes, src: Address | None = None):
    """Process one inbound packet; returns Send or Drop and logs the outcome."""
    try:
        record, payload, next_packet = onion.unwrap(
            state.keypair.sk, packet, expected_len=state.packet_len
        )
    except (DecryptionError, FramingError) as exc:
        log.warning("node=%s op=? outcome=dropped src=%s err=%s", state.node_id, src, exc)
        return Drop("tamper-or-misroute")

    state._learn_peer(record)
    try:
        if record.cover:
            action = _relay_or_drop(state, record, payload, "cover")
        elif record.op == OpCode.INIT:
            action = do_init(state, record, next_packet)
        elif record.op == OpCode.FORWARD:
            action = do_forward(state, record, payload)
        elif record.op == OpCode.BACKWARD:
            action = do_backward(state, record, payload)
        elif record.op == OpCode.TEST:
            action = do_test(state, record, payload)
        else:
            raise ProtocolError(f"unknown op {record.op}")
    except (ProtocolError, nn.ProtocolOrderError, ValueError, IndexError) as exc:
        # ValueError covers shape/framing trouble in decoded payloads, which a
        # byzantine predecessor controls; the node drops rather than dies
        log.warning("node=%s op=%s outcome=protocol-error src=%s err=%s",
                    state.node_id, record.op.name, src, exc)
        return Drop(f"protocol-error: {exc}")

    outcome = f"sent dst={action.dst}" if isinstance(action, Send) else action.reason
    log.info("node=%s op=%s outcome=%s src=%s",
             state.node_id, record.op.name, outcome, src)
    return action


def _relay_or_drop(state: NodeState, record: OnionRecord, payload, what: str):
    """Re-seal the payload (if any) to the next hop and forward the inner
    onion; no model computation happens here. Terminal records are dropped."""
    if record.inner is None or record.next is None:
        return Drop(f"{what}-terminal")
    payload_ct = seal(record.next_pk, payload) if payload is not None else b""
    return Send(record.next, onion.build_packet(payload_ct, record.inner, state.packet_len))


def do_init(state: NodeState, record: OnionRecord, next_packet):
    """Build this hop's part of the model and optimizer; replaces any prior
    state entirely."""
    if record.role == onion.ROLE_DUMMY:
        state.role = ROLE_DUMMY
        state.spec = state.params = state.opt = None
    elif record.role == onion.ROLE_ACTUAL:
        if record.chain is None or record.seed is None:
            raise ProtocolError("init record missing chain or seed")
        spec = nn.LayerSpec(record.chain, seed=record.seed)
        params = nn.init_layer_params(spec)
        state.role = ROLE_ACTUAL
        state.spec = spec
        state.params = params
        state.opt = nn.OptimizerState(
            params,
            learning_rate=record.learning_rate if record.learning_rate is not None else 0.01,
            momentum=record.momentum if record.momentum is not None else 0.9,
        )
    else:
        raise ProtocolError(f"init record with role {record.role!r}")
    state.cache = None
    state.forward_count = 0
    state.backward_count = 0
    if record.next is not None and next_packet is not None:
        return Send(record.next, next_packet)
    return Drop("init-terminal")


def _require_initialized(state: NodeState, op: str):
    if state.role == ROLE_UNINIT:
        raise ProtocolError(f"{op} before init")


def do_forward(state: NodeState, record: OnionRecord, payload):
    _require_initialized(state, "forward")
    if payload is None:
        raise ProtocolError("forward without payload")
    if state.role == ROLE_DUMMY:
        return _relay_or_drop(state, record, payload, "forward")

    if state.cache is not None:
        raise ProtocolError("forward with an unconsumed cache")
    x = onion.decode_matrix(payload)
    state.forward_count += 1
    state.compute_count += 1
    if record.labels is not None:
        # final actual layer: compute the training loss and return it
        loss, cache = nn.layer_forward(state.spec, state.params, x, labels=record.labels)
        state.cache = cache
        reply = onion.pack_reply(
            OpCode.FORWARD, onion.REPLY_LOSS, record.return_pk,
            onion.encode_matrix(np.array([[loss]], dtype=np.float32)),
            state.packet_len,
        )
        return Send(record.return_addr, reply)
    out, cache = nn.layer_forward(state.spec, state.params, x)
    state.cache = cache
    encoded = onion.encode_matrix(out)
    if record.inner is not None and record.next is not None:
        payload_ct = seal(record.next_pk, encoded)
        return Send(record.next, onion.build_packet(payload_ct, record.inner, state.packet_len))
    if record.return_addr is not None:
        # designer holds the loss layer: hand the activations back
        reply = onion.pack_reply(OpCode.FORWARD, onion.REPLY_OUTPUT, record.return_pk,
                                 encoded, state.packet_len)
        return Send(record.return_addr, reply)
    raise ProtocolError("forward record with nowhere to send")


def do_backward(state: NodeState, record: OnionRecord, payload):
    _require_initialized(state, "backward")
    if state.role == ROLE_DUMMY:
        return _relay_or_drop(state, record, payload, "backward")

    if state.cache is None:
        raise ProtocolError("backward before forward")
    if payload is None and not state.spec.ends_in_loss():
        raise ProtocolError("backward without a gradient payload")
    dy = None
    if payload is not None:
        dy = onion.decode_matrix(payload)
        if state.tamper_gradients:
            dy = -dy
    elif state.tamper_gradients and state.spec.ends_in_loss():
        # byzantine loss layer: flip the stored loss gradient
        idx = len(state.spec.chain) - 1
        state.cache.saved[idx] = -state.cache.saved[idx]
    state.backward_count += 1
    state.compute_count += 1
    dx = nn.layer_backward(state.spec, state.params, state.opt, state.cache, dy)
    state.cache = None
    if record.inner is not None and record.next is not None:
        payload_ct = seal(record.next_pk, onion.encode_matrix(dx))
        return Send(record.next, onion.build_packet(payload_ct, record.inner, state.packet_len))
    if record.return_addr is not None:
        # first layer: iteration complete; the ack carries the input gradient
        # so a designer-held first layer can take its local step
        reply = onion.pack_reply(OpCode.BACKWARD, onion.REPLY_ACK, record.return_pk,
                                 onion.encode_matrix(dx), state.packet_len)
        return Send(record.return_addr, reply)
    raise ProtocolError("backward record with nowhere to send")


def do_test(state: NodeState, record: OnionRecord, payload):
    _require_initialized(state, "test")
    if payload is None:
        raise ProtocolError("test without payload")
    if state.role == ROLE_DUMMY:
        return _relay_or_drop(state, record, payload, "test")

    x = onion.decode_matrix(payload)
    state.compute_count += 1
    out, _ = nn.layer_forward(state.spec, state.params, x, train=False)
    encoded = onion.encode_matrix(out)
    if record.end:
        reply = onion.pack_reply(OpCode.TEST, onion.REPLY_OUTPUT, record.return_pk,
                                 encoded, state.packet_len)
        return Send(record.return_addr, reply)
    if record.inner is not None and record.next is not None:
        payload_ct = seal(record.next_pk, encoded)
        return Send(record.next, onion.build_packet(payload_ct, record.inner, state.packet_len))
    raise ProtocolError("test record with nowhere to send")


def emit_cover(state: NodeState, target: Address) -> bytes:
    """Single-hop cover packet to an adjacent peer whose pk we have seen."""
    pk = state.peers.get(target)
    if pk is None:
        raise ProtocolError(f"no public key known for peer {target}")
    return onion.pack_single_cover(pk, state.packet_len)
