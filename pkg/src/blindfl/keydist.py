"""Key distributor round protocol.

Per round: generate a fresh key pair, hand the public key to every selected
client, wait until all of them have submitted their encrypted updates and
the server has announced that aggregation finished, then release the private
key to each recipient exactly once.

The private key is gated on the server's completion signal, never on the
last client submission alone; a completion notice claimed by a client is
ignored.
"""

from __future__ import annotations

import enum
import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import fhe
from .fhe import FheKeyPair, FheParams

logger = logging.getLogger(__name__)

SERVER = 0


class Phase(enum.IntEnum):
    IDLE = 0
    KEYS_ISSUED = 1
    COLLECTING = 2
    AWAITING_SERVER = 3
    KEY_RELEASED = 4
    ROUND_COMPLETE = 5


class Kind(enum.Enum):
    START_ROUND = "StartRound"
    PUBLIC_KEY_DELIVERED = "PublicKeyDelivered"
    UPDATE_SUBMITTED = "UpdateSubmitted"
    AGGREGATION_COMPLETE = "AggregationComplete"
    PRIVATE_KEY_DELIVERED = "PrivateKeyDelivered"
    MODEL_DISTRIBUTED = "ModelDistributed"


class ProtocolError(Exception):
    pass


class IllegalTransition(ProtocolError):
    pass


class RoundMismatch(ProtocolError):
    pass


@dataclass(frozen=True)
class RoundEvent:
    kind: Kind
    round_id: int
    party: int = SERVER
    keys: FheKeyPair | None = field(default=None, compare=False)

    @classmethod
    def start(cls, round_id: int, keys: FheKeyPair | None = None) -> "RoundEvent":
        return cls(Kind.START_ROUND, round_id, SERVER, keys)


@dataclass(frozen=True)
class KdState:
    phase: Phase = Phase.IDLE
    round_id: int = 0
    clients: frozenset[int] = frozenset()
    recipients: frozenset[int] = frozenset()
    pk_delivered: frozenset[int] = frozenset()
    received: frozenset[int] = frozenset()
    server_signalled: bool = False
    sk_delivered: frozenset[int] = frozenset()
    keys: FheKeyPair | None = field(default=None, compare=False)

    @classmethod
    def idle(cls, clients, recipients=None, round_id: int = 0) -> "KdState":
        clients = frozenset(clients)
        return cls(Phase.IDLE, round_id, clients, frozenset(recipients) if recipients is not None else clients)

    @property
    def key_released(self) -> bool:
        return self.phase >= Phase.KEY_RELEASED


def _illegal(state: KdState, event: RoundEvent, why: str) -> IllegalTransition:
    return IllegalTransition(f"{event.kind.value}(party {event.party}) in {state.phase.name}: {why}")


def handle_event(state: KdState, event: RoundEvent) -> KdState:
    """Advance the state machine by one event or raise."""
    kind = event.kind
    if kind is Kind.START_ROUND:
        if state.phase not in (Phase.IDLE, Phase.ROUND_COMPLETE):
            raise _illegal(state, event, "round already in progress")
        if event.round_id <= state.round_id:
            raise RoundMismatch(f"round ids must increase ({event.round_id} <= {state.round_id})")
        return KdState(Phase.KEYS_ISSUED, event.round_id, state.clients, state.recipients, keys=event.keys)

    if event.round_id != state.round_id:
        raise RoundMismatch(f"event for round {event.round_id} while in round {state.round_id}")
    party = event.party

    if kind is Kind.PUBLIC_KEY_DELIVERED:
        if state.phase is not Phase.KEYS_ISSUED:
            raise _illegal(state, event, "public keys are only handed out right after key generation")
        if party not in state.clients or party in state.pk_delivered:
            raise _illegal(state, event, "unknown client or duplicate delivery")
        delivered = state.pk_delivered | {party}
        phase = Phase.COLLECTING if delivered == state.clients else Phase.KEYS_ISSUED
        return replace(state, phase=phase, pk_delivered=delivered)

    if kind is Kind.UPDATE_SUBMITTED:
        if state.phase is not Phase.COLLECTING:
            raise _illegal(state, event, "not collecting updates")
        if party not in state.clients or party in state.received:
            raise _illegal(state, event, "unknown client or duplicate update")
        received = state.received | {party}
        phase = Phase.AWAITING_SERVER if received == state.clients else Phase.COLLECTING
        return replace(state, phase=phase, received=received)

    if kind is Kind.AGGREGATION_COMPLETE:
        if party != SERVER:
            logger.debug("ignoring completion notice from client %s", party)
            return state
        ready = state.phase is Phase.AWAITING_SERVER or (
            state.phase is Phase.COLLECTING and state.received == state.clients
        )
        if not ready:
            raise _illegal(state, event, "updates outstanding")
        return replace(state, phase=Phase.KEY_RELEASED, server_signalled=True)

    if kind is Kind.PRIVATE_KEY_DELIVERED:
        if state.phase is not Phase.KEY_RELEASED:
            raise _illegal(state, event, "private key not released")
        if party not in state.recipients or party in state.sk_delivered:
            raise _illegal(state, event, "unknown recipient or second delivery")
        return replace(state, sk_delivered=state.sk_delivered | {party})

    if kind is Kind.MODEL_DISTRIBUTED:
        if state.phase is not Phase.KEY_RELEASED or state.sk_delivered != state.recipients:
            raise _illegal(state, event, "private key not yet delivered to every recipient")
        return replace(state, phase=Phase.ROUND_COMPLETE)

    raise _illegal(state, event, "unknown event")


class KeyDistributor:
    """Serialized actor wrapping :func:`handle_event` with key generation.

    Keys only leave through :meth:`public_key_for` and :meth:`private_key_for`,
    each of which is recorded as a protocol event first, so an out-of-order
    request raises before any key material is returned.
    """

    def __init__(self, params: FheParams, clients, recipients=None, seed=None):
        self.params = params
        self.state = KdState.idle(clients, recipients)
        self._seeds = np.random.SeedSequence(seed)
        self._retired: list[int] = []
        self.releases: dict[tuple[int, int], int] = {}

    @property
    def round_id(self) -> int:
        return self.state.round_id

    def fresh_round(self, clients=None, recipients=None):
        """Start the next round; return ``(round_id, public_key)``."""
        if self.state.phase not in (Phase.IDLE, Phase.ROUND_COMPLETE):
            raise IllegalTransition(f"fresh_round while in {self.state.phase.name}")
        if self.state.keys is not None:
            self._retired.append(self.state.round_id)
        if clients is not None:
            clients = frozenset(clients)
            recips = frozenset(recipients) if recipients is not None else clients
            self.state = replace(self.state, clients=clients, recipients=recips)
        round_id = self.state.round_id + 1
        rng = np.random.default_rng(self._seeds.spawn(1)[0])
        keys = fhe.keygen(self.params, rng, round_id)
        self.state = handle_event(self.state, RoundEvent.start(round_id, keys))
        logger.debug("round %d keys issued", round_id)
        return round_id, keys.public

    def handle(self, event: RoundEvent) -> KdState:
        self.state = handle_event(self.state, event)
        return self.state

    def public_key_for(self, client: int):
        self.handle(RoundEvent(Kind.PUBLIC_KEY_DELIVERED, self.round_id, client))
        return self.state.keys.public

    def private_key_for(self, client: int):
        self.handle(RoundEvent(Kind.PRIVATE_KEY_DELIVERED, self.round_id, client))
        key = (self.round_id, client)
        self.releases[key] = self.releases.get(key, 0) + 1
        return self.state.keys.secret

    def retired_rounds(self) -> list[int]:
        return list(self._retired)


# -- exhaustive exploration ----------------------------------------------------------


def protocol_events(state: KdState, forged: bool = True) -> list[RoundEvent]:
    """Every event any party could emit within the current round."""
    r = state.round_id
    parties = sorted(state.clients | state.recipients)
    out = []
    for i in parties:
        out.append(RoundEvent(Kind.PUBLIC_KEY_DELIVERED, r, i))
        out.append(RoundEvent(Kind.UPDATE_SUBMITTED, r, i))
        out.append(RoundEvent(Kind.PRIVATE_KEY_DELIVERED, r, i))
        if forged:
            out.append(RoundEvent(Kind.AGGREGATION_COMPLETE, r, i))
    out.append(RoundEvent(Kind.AGGREGATION_COMPLETE, r, SERVER))
    out.append(RoundEvent(Kind.MODEL_DISTRIBUTED, r, SERVER))
    return out


@dataclass
class ExplorationResult:
    states: int = 0
    transitions: int = 0
    complete_traces: int = 0
    counterexamples: list = field(default_factory=list)
    dead_ends: list = field(default_factory=list)


def explore(
    c: int,
    recipients: int | None = None,
    invariant: Callable[[KdState, KdState, RoundEvent], str | None] | None = None,
) -> ExplorationResult:
    """Depth-first search over every event interleaving of one round.

    ``invariant(before, after, event)`` returns a message on violation.  The
    default checks that the private key is released only after all c
    updates and the server signal, and that no recipient gets it twice.
    """
    clients = range(1, c + 1)
    recips = range(1, (recipients or c) + 1)
    start = handle_event(KdState.idle(clients, recips), RoundEvent.start(1))
    check = invariant or release_invariant
    result = ExplorationResult()
    seen: dict[KdState, int] = {}
    complete_paths: dict[KdState, int] = {}

    def dfs(state: KdState, trace: tuple) -> int:
        if state in seen:
            return complete_paths[state]
        seen[state] = 1
        if state.phase is Phase.ROUND_COMPLETE:
            complete_paths[state] = 1
            return 1
        paths = 0
        moved = False
        for ev in protocol_events(state):
            try:
                nxt = handle_event(state, ev)
            except ProtocolError:
                continue
            result.transitions += 1
            if nxt == state:
                continue
            moved = True
            msg = check(state, nxt, ev)
            if msg:
                result.counterexamples.append((trace + (ev,), msg))
            paths += dfs(nxt, trace + (ev,))
        if not moved:
            result.dead_ends.append(trace)
        complete_paths[state] = paths
        return paths

    result.complete_traces = dfs(start, ())
    result.states = len(seen)
    return result


def release_invariant(before: KdState, after: KdState, event: RoundEvent) -> str | None:
    if after.key_released and not before.key_released:
        if after.received != after.clients:
            return "private key released before every update arrived"
        if not after.server_signalled or event.party != SERVER:
            return "private key released without the server signal"
    if event.kind is Kind.PRIVATE_KEY_DELIVERED and event.party in before.sk_delivered:
        return f"private key delivered twice to {event.party}"
    if after.sk_delivered and not after.key_released:
        return "private key delivered while unreleased"
    return None


def interleavings(c: int):
    """All orderings of the per-client deliveries allowed by the protocol.

    Yields event sequences for one round; used to replay full traces.
    """
    clients = list(range(1, c + 1))
    for pk_order in itertools.permutations(clients):
        for up_order in itertools.permutations(clients):
            for sk_order in itertools.permutations(clients):
                seq = [RoundEvent(Kind.PUBLIC_KEY_DELIVERED, 1, i) for i in pk_order]
                seq += [RoundEvent(Kind.UPDATE_SUBMITTED, 1, i) for i in up_order]
                seq.append(RoundEvent(Kind.AGGREGATION_COMPLETE, 1, SERVER))
                seq += [RoundEvent(Kind.PRIVATE_KEY_DELIVERED, 1, i) for i in sk_order]
                seq.append(RoundEvent(Kind.MODEL_DISTRIBUTED, 1, SERVER))
                yield seq
