import math

import numpy as np
import pytest

from blindfl import keydist
from blindfl.fhe import FheParams
from blindfl.keydist import (
    SERVER,
    IllegalTransition,
    KdState,
    KeyDistributor,
    Kind,
    Phase,
    RoundEvent,
    RoundMismatch,
    explore,
    handle_event,
    interleavings,
)

PARAMS = FheParams("oracle", 32, 40, (60, 40, 40, 60), "test")


def started(c, recipients=None):
    return handle_event(KdState.idle(range(1, c + 1), recipients), RoundEvent.start(1))


def ev(kind, party, r=1):
    return RoundEvent(kind, r, party)


@pytest.mark.parametrize("c", [1, 2, 3])
def test_exhaustive_search_is_safe(c):
    res = explore(c)
    assert res.counterexamples == [] and res.dead_ends == []
    assert res.complete_traces == math.factorial(c) ** 3


def test_every_scripted_interleaving_reaches_completion():
    for seq in interleavings(3):
        s = started(3)
        for e in seq:
            s = handle_event(s, e)
        assert s.phase is Phase.ROUND_COMPLETE and s.sk_delivered == frozenset({1, 2, 3})


def test_forged_completion_is_ignored():
    s = started(2)
    for i in (1, 2):
        s = handle_event(s, ev(Kind.PUBLIC_KEY_DELIVERED, i))
    for i in (1, 2):
        s = handle_event(s, ev(Kind.UPDATE_SUBMITTED, i))
    forged = handle_event(s, ev(Kind.AGGREGATION_COMPLETE, 1))
    assert forged == s and not forged.key_released
    with pytest.raises(IllegalTransition):
        handle_event(forged, ev(Kind.PRIVATE_KEY_DELIVERED, 1))


def test_release_requires_all_updates():
    s = started(2)
    for i in (1, 2):
        s = handle_event(s, ev(Kind.PUBLIC_KEY_DELIVERED, i))
    s = handle_event(s, ev(Kind.UPDATE_SUBMITTED, 1))
    with pytest.raises(IllegalTransition):
        handle_event(s, ev(Kind.AGGREGATION_COMPLETE, SERVER))
    s = handle_event(s, ev(Kind.UPDATE_SUBMITTED, 2))
    assert s.phase is Phase.AWAITING_SERVER and not s.key_released
    s = handle_event(s, ev(Kind.AGGREGATION_COMPLETE, SERVER))
    assert s.key_released
    s = handle_event(s, ev(Kind.PRIVATE_KEY_DELIVERED, 2))
    with pytest.raises(IllegalTransition):
        handle_event(s, ev(Kind.PRIVATE_KEY_DELIVERED, 2))
    with pytest.raises(IllegalTransition):
        handle_event(s, ev(Kind.MODEL_DISTRIBUTED, SERVER))


def test_round_ids():
    s = started(1)
    with pytest.raises(RoundMismatch):
        handle_event(s, ev(Kind.PUBLIC_KEY_DELIVERED, 1, r=2))
    with pytest.raises(IllegalTransition):
        handle_event(s, RoundEvent.start(2))
    with pytest.raises(RoundMismatch):
        handle_event(KdState.idle([1], round_id=5), RoundEvent.start(5))


def test_search_catches_a_broken_machine(monkeypatch):
    real = keydist.handle_event

    def leaky(state, event):
        nxt = real(state, event)
        if event.kind is Kind.UPDATE_SUBMITTED and nxt.received == nxt.clients:
            from dataclasses import replace

            return replace(nxt, phase=Phase.KEY_RELEASED)
        return nxt

    monkeypatch.setattr(keydist, "handle_event", leaky)
    res = keydist.explore(2)
    assert res.counterexamples


def test_key_distributor_actor():
    kd = KeyDistributor(PARAMS, [1, 2, 3], seed=0)
    with pytest.raises(IllegalTransition):
        kd.private_key_for(1)
    r, pk = kd.fresh_round([1, 2], recipients=[1, 2, 3])
    assert r == 1 and pk.round_id == 1
    with pytest.raises(IllegalTransition):
        kd.fresh_round()
    for i in (1, 2):
        assert kd.public_key_for(i) == pk
    for i in (1, 2):
        kd.handle(RoundEvent(Kind.UPDATE_SUBMITTED, 1, i))
    with pytest.raises(IllegalTransition):
        kd.private_key_for(3)
    kd.handle(RoundEvent(Kind.AGGREGATION_COMPLETE, 1, SERVER))
    for i in (1, 2, 3):
        assert kd.private_key_for(i).round_id == 1
    with pytest.raises(IllegalTransition):
        kd.private_key_for(3)
    assert set(kd.releases.values()) == {1}
    kd.handle(RoundEvent(Kind.MODEL_DISTRIBUTED, 1, SERVER))
    r2, pk2 = kd.fresh_round([2, 3])
    assert r2 == 2 and kd.retired_rounds() == [1]


def test_rounds_get_fresh_keys():
    kd = KeyDistributor(FheParams("ckks", 32, 40, (60, 40, 40, 60), "test"), [1, 2], seed=3)
    _, a = kd.fresh_round()
    for i in (1, 2):
        kd.public_key_for(i)
    for i in (1, 2):
        kd.handle(RoundEvent(Kind.UPDATE_SUBMITTED, 1, i))
    kd.handle(RoundEvent(Kind.AGGREGATION_COMPLETE, 1, SERVER))
    for i in (1, 2):
        kd.private_key_for(i)
    kd.handle(RoundEvent(Kind.MODEL_DISTRIBUTED, 1, SERVER))
    _, b = kd.fresh_round()
    assert not np.array_equal(a.data[1], b.data[1])
