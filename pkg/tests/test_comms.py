import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from obdecsim.belief import LocalObservation
from obdecsim.comms import (Channel, ChannelConfig, Delivery, Inbox, SharedDetection, SharedMessage,
                            channel_trial, encode, integrate)
from obdecsim.dynamics import Detection, UavState

NOTHING = Detection(False, None, None)


def local(detection=NOTHING, new=None):
    return LocalObservation(detection, (4.0,) * 5, False, 3, newly_explored=new)


def msg(sender, seq, cells=(), latest=None, det=None, z=1.0):
    return SharedMessage(sender, seq, det, latest, frozenset(cells), z)


# -- encode ---------------------------------------------------------------------


def test_encode_nothing_new():
    m = encode(local(), [1, 2, 3], UavState(1, 0.0, 0.0, 1.2), 7)
    assert m.detection is None and m.latest_explored is None
    assert m.all_explored == {1, 2, 3} and m.altitude == 1.2 and m.seq == 7 and m.sender == 1


def test_encode_detection():
    d = Detection(True, (0.0, 0.0), (3.5, 7.5))
    m = encode(local(d), [], UavState(2, 3.4, 7.4, 1.0), 0)
    assert m.detection == SharedDetection(True, (3.5, 7.5), 2)


def test_encode_new_cell_is_in_ledger():
    m = encode(local(new=17), [4], UavState(0, 0.0, 0.0, 1.0), 0)
    assert m.latest_explored == (17, 0) and 17 in m.all_explored


@given(st.sets(st.integers(0, 200)), st.one_of(st.none(), st.integers(0, 200)))
def test_encode_latest_always_in_all(ledger, new):
    m = encode(local(new=new), ledger, UavState(0, 0.0, 0.0, 1.0), 0)
    if m.latest_explored is not None:
        assert m.latest_explored[0] in m.all_explored
    assert set(ledger) <= m.all_explored


def test_wire_round_trip():
    m = msg(2, 5, [1, 9], (9, 2), SharedDetection(True, (3.5, 7.5), 2), 1.7)
    assert SharedMessage.from_bytes(m.to_bytes()) == m
    assert SharedMessage.from_dict(json.loads(json.dumps(m.to_dict()))) == m
    with pytest.raises(ValueError):
        SharedMessage.from_bytes(m.to_bytes()[:-1])


# -- channel --------------------------------------------------------------------


def test_perfect_channel_delivers_exact_copies_next_epoch():
    ch = Channel(ChannelConfig.perfect(), 10, np.random.default_rng(0))
    m = msg(0, 0, [1], (1, 0))
    ch.transmit(m, [0, 1, 2], step=4)
    got = ch.collect(5)
    assert sorted(got) == [1, 2]  # never the sender
    assert all(d[0].message == m and not d[0].corrupted for d in got.values())
    assert ch.collect(6) == {}


def test_delay_steps():
    ch = Channel(ChannelConfig(0.0, 0.0, 3), 10, np.random.default_rng(0))
    ch.transmit(msg(0, 0), [1], step=0)
    assert ch.collect(1) == {} and ch.collect(3) == {}
    assert len(ch.collect(4)[1]) == 1


def test_full_loss():
    ch = Channel(ChannelConfig(1.0, 0.0, 0), 10, np.random.default_rng(0))
    assert ch.transmit(msg(0, 0), [1, 2, 3], step=0) == []


def test_delivery_fraction_binomial():
    # 1e4 copies at p = 0.7: sd 0.0046, so 0.015 is a 3-sigma band
    ch = Channel(ChannelConfig(0.3, 0.0, 0), 10, np.random.default_rng(12))
    n = sum(len(ch.transmit(msg(0, k), [1], step=k)) for k in range(10_000))
    assert n / 10_000 == pytest.approx(0.7, abs=0.015)


def test_corruption_only_touches_latest_cell():
    ch = Channel(ChannelConfig(0.0, 1.0, 0), 50, np.random.default_rng(3))
    m = msg(0, 0, [1, 2], (2, 0))
    d = ch.transmit(m, [1], step=0)[0]
    assert d.corrupted and d.message.all_explored == m.all_explored
    assert d.message.latest_explored[1] == 0 and 0 <= d.message.latest_explored[0] < 50
    # nothing to corrupt without a latest cell
    assert not ch.transmit(msg(0, 1, [1]), [1], step=1)[0].corrupted


def test_trace_line_is_json():
    d = Delivery(3, 1, msg(0, 2, [4], (4, 0)), corrupted=False)
    rec = json.loads(d.trace_line())
    assert rec["step"] == 3 and rec["sender"] == 0 and rec["receiver"] == 1 and rec["seq"] == 2


# -- integrate -----------------------------------------------------------------------


def test_single_message_confirms_nothing():
    inbox = Inbox()
    r = integrate(inbox, [msg(0, 0, [5], (5, 0))])
    assert r.new_cells == [] and r.detection is None and r.peer_altitudes == {0: 1.0}


def test_two_messages_confirm_shared_cells():
    inbox = Inbox()
    r = integrate(inbox, [msg(0, 0, [5], (5, 0)), msg(0, 1, [5, 6], (6, 0))])
    assert r.new_cells == [(5, 0)]
    # 6 is confirmed once the next message repeats it
    r = integrate(inbox, [msg(0, 2, [5, 6])])
    assert r.new_cells == [(6, 0)]


def test_integrate_is_idempotent_on_replays():
    inbox = Inbox()
    batch = [msg(1, 0, [2, 3]), msg(1, 1, [2, 3])]
    first = integrate(inbox, batch)
    again = integrate(inbox, batch)
    assert sorted(c for c, _ in first.new_cells) == [2, 3]
    assert again.new_cells == [] and again.rejected == 2


def test_stale_sequence_rejected():
    inbox = Inbox()
    integrate(inbox, [msg(0, 5, [1])])
    r = integrate(inbox, [msg(0, 3, [1])])
    assert r.rejected == 1 and r.new_cells == []


def test_detection_needs_two_agreeing_reports():
    inbox = Inbox()
    a = SharedDetection(True, (3.5, 7.5), 2)
    far = SharedDetection(True, (5.0, 7.5), 2)
    near = SharedDetection(True, (3.7, 7.4), 2)
    assert integrate(inbox, [msg(2, 0, det=a), msg(2, 1, det=far)]).detection is None
    r = integrate(inbox, [msg(2, 2, det=near)])
    assert r.detection is None  # far and near disagree
    r = integrate(inbox, [msg(2, 3, det=near)])
    assert r.detection is not None and r.detection.position == pytest.approx((3.7, 7.4))
    assert inbox.confirmed_detection == r.detection


def test_senders_are_not_mixed():
    inbox = Inbox()
    r = integrate(inbox, [msg(0, 0, [9]), msg(1, 0, [9])])
    assert r.new_cells == []


@given(st.lists(st.tuples(st.integers(0, 2), st.sets(st.integers(0, 30), max_size=6)),
                max_size=30))
def test_confirmed_cells_were_seen(stream):
    inbox = Inbox()
    seqs = {}
    delivered: set[int] = set()
    for sender, cells in stream:
        seqs[sender] = seqs.get(sender, -1) + 1
        integrate(inbox, [msg(sender, seqs[sender], cells)])
        delivered |= cells
    assert inbox.confirmed_cells <= delivered


# -- robustness harness ------------------------------------------------------------------


def test_no_fabrication_without_corruption():
    for seed in range(50):
        r = channel_trial(ChannelConfig(0.3, 0.0, 0), 70, seed)
        assert r.spurious == 0 and r.corrupted == 0 and r.confirmed > 0


def test_harness_sees_corruption_that_a_naive_rule_would_accept():
    # same channel, but accepting every delivered latest cell outright
    ch = Channel(ChannelConfig(0.3, 0.05, 0), 70, np.random.default_rng(1))
    truth, naive_spurious = set(), 0
    for step in range(2000):
        cell = step % 10  # 60 of the 70 cells are never explored
        truth.add(cell)
        for d in ch.transmit(msg(0, step, sorted(truth), (cell, 0)), [1], step):
            naive_spurious += d.message.latest_explored[0] not in truth
    assert naive_spurious > 0


def test_trial_is_deterministic():
    cfg = ChannelConfig(0.3, 0.05, 0)
    assert channel_trial(cfg, 70, 9) == channel_trial(cfg, 70, 9)


def test_channel_config_validation():
    with pytest.raises(ValueError):
        ChannelConfig(1.5, 0.0, 0)
    with pytest.raises(ValueError):
        ChannelConfig(0.0, 0.0, -1)
