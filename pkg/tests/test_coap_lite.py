"""Message sizing, confirmable retransmission schedule, proxy rewriting."""

import pytest
from hypothesis import given, strategies as st

from guardsim.coap_lite import (EventAfterFinal, MissingProxyUri, ProxyTable,
                                SimMessage, TxState, UnknownOrigin,
                                deserialize_inner, give_up_time_ms,
                                message_size, serialize_inner, tx_step)


# --- message size -------------------------------------------------------------

def test_size_header_only():
    msg = SimMessage(src="a", dst="b", mtype="ACK", code="EMPTY")
    assert message_size(msg) == 4


def test_size_formula_example():
    # 4 header + 2 token + (2 + 8) echo option + 10 payload = 26
    msg = SimMessage(src="a", dst="b", token=b"\x01\x02", echo=bytes(8),
                     payload_len=10)
    assert message_size(msg) == 26


def test_size_option_monotonicity():
    base = SimMessage(src="a", dst="b", token=b"\x01", payload_len=5)
    with_opts = [
        base.copy(echo=bytes(8)),
        base.copy(proxy_uri="coap://srv"),
        base.copy(oscore_kid=b"\x07", oscore_piv=3),
    ]
    for msg in with_opts:
        assert message_size(msg) > message_size(base)


@given(st.integers(0, 100), st.integers(0, 8))
def test_size_grows_with_payload_and_token(payload, token_len):
    msg = SimMessage(src="a", dst="b", token=bytes(token_len),
                     payload_len=payload)
    assert message_size(msg) == 4 + token_len + payload


# --- retransmission schedule ----------------------------------------------------

def brute_force_schedule(base_ms, limit):
    """Independent timer simulation: transmission times and give-up time."""
    t, timeout = 0, base_ms
    times = [0]
    for _ in range(limit):
        t += timeout
        timeout *= 2
        times.append(t)
    return times, t + timeout


def drive_tx(base_ms, limit):
    """Run the state machine against its own timers; return observed times."""
    state = TxState(base_timeout_ms=base_ms, retransmit_limit=limit)
    now = 0
    times = [0]
    tx_step(state, now, "sent")
    while True:
        now += state.next_timeout_ms
        action = tx_step(state, now, "timer")
        if action == "retransmit":
            times.append(now)
        else:
            return times, now


def test_default_schedule_matches_brute_force():
    # base 2 s, limit 4: transmissions at 0/2/6/14/30 s, give-up at 62 s.
    times, give_up = drive_tx(2000, 4)
    assert times == [0, 2000, 6000, 14_000, 30_000]
    assert give_up == 62_000
    assert brute_force_schedule(2000, 4) == (times, give_up)
    assert give_up_time_ms(2000, 4) == 62_000


@given(st.integers(100, 5000), st.integers(0, 6))
def test_schedule_matches_brute_force_any_params(base_ms, limit):
    assert drive_tx(base_ms, limit) == brute_force_schedule(base_ms, limit)
    assert give_up_time_ms(base_ms, limit) == brute_force_schedule(base_ms, limit)[1]


def test_ack_completes_without_retransmission():
    state = TxState()
    tx_step(state, 0, "sent")
    action = tx_step(state, 1, "ack")
    assert action == "done"
    assert state.outcome == "completed"
    assert state.final_at == 1
    assert state.attempts == 1


def test_event_after_final_raises():
    state = TxState(base_timeout_ms=10, retransmit_limit=0)
    tx_step(state, 0, "sent")
    assert tx_step(state, 10, "timer") == "give_up"
    assert state.outcome == "timed_out"
    with pytest.raises(EventAfterFinal):
        tx_step(state, 11, "ack")


def test_attempts_bounded_by_limit():
    state = TxState(base_timeout_ms=100, retransmit_limit=3)
    tx_step(state, 0, "sent")
    now = 0
    while state.outcome == "pending":
        now += state.next_timeout_ms
        tx_step(state, now, "timer")
    assert state.attempts <= state.retransmit_limit + 1


# --- proxy rewriting ---------------------------------------------------------------

def test_forward_rewrite_strips_proxy_uri():
    table = ProxyTable("proxy")
    msg = SimMessage(src="cli", dst="proxy", token=b"\xaa", mid=7,
                     proxy_uri="coap://srv/r")
    out = table.rewrite_request(msg, "forward", "srv")
    assert out.dst == "srv"
    assert out.src == "proxy"
    assert out.proxy_uri is None


def test_forward_without_proxy_uri_raises():
    table = ProxyTable("proxy")
    msg = SimMessage(src="cli", dst="proxy")
    with pytest.raises(MissingProxyUri):
        table.rewrite_request(msg, "forward", "srv")


def test_reverse_requires_proxy_destination():
    table = ProxyTable("proxy")
    msg = SimMessage(src="cli", dst="elsewhere")
    with pytest.raises(UnknownOrigin):
        table.rewrite_request(msg, "reverse", "srv")


def test_reverse_round_trip_identity():
    table = ProxyTable("proxy")
    req = SimMessage(src="cli", dst="proxy", token=b"\x11\x22", mid=42)
    up = table.rewrite_request(req, "reverse", "srv")
    resp = SimMessage(src="srv", dst="proxy", mtype="ACK", mid=up.mid,
                      token=up.token, code="2.05")
    down = table.rewrite_response(resp)
    assert (down.dst, down.token, down.mid) == ("cli", b"\x11\x22", 42)
    assert down.src == "proxy"


def test_rewrite_preserves_oscore_header_and_payload():
    table = ProxyTable("proxy")
    req = SimMessage(src="cli", dst="proxy", token=b"\x01",
                     oscore_kid=b"\x07", oscore_piv=9, payload_len=33,
                     sealed=b"sealed-bytes")
    up = table.rewrite_request(req, "reverse", "srv")
    assert up.oscore_kid == b"\x07"
    assert up.oscore_piv == 9
    assert up.payload_len == 33
    assert up.sealed == b"sealed-bytes"


def test_token_remap_injective():
    table = ProxyTable("proxy")
    tokens = set()
    for i in range(200):
        req = SimMessage(src=f"cli{i}", dst="proxy", token=b"\x01", mid=i)
        up = table.rewrite_request(req, "reverse", "srv")
        tokens.add(up.token)
    assert len(tokens) == 200


def test_unknown_response_token_unmapped():
    table = ProxyTable("proxy")
    resp = SimMessage(src="srv", dst="proxy", mtype="ACK", token=b"\xff\xff",
                      code="2.05")
    assert table.rewrite_response(resp) is None


# --- inner serialization ----------------------------------------------------------

def test_inner_serialization_round_trip():
    inner = SimMessage(src="cli", dst="srv", code="GET",
                       payload_kind="app_request",
                       payload={"n": 3, "blob": b"\x01\x02"},
                       payload_len=8, echo=b"\xaa" * 8)
    data = serialize_inner(inner)
    back = deserialize_inner(data, SimMessage(src="cli", dst="srv"))
    assert back.code == "GET"
    assert back.payload == {"n": 3, "blob": b"\x01\x02"}
    assert back.payload_len == 8
    assert back.echo == b"\xaa" * 8


def test_inner_serialization_deterministic():
    inner = SimMessage(src="a", dst="b", payload={"x": 1, "y": b"z"})
    assert serialize_inner(inner) == serialize_inner(inner.copy())
