"""Simplified CoAP message model: sizes, confirmable retransmission, proxying.

Message sizes are synthetic (fixed header + token + per-option overhead +
payload length), good enough for bandwidth and energy modeling but not
wire-accurate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace


class EventAfterFinal(Exception):
    """A transmission event arrived after the exchange already concluded."""


class MissingProxyUri(Exception):
    pass


class UnknownOrigin(Exception):
    pass


FIXED_HEADER = 4
OPTION_OVERHEAD = 2

DEFAULT_BASE_TIMEOUT_MS = 2000
DEFAULT_RETRANSMIT_LIMIT = 4


@dataclass
class SimMessage:
    src: str
    dst: str
    mtype: str = "CON"  # CON | NON | ACK | RST
    mid: int = 0
    token: bytes = b""
    code: str = "GET"  # request method, response class like "2.05", or "EMPTY"
    proxy_uri: str | None = None
    echo: bytes | None = None
    oscore_kid: bytes | None = None
    oscore_piv: int | None = None
    payload_len: int = 0
    # Simulation-level content; not part of the size formula beyond payload_len.
    payload_kind: str | None = None
    payload: dict = field(default_factory=dict)
    sealed: bytes | None = None

    def copy(self, **changes) -> "SimMessage":
        msg = replace(self, **changes)
        msg.payload = dict(self.payload) if "payload" not in changes else msg.payload
        return msg

    @property
    def is_response(self) -> bool:
        return self.code[:1] in ("2", "4", "5")

    @property
    def is_protected(self) -> bool:
        return self.oscore_kid is not None


def piv_len(piv: int) -> int:
    return max(1, (piv.bit_length() + 7) // 8)


def message_size(msg: SimMessage) -> int:
    """Synthetic on-wire size used for bandwidth and energy accounting."""
    size = FIXED_HEADER + len(msg.token)
    if msg.proxy_uri is not None:
        size += OPTION_OVERHEAD + len(msg.proxy_uri)
    if msg.echo is not None:
        size += OPTION_OVERHEAD + len(msg.echo)
    if msg.oscore_kid is not None:
        size += OPTION_OVERHEAD + len(msg.oscore_kid) + piv_len(msg.oscore_piv or 0)
    size += msg.payload_len
    return size


def serialize_inner(msg: SimMessage) -> bytes:
    """Deterministic byte encoding of the protected parts of a message."""
    doc = {
        "code": msg.code,
        "payload_kind": msg.payload_kind,
        "payload": {k: _enc(v) for k, v in sorted(msg.payload.items())},
        "payload_len": msg.payload_len,
        "echo": msg.echo.hex() if msg.echo is not None else None,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def deserialize_inner(data: bytes, template: SimMessage) -> SimMessage:
    doc = json.loads(data.decode())
    return template.copy(
        code=doc["code"],
        payload_kind=doc["payload_kind"],
        payload={k: _dec(v) for k, v in doc["payload"].items()},
        payload_len=doc["payload_len"],
        echo=bytes.fromhex(doc["echo"]) if doc["echo"] is not None else None,
    )


def _enc(v):
    if isinstance(v, bytes):
        return {"__b": v.hex()}
    return v


def _dec(v):
    if isinstance(v, dict) and "__b" in v:
        return bytes.fromhex(v["__b"])
    return v


# --- Confirmable retransmission state machine ---------------------------

PENDING = "pending"
COMPLETED = "completed"
TIMED_OUT = "timed_out"


@dataclass
class TxState:
    base_timeout_ms: int = DEFAULT_BASE_TIMEOUT_MS
    retransmit_limit: int = DEFAULT_RETRANSMIT_LIMIT
    attempts: int = 0
    next_timeout_ms: int = 0
    outcome: str = PENDING
    final_at: int | None = None

    def __post_init__(self):
        if self.next_timeout_ms == 0:
            self.next_timeout_ms = self.base_timeout_ms


def tx_step(state: TxState, now: int, event: str) -> str:
    """Advance a confirmable exchange. Events: "sent", "ack", "timer".

    Returns the action to take: "retransmit", "give_up", "done" or "none".
    Timeouts double per attempt; with base b and limit n the k-th
    transmission happens at b*(2^(k-1)-1) and give-up at b*(2^(n+1)-2).
    """
    if state.outcome != PENDING:
        raise EventAfterFinal(f"event {event!r} after outcome {state.outcome!r}")
    if event == "sent":
        state.attempts += 1
        return "none"
    if event == "ack":
        state.outcome = COMPLETED
        state.final_at = now
        return "done"
    if event == "timer":
        if state.attempts <= state.retransmit_limit:
            state.attempts += 1
            state.next_timeout_ms *= 2
            return "retransmit"
        state.outcome = TIMED_OUT
        state.final_at = now
        return "give_up"
    raise ValueError(f"unknown tx event {event!r}")


def give_up_time_ms(base_timeout_ms: int, retransmit_limit: int) -> int:
    """Total time until give-up: base * (2^(limit+1) - 1).

    Sum of the doubling timeout series b + 2b + ... + 2^limit * b.
    """
    return base_timeout_ms * ((1 << (retransmit_limit + 1)) - 1)


# --- Proxy rewriting -----------------------------------------------------


class ProxyTable:
    """Bijective token/mid remapping for a proxy's outstanding exchanges."""

    def __init__(self, proxy_address: str):
        self.proxy_address = proxy_address
        self._next_token = 1
        self._next_mid = 1
        # upstream token -> (client src, client token, client mid)
        self.out: dict[bytes, tuple[str, bytes, int]] = {}

    def new_token(self) -> bytes:
        t = self._next_token.to_bytes(2, "big")
        self._next_token = (self._next_token + 1) & 0xFFFF
        return t

    def new_mid(self) -> int:
        m = self._next_mid
        self._next_mid = (self._next_mid + 1) & 0xFFFF
        return m

    def rewrite_request(self, msg: SimMessage, mode: str, origin: str) -> SimMessage:
        """Rewrite a client request for forwarding to `origin` (the server).

        Forward mode consumes the Proxy-Uri option; reverse mode requires the
        request to be addressed to the proxy itself. The OSCORE header and
        payload pass through untouched.
        """
        if mode == "forward":
            if msg.proxy_uri is None:
                raise MissingProxyUri("forward proxying requires Proxy-Uri")
        elif mode == "reverse":
            if msg.dst != self.proxy_address:
                raise UnknownOrigin(f"reverse proxy got dst {msg.dst!r}")
            if origin is None:
                raise UnknownOrigin("no origin server registered")
        else:
            raise ValueError(f"unknown proxy mode {mode!r}")
        token = self.new_token()
        self.out[token] = (msg.src, msg.token, msg.mid)
        out = msg.copy(src=self.proxy_address, dst=origin, token=token,
                       mid=self.new_mid(), proxy_uri=None)
        return out

    def rewrite_response(self, msg: SimMessage) -> SimMessage | None:
        """Map a server response back to the original client exchange."""
        entry = self.out.pop(msg.token, None)
        if entry is None:
            return None
        client_src, client_token, client_mid = entry
        return msg.copy(src=self.proxy_address, dst=client_src,
                        token=client_token, mid=client_mid)


def proxy_rewrite(table: ProxyTable, msg: SimMessage, mode: str,
                  origin: str) -> SimMessage:
    return table.rewrite_request(msg, mode, origin)
