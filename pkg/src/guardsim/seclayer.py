"""Simulation-grade security layer.

A deterministic FNV-1a-based authenticated cipher stands in for AES-CCM;
it is explicitly insecure and exists only so that protection, tampering and
replay behave faithfully inside the simulator. The interface is small
enough that a real AEAD could be dropped in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .coap_lite import SimMessage, deserialize_inner, serialize_inner

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1

TAG_LEN = 8
DEFAULT_REPLAY_WINDOW = 32
DEFAULT_MAX_SEQ = 1 << 23


class AuthError(Exception):
    pass


class ReplayError(Exception):
    pass


class UnknownKid(Exception):
    pass


class SeqExhausted(Exception):
    pass


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


def _keystream(key: bytes, nonce: bytes, length: int) -> bytes:
    out = bytearray()
    block = 0
    while len(out) < length:
        out += fnv1a64(key + nonce + block.to_bytes(8, "big")).to_bytes(8, "big")
        block += 1
    return bytes(out[:length])


def aead_seal(key: bytes, nonce: bytes, aad: bytes, plaintext: bytes) -> bytes:
    """XOR-keystream encryption plus a 64-bit keyed tag over the plaintext."""
    ks = _keystream(key, nonce, len(plaintext))
    ct = bytes(p ^ k for p, k in zip(plaintext, ks))
    tag = fnv1a64(key + nonce + aad + plaintext).to_bytes(TAG_LEN, "big")
    return ct + tag


def aead_open(key: bytes, nonce: bytes, aad: bytes, sealed: bytes) -> bytes:
    if len(sealed) < TAG_LEN:
        raise AuthError("sealed input shorter than tag")
    ct, tag = sealed[:-TAG_LEN], sealed[-TAG_LEN:]
    ks = _keystream(key, nonce, len(ct))
    pt = bytes(c ^ k for c, k in zip(ct, ks))
    expect = fnv1a64(key + nonce + aad + pt).to_bytes(TAG_LEN, "big")
    if expect != tag:
        raise AuthError("tag mismatch")
    return pt


def derive_key(master: bytes, info: bytes) -> bytes:
    """16-byte subkey from a master secret (two domain-separated FNV passes)."""
    a = fnv1a64(b"k1" + master + info).to_bytes(8, "big")
    b = fnv1a64(b"k2" + master + info).to_bytes(8, "big")
    return a + b


# --- Anti-replay sliding window ------------------------------------------


@dataclass
class ReplayWindow:
    """Bitmap sliding window over the highest received sequence number."""

    size: int = DEFAULT_REPLAY_WINDOW
    highest: int = -1
    bitmap: int = 0

    def check(self, seq: int) -> bool:
        """True iff `seq` would be accepted, without mutating the window."""
        if self.highest < 0:
            return True
        if seq > self.highest:
            return True
        diff = self.highest - seq
        if diff >= self.size:
            return False
        return not (self.bitmap >> diff) & 1

    def accept(self, seq: int) -> bool:
        """Check and, when acceptable, mark `seq` and slide the window."""
        if not self.check(seq):
            return False
        if seq > self.highest:
            shift = seq - self.highest if self.highest >= 0 else self.size
            if shift >= self.size:
                self.bitmap = 1
            else:
                self.bitmap = ((self.bitmap << shift) | 1) & ((1 << self.size) - 1)
            self.highest = seq
        else:
            self.bitmap |= 1 << (self.highest - seq)
        return True


def replay_window_check(window: ReplayWindow, seq: int) -> str:
    """Accept (and mark) or Reject a sequence number."""
    return "accept" if window.accept(seq) else "reject"


# --- OSCORE-lite context ---------------------------------------------------


@dataclass
class SecurityContext:
    sender_id: bytes
    recipient_id: bytes
    master_key: bytes
    sender_seq: int = 0
    replay_window: ReplayWindow = field(default_factory=ReplayWindow)
    max_seq: int = DEFAULT_MAX_SEQ

    @property
    def sender_key(self) -> bytes:
        return derive_key(self.master_key, b"key" + self.sender_id)

    @property
    def recipient_key(self) -> bytes:
        return derive_key(self.master_key, b"key" + self.recipient_id)

    def mirrored(self) -> "SecurityContext":
        return SecurityContext(sender_id=self.recipient_id,
                               recipient_id=self.sender_id,
                               master_key=self.master_key,
                               replay_window=ReplayWindow(self.replay_window.size))


def _nonce(kid: bytes, piv: int) -> bytes:
    return kid + piv.to_bytes(5, "big")


def oscore_protect(ctx: SecurityContext, inner: SimMessage,
                   request_piv: int | None = None) -> SimMessage:
    """Protect `inner`, exposing only kid and piv to on-path observers.

    Requests consume the context's sender sequence number; responses reuse
    the request's piv and bind to it through the associated data, giving the
    request/response binding that proxies can rely on.
    """
    plaintext = serialize_inner(inner)
    if request_piv is None:
        if ctx.sender_seq >= ctx.max_seq:
            raise SeqExhausted(f"sender sequence at limit {ctx.max_seq}")
        piv = ctx.sender_seq
        ctx.sender_seq += 1
        aad = b"req"
    else:
        piv = request_piv
        aad = b"resp" + request_piv.to_bytes(5, "big")
    sealed = aead_seal(ctx.sender_key, _nonce(ctx.sender_id, piv), aad, plaintext)
    return inner.copy(
        code="POST" if request_piv is None else "2.04",
        oscore_kid=ctx.sender_id,
        oscore_piv=piv,
        payload_len=inner_payload_size(inner),
        payload={},
        payload_kind="oscore",
        echo=None,
        sealed=sealed,
    )


def inner_payload_size(inner: SimMessage) -> int:
    """Declared outer payload size: inner size plus the authentication tag."""
    from .coap_lite import message_size
    return message_size(inner) + TAG_LEN


def oscore_unprotect(ctx: SecurityContext, msg: SimMessage,
                     request_piv: int | None = None) -> SimMessage:
    """Verify and decrypt a protected message.

    Requests are additionally checked against the replay window; the window
    only advances when the tag verifies.
    """
    if msg.oscore_kid is None or msg.sealed is None:
        raise UnknownKid("message carries no OSCORE header")
    if msg.oscore_kid != ctx.recipient_id:
        raise UnknownKid(f"kid {msg.oscore_kid.hex()} not known to this context")
    piv = msg.oscore_piv or 0
    if request_piv is None:
        aad = b"req"
        if not ctx.replay_window.check(piv):
            raise ReplayError(f"piv {piv} replayed or below window")
    else:
        aad = b"resp" + request_piv.to_bytes(5, "big")
    plaintext = aead_open(ctx.recipient_key, _nonce(msg.oscore_kid, piv), aad,
                          msg.sealed)
    if request_piv is None:
        ctx.replay_window.accept(piv)
    return deserialize_inner(plaintext, msg.copy(oscore_kid=None, oscore_piv=None,
                                                 sealed=None))


# --- Key-exchange derivation ----------------------------------------------

EDHOC_MSG_SIZES = (40, 120, 90)


@dataclass
class EdhocSession:
    """Three-message handshake state for one side."""

    role: str  # "initiator" | "responder"
    ephemeral: bytes
    step: int = 0
    peer_ephemeral: bytes | None = None
    derived: SecurityContext | None = None


def edhoc_master(ephemeral_a: bytes, ephemeral_b: bytes) -> bytes:
    """Shared secret from both ephemerals (order-independent mix)."""
    lo, hi = sorted((ephemeral_a, ephemeral_b))
    return derive_key(lo + hi, b"edhoc")


def edhoc_kid(ephemeral: bytes, kid_len: int = 1) -> bytes:
    return fnv1a64(b"kid" + ephemeral).to_bytes(8, "big")[-kid_len:]


def edhoc_derive(session: EdhocSession, window: int = DEFAULT_REPLAY_WINDOW,
                 kid_len: int = 1) -> SecurityContext:
    """Derive this side's context once both ephemerals are known.

    The two sides end up with mirrored contexts: each party's sender id is
    the other's recipient id. A deterministic tiebreak keeps the two kids
    distinct even for 1-byte identifiers.
    """
    assert session.peer_ephemeral is not None
    master = edhoc_master(session.ephemeral, session.peer_ephemeral)
    lo, hi = sorted((session.ephemeral, session.peer_ephemeral))
    kid_lo = edhoc_kid(lo, kid_len)
    kid_hi = edhoc_kid(hi, kid_len)
    if kid_lo == kid_hi:
        kid_hi = bytes([(kid_hi[0] + 1) & 0xFF]) + kid_hi[1:]
    own_is_lo = session.ephemeral == lo
    sender_id = kid_lo if own_is_lo else kid_hi
    recipient_id = kid_hi if own_is_lo else kid_lo
    ctx = SecurityContext(sender_id=sender_id, recipient_id=recipient_id,
                          master_key=master,
                          replay_window=ReplayWindow(window))
    session.derived = ctx
    session.step = 3
    return ctx


def edhoc_confirmation(master: bytes) -> bytes:
    """Key-confirmation value carried in the third handshake message."""
    return fnv1a64(b"confirm" + master).to_bytes(8, "big")
