"""Authorization server and self-contained access tokens.

Tokens are bound to a subject key and an audience, carry an integrity tag
under the AS/audience shared key, and verify without any AS round-trip.
The bound key travels inside the token sealed under that same key, so an
on-path observer can read the claims but cannot extract the key.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .seclayer import aead_open, aead_seal, AuthError, derive_key, fnv1a64

TOKEN_LIFETIME_MS = 3_600_000


class Denied(Exception):
    pass


@dataclass
class InvalidToken(Exception):
    reason: str  # "bad_tag" | "wrong_audience" | "expired"

    def __str__(self):
        return self.reason


@dataclass
class AccessToken:
    audience: str
    subject_key_id: str
    scope: str
    issued_at: int  # ms
    expiry: int  # ms
    sealed_key: bytes  # subject's bound key, sealed under the audience key
    guard_bindings: dict | None = None
    tag: bytes = b""

    def claims_bytes(self) -> bytes:
        gb = ""
        if self.guard_bindings:
            gb = "|".join(f"{k}={v}" for k, v in sorted(self.guard_bindings.items()))
        return "|".join([
            self.audience, self.subject_key_id, self.scope,
            str(self.issued_at), str(self.expiry), self.sealed_key.hex(), gb,
        ]).encode()

    def to_wire(self) -> dict:
        """Observable wire form; tokens are not secret in this model."""
        return {
            "audience": self.audience,
            "subject_key_id": self.subject_key_id,
            "scope": self.scope,
            "issued_at": self.issued_at,
            "expiry": self.expiry,
            "sealed_key": self.sealed_key,
            "guard_bindings": dict(self.guard_bindings) if self.guard_bindings else None,
            "tag": self.tag,
        }

    @classmethod
    def from_wire(cls, doc: dict) -> "AccessToken":
        return cls(**doc)


def _token_tag(audience_key: bytes, token: AccessToken) -> bytes:
    return fnv1a64(audience_key + token.claims_bytes()).to_bytes(8, "big")


@dataclass
class AsRegistry:
    """Who the AS knows: subject keys, their audiences, and audience tag keys."""

    known_subjects: dict[str, dict] = field(default_factory=dict)
    audience_keys: dict[str, bytes] = field(default_factory=dict)

    def add_subject(self, key_id: str, key: bytes, audiences: set[str]) -> None:
        self.known_subjects[key_id] = {"key": key, "audiences": set(audiences)}

    def add_audience(self, audience: str, key: bytes) -> None:
        self.audience_keys[audience] = key

    def grant(self, key_id: str, audience: str) -> None:
        if key_id in self.known_subjects:
            self.known_subjects[key_id]["audiences"].add(audience)


def issue_token(registry: AsRegistry, request: dict, now: int,
                lifetime_ms: int = TOKEN_LIFETIME_MS) -> AccessToken:
    """Issue a token for (subject, audience), or raise Denied.

    When the request names guard bindings, the authorization is associated
    with the client guard's key instead: the issued token's subject becomes
    the client guard key id.
    """
    subject = request["subject_key_id"]
    audience = request["audience"]
    guard_bindings = request.get("guard_bindings")
    if guard_bindings:
        subject = guard_bindings["client_guard_key_id"]
    entry = registry.known_subjects.get(subject)
    if entry is None:
        raise Denied(f"unknown subject {subject!r}")
    if audience not in entry["audiences"]:
        raise Denied(f"subject {subject!r} not authorized for {audience!r}")
    audience_key = registry.audience_keys.get(audience)
    if audience_key is None:
        raise Denied(f"no key registered for audience {audience!r}")
    sealed_key = aead_seal(audience_key, b"tokenkey", b"", entry["key"])
    token = AccessToken(
        audience=audience,
        subject_key_id=subject,
        scope=request.get("scope", ""),
        issued_at=now,
        expiry=now + lifetime_ms,
        sealed_key=sealed_key,
        guard_bindings=dict(guard_bindings) if guard_bindings else None,
    )
    token.tag = _token_tag(audience_key, token)
    return token


def verify_token(token: AccessToken, audience_key: bytes, audience: str,
                 now: int) -> dict:
    """Return the claims iff tag, audience and expiry all check out.

    Expiry is exclusive: a token presented exactly at its expiry time is
    rejected. Verification is purely local (self-contained tokens).
    """
    if _token_tag(audience_key, token) != token.tag:
        raise InvalidToken("bad_tag")
    if token.audience != audience:
        raise InvalidToken("wrong_audience")
    if now >= token.expiry:
        raise InvalidToken("expired")
    return {
        "audience": token.audience,
        "subject_key_id": token.subject_key_id,
        "scope": token.scope,
        "expiry": token.expiry,
        "guard_bindings": token.guard_bindings,
    }


def unseal_bound_key(token: AccessToken, audience_key: bytes) -> bytes:
    return aead_open(audience_key, b"tokenkey", b"", token.sealed_key)


def ace_context_master(bound_key: bytes, nonce_client: bytes,
                       nonce_server: bytes) -> bytes:
    """Master secret for the token-to-context exchange.

    A party that replays a token without holding the bound key derives a
    different master, so its first protected message fails verification
    rather than the exchange itself.
    """
    return derive_key(bound_key + nonce_client + nonce_server, b"ace")


def ace_kid_pair(nonce_client: bytes, nonce_server: bytes,
                 kid_len: int = 1) -> tuple[bytes, bytes]:
    """(client sender id, server sender id), distinct by construction."""
    a = fnv1a64(b"ackid1" + nonce_client + nonce_server).to_bytes(8, "big")[-kid_len:]
    b = fnv1a64(b"ackid2" + nonce_client + nonce_server).to_bytes(8, "big")[-kid_len:]
    if a == b:
        b = bytes([(b[0] + 1) & 0xFF]) + b[1:]
    return a, b
