"""Behavioral node models: client, server, routers/guards, AS, rendezvous,
and the four attacker models.

Addresses are plain strings; routing is a static prefix table per node.
Topology (built by the harness):

    cli* -- rtrC -- (internet) -- rtrS -- srv
                      |    |
                     rd    as        atk (attached at rtrS)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import ace as ace_mod
from .coap_lite import (SimMessage, TxState, message_size, tx_step,
                        ProxyTable)
from .netsim import EnergyBudget, Frame, World
from . import seclayer
from .seclayer import (AuthError, ReplayError, SecurityContext, UnknownKid,
                       aead_seal, aead_open, EDHOC_MSG_SIZES)
from .guard import (GuardConfig, GuardState, TUNNEL)

REKEY_THRESHOLD = 3


@dataclass
class RendezvousEntry:
    name: str
    address: str
    proxy_address: str | None = None
    server_guard_key_id: str | None = None
    as_hint: str | None = None

    def to_doc(self) -> dict:
        return {"name": self.name, "address": self.address,
                "proxy_address": self.proxy_address,
                "server_guard_key_id": self.server_guard_key_id,
                "as_hint": self.as_hint}

    @classmethod
    def from_doc(cls, doc: dict) -> "RendezvousEntry":
        return cls(**doc)

    @property
    def published_address(self) -> str:
        return self.proxy_address or self.address


@dataclass
class AttackerModel:
    kind: str  # blind_flood | distributed_flood | impersonator | on_path
    rate: float = 20.0  # msgs/s (per source for distributed_flood)
    n_sources: int = 50
    start_ms: int = 0
    stop_ms: int = 10**12
    knows_kid: bool = False
    knows_client: bool = False
    corrupt_budget: int = 4


@dataclass
class Interaction:
    kind: str  # "key_exchange" | "request"
    t_start: int
    counted: bool = True
    t_end: int | None = None
    retransmissions: int = 0
    outcome: str | None = None  # "completed" | "timed_out"

    def complete(self, now: int) -> None:
        if self.outcome is None:
            self.outcome = "completed"
            self.t_end = now

    def time_out(self, now: int) -> None:
        if self.outcome is None:
            self.outcome = "timed_out"
            self.t_end = now

    @property
    def latency_ms(self) -> int | None:
        return None if self.t_end is None else self.t_end - self.t_start


def serialize_full(msg: SimMessage) -> bytes:
    """Full deterministic encoding of a message, used for tunneling."""
    doc = {
        "src": msg.src, "dst": msg.dst, "mtype": msg.mtype, "mid": msg.mid,
        "token": msg.token.hex(), "code": msg.code,
        "proxy_uri": msg.proxy_uri,
        "echo": msg.echo.hex() if msg.echo else None,
        "kid": msg.oscore_kid.hex() if msg.oscore_kid else None,
        "piv": msg.oscore_piv,
        "payload_len": msg.payload_len,
        "payload_kind": msg.payload_kind,
        "payload": {k: (v.hex() if isinstance(v, bytes) else v)
                    for k, v in sorted(msg.payload.items())},
        "bin": sorted(k for k, v in msg.payload.items() if isinstance(v, bytes)),
        "sealed": msg.sealed.hex() if msg.sealed else None,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def deserialize_full(data: bytes) -> SimMessage:
    doc = json.loads(data.decode())
    binkeys = set(doc["bin"])
    return SimMessage(
        src=doc["src"], dst=doc["dst"], mtype=doc["mtype"], mid=doc["mid"],
        token=bytes.fromhex(doc["token"]), code=doc["code"],
        proxy_uri=doc["proxy_uri"],
        echo=bytes.fromhex(doc["echo"]) if doc["echo"] else None,
        oscore_kid=bytes.fromhex(doc["kid"]) if doc["kid"] else None,
        oscore_piv=doc["piv"],
        payload_len=doc["payload_len"], payload_kind=doc["payload_kind"],
        payload={k: (bytes.fromhex(v) if k in binkeys else v)
                 for k, v in doc["payload"].items()},
        sealed=bytes.fromhex(doc["sealed"]) if doc["sealed"] else None,
    )


class Node:
    constrained = False

    def __init__(self, world: World, address: str,
                 energy: EnergyBudget | None = None):
        self.world = world
        self.address = address
        self.energy = energy
        self.links = {}  # neighbor address -> outgoing Link
        self.routes: list[tuple[str, str]] = []  # (prefix-or-exact, neighbor)
        self._mid = 0
        self._token = 0
        self.outstanding: dict[bytes, "Exchange"] = {}
        self.rng = None  # assigned by the builder
        world.add_node(self)

    # --- identity / addressing -------------------------------------------

    def owns(self, addr: str) -> bool:
        return addr == self.address

    def route_to(self, dst: str) -> str | None:
        for prefix, neighbor in self.routes:
            if dst == prefix:
                return neighbor
            if prefix.endswith("*") and dst.startswith(prefix[:-1]):
                return neighbor
        return None

    def new_mid(self) -> int:
        self._mid = (self._mid + 1) & 0xFFFF
        return self._mid

    def new_token(self) -> bytes:
        self._token = (self._token + 1) & 0xFFFFFFFF
        return self._token.to_bytes(4, "big")

    # --- transmission ------------------------------------------------------

    def send_frame(self, msg: SimMessage, origin: str) -> None:
        neighbor = self.route_to(msg.dst)
        if neighbor is None:
            self.world.emit("drop", self.address, reason="no_route", dst=msg.dst)
            return
        self.send_via(msg, origin, neighbor)

    def send_via(self, msg: SimMessage, origin: str, neighbor: str) -> None:
        link = self.links[neighbor]
        frame = Frame(msg, origin, message_size(msg))
        target = self.world.nodes[neighbor]
        if getattr(link, "tag", None) == "constrained":
            self.world.emit("link_frame", link.name, dst=msg.dst, src=msg.src,
                            payload_kind=msg.payload_kind, code=msg.code,
                            origin=origin)
        link.transmit(frame, lambda fr, _from=self.address: target.receive(fr, _from))

    def receive(self, frame: Frame, from_addr: str) -> None:
        msg = frame.msg
        if self.owns(msg.dst):
            if self.energy is not None:
                if self.energy.exhausted:
                    self.world.emit("drop", self.address, reason="exhausted",
                                    origin=frame.origin)
                    return
                self.charge("rx_bytes", frame.origin, nbytes=frame.size)
                self.charge("msg", frame.origin)
            self.handle(frame, from_addr)
        else:
            self.forward(frame, from_addr)

    def forward(self, frame: Frame, from_addr: str) -> None:
        neighbor = self.route_to(frame.msg.dst)
        if neighbor is None:
            self.world.emit("drop", self.address, reason="no_route",
                            dst=frame.msg.dst)
            return
        link = self.links[neighbor]
        target = self.world.nodes[neighbor]
        if getattr(link, "tag", None) == "constrained":
            self.world.emit("link_frame", link.name, dst=frame.msg.dst,
                            src=frame.msg.src,
                            payload_kind=frame.msg.payload_kind,
                            code=frame.msg.code, origin=frame.origin)
        link.transmit(frame, lambda fr, _from=self.address: target.receive(fr, _from))

    def handle(self, frame: Frame, from_addr: str) -> None:
        self.world.emit("drop", self.address, reason="unhandled",
                        kind2=frame.msg.payload_kind)

    def charge(self, event: str, cause: str, nbytes: int = 0,
               fraction: float = 1.0) -> None:
        if self.energy is None:
            return
        amount = self.energy.drain(self.energy.cost_of(event, nbytes) * fraction)
        if amount > 0:
            self.world.emit("energy", self.address, amount=amount,
                            cause=cause, event=event)

    # --- confirmable exchanges --------------------------------------------

    def send_con(self, msg: SimMessage, origin: str, on_response,
                 on_giveup=None, interaction: Interaction | None = None,
                 base_timeout_ms: int = 2000, retransmit_limit: int = 4):
        ex = Exchange(self, msg, origin, on_response, on_giveup, interaction,
                      base_timeout_ms, retransmit_limit)
        self.outstanding[msg.token] = ex
        ex.start()
        return ex

    def match_response(self, frame: Frame) -> bool:
        """Consume a message that belongs to one of our exchanges."""
        msg = frame.msg
        if msg.mtype == "ACK" and msg.code == "EMPTY":
            for ex in self.outstanding.values():
                if ex.msg.mid == msg.mid:
                    ex.acked = True
                    return True
            return True  # stray ACK; swallow
        if msg.is_response and msg.token in self.outstanding:
            ex = self.outstanding.pop(msg.token)
            ex.finish()
            ex.on_response(msg, frame)
            return True
        return False


class Exchange:
    """One confirmable request with retransmission managed by its owner."""

    def __init__(self, owner: Node, msg: SimMessage, origin: str, on_response,
                 on_giveup, interaction, base_timeout_ms: int,
                 retransmit_limit: int):
        self.owner = owner
        self.msg = msg
        self.origin = origin
        self.on_response = on_response
        self.on_giveup = on_giveup
        self.interaction = interaction
        self.state = TxState(base_timeout_ms=base_timeout_ms,
                             retransmit_limit=retransmit_limit)
        self.acked = False
        self.done = False
        self.retransmissions = 0

    def start(self) -> None:
        tx_step(self.state, self.owner.world.clock.now, "sent")
        self.owner.send_frame(self.msg, self.origin)
        self._arm_timer()

    def _arm_timer(self) -> None:
        self.owner.world.schedule_in(self.state.next_timeout_ms, self._timer)

    def _timer(self) -> None:
        if self.done or self.acked:
            return
        now = self.owner.world.clock.now
        action = tx_step(self.state, now, "timer")
        if action == "retransmit":
            self.retransmissions += 1
            if self.interaction is not None:
                self.interaction.retransmissions += 1
            self.owner.world.emit("retransmit", self.owner.address,
                                  dst=self.msg.dst, token=self.msg.token.hex())
            self.owner.send_frame(self.msg, self.origin)
            self._arm_timer()
        else:  # give_up
            self.done = True
            self.owner.outstanding.pop(self.msg.token, None)
            self.owner.world.emit("giveup", self.owner.address,
                                  dst=self.msg.dst, token=self.msg.token.hex())
            if self.interaction is not None:
                self.interaction.time_out(now)
            if self.on_giveup is not None:
                self.on_giveup()

    def finish(self) -> None:
        self.done = True


class RouterNode(Node):
    """Plain IP-level router: forwards everything, terminates nothing."""

    def receive(self, frame: Frame, from_addr: str) -> None:
        if self.owns(frame.msg.dst):
            self.handle(frame, from_addr)
        else:
            self.forward(frame, from_addr)

    def handle(self, frame: Frame, from_addr: str) -> None:
        self.world.emit("drop", self.address, reason="router_no_service")


class ThrottleRouter(RouterNode):
    """Indiscriminate single-bucket throttling of all inbound traffic.

    Sees the traffic only up to the transport layer: no flow state, no
    distinction between new and established clients.
    """

    def __init__(self, world, address, protected_prefixes: tuple[str, ...],
                 rate_per_s: float, burst: float):
        super().__init__(world, address)
        from .guard import TokenBucket
        self.protected_prefixes = protected_prefixes
        self.bucket = TokenBucket(rate_per_s, burst)

    def _inbound(self, msg: SimMessage, from_addr: str) -> bool:
        going_in = any(msg.dst == p or (p.endswith("*") and msg.dst.startswith(p[:-1]))
                       for p in self.protected_prefixes)
        coming_in = not any(from_addr == p or (p.endswith("*") and from_addr.startswith(p[:-1]))
                            for p in self.protected_prefixes)
        return going_in and coming_in

    def forward(self, frame: Frame, from_addr: str) -> None:
        if self._inbound(frame.msg, from_addr):
            if not self.bucket.admit(self.world.clock.now):
                self.world.emit("drop", self.address, reason="throttled",
                                origin=frame.origin, dst=frame.msg.dst)
                return
        super().forward(frame, from_addr)


class RendezvousNode(Node):
    def __init__(self, world, address="rd"):
        super().__init__(world, address)
        self.entries: dict[str, RendezvousEntry] = {}

    def register(self, entry: RendezvousEntry) -> None:
        self.entries[entry.name] = entry
        self.world.emit("rd_registered", self.address, name=entry.name,
                        address=entry.address)
        if entry.server_guard_key_id is not None:
            self.world.emit("setup_step", self.address, step=3)

    def lookup(self, name: str) -> RendezvousEntry | None:
        return self.entries.get(name)

    def handle(self, frame: Frame, from_addr: str) -> None:
        msg = frame.msg
        if msg.payload_kind == "rd_register":
            self.register(RendezvousEntry.from_doc(msg.payload["entry"]))
            self._respond(msg, "2.01", "rd_ack", {})
        elif msg.payload_kind == "rd_lookup":
            entry = self.lookup(msg.payload["name"])
            if entry is None:
                self._respond(msg, "4.04", "rd_ack", {})
            else:
                self._respond(msg, "2.05", "rd_entry", {"entry": entry.to_doc()})
        else:
            self.world.emit("drop", self.address, reason="unknown_request")

    def _respond(self, req: SimMessage, code: str, kind: str, payload: dict) -> None:
        resp = SimMessage(src=self.address, dst=req.src, mtype="ACK",
                          mid=req.mid, token=req.token, code=code,
                          payload_kind=kind, payload=payload,
                          payload_len=20 if payload else 2)
        self.send_frame(resp, "legit")


class AsNode(Node):
    """Authorization server; channels to it are modeled as pre-secured."""

    def __init__(self, world, registry: ace_mod.AsRegistry, address="as"):
        super().__init__(world, address)
        self.registry = registry

    def handle(self, frame: Frame, from_addr: str) -> None:
        msg = frame.msg
        if msg.payload_kind != "as_token_request":
            self.world.emit("drop", self.address, reason="unknown_request")
            return
        purpose = msg.payload.get("purpose", "token")
        if purpose == "authorize_binding":
            gb = msg.payload["guard_bindings"]
            subject = msg.payload["subject_key_id"]
            audience = msg.payload["audience"]
            # Tokens for the audience may now be issued to the owner of the
            # client guard's key; taken on the client's word.
            if subject in self.registry.known_subjects and \
                    audience in self.registry.known_subjects[subject]["audiences"]:
                self.registry.grant(gb["client_guard_key_id"], audience)
                self.world.emit("setup_step", self.address, step=4)
                self._respond(msg, "2.01", {"granted": True})
            else:
                self._respond(msg, "4.01", {"granted": False})
            return
        try:
            token = ace_mod.issue_token(self.registry, msg.payload,
                                        self.world.clock.now)
        except ace_mod.Denied as e:
            self.world.emit("token_denied", self.address, reason=str(e))
            self._respond(msg, "4.01", {"error": str(e)})
            return
        self.world.emit("token_issued", self.address,
                        subject=token.subject_key_id, audience=token.audience)
        if purpose == "tunnel_token":
            self.world.emit("setup_step", self.address, step=7)
        self._respond(msg, "2.01", {"token": token.to_wire()})

    def _respond(self, req: SimMessage, code: str, payload: dict) -> None:
        resp = SimMessage(src=self.address, dst=req.src, mtype="ACK",
                          mid=req.mid, token=req.token, code=code,
                          payload_kind="as_response", payload=payload,
                          payload_len=60)
        self.send_frame(resp, "legit")


# --- constrained endpoints -------------------------------------------------


class ServerNode(Node):
    constrained = True

    def __init__(self, world, address="srv", energy=None, guard_address=None,
                 scenario="baseline-open", audience="aud_srv",
                 as_key_id="key_as", audience_key=b"", rd_address="rd"):
        super().__init__(world, address, energy)
        self.guard_address = guard_address
        self.scenario = scenario
        self.audience = audience
        self.as_key_id = as_key_id
        self.audience_key = audience_key
        self.rd_address = rd_address
        self.contexts: dict[bytes, SecurityContext] = {}
        self.sessions: dict[tuple, dict] = {}
        self.dedup: dict[tuple, SimMessage] = {}
        self.guard_key_id: str | None = None

    def start(self) -> None:
        self.world.schedule(0, self._boot)

    def _boot(self) -> None:
        if self.scenario in ("exemptions", "fullguard") and self.guard_address:
            payload = {"audience": self.audience, "mode": self.scenario}
            if self.scenario == "fullguard":
                payload["as_key_id"] = self.as_key_id
                payload["audience_key"] = self.audience_key
            msg = SimMessage(src=self.address, dst=self.guard_address,
                             mtype="CON", mid=self.new_mid(),
                             token=self.new_token(), code="POST",
                             payload_kind="onboard_request", payload=payload,
                             payload_len=30)
            self.send_con(msg, "legit", self._onboarded)
        else:
            self._register()

    def _onboarded(self, resp: SimMessage, frame: Frame) -> None:
        self.guard_key_id = resp.payload.get("guard_key_id")
        self._register()

    def _register(self) -> None:
        if self.scenario == "exemptions":
            entry = RendezvousEntry(name=self.address, address=self.guard_address)
        elif self.scenario == "fullguard":
            entry = RendezvousEntry(name=self.address, address=self.address,
                                    proxy_address=self.guard_address,
                                    server_guard_key_id=self.guard_key_id,
                                    as_hint="as")
        else:
            entry = RendezvousEntry(name=self.address, address=self.address)
        msg = SimMessage(src=self.address, dst=self.rd_address, mtype="CON",
                         mid=self.new_mid(), token=self.new_token(),
                         code="POST", payload_kind="rd_register",
                         payload={"entry": entry.to_doc()}, payload_len=40)
        self.send_con(msg, "legit", lambda r, f: None)

    # --- request handling ---------------------------------------------------

    def handle(self, frame: Frame, from_addr: str) -> None:
        msg = frame.msg
        if self.match_response(frame):
            return
        key = (msg.src, msg.mid)
        if key in self.dedup:
            self.send_frame(self.dedup[key], frame.origin)
            return
        handler = {
            "edhoc_m1": self._edhoc_m1,
            "edhoc_m3": self._edhoc_m3,
            "oscore": self._oscore_request,
        }.get(msg.payload_kind)
        if handler is None:
            self._respond(msg, frame, "4.00", "error", {}, 2)
            return
        handler(msg, frame)

    def _respond(self, req: SimMessage, frame: Frame, code: str, kind: str,
                 payload: dict, payload_len: int, sealed=None, kid=None,
                 piv=None) -> None:
        resp = SimMessage(src=self.address, dst=req.src, mtype="ACK",
                          mid=req.mid, token=req.token, code=code,
                          payload_kind=kind, payload=payload,
                          payload_len=payload_len, sealed=sealed,
                          oscore_kid=kid, oscore_piv=piv)
        self.dedup[(req.src, req.mid)] = resp
        if len(self.dedup) > 256:
            self.dedup.pop(next(iter(self.dedup)))
        self.send_frame(resp, frame.origin)

    def _edhoc_m1(self, msg: SimMessage, frame: Frame) -> None:
        # Responder work starts here: half the handshake cost is sunk even
        # if the initiator never completes (the drain-attack vector).
        self.charge("edhoc", frame.origin, fraction=0.5)
        self.world.emit("edhoc_msg", self.address, n=1, origin=frame.origin)
        eph_r = self.rng.bytes(8)
        self.sessions[(msg.src, msg.payload.get("session", 0))] = {
            "eph_i": msg.payload.get("eph", b""), "eph_r": eph_r,
        }
        self._respond(msg, frame, "2.04", "edhoc_m2",
                      {"eph": eph_r, "session": msg.payload.get("session", 0)},
                      EDHOC_MSG_SIZES[1])

    def _edhoc_m3(self, msg: SimMessage, frame: Frame) -> None:
        sess = self.sessions.get((msg.src, msg.payload.get("session", 0)))
        if sess is None:
            self._respond(msg, frame, "4.01", "error", {}, 2)
            return
        master = seclayer.edhoc_master(sess["eph_i"], sess["eph_r"])
        if msg.payload.get("confirm") != seclayer.edhoc_confirmation(master):
            self._respond(msg, frame, "4.01", "error", {}, 2)
            return
        session = seclayer.EdhocSession(role="responder",
                                        ephemeral=sess["eph_r"],
                                        peer_ephemeral=sess["eph_i"])
        ctx = seclayer.edhoc_derive(session)
        self.contexts[ctx.recipient_id] = ctx
        self.charge("edhoc", frame.origin, fraction=0.5)
        self.world.emit("edhoc_msg", self.address, n=3, origin=frame.origin)
        self._respond(msg, frame, "2.04", "edhoc_done", {}, 10)

    def _oscore_request(self, msg: SimMessage, frame: Frame) -> None:
        self.charge("oscore_verify", frame.origin)
        ctx = self.contexts.get(msg.oscore_kid)
        if ctx is None:
            self.world.emit("oscore_auth_fail", self.address,
                            reason="unknown_kid", origin=frame.origin)
            self._respond(msg, frame, "4.01", "error", {}, 2)
            return
        try:
            inner = seclayer.oscore_unprotect(ctx, msg)
        except ReplayError:
            self.world.emit("oscore_replay", self.address, origin=frame.origin)
            self._respond(msg, frame, "4.01", "error", {}, 2)
            return
        except (AuthError, UnknownKid):
            self.world.emit("oscore_auth_fail", self.address,
                            reason="bad_tag", origin=frame.origin)
            self._respond(msg, frame, "4.01", "error", {}, 2)
            return
        self.world.emit("oscore_ok", self.address, piv=msg.oscore_piv,
                        origin=frame.origin)
        reply_inner = SimMessage(src=self.address, dst=msg.src, code="2.05",
                                 payload_kind="app_response", payload_len=16)
        protected = seclayer.oscore_protect(ctx, reply_inner,
                                            request_piv=msg.oscore_piv)
        self._respond(msg, frame, "2.05", "oscore", {},
                      protected.payload_len, sealed=protected.sealed,
                      kid=protected.oscore_kid, piv=protected.oscore_piv)


class ClientNode(Node):
    constrained = True

    def __init__(self, world, address="cli", energy=None,
                 scenario="baseline-open", guard_address=None,
                 rd_address="rd", as_address="as", server_name="srv",
                 request_interval_ms=10_000, rekey_threshold=REKEY_THRESHOLD,
                 base_timeout_ms=2000, retransmit_limit=4):
        super().__init__(world, address, energy)
        self.scenario = scenario
        self.guard_address = guard_address
        self.rd_address = rd_address
        self.as_address = as_address
        self.server_name = server_name
        self.request_interval_ms = request_interval_ms
        self.rekey_threshold = rekey_threshold
        self.base_timeout_ms = base_timeout_ms
        self.retransmit_limit = retransmit_limit

        self.entry: RendezvousEntry | None = None
        self.ctx: SecurityContext | None = None
        self.interactions: list[Interaction] = []
        self.sent_pivs: list[int] = []
        self.consec_auth_fail = 0
        self.auth_fail_from_attacker = False
        self.rekeys = 0
        self.attack_induced_rekeys = 0
        self._ident = 0
        self.current_src = address
        self._session = 0
        self._rekeying = False

    def owns(self, addr: str) -> bool:
        return addr == self.address or addr.startswith(self.address)

    def fresh_identity(self) -> str:
        self._ident += 1
        self.current_src = f"{self.address}{self._ident}"
        return self.current_src

    # --- bootstrap ----------------------------------------------------------

    def bootstrap(self, on_done) -> None:
        def lookup():
            msg = self._request(self.rd_address, "rd_lookup",
                                {"name": self.server_name}, 12, direct=True)
            self.send_con(msg, "legit", got_entry,
                          on_giveup=lambda: self.world.schedule_in(2000, lookup))

        def got_entry(resp: SimMessage, frame: Frame) -> None:
            if resp.code != "2.05":
                self.world.schedule_in(2000, lookup)
                return
            self.entry = RendezvousEntry.from_doc(resp.payload["entry"])
            if self.scenario == "fullguard":
                self._authorize_binding(on_done)
            else:
                on_done()

        lookup()

    def _authorize_binding(self, on_done) -> None:
        payload = {
            "purpose": "authorize_binding",
            "subject_key_id": "key_cli",
            "audience": "aud_srv",
            "guard_bindings": {
                "client_guard_key_id": "key_cgp",
                "server_guard_key_id": self.entry.server_guard_key_id,
            },
        }
        msg = self._request(self.as_address, "as_token_request", payload, 50,
                            direct=True)

        def authorized(resp, frame):
            self._brief_guard(on_done)

        self.send_con(msg, "legit", authorized)

    def _brief_guard(self, on_done) -> None:
        payload = {"entry": self.entry.to_doc(), "as_address": self.as_address}
        msg = self._request(self.guard_address, "guard_brief", payload, 50,
                            direct=True)
        self.send_con(msg, "legit", lambda r, f: on_done())

    # --- message construction ----------------------------------------------

    def _request(self, dst: str, kind: str, payload: dict, payload_len: int,
                 direct: bool = False) -> SimMessage:
        """Build a request; server-bound traffic is routed per scenario plan."""
        msg = SimMessage(src=self.current_src, dst=dst, mtype="CON",
                         mid=self.new_mid(), token=self.new_token(),
                         code="POST" if kind != "rd_lookup" else "GET",
                         payload_kind=kind, payload=payload,
                         payload_len=payload_len)
        if not direct and self.scenario == "fullguard":
            msg.dst = self.guard_address
            msg.proxy_uri = f"coap://{self.entry.address}"
        return msg

    def _server_dst(self) -> str:
        return self.entry.address if self.entry else self.server_name

    def _send_with_echo_retry(self, msg: SimMessage, origin: str, on_response,
                              on_giveup, interaction) -> None:
        """Send a CON; transparently answer one-or-more Echo challenges."""

        def wrapped(resp: SimMessage, frame: Frame) -> None:
            if resp.code == "4.01" and resp.echo is not None:
                if interaction is not None:
                    interaction.retransmissions += 1
                retry = msg.copy(mid=self.new_mid(), token=self.new_token(),
                                 echo=resp.echo)
                self.send_con(retry, origin, wrapped, on_giveup, interaction,
                              self.base_timeout_ms, self.retransmit_limit)
                return
            on_response(resp, frame)

        self.send_con(msg, origin, wrapped, on_giveup, interaction,
                      self.base_timeout_ms, self.retransmit_limit)

    # --- key exchange --------------------------------------------------------

    def run_key_exchange(self, counted: bool, cause: str, on_done) -> None:
        now = self.world.clock.now
        self._session += 1
        session_id = self._session
        eph_i = self.rng.bytes(8)
        i1 = Interaction("key_exchange", now, counted)
        self.interactions.append(i1)

        def fail():
            on_done(False)

        def got_m2(resp: SimMessage, frame: Frame) -> None:
            if resp.payload_kind != "edhoc_m2":
                i1.complete(self.world.clock.now)
                on_done(False)
                return
            i1.complete(self.world.clock.now)
            eph_r = resp.payload["eph"]
            master = seclayer.edhoc_master(eph_i, eph_r)
            i2 = Interaction("key_exchange", self.world.clock.now, counted)
            self.interactions.append(i2)
            m3 = self._request(self._server_dst(), "edhoc_m3",
                               {"session": session_id,
                                "confirm": seclayer.edhoc_confirmation(master)},
                               EDHOC_MSG_SIZES[2])

            def got_done(resp3: SimMessage, frame3: Frame) -> None:
                i2.complete(self.world.clock.now)
                if resp3.payload_kind != "edhoc_done":
                    on_done(False)
                    return
                session = seclayer.EdhocSession(role="initiator",
                                                ephemeral=eph_i,
                                                peer_ephemeral=eph_r)
                self.ctx = seclayer.edhoc_derive(session)
                self.sent_pivs = []
                self.charge("edhoc", cause)
                on_done(True)

            self._send_with_echo_retry(m3, cause, got_done, fail, i2)

        m1 = self._request(self._server_dst(), "edhoc_m1",
                           {"eph": eph_i, "session": session_id},
                           EDHOC_MSG_SIZES[0])
        self._send_with_echo_retry(m1, cause, got_m2, fail, i1)

    # --- steady-state requests ------------------------------------------------

    def send_app_request(self, counted: bool = True) -> None:
        if self.ctx is None:
            return
        now = self.world.clock.now
        inter = Interaction("request", now, counted)
        self.interactions.append(inter)
        inner = SimMessage(src=self.current_src, dst=self._server_dst(),
                           code="GET", payload_kind="app_request",
                           payload_len=8)
        protected = seclayer.oscore_protect(self.ctx, inner)
        piv = protected.oscore_piv
        self.sent_pivs.append(piv)
        msg = self._request(self._server_dst(), "oscore", {},
                            protected.payload_len)
        msg.sealed = protected.sealed
        msg.oscore_kid = protected.oscore_kid
        msg.oscore_piv = piv
        ctx = self.ctx

        def got_response(resp: SimMessage, frame: Frame) -> None:
            inter.complete(self.world.clock.now)
            if not resp.is_protected:
                return  # unprotected error; no auth signal either way
            self.charge("oscore_verify", frame.origin)
            try:
                seclayer.oscore_unprotect(ctx, resp, request_piv=piv)
            except (AuthError, UnknownKid, ReplayError):
                self.world.emit("oscore_auth_fail", self.address,
                                origin=frame.origin)
                self.consec_auth_fail += 1
                if frame.origin.startswith("attacker"):
                    self.auth_fail_from_attacker = True
                if (self.consec_auth_fail >= self.rekey_threshold
                        and not self._rekeying):
                    self._trigger_rekey()
                return
            self.consec_auth_fail = 0
            self.auth_fail_from_attacker = False

        self._send_with_echo_retry(msg, "legit", got_response, None, inter)

    def _trigger_rekey(self) -> None:
        attack_induced = self.auth_fail_from_attacker
        self.rekeys += 1
        if attack_induced:
            self.attack_induced_rekeys += 1
        self.world.emit("rekey", self.address, attack_induced=attack_induced)
        self.ctx = None
        self.consec_auth_fail = 0
        self.auth_fail_from_attacker = False
        self._rekeying = True
        cause = "attacker_induced" if attack_induced else "legit"

        def done(ok: bool) -> None:
            self._rekeying = False

        self.run_key_exchange(counted=True, cause=cause, on_done=done)

    # --- workload drivers ------------------------------------------------------

    def start_setup_loop(self, pause_ms: int, fresh: bool, until_ms: int) -> None:
        """Repeatedly perform key exchanges (the connection-setup phase)."""

        def attempt() -> None:
            if self.world.clock.now >= until_ms:
                return
            if fresh:
                self.fresh_identity()
            self.ctx = None

            def done(ok: bool) -> None:
                self.world.schedule_in(pause_ms, attempt)

            self.run_key_exchange(counted=True, cause="legit", on_done=done)

        self.bootstrap(attempt)

    def start_steady_loop(self, attack_start_ms: int, until_ms: int) -> None:
        """Set up during the quiet warmup, then issue measured requests."""

        def setup_done(ok: bool) -> None:
            if not ok:
                self.world.schedule_in(2000, retry_setup)
                return
            # Priming request: gets the flow allow-listed where applicable.
            self.send_app_request(counted=False)
            first = attack_start_ms + 500
            self.world.schedule(max(first, self.world.clock.now + 500), tick)

        def retry_setup() -> None:
            self.run_key_exchange(counted=False, cause="legit",
                                  on_done=setup_done)

        def tick() -> None:
            if self.world.clock.now >= until_ms:
                return
            self.send_app_request(counted=True)
            self.world.schedule_in(self.request_interval_ms, tick)

        self.bootstrap(lambda: self.run_key_exchange(
            counted=False, cause="legit", on_done=setup_done))

    # --- receive ---------------------------------------------------------------

    def handle(self, frame: Frame, from_addr: str) -> None:
        if self.match_response(frame):
            return
        self.world.emit("drop", self.address, reason="unsolicited",
                        code=frame.msg.code)


# --- guard proxies -----------------------------------------------------------


def _tunnel_nonce(kid: bytes, piv: int) -> bytes:
    return kid + piv.to_bytes(5, "big")


class TunnelExchange:
    """One tunneled request; retransmissions re-wrap under the current
    tunnel context so they survive a renegotiation."""

    def __init__(self, guard: "GuardNode", inner: SimMessage, origin: str,
                 base_timeout_ms: int = 2000, retransmit_limit: int = 4):
        self.guard = guard
        self.inner = inner
        self.origin = origin
        self.state = TxState(base_timeout_ms=base_timeout_ms,
                             retransmit_limit=retransmit_limit)
        self.done = False
        self.queued = False

    def start(self) -> None:
        tx_step(self.state, self.guard.world.clock.now, "sent")
        self.send()
        self._arm()

    def send(self) -> None:
        if self.guard.tunnel_ctx is None:
            if not self.queued:
                self.queued = True
                self.guard.tunnel_queue.append(self)
            return
        self.queued = False
        self.guard.send_tunnel_data(self.guard.tunnel_ctx, self.inner,
                                    self.guard.server_guard_address, self.origin)

    def _arm(self) -> None:
        self.guard.world.schedule_in(self.state.next_timeout_ms, self._timer)

    def _timer(self) -> None:
        if self.done:
            return
        action = tx_step(self.state, self.guard.world.clock.now, "timer")
        if action == "retransmit":
            self.guard.world.emit("retransmit", self.guard.address,
                                  token=self.inner.token.hex(), via="tunnel")
            self.send()
            self._arm()
        else:
            self.done = True
            self.guard.tunnel_pending.pop(self.inner.token, None)
            self.guard.world.emit("giveup", self.guard.address,
                                  token=self.inner.token.hex(), via="tunnel")


class GuardNode(RouterNode):
    """Router that additionally runs a guard proxy.

    Modes:
      exemptions        server-side guard: throttling with reachability and
                        allow-list exemptions, reverse proxying to the server
      fullguard_server  only tunnel traffic (and onboarding/registration
                        responses) may enter; unwraps and forwards
      fullguard_client  forward proxy for its clients; wraps traffic into the
                        guard-to-guard tunnel, renegotiates on auth failures
    """

    def __init__(self, world, address, mode, constrained_prefix,
                 config: GuardConfig | None = None, key_id="", key=b"",
                 as_address="as"):
        super().__init__(world, address)
        self.mode = mode
        self.constrained_prefix = constrained_prefix
        self.key_id = key_id
        self.key = key
        self.as_address = as_address
        gmode = "fullguard" if mode.startswith("fullguard") else "exemptions"
        self.config = config or GuardConfig(mode=gmode)
        self.gstate = GuardState(address, self.config, None)  # rng set later
        self.table = ProxyTable(address)
        self.origin_server: str | None = None
        self.audience: str | None = None
        self.audience_key: bytes = b""
        self.accepted_as: tuple | None = None
        self.guard_key_issued: str | None = None
        # exemptions proxying
        self.pending_up: dict[tuple, bool] = {}
        self.done_cache: dict[tuple, SimMessage] = {}
        # fullguard server side
        self.tunnel_ctxs: dict[bytes, SecurityContext] = {}
        self.tunnel_pending_in: dict[tuple, bool] = {}
        self.tunnel_done_in: dict[tuple, tuple] = {}
        # fullguard client side
        self.server_meta: dict | None = None
        self.server_guard_address: str | None = None
        self.tunnel_ctx: SecurityContext | None = None
        self.tunnel_rx: dict[bytes, SecurityContext] = {}
        self.tunnel_queue: list[TunnelExchange] = []
        self.tunnel_pending: dict[bytes, TunnelExchange] = {}
        self.establishing = False
        self.consec_tunnel_fail = 0
        self.renegotiations = 0
        self._step6_done = False

    def attach_rng(self, rng) -> None:
        self.rng = rng
        self.gstate.rng = rng

    def _matches(self, addr: str, prefix: str) -> bool:
        if prefix.endswith("*"):
            return addr.startswith(prefix[:-1])
        return addr == prefix

    def _inside(self, addr: str) -> bool:
        return self._matches(addr, self.constrained_prefix)

    # --- dispatch -------------------------------------------------------------

    def receive(self, frame: Frame, from_addr: str) -> None:
        msg = frame.msg
        if self.owns(msg.dst):
            self.handle(frame, from_addr)
        elif self._inside(from_addr):
            self.forward(frame, from_addr)  # outbound from the guarded network
        elif self._inside(msg.dst):
            self.inbound(frame, from_addr)
        else:
            self.forward(frame, from_addr)  # transit

    def handle(self, frame: Frame, from_addr: str) -> None:
        msg = frame.msg
        if self.match_response(frame):
            return
        if self._inside(from_addr):
            if msg.payload_kind == "onboard_request":
                self._onboard(frame)
            elif self.mode == "fullguard_client":
                self._client_side_request(frame)
            else:
                self.world.emit("drop", self.address, reason="unhandled_inside")
            return
        if self.mode == "exemptions":
            self._exemptions_pipeline(frame, from_addr)
        elif self.mode == "fullguard_server":
            self._fullguard_server_handle(frame)
        elif self.mode == "fullguard_client":
            self._client_tunnel_inbound(frame)

    def inbound(self, frame: Frame, from_addr: str) -> None:
        msg = frame.msg
        if self.mode == "exemptions":
            self._exemptions_pipeline(frame, from_addr)
        elif self.mode == "fullguard_server":
            # Registration/authorization handshakes initiated from inside may
            # complete; everything else unsolicited is blocked outright.
            if msg.is_response and msg.payload_kind in ("rd_ack", "rd_entry",
                                                        "as_response"):
                self.forward(frame, from_addr)
            else:
                self.world.emit("blocked", self.address, dst=msg.dst,
                                origin=frame.origin, kind2=msg.payload_kind)
        else:  # fullguard_client: protect the client network
            if msg.is_response:
                self.forward(frame, from_addr)
            else:
                self.world.emit("blocked", self.address, dst=msg.dst,
                                origin=frame.origin, kind2=msg.payload_kind)

    # --- onboarding -------------------------------------------------------------

    def _onboard(self, frame: Frame) -> None:
        msg = frame.msg
        self.origin_server = msg.src
        self.audience = msg.payload.get("audience")
        self.audience_key = msg.payload.get("audience_key", b"")
        self.accepted_as = (msg.payload.get("as_key_id"), self.audience)
        self.world.emit("setup_step", self.address, step=1)
        self.guard_key_issued = self.key_id or f"key_{self.address}"
        resp = SimMessage(src=self.address, dst=msg.src, mtype="ACK",
                          mid=msg.mid, token=msg.token, code="2.01",
                          payload_kind="onboard_ack",
                          payload={"guard_key_id": self.guard_key_issued},
                          payload_len=20)
        self.world.emit("setup_step", self.address, step=2)
        self.send_frame(resp, "legit")

    # --- exemptions mode ---------------------------------------------------------

    def _exemptions_pipeline(self, frame: Frame, from_addr: str) -> None:
        msg = frame.msg
        now = self.world.clock.now
        if msg.is_response:
            # Responses toward the inside belong to server-initiated
            # exchanges (registration); pass them.
            self.forward(frame, from_addr)
            return
        action, detail = self.gstate.decide(msg, now)
        if action == "forward":
            if detail.get("cls") == "non_proxy":
                self.world.emit("guard_forward", self.address, cls="non_proxy",
                                src=msg.src, origin=frame.origin)
                self.forward(frame, from_addr)
            else:
                self.world.emit("guard_forward", self.address,
                                cls=detail.get("cls"), src=msg.src,
                                origin=frame.origin)
                self._proxy_upstream(frame)
        elif action == "challenge":
            self.world.emit("challenge_issued", self.address, src=msg.src,
                            reason=detail.get("reason"), origin=frame.origin)
            self.send_frame(detail["challenge"], "legit")
        elif action == "reject":
            self.world.emit("seq_conflict", self.address, src=msg.src,
                            origin=frame.origin)
            reject = SimMessage(src=self.address, dst=msg.src, mtype="ACK",
                                mid=msg.mid, token=msg.token, code="4.01",
                                payload_len=2)
            self.send_frame(reject, "legit")
        else:  # drop / block
            self.world.emit("guard_drop", self.address, src=msg.src,
                            reason=detail.get("reason", action),
                            origin=frame.origin)

    def _proxy_upstream(self, frame: Frame) -> None:
        msg = frame.msg
        key = (msg.src, msg.token.hex())
        if key in self.done_cache:
            self.send_frame(self.done_cache[key], "legit")
            return
        if msg.mtype == "CON":
            self._send_empty_ack(msg)
        if key in self.pending_up:
            return
        up = self.table.rewrite_request(msg, "reverse", self.origin_server)
        meta = {"key": key, "src": msg.src, "kid": msg.oscore_kid,
                "request_kind": msg.payload_kind}
        self.pending_up[key] = True
        self.send_con(up, frame.origin,
                      lambda r, f, m=meta: self._upstream_response(r, f, m),
                      on_giveup=lambda m=meta: self._upstream_giveup(m))

    def _send_empty_ack(self, msg: SimMessage) -> None:
        ack = SimMessage(src=self.address, dst=msg.src, mtype="ACK",
                         mid=msg.mid, token=b"", code="EMPTY")
        self.send_frame(ack, "legit")

    def _upstream_response(self, resp: SimMessage, frame: Frame, meta) -> None:
        self.pending_up.pop(meta["key"], None)
        kind = ("ace_token_post" if meta["request_kind"] == "tunnel_token_post"
                else meta["request_kind"])
        self.gstate.observe_exchange(meta["src"], meta["kid"], kind, resp,
                                     self.world.clock.now)
        if resp.is_protected:
            self.world.emit("allow_listed", self.address, src=meta["src"])
        down = self.table.rewrite_response(resp)
        if down is None:
            return
        self.done_cache[meta["key"]] = down
        if len(self.done_cache) > 64:
            self.done_cache.pop(next(iter(self.done_cache)))
        self.send_frame(down, frame.origin)

    def _upstream_giveup(self, meta) -> None:
        self.pending_up.pop(meta["key"], None)
        self.world.emit("upstream_giveup", self.address, src=meta["src"])

    # --- fullguard, server side -----------------------------------------------------

    def _fullguard_server_handle(self, frame: Frame) -> None:
        msg = frame.msg
        if msg.payload_kind == "tunnel_token_post":
            self._token_post(frame)
            return
        if msg.is_protected and msg.oscore_kid in self.tunnel_ctxs:
            self._tunnel_data_in(frame)
            return
        self.world.emit("blocked", self.address, origin=frame.origin,
                        kind2=msg.payload_kind)

    def _token_post(self, frame: Frame) -> None:
        msg = frame.msg
        now = self.world.clock.now
        token = ace_mod.AccessToken.from_wire(msg.payload["token"])
        try:
            ace_mod.verify_token(token, self.audience_key, self.audience, now)
        except ace_mod.InvalidToken as e:
            self.world.emit("token_rejected", self.address, reason=e.reason,
                            origin=frame.origin)
            resp = SimMessage(src=self.address, dst=msg.src, mtype="ACK",
                              mid=msg.mid, token=msg.token, code="4.01",
                              payload_kind="token_reject",
                              payload={"reason": e.reason}, payload_len=10)
            self.send_frame(resp, frame.origin)
            return
        self.world.emit("token_verified", self.address,
                        subject=token.subject_key_id, origin=frame.origin)
        bound = ace_mod.unseal_bound_key(token, self.audience_key)
        nonce_c = msg.payload["nonce"]
        nonce_s = self.rng.bytes(8)
        master = ace_mod.ace_context_master(bound, nonce_c, nonce_s)
        kid_c, kid_s = ace_mod.ace_kid_pair(nonce_c, nonce_s)
        ctx = SecurityContext(sender_id=kid_s, recipient_id=kid_c,
                              master_key=master)
        self.tunnel_ctxs[kid_c] = ctx
        self.world.emit("tunnel_established", self.address,
                        subject=token.subject_key_id, origin=frame.origin)
        self.world.emit("setup_step", self.address, step=8)
        resp = SimMessage(src=self.address, dst=msg.src, mtype="ACK",
                          mid=msg.mid, token=msg.token, code="2.01",
                          payload_kind="tunnel_token_ack",
                          payload={"nonce": nonce_s}, payload_len=20)
        self.send_frame(resp, frame.origin)

    def _tunnel_data_in(self, frame: Frame) -> None:
        msg = frame.msg
        ctx = self.tunnel_ctxs[msg.oscore_kid]
        piv = msg.oscore_piv or 0
        if not ctx.replay_window.check(piv):
            self.world.emit("tunnel_replay", self.address, origin=frame.origin)
            return
        try:
            data = aead_open(ctx.recipient_key,
                             _tunnel_nonce(msg.oscore_kid, piv), b"tun",
                             msg.sealed)
        except AuthError:
            self.world.emit("tunnel_auth_fail", self.address,
                            origin=frame.origin)
            return
        ctx.replay_window.accept(piv)
        inner = deserialize_full(data)
        self.world.emit("guard_forward", self.address, cls=TUNNEL,
                        src=msg.src, origin=frame.origin)
        key = (inner.src, inner.token.hex(), inner.oscore_piv)
        if key in self.tunnel_pending_in:
            return
        if key in self.tunnel_done_in:
            reply_ctx, reply_inner, reply_dst = self.tunnel_done_in[key]
            self.send_tunnel_data(reply_ctx, reply_inner, reply_dst,
                                  frame.origin)
            return
        up = inner.copy(src=self.address, dst=self.origin_server,
                        token=self.table.new_token(), mid=self.table.new_mid(),
                        proxy_uri=None)
        self.table.out[up.token] = (inner.src, inner.token, inner.mid)
        self.tunnel_pending_in[key] = True
        meta = {"key": key, "ctx": ctx, "reply_dst": msg.src}
        self.send_con(up, frame.origin,
                      lambda r, f, m=meta: self._tunnel_upstream_response(r, f, m),
                      on_giveup=lambda m=meta: self.tunnel_pending_in.pop(m["key"], None))

    def _tunnel_upstream_response(self, resp: SimMessage, frame: Frame, meta) -> None:
        self.tunnel_pending_in.pop(meta["key"], None)
        down = self.table.rewrite_response(resp)
        if down is None:
            return
        self.tunnel_done_in[meta["key"]] = (meta["ctx"], down, meta["reply_dst"])
        if len(self.tunnel_done_in) > 64:
            self.tunnel_done_in.pop(next(iter(self.tunnel_done_in)))
        self.send_tunnel_data(meta["ctx"], down, meta["reply_dst"], frame.origin)

    def send_tunnel_data(self, ctx: SecurityContext, inner: SimMessage,
                         dst: str, origin: str) -> None:
        data = serialize_full(inner)
        piv = ctx.sender_seq
        ctx.sender_seq += 1
        sealed = aead_seal(ctx.sender_key, _tunnel_nonce(ctx.sender_id, piv),
                           b"tun", data)
        msg = SimMessage(src=self.address, dst=dst, mtype="NON",
                         mid=self.new_mid(), token=b"", code="POST",
                         oscore_kid=ctx.sender_id, oscore_piv=piv,
                         payload_kind="tunnel_data", payload_len=len(sealed),
                         sealed=sealed)
        self.send_frame(msg, origin)

    # --- fullguard, client side ---------------------------------------------------

    def _client_side_request(self, frame: Frame) -> None:
        msg = frame.msg
        if msg.payload_kind == "guard_brief":
            entry = RendezvousEntry.from_doc(msg.payload["entry"])
            self.server_meta = msg.payload
            self.server_guard_address = entry.published_address
            self.audience = msg.payload.get("audience", f"aud_{entry.name}")
            self.world.emit("setup_step", self.address, step=5)
            resp = SimMessage(src=self.address, dst=msg.src, mtype="ACK",
                              mid=msg.mid, token=msg.token, code="2.04",
                              payload_kind="brief_ack", payload_len=2)
            self.send_frame(resp, frame.origin)
            return
        if msg.proxy_uri is None:
            self.world.emit("drop", self.address, reason="no_proxy_uri")
            return
        if not self._step6_done:
            self._step6_done = True
            self.world.emit("setup_step", self.address, step=6)
        if msg.mtype == "CON":
            self._send_empty_ack(msg)
        origin_server = msg.proxy_uri.split("://", 1)[-1]
        up = self.table.rewrite_request(msg, "forward", origin_server)
        tex = TunnelExchange(self, up, frame.origin)
        self.tunnel_pending[up.token] = tex
        tex.start()
        if self.tunnel_ctx is None:
            self._establish_tunnel()

    def _establish_tunnel(self) -> None:
        if self.establishing or self.server_meta is None:
            return
        self.establishing = True
        req = SimMessage(src=self.address, dst=self.as_address, mtype="CON",
                         mid=self.new_mid(), token=self.new_token(),
                         code="POST", payload_kind="as_token_request",
                         payload={"purpose": "tunnel_token",
                                  "subject_key_id": self.key_id,
                                  "audience": self.audience},
                         payload_len=50)
        self.send_con(req, "legit", self._got_tunnel_token,
                      on_giveup=self._tunnel_setup_failed)

    def _got_tunnel_token(self, resp: SimMessage, frame: Frame) -> None:
        if resp.code != "2.01":
            self._tunnel_setup_failed()
            return
        nonce_c = self.rng.bytes(8)
        post = SimMessage(src=self.address, dst=self.server_guard_address,
                          mtype="CON", mid=self.new_mid(),
                          token=self.new_token(), code="POST",
                          payload_kind="tunnel_token_post",
                          payload={"token": resp.payload["token"],
                                   "nonce": nonce_c},
                          payload_len=80)

        def done(r: SimMessage, f: Frame) -> None:
            if r.code != "2.01":
                self._tunnel_setup_failed()
                return
            nonce_s = r.payload["nonce"]
            master = ace_mod.ace_context_master(self.key, nonce_c, nonce_s)
            kid_c, kid_s = ace_mod.ace_kid_pair(nonce_c, nonce_s)
            self.tunnel_ctx = SecurityContext(sender_id=kid_c,
                                              recipient_id=kid_s,
                                              master_key=master)
            self.tunnel_rx[kid_s] = self.tunnel_ctx
            self.establishing = False
            self.world.emit("tunnel_ready", self.address)
            queued, self.tunnel_queue = self.tunnel_queue, []
            for tex in queued:
                if not tex.done:
                    tex.send()

        self.send_con(post, "legit", done, on_giveup=self._tunnel_setup_failed)

    def _tunnel_setup_failed(self) -> None:
        self.establishing = False
        self.world.emit("tunnel_setup_failed", self.address)

    def _client_tunnel_inbound(self, frame: Frame) -> None:
        msg = frame.msg
        if not msg.is_protected or msg.oscore_kid not in self.tunnel_rx:
            self.world.emit("blocked", self.address, origin=frame.origin,
                            kind2=msg.payload_kind)
            return
        ctx = self.tunnel_rx[msg.oscore_kid]
        piv = msg.oscore_piv or 0
        if not ctx.replay_window.check(piv):
            self.world.emit("tunnel_replay", self.address, origin=frame.origin)
            return
        try:
            data = aead_open(ctx.recipient_key,
                             _tunnel_nonce(msg.oscore_kid, piv), b"tun",
                             msg.sealed)
        except AuthError:
            self.world.emit("tunnel_auth_fail", self.address,
                            origin=frame.origin)
            self.consec_tunnel_fail += 1
            if self.consec_tunnel_fail >= REKEY_THRESHOLD:
                self._renegotiate()
            return
        ctx.replay_window.accept(piv)
        self.consec_tunnel_fail = 0
        inner = deserialize_full(data)
        tex = self.tunnel_pending.pop(inner.token, None)
        if tex is not None:
            tex.done = True
        down = self.table.rewrite_response(inner)
        if down is not None:
            self.send_frame(down, frame.origin)

    def _renegotiate(self) -> None:
        """Rebuild the tunnel after repeated auth failures. The constrained
        endpoints never see this happen."""
        self.consec_tunnel_fail = 0
        self.renegotiations += 1
        self.world.emit("tunnel_renegotiate", self.address)
        self.tunnel_ctx = None
        self._establish_tunnel()


# --- attacker models ---------------------------------------------------------


class AttackerNode(Node):
    """Source of hostile traffic; also swallows anything routed back to it
    or to its spoofed addresses, so it never answers reachability checks."""

    def __init__(self, world, model: AttackerModel, address="atk",
                 targets=("srv",), kid_source=None, piv_source=None):
        super().__init__(world, address)
        self.model = model
        self.targets = list(targets)
        self.kid_source = kid_source
        self.piv_source = piv_source
        self.sent = 0
        self.corrupted = 0

    def owns(self, addr: str) -> bool:
        return addr == self.address or addr.startswith("x")

    def handle(self, frame: Frame, from_addr: str) -> None:
        pass  # blind to replies by design

    def start(self) -> None:
        if self.model.kind in ("blind_flood", "distributed_flood",
                               "impersonator"):
            self.world.schedule(self.model.start_ms, self._tick)

    def _period_ms(self) -> int:
        rate = self.model.rate
        if self.model.kind == "distributed_flood":
            rate *= self.model.n_sources
        return max(1, int(round(1000.0 / rate)))

    def _tick(self) -> None:
        now = self.world.clock.now
        if now >= self.model.stop_ms:
            return
        msg = self._build_message()
        self.send_frame(msg, "attacker")
        self.sent += 1
        # Jittered cadence (same mean rate): real flood sources are not
        # phase-locked, and a deterministic comb would let periodic legit
        # traffic slip through the rate limiters between bursts.
        period = self._period_ms()
        delay = max(1, int(period * (0.5 + self.rng.random())))
        self.world.schedule_in(delay, self._tick)

    def _build_message(self) -> SimMessage:
        # Split between the published address and the raw server address;
        # only a guard in front makes the two differ.
        dst = self.targets[self.rng.randrange(len(self.targets))]
        if self.model.kind in ("blind_flood", "distributed_flood"):
            if self.model.kind == "blind_flood":
                src = "x0"
            else:
                src = f"x{self.sent % self.model.n_sources}"
            # Handshake-triggering frames: cheapest way to drain a responder.
            return SimMessage(src=src, dst=dst, mtype="CON",
                              mid=self.new_mid(), token=self.new_token(),
                              code="POST", payload_kind="edhoc_m1",
                              payload={"eph": self.rng.bytes(8),
                                       "session": self.sent},
                              payload_len=EDHOC_MSG_SIZES[0])
        # Impersonator: OSCORE-shaped junk under a (possibly known) kid.
        kid = None
        if self.model.knows_kid and self.kid_source is not None:
            kid = self.kid_source()
        if kid is None:
            kid = self.rng.bytes(1)
        src = "x0"
        if self.sent % 2 == 0:
            piv = 10_000_000 + self.sent  # far beyond any plausible window
        else:
            pivs = self.piv_source() if self.piv_source else []
            piv = pivs[(self.sent // 2) % len(pivs)] if pivs else 0
        return SimMessage(src=src, dst=dst, mtype="CON", mid=self.new_mid(),
                          token=self.new_token(), code="POST",
                          payload_kind="oscore", oscore_kid=kid,
                          oscore_piv=piv, payload_len=38,
                          sealed=self.rng.bytes(30))

    def make_interceptor(self):
        """On-path tampering: garble a bounded number of protected frames
        inside the active window; everything else passes untouched."""

        def intercept(link, frame: Frame):
            now = self.world.clock.now
            if frame.msg.sealed is None:
                return frame
            if not (self.model.start_ms <= now < self.model.stop_ms):
                return frame
            if self.corrupted >= self.model.corrupt_budget:
                return frame
            self.corrupted += 1
            self.world.emit("onpath_corrupt", self.address,
                            dst=frame.msg.dst, kind2=frame.msg.payload_kind)
            garbled = frame.msg.copy(sealed=self.rng.bytes(len(frame.msg.sealed)))
            return Frame(garbled, "attacker", frame.size)

        return intercept
