"""Experiment harness: configuration, scenario construction, cell runs,
behavior classification and report rendering.

A cell is one (scenario, attack) pair. Each cell runs two sub-runs:
"setup" (repeated fresh key exchanges with the attack active from t=0) and
"steady" (one client sets up during a quiet warmup, then issues periodic
requests while under attack). The two phases map onto the two behavior
columns of the comparison matrix.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import statistics
from dataclasses import dataclass, field, fields

from .actors import (AsNode, AttackerModel, AttackerNode, ClientNode,
                     GuardNode, RendezvousNode, RouterNode, ServerNode,
                     ThrottleRouter)
from .ace import AsRegistry
from .coap_lite import DEFAULT_BASE_TIMEOUT_MS, DEFAULT_RETRANSMIT_LIMIT
from .guard import (BucketSpec, GuardConfig, NON_PROXY,
                    REACHABILITY_VERIFIED, UNKNOWN_VIA_PROXY)
from .netsim import EnergyBudget, Link, World
from .seclayer import fnv1a64

SCENARIOS = ("baseline-open", "baseline-throttled", "exemptions", "fullguard")
ATTACKS = ("none", "blind_flood", "distributed_flood", "impersonator",
           "on_path")

MATRIX_CELLS = [
    ("baseline-open", "none"),
    ("baseline-open", "blind_flood"),
    ("baseline-open", "distributed_flood"),
    ("baseline-throttled", "none"),
    ("baseline-throttled", "blind_flood"),
    ("baseline-throttled", "distributed_flood"),
    ("exemptions", "none"),
    ("exemptions", "blind_flood"),
    ("exemptions", "distributed_flood"),
    ("fullguard", "none"),
    ("fullguard", "blind_flood"),
    ("fullguard", "distributed_flood"),
    ("fullguard", "impersonator"),
    ("fullguard", "on_path"),
]


class ConfigError(Exception):
    """Invalid configuration; the message names the offending field."""


@dataclass
class LinkSpec:
    bandwidth_bps: int = 4000
    delay_ms: int = 10
    queue_capacity: int = 8


@dataclass
class LinksConfig:
    constrained: LinkSpec = field(default_factory=LinkSpec)
    internet: LinkSpec = field(default_factory=lambda: LinkSpec(1_000_000, 50, 64))


@dataclass
class EnergyConfig:
    budget: float = 50_000.0
    cost_per_rx_byte: float = 0.00002
    cost_per_msg: float = 0.002
    cost_edhoc: float = 1.0
    cost_oscore_verify: float = 0.01

    def make(self) -> EnergyBudget:
        return EnergyBudget(remaining=self.budget,
                            cost_per_rx_byte=self.cost_per_rx_byte,
                            cost_per_msg=self.cost_per_msg,
                            cost_edhoc=self.cost_edhoc,
                            cost_oscore_verify=self.cost_oscore_verify)


@dataclass
class CoapConfig:
    base_timeout_ms: int = DEFAULT_BASE_TIMEOUT_MS
    retransmit_limit: int = DEFAULT_RETRANSMIT_LIMIT


@dataclass
class BucketConfig:
    per_source_rate: float
    per_source_burst: float
    aggregate_rate: float
    aggregate_burst: float

    def spec(self) -> BucketSpec:
        return BucketSpec(self.per_source_rate, self.per_source_burst,
                          self.aggregate_rate, self.aggregate_burst)


@dataclass
class GuardSettings:
    jump_threshold: int = 128
    seq_memory: int = 64
    echo_max_age_ms: int = 40_000
    allowlist_idle_expiry_ms: int = 600_000
    unknown_bucket: BucketConfig = field(
        default_factory=lambda: BucketConfig(0.2, 2, 1.0, 2))
    non_proxy_bucket: BucketConfig = field(
        default_factory=lambda: BucketConfig(0.05, 1, 0.1, 2))
    verified_bucket: BucketConfig = field(
        default_factory=lambda: BucketConfig(1.0, 2, 5.0, 8))

    def guard_config(self, mode: str) -> GuardConfig:
        return GuardConfig(
            mode=mode,
            jump_threshold=self.jump_threshold,
            seq_memory=self.seq_memory,
            echo_max_age_ms=self.echo_max_age_ms,
            allowlist_idle_expiry_ms=self.allowlist_idle_expiry_ms,
            buckets={
                UNKNOWN_VIA_PROXY: self.unknown_bucket.spec(),
                NON_PROXY: self.non_proxy_bucket.spec(),
                REACHABILITY_VERIFIED: self.verified_bucket.spec(),
            })


@dataclass
class BaselineThrottleConfig:
    rate_per_s: float = 0.1
    burst: float = 1.0


@dataclass
class ClientConfig:
    enabled: bool = True
    request_interval_ms: int = 10_000
    setup_pause_ms: int = 5_000


@dataclass
class AttackConfig:
    blind_rate: float = 20.0
    distributed_rate: float = 1.0
    distributed_sources: int = 50
    impersonator_rate: float = 2.0
    impersonator_knows_kid: bool = True
    onpath_window_ms: int = 35_000
    onpath_budget: int = 4


@dataclass
class DurationConfig:
    setup_ms: int = 300_000
    warmup_ms: int = 30_000
    steady_ms: int = 300_000
    grace_ms: int = 70_000


@dataclass
class ClassifyConfig:
    loss_fraction: float = 0.05
    retransmit_fraction: float = 0.10


@dataclass
class ResourceConfig:
    high_fraction: float = 0.10


@dataclass
class SimConfig:
    seed: int = 42
    scenario: str = "exemptions"
    attack: str = "none"
    links: LinksConfig = field(default_factory=LinksConfig)
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    coap: CoapConfig = field(default_factory=CoapConfig)
    guard: GuardSettings = field(default_factory=GuardSettings)
    baseline_throttle: BaselineThrottleConfig = field(
        default_factory=BaselineThrottleConfig)
    client: ClientConfig = field(default_factory=ClientConfig)
    attacks: AttackConfig = field(default_factory=AttackConfig)
    durations: DurationConfig = field(default_factory=DurationConfig)
    classify: ClassifyConfig = field(default_factory=ClassifyConfig)
    resource: ResourceConfig = field(default_factory=ResourceConfig)


_NESTED = {
    "links": LinksConfig, "energy": EnergyConfig, "coap": CoapConfig,
    "guard": GuardSettings, "baseline_throttle": BaselineThrottleConfig,
    "client": ClientConfig, "attacks": AttackConfig,
    "durations": DurationConfig, "classify": ClassifyConfig,
    "resource": ResourceConfig,
}


def _fill_dataclass(cls, doc: dict, path: str, base=None):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    obj = base if base is not None else cls()
    for key, value in doc.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"{where}: unknown field")
        current = getattr(obj, key)
        if isinstance(current, (LinkSpec, BucketConfig)) or key in _NESTED:
            setattr(obj, key, _fill_dataclass(type(current), value, where,
                                              base=copy.deepcopy(current)))
        else:
            if isinstance(current, bool):
                if not isinstance(value, bool):
                    raise ConfigError(f"{where}: expected a boolean")
            elif isinstance(current, int) and not isinstance(current, bool):
                if not isinstance(value, int) or isinstance(value, bool):
                    raise ConfigError(f"{where}: expected an integer")
            elif isinstance(current, float):
                if not isinstance(value, (int, float)) or isinstance(value, bool):
                    raise ConfigError(f"{where}: expected a number")
                value = float(value)
            elif isinstance(current, str):
                if not isinstance(value, str):
                    raise ConfigError(f"{where}: expected a string")
            setattr(obj, key, value)
    return obj


def config_from_dict(doc: dict) -> SimConfig:
    cfg = _fill_dataclass(SimConfig, doc, "")
    if cfg.scenario not in SCENARIOS:
        raise ConfigError(f"scenario: must be one of {', '.join(SCENARIOS)}")
    if cfg.attack not in ATTACKS:
        raise ConfigError(f"attack: must be one of {', '.join(ATTACKS)}")
    return cfg


def load_config(path: str) -> SimConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return config_from_dict(doc)


def derive_seed(seed: int, scenario: str, attack: str, subrun: str) -> int:
    return (seed ^ fnv1a64(f"{scenario}|{attack}|{subrun}".encode())) & ((1 << 64) - 1)


# --- world construction -------------------------------------------------------


@dataclass
class Handles:
    world: World
    client: ClientNode | None
    server: ServerNode
    client_router: object
    server_router: object
    attacker: AttackerNode | None
    rendezvous: RendezvousNode
    authorization: AsNode


def _connect(world: World, a, b, spec: LinkSpec, tag: str) -> None:
    fwd = Link(world, f"{a.address}->{b.address}", spec.bandwidth_bps,
               spec.delay_ms, spec.queue_capacity)
    rev = Link(world, f"{b.address}->{a.address}", spec.bandwidth_bps,
               spec.delay_ms, spec.queue_capacity)
    fwd.tag = tag
    rev.tag = tag
    a.links[b.address] = fwd
    b.links[a.address] = rev


def build_world(config: SimConfig, scenario: str, attack_kind: str,
                attack_start_ms: int, attack_stop_ms: int, seed: int,
                client_enabled: bool = True) -> Handles:
    world = World(seed)

    keys = {
        "key_cli": b"client-key-0001!",
        "key_cgp": b"clientguardkey1!",
        "key_sgp": b"serverguardkey1!",
        "aud_srv": b"audience-key-01!",
    }
    registry = AsRegistry()
    registry.add_subject("key_cli", keys["key_cli"], {"aud_srv"})
    registry.add_subject("key_cgp", keys["key_cgp"], set())
    registry.add_audience("aud_srv", keys["aud_srv"])

    guarded = scenario in ("exemptions", "fullguard")

    if scenario == "fullguard":
        rtr_c = GuardNode(world, "rtrC", "fullguard_client", "cli*",
                          config.guard.guard_config("fullguard"),
                          key_id="key_cgp", key=keys["key_cgp"])
    else:
        rtr_c = RouterNode(world, "rtrC")

    if scenario == "baseline-throttled":
        rtr_s = ThrottleRouter(world, "rtrS", ("srv",),
                               config.baseline_throttle.rate_per_s,
                               config.baseline_throttle.burst)
    elif scenario == "exemptions":
        rtr_s = GuardNode(world, "rtrS", "exemptions", "srv",
                          config.guard.guard_config("exemptions"),
                          key_id="key_sgp", key=keys["key_sgp"])
    elif scenario == "fullguard":
        rtr_s = GuardNode(world, "rtrS", "fullguard_server", "srv",
                          config.guard.guard_config("fullguard"),
                          key_id="key_sgp", key=keys["key_sgp"])
    else:
        rtr_s = RouterNode(world, "rtrS")

    server = ServerNode(world, "srv", energy=config.energy.make(),
                        guard_address="rtrS" if guarded else None,
                        scenario=scenario, audience="aud_srv",
                        as_key_id="key_as", audience_key=keys["aud_srv"])
    client = None
    if client_enabled:
        client = ClientNode(world, "cli", energy=config.energy.make(),
                            scenario=("fullguard" if scenario == "fullguard"
                                      else "direct"),
                            guard_address="rtrC" if scenario == "fullguard" else None,
                            request_interval_ms=config.client.request_interval_ms,
                            base_timeout_ms=config.coap.base_timeout_ms,
                            retransmit_limit=config.coap.retransmit_limit)
    rendezvous = RendezvousNode(world, "rd")
    authorization = AsNode(world, registry, "as")

    attacker = None
    if attack_kind != "none":
        published = "rtrS" if guarded else "srv"
        model = AttackerModel(kind=attack_kind, start_ms=attack_start_ms,
                              stop_ms=attack_stop_ms)
        if attack_kind == "blind_flood":
            model.rate = config.attacks.blind_rate
        elif attack_kind == "distributed_flood":
            model.rate = config.attacks.distributed_rate
            model.n_sources = config.attacks.distributed_sources
        elif attack_kind == "impersonator":
            model.rate = config.attacks.impersonator_rate
            model.knows_kid = config.attacks.impersonator_knows_kid
        elif attack_kind == "on_path":
            model.stop_ms = attack_start_ms + config.attacks.onpath_window_ms
            model.corrupt_budget = config.attacks.onpath_budget
        kid_source = piv_source = None
        if client is not None:
            kid_source = lambda: (client.ctx.sender_id if client.ctx else None)
            piv_source = lambda: list(client.sent_pivs[:4])
        attacker = AttackerNode(world, model, "atk", targets=[published, "srv"],
                                kid_source=kid_source, piv_source=piv_source)

    # Wiring: constrained device links at the edges, fast internet inside.
    cl, il = config.links.constrained, config.links.internet
    if client is not None:
        _connect(world, client, rtr_c, cl, "constrained")
    _connect(world, rtr_s, server, cl, "constrained")
    _connect(world, rtr_c, rtr_s, il, "internet")
    _connect(world, rtr_s, rendezvous, il, "internet")
    _connect(world, rtr_s, authorization, il, "internet")
    if attacker is not None:
        _connect(world, rtr_s, attacker, il, "internet")

    if client is not None:
        client.routes = [("*", "rtrC")]
    rtr_c.routes = ([("cli*", "cli")] if client is not None else []) + \
        [("*", "rtrS")]
    rtr_s.routes = [("srv", "srv"), ("rd", "rd"), ("as", "as")]
    if attacker is not None:
        rtr_s.routes += [("x*", "atk"), ("atk", "atk")]
    rtr_s.routes += [("*", "rtrC")]
    server.routes = [("*", "rtrS")]
    rendezvous.routes = [("*", "rtrS")]
    authorization.routes = [("*", "rtrS")]
    if attacker is not None:
        attacker.routes = [("*", "rtrS")]

    for i, node in enumerate(world.nodes.values()):
        rng = world.rng.fork(i + 1)
        if isinstance(node, GuardNode):
            node.attach_rng(rng)
        else:
            node.rng = rng

    if attacker is not None and attack_kind == "on_path":
        rtr_s.links["rtrC"].interceptor = attacker.make_interceptor()

    return Handles(world=world, client=client, server=server,
                   client_router=rtr_c, server_router=rtr_s,
                   attacker=attacker, rendezvous=rendezvous,
                   authorization=authorization)


# --- sub-run execution --------------------------------------------------------


@dataclass
class SubrunResult:
    handles: Handles
    attack_start_ms: int
    measured_until_ms: int
    run_end_ms: int


def run_subrun(config: SimConfig, scenario: str, attack_kind: str,
               subrun: str) -> SubrunResult:
    seed = derive_seed(config.seed, scenario, attack_kind, subrun)
    if subrun == "setup":
        attack_start = 0
        until = config.durations.setup_ms
    else:
        attack_start = config.durations.warmup_ms
        until = attack_start + config.durations.steady_ms
    handles = build_world(config, scenario, attack_kind, attack_start, until,
                          seed, client_enabled=config.client.enabled)
    handles.server.start()
    client = handles.client
    if client is not None:
        if subrun == "setup":
            handles.world.schedule(200, lambda: client.start_setup_loop(
                config.client.setup_pause_ms, fresh=True, until_ms=until))
        else:
            handles.world.schedule(200, lambda: client.start_steady_loop(
                attack_start, until_ms=until))
    if handles.attacker is not None:
        handles.attacker.start()
    run_end = until + config.durations.grace_ms
    handles.world.run_until(run_end)
    return SubrunResult(handles=handles, attack_start_ms=attack_start,
                        measured_until_ms=until, run_end_ms=run_end)


# --- classification -----------------------------------------------------------

GOOD = "good"
THROTTLED = "throttled"
LOSSES = "losses"
NO_TRAFFIC = "no_traffic"


def classify_behavior(latencies_ms: list[int], retransmissions: list[int],
                      n_timed_out: int, n_started: int, base_timeout_ms: int,
                      loss_fraction: float = 0.05,
                      retransmit_fraction: float = 0.10) -> str:
    """Label one phase: Losses when exchanges time out, Throttled when
    completion needed back-off (retransmissions or above-timeout latency),
    Good otherwise."""
    if n_started == 0:
        return NO_TRAFFIC
    if n_timed_out / n_started > loss_fraction:
        return LOSSES
    if not latencies_ms:
        return LOSSES if n_timed_out else NO_TRAFFIC
    with_retx = sum(1 for r in retransmissions if r >= 1)
    if with_retx / len(retransmissions) > retransmit_fraction:
        return THROTTLED
    if statistics.median(latencies_ms) > base_timeout_ms:
        return THROTTLED
    return GOOD


def phase_stats(interactions, kinds, config: SimConfig) -> dict:
    picked = [i for i in interactions if i.counted and i.kind in kinds]
    latencies = [i.latency_ms for i in picked if i.outcome == "completed"]
    retx = [i.retransmissions for i in picked if i.outcome == "completed"]
    n_timed_out = sum(1 for i in picked if i.outcome == "timed_out")
    behavior = classify_behavior(latencies, retx, n_timed_out, len(picked),
                                 config.coap.base_timeout_ms,
                                 config.classify.loss_fraction,
                                 config.classify.retransmit_fraction)
    return {
        "behavior": behavior,
        "n_started": len(picked),
        "n_completed": len(latencies),
        "n_timed_out": n_timed_out,
        "median_latency_ms": (statistics.median(latencies) if latencies else None),
        "retransmit_fraction": (round(sum(1 for r in retx if r >= 1) / len(retx), 4)
                                if retx else None),
    }


# --- energy accounting --------------------------------------------------------

ATTACK_CAUSES = ("attacker", "attacker_induced")


def energy_report(trace, cost_edhoc: float = 1.0) -> dict:
    """Aggregate constrained-device energy events from a trace."""
    total = 0.0
    attributable = 0.0
    by_cause: dict[str, float] = {}
    for event in trace.by_kind("energy"):
        amount = event["detail"]["amount"]
        cause = event["detail"]["cause"]
        total += amount
        by_cause[cause] = by_cause.get(cause, 0.0) + amount
        if cause in ATTACK_CAUSES:
            attributable += amount
    return {
        "total_drained": round(total, 6),
        "attack_attributable": round(attributable, 6),
        "by_cause": {k: round(v, 6) for k, v in sorted(by_cause.items())},
        "projected_exchanges_lost": round(attributable / cost_edhoc, 6),
    }


def resource_label(attributable: float, exposure_ms: int, budget: float,
                   high_fraction: float) -> str:
    if attributable == 0.0:
        return "low_or_none"
    if exposure_ms <= 0:
        return "low"
    per_day = attributable * 86_400_000.0 / exposure_ms
    return "high" if per_day > high_fraction * budget else "low"


# --- cells and the matrix -------------------------------------------------------


def run_cell(config: SimConfig, scenario: str, attack_kind: str,
             collect_traces: bool = False) -> dict:
    """Run one (scenario, attack) cell: a setup sub-run and a steady sub-run."""
    sub_a = run_subrun(config, scenario, attack_kind, "setup")
    sub_b = run_subrun(config, scenario, attack_kind, "steady")

    setup = phase_stats(sub_a.handles.client.interactions, ("key_exchange",),
                        config)
    steady = phase_stats(sub_b.handles.client.interactions, ("request",),
                         config)

    total = 0.0
    attributable = 0.0
    for sub in (sub_a, sub_b):
        rep = energy_report(sub.handles.world.trace, config.energy.cost_edhoc)
        total += rep["total_drained"]
        attributable += rep["attack_attributable"]
    exposure = 0
    if attack_kind != "none":
        exposure = sum(s.measured_until_ms - s.attack_start_ms
                       for s in (sub_a, sub_b))

    rekeys = sum(s.handles.client.rekeys for s in (sub_a, sub_b))
    induced = sum(s.handles.client.attack_induced_rekeys for s in (sub_a, sub_b))
    renegotiations = 0
    for sub in (sub_a, sub_b):
        for node in (sub.handles.client_router, sub.handles.server_router):
            renegotiations += getattr(node, "renegotiations", 0)

    cell = {
        "scenario": scenario,
        "attack": attack_kind,
        "seed": config.seed,
        "setup": setup,
        "steady": steady,
        "energy": {
            "total_drained": round(total, 6),
            "attack_attributable": round(attributable, 6),
            "projected_exchanges_lost": round(
                attributable / config.energy.cost_edhoc, 6),
        },
        "resource": resource_label(attributable, exposure,
                                   config.energy.budget,
                                   config.resource.high_fraction),
        "rekeys": rekeys,
        "attack_induced_rekeys": induced,
        "tunnel_renegotiations": renegotiations,
    }
    if collect_traces:
        cell["_traces"] = (sub_a.handles.world.trace, sub_b.handles.world.trace)
    return cell


def run_matrix(config: SimConfig) -> dict:
    cells = []
    errored = False
    for scenario, attack in MATRIX_CELLS:
        try:
            cells.append(run_cell(config, scenario, attack))
        except Exception as e:  # a cell must not take down the whole matrix
            errored = True
            cells.append({"scenario": scenario, "attack": attack,
                          "error": f"{type(e).__name__}: {e}"})
    return {"seed": config.seed, "cells": cells, "errored": errored}


# --- rendering ------------------------------------------------------------------


def report_to_json(report: dict) -> str:
    clean = {k: v for k, v in report.items() if not k.startswith("_")}
    return json.dumps(clean, sort_keys=True, indent=2) + "\n"


def _cell_rows(cells: list[dict]):
    for cell in cells:
        if "error" in cell:
            yield (cell["scenario"], cell["attack"], "error", "error", "error",
                   cell["error"])
        else:
            yield (cell["scenario"], cell["attack"],
                   cell["setup"]["behavior"], cell["steady"]["behavior"],
                   cell["resource"],
                   f'rekeys={cell["rekeys"]} renegotiations={cell["tunnel_renegotiations"]}')


def matrix_to_markdown(report: dict) -> str:
    lines = ["| Scenario | Attack | Setup | Steady | Resource | Notes |",
             "|---|---|---|---|---|---|"]
    for row in _cell_rows(report["cells"]):
        lines.append("| " + " | ".join(str(c) for c in row) + " |")
    return "\n".join(lines) + "\n"


def matrix_to_csv(report: dict) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["scenario", "attack", "setup", "steady", "resource",
                     "notes"])
    for row in _cell_rows(report["cells"]):
        writer.writerow(row)
    return out.getvalue()


def cell_to_markdown(cell: dict) -> str:
    return matrix_to_markdown({"cells": [cell]})


def cell_to_csv(cell: dict) -> str:
    return matrix_to_csv({"cells": [cell]})
