"""Configuration handling, classification rules, energy reporting, rendering."""

import json

import pytest

from guardsim.harness import (ATTACKS, ConfigError, MATRIX_CELLS, SCENARIOS,
                              SimConfig, cell_to_csv, cell_to_markdown,
                              classify_behavior, config_from_dict, derive_seed,
                              energy_report, load_config, matrix_to_csv,
                              matrix_to_markdown, report_to_json,
                              resource_label)
from guardsim.netsim import Trace


# --- configuration ------------------------------------------------------------

def test_default_config_is_valid():
    cfg = config_from_dict({})
    assert cfg.seed == 42
    assert cfg.scenario in SCENARIOS
    assert cfg.attack in ATTACKS


def test_nested_overrides():
    cfg = config_from_dict({
        "seed": 7,
        "scenario": "fullguard",
        "links": {"constrained": {"bandwidth_bps": 1000}},
        "guard": {"unknown_bucket": {"per_source_rate": 0.5,
                                     "per_source_burst": 1,
                                     "aggregate_rate": 2,
                                     "aggregate_burst": 2}},
    })
    assert cfg.seed == 7
    assert cfg.links.constrained.bandwidth_bps == 1000
    assert cfg.links.internet.bandwidth_bps == 1_000_000  # untouched
    assert cfg.guard.unknown_bucket.per_source_rate == 0.5


def test_unknown_field_names_its_path():
    with pytest.raises(ConfigError, match="links.constrained.bandwdth"):
        config_from_dict({"links": {"constrained": {"bandwdth": 1}}})


def test_wrong_type_rejected():
    with pytest.raises(ConfigError, match="seed"):
        config_from_dict({"seed": "forty-two"})
    with pytest.raises(ConfigError, match="client.enabled"):
        config_from_dict({"client": {"enabled": 1}})


def test_unknown_scenario_rejected():
    with pytest.raises(ConfigError, match="scenario"):
        config_from_dict({"scenario": "warp-drive"})
    with pytest.raises(ConfigError, match="attack"):
        config_from_dict({"attack": "zerg-rush"})


def test_load_config_bad_json(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(str(path))
    with pytest.raises(ConfigError, match="read"):
        load_config(str(tmp_path / "missing.json"))


def test_load_config_round_trip(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 9, "scenario": "exemptions",
                                "attack": "blind_flood"}))
    cfg = load_config(str(path))
    assert (cfg.seed, cfg.scenario, cfg.attack) == (9, "exemptions",
                                                    "blind_flood")


def test_derive_seed_separates_subruns():
    seeds = {derive_seed(42, s, a, p)
             for s in SCENARIOS for a in ATTACKS for p in ("setup", "steady")}
    assert len(seeds) == len(SCENARIOS) * len(ATTACKS) * 2
    assert derive_seed(42, "exemptions", "none", "setup") == \
        derive_seed(42, "exemptions", "none", "setup")


def test_matrix_covers_all_scenarios():
    assert {s for s, _ in MATRIX_CELLS} == set(SCENARIOS)
    assert ("fullguard", "on_path") in MATRIX_CELLS
    assert ("fullguard", "impersonator") in MATRIX_CELLS


# --- classification -----------------------------------------------------------------

def test_first_attempt_fast_is_good():
    latencies = [150] * 20
    assert classify_behavior(latencies, [0] * 20, 0, 20, 2000) == "good"


def test_retransmissions_mean_throttled():
    # Everything completes, but only after 2-3 retransmissions.
    latencies = [6500] * 20
    retx = [2, 3] * 10
    assert classify_behavior(latencies, retx, 0, 20, 2000) == "throttled"


def test_high_latency_alone_means_throttled():
    latencies = [2500] * 20
    assert classify_behavior(latencies, [0] * 20, 0, 20, 2000) == "throttled"


def test_timeouts_mean_losses():
    # 30% of exchanges hit give-up.
    latencies = [150] * 14
    assert classify_behavior(latencies, [0] * 14, 6, 20, 2000) == "losses"


def test_small_loss_fraction_tolerated():
    latencies = [150] * 99
    assert classify_behavior(latencies, [0] * 99, 1, 100, 2000) == "good"


def test_no_interactions():
    assert classify_behavior([], [], 0, 0, 2000) == "no_traffic"


# --- energy report --------------------------------------------------------------------

def synthetic_trace():
    tr = Trace()
    tr.emit(1, "energy", "srv", amount=0.5, cause="attacker", event="edhoc")
    tr.emit(2, "energy", "srv", amount=0.002, cause="legit", event="msg")
    tr.emit(3, "energy", "srv", amount=1.0, cause="attacker_induced",
            event="edhoc")
    tr.emit(4, "send", "srv")
    return tr


def test_energy_report_attribution():
    rep = energy_report(synthetic_trace(), cost_edhoc=1.0)
    assert rep["total_drained"] == pytest.approx(1.502)
    assert rep["attack_attributable"] == pytest.approx(1.5)
    assert rep["projected_exchanges_lost"] == pytest.approx(1.5)
    assert rep["by_cause"]["legit"] == pytest.approx(0.002)


def test_energy_report_no_attack_is_zero():
    tr = Trace()
    tr.emit(1, "energy", "srv", amount=0.1, cause="legit", event="msg")
    assert energy_report(tr)["attack_attributable"] == 0.0


def test_resource_labels():
    assert resource_label(0.0, 600_000, 50_000, 0.10) == "low_or_none"
    # 40 units over 600 s projects to 5760/day: above 10% of 50 000.
    assert resource_label(40.0, 600_000, 50_000, 0.10) == "high"
    # 20 units over 600 s projects to 2880/day: below the threshold.
    assert resource_label(20.0, 600_000, 50_000, 0.10) == "low"


# --- rendering -------------------------------------------------------------------------

def sample_cell():
    return {
        "scenario": "exemptions", "attack": "none", "seed": 1,
        "setup": {"behavior": "throttled", "n_started": 10, "n_completed": 10,
                  "n_timed_out": 0, "median_latency_ms": 100,
                  "retransmit_fraction": 0.5},
        "steady": {"behavior": "good", "n_started": 30, "n_completed": 30,
                   "n_timed_out": 0, "median_latency_ms": 120,
                   "retransmit_fraction": 0.0},
        "energy": {"total_drained": 1.0, "attack_attributable": 0.0,
                   "projected_exchanges_lost": 0.0},
        "resource": "low_or_none", "rekeys": 0, "attack_induced_rekeys": 0,
        "tunnel_renegotiations": 0,
        "_traces": ("not", "serializable"),
    }


def test_report_json_round_trips_and_strips_private_keys():
    out = report_to_json(sample_cell())
    doc = json.loads(out)
    assert "_traces" not in doc
    assert doc["setup"]["behavior"] == "throttled"
    assert report_to_json(sample_cell()) == out  # stable text


def test_markdown_and_csv_render():
    cell = sample_cell()
    md = cell_to_markdown(cell)
    assert "| exemptions | none | throttled | good | low_or_none |" in md
    csv_text = cell_to_csv(cell)
    assert "exemptions,none,throttled,good,low_or_none" in csv_text
    report = {"seed": 1, "cells": [cell, {"scenario": "fullguard",
                                          "attack": "none",
                                          "error": "Boom: nope"}],
              "errored": True}
    md = matrix_to_markdown(report)
    assert md.count("\n") == 4  # header, rule, two rows, trailing newline
    assert "error" in md
    assert "Boom" in matrix_to_csv(report)
