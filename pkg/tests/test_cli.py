"""End-to-end command-line tests."""

import hashlib
import json

import pytest

from busnids.cli import main, parse_attack_spec
from busnids.simulate import AttackKind


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_simulate(out, *extra):
    return main(["simulate", "--out", str(out), "--seed", "7",
                 "--duration", "60", *extra])


def test_parse_attack_spec():
    burst = parse_attack_spec("replay-burst:30s:20")
    assert burst.kind is AttackKind.REPLAY_BURST
    assert burst.trigger_time_s == 30.0
    assert burst.repeat_count == 20
    ramp = parse_attack_spec("slow-ramp:2m:60")
    assert ramp.kind is AttackKind.SLOW_RAMP
    assert ramp.trigger_time_s == 120.0
    single = parse_attack_spec("replay-write:45s")
    assert single.repeat_count == 1
    gap = parse_attack_spec("replay-burst:30s:10:2ms")
    assert gap.gap_ms == 2.0
    with pytest.raises(ValueError):
        parse_attack_spec("flood:30s")


def test_simulate_is_reproducible(tmp_path):
    assert run_simulate(tmp_path / "a") == 0
    assert run_simulate(tmp_path / "b") == 0
    assert digest(tmp_path / "a" / "traffic.pcap") == \
        digest(tmp_path / "b" / "traffic.pcap")
    assert digest(tmp_path / "a" / "labels.jsonl") == \
        digest(tmp_path / "b" / "labels.jsonl")


def test_simulate_burst_label_count(tmp_path):
    assert run_simulate(tmp_path, "--attack", "replay-burst:30s:20") == 0
    labels = [json.loads(line)
              for line in (tmp_path / "labels.jsonl").read_text().splitlines()]
    attacks = [lab for lab in labels if lab["label"] == "attack"]
    assert len(attacks) == 20


def test_simulate_rejects_poll_faster_than_scan(tmp_path, capsys):
    code = main(["simulate", "--out", str(tmp_path), "--duration", "10",
                 "--poll-period", "10ms", "--scan", "50ms"])
    assert code == 1
    assert "scan" in capsys.readouterr().err


def test_simulate_manifest_reproduces_run(tmp_path):
    first = tmp_path / "first"
    again = tmp_path / "again"
    assert run_simulate(first, "--attack", "replay-burst:30s:20") == 0
    assert main(["simulate", "--out", str(again), "--from-manifest",
                 str(first / "manifest.json")]) == 0
    assert digest(first / "traffic.pcap") == digest(again / "traffic.pcap")
    assert digest(first / "labels.jsonl") == digest(again / "labels.jsonl")


def test_analyze_clean_traffic_exits_zero(tmp_path, capsys):
    sim = tmp_path / "sim"
    out = tmp_path / "out"
    assert run_simulate(sim, "--write-period", "600s", "--duration", "8") == 0
    code = main(["analyze", "--pcap", str(sim / "traffic.pcap"),
                 "--out", str(out)])
    assert code == 0
    assert (out / "alerts.jsonl").read_text() == ""
    summary = json.loads((out / "summary.json").read_text())
    assert summary["flags"] == 0
    assert summary["packets"] > 0
    shown = capsys.readouterr().out
    for field in ("packets=", "caches=", "flags=", "mean=", "sigma=",
                  "moving_avg="):
        assert field in shown


def test_analyze_burst_exits_two_and_exports_caches(tmp_path):
    sim = tmp_path / "sim"
    out = tmp_path / "out"
    assert run_simulate(sim, "--attack", "replay-burst:30s:20") == 0
    code = main(["analyze", "--pcap", str(sim / "traffic.pcap"),
                 "--out", str(out)])
    assert code == 2
    alerts = [json.loads(line)
              for line in (out / "alerts.jsonl").read_text().splitlines()]
    assert alerts
    assert any(a["kind"] == "deviation" for a in alerts)
    for alert in alerts:
        assert alert["pcap"] is not None
        assert (out / alert["pcap"].split("/")[-1]).exists()
        assert alert["r_c"] > alert["mean"]


def test_analyze_missing_file_exits_one(tmp_path, capsys):
    assert main(["analyze", "--pcap", str(tmp_path / "nope.pcap"),
                 "--out", str(tmp_path / "out")]) == 1
    assert "analyze" in capsys.readouterr().err


def test_analyze_manifest_reproduces_alerts(tmp_path):
    sim = tmp_path / "sim"
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    run_simulate(sim, "--attack", "replay-burst:30s:20")
    main(["analyze", "--pcap", str(sim / "traffic.pcap"), "--out", str(out1)])
    assert main(["analyze", "--from-manifest", str(out1 / "manifest.json"),
                 "--out", str(out2)]) == 2

    def normalized(path):
        alerts = [json.loads(line)
                  for line in path.read_text().splitlines()]
        for alert in alerts:
            alert["pcap"] = alert["pcap"].rsplit("/", 1)[-1]
        return alerts

    assert normalized(out1 / "alerts.jsonl") == normalized(out2 / "alerts.jsonl")


def test_evaluate_pipeline(tmp_path, capsys):
    sim = tmp_path / "sim"
    out = tmp_path / "out"
    rep = tmp_path / "rep"
    run_simulate(sim, "--attack", "replay-burst:30s:20")
    main(["analyze", "--pcap", str(sim / "traffic.pcap"), "--out", str(out)])
    capsys.readouterr()
    code = main(["evaluate", "--alerts", str(out / "alerts.jsonl"),
                 "--labels", str(sim / "labels.jsonl"), "--out", str(rep)])
    assert code == 0
    shown = capsys.readouterr().out
    assert "Technique" in shown
    report = json.loads((rep / "report.json").read_text())
    assert report["detection_rate"] > 0.9
    assert report["false_positive_rate"] < 0.01


def test_evaluate_null_detector_has_zero_dr(tmp_path):
    sim = tmp_path / "sim"
    rep = tmp_path / "rep"
    run_simulate(sim, "--attack", "replay-burst:30s:20")
    empty = tmp_path / "alerts.jsonl"
    empty.write_text("")
    assert main(["evaluate", "--alerts", str(empty),
                 "--labels", str(sim / "labels.jsonl"),
                 "--out", str(rep)]) == 0
    report = json.loads((rep / "report.json").read_text())
    assert report["detection_rate"] == 0.0
    assert report["false_positive_rate"] == 0.0
    assert report["confusion"]["fn"] > 0


def test_evaluate_perfect_detector(tmp_path):
    labels = tmp_path / "labels.jsonl"
    alerts = tmp_path / "alerts.jsonl"
    rows = [{"frame_index": i, "label": "attack" if i in (3, 4) else "normal",
             "attack_kind": None, "timestamp": 0, "response_to": None}
            for i in range(10)]
    labels.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    alerts.write_text(json.dumps({"kind": "deviation",
                                  "offending": [3, 4]}) + "\n")
    rep = tmp_path / "rep"
    assert main(["evaluate", "--alerts", str(alerts), "--labels", str(labels),
                 "--out", str(rep)]) == 0
    report = json.loads((rep / "report.json").read_text())
    assert report["accuracy"] == 1.0
    assert report["detection_rate"] == 1.0
    assert report["false_positive_rate"] == 0.0


def test_evaluate_detects_frame_count_mismatch(tmp_path, capsys):
    out = tmp_path / "out"
    out.mkdir()
    (out / "alerts.jsonl").write_text("")
    (out / "summary.json").write_text(json.dumps({"packets": 99}))
    labels = tmp_path / "labels.jsonl"
    labels.write_text(json.dumps({"frame_index": 0, "label": "normal",
                                  "response_to": None}) + "\n")
    assert main(["evaluate", "--alerts", str(out / "alerts.jsonl"),
                 "--labels", str(labels), "--out", str(tmp_path / "rep")]) == 1
    assert "99" in capsys.readouterr().err


def test_risk_table_override_changes_flagging(tmp_path):
    table = tmp_path / "risk.json"
    table.write_text(json.dumps({"5": 0.5, "cache_max_size": 10}))
    sim = tmp_path / "sim"
    out = tmp_path / "out"
    run_simulate(sim)
    code = main(["analyze", "--pcap", str(sim / "traffic.pcap"),
                 "--out", str(out), "--risk-table", str(table)])
    # Writes scored like reads: the override write cannot deviate.
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["engine"]["cache_size"] == 10


def test_config_env_var(tmp_path, monkeypatch):
    table = tmp_path / "risk.json"
    table.write_text(json.dumps({"cache_max_size": 40}))
    monkeypatch.setenv("BUSNIDS_CONFIG", str(table))
    sim = tmp_path / "sim"
    out = tmp_path / "out"
    run_simulate(sim)
    main(["analyze", "--pcap", str(sim / "traffic.pcap"), "--out", str(out)])
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["engine"]["cache_size"] == 40


def test_flag_precedence_over_config_file(tmp_path, monkeypatch):
    table = tmp_path / "risk.json"
    table.write_text(json.dumps({"cache_max_size": 40}))
    monkeypatch.setenv("BUSNIDS_CONFIG", str(table))
    sim = tmp_path / "sim"
    out = tmp_path / "out"
    run_simulate(sim)
    main(["analyze", "--pcap", str(sim / "traffic.pcap"), "--out", str(out),
          "--cache-size", "15"])
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["engine"]["cache_size"] == 15


def test_monitor_requires_real_interface(tmp_path, capsys):
    assert main(["monitor", "--iface", "busnids-no-such-if0",
                 "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "monitor" in err
