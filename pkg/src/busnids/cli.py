"""Command-line entry point: analyze, simulate, evaluate, monitor."""

from __future__ import annotations

import argparse
import json
import os
import queue
import sys
import threading
from pathlib import Path

from . import __version__
from .metrics import MetricsReport, align, confusion, effective_labels, load_jsonl
from .pcap import CaptureUnavailable, PcapError, open_live, read_pcap, write_pcap
from .pipeline import analyze_records, queue_records
from .risk import RiskTable, load_risk_config
from .simulate import (AttackEvent, AttackKind, InvalidConfig, SimConfig,
                       run_simulation)

CONFIG_ENV = "BUSNIDS_CONFIG"

EXIT_CLEAN = 0
EXIT_ERROR = 1
EXIT_ALERTS = 2


def _parse_duration_s(text: str) -> float:
    text = text.strip().lower()
    for suffix, scale in (("ms", 0.001), ("s", 1.0), ("m", 60.0), ("h", 3600.0)):
        if text.endswith(suffix):
            return float(text[: -len(suffix)]) * scale
    return float(text)


def _parse_duration_ms(text: str) -> float:
    return _parse_duration_s(text) * 1000 if text.strip()[-1].isalpha() \
        else float(text)


def parse_attack_spec(spec: str) -> AttackEvent:
    """kind:trigger[:count[:gap]] e.g. replay-burst:30s:20:5ms"""
    parts = spec.split(":")
    kinds = {"replay-write": AttackKind.REPLAY_WRITE,
             "replay-burst": AttackKind.REPLAY_BURST,
             "slow-ramp": AttackKind.SLOW_RAMP}
    if len(parts) < 2 or parts[0] not in kinds:
        raise ValueError(f"bad attack spec {spec!r}; expected "
                         "kind:trigger[:count[:gap]] with kind one of "
                         f"{sorted(kinds)}")
    kind = kinds[parts[0]]
    trigger = _parse_duration_s(parts[1])
    count = int(parts[2]) if len(parts) > 2 else \
        (20 if kind is not AttackKind.REPLAY_WRITE else 1)
    gap_ms = _parse_duration_ms(parts[3]) if len(parts) > 3 else 5.0
    return AttackEvent(kind=kind, trigger_time_s=trigger, repeat_count=count,
                       gap_ms=gap_ms)


def _engine_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("detector")
    group.add_argument("--cache-size", type=int, default=None,
                       help="packets per cache window (default 20)")
    group.add_argument("--sigma-floor", type=float, default=None,
                       help="minimum deviation threshold (default 0.01)")
    group.add_argument("--warmup", type=int, default=None,
                       help="caches before flagging starts (default 5)")
    group.add_argument("--ra-window", type=int, default=None,
                       help="moving-average window (default 10)")
    group.add_argument("--two-sided", action="store_true", default=None,
                       help="also flag caches far below the mean")
    group.add_argument("--risk-table", metavar="FILE", default=None,
                       help="JSON risk/engine overrides (see README)")


def resolve_engine(args) -> tuple[RiskTable, dict]:
    """defaults < $BUSNIDS_CONFIG file < --risk-table file < flags"""
    table = RiskTable()
    settings = {"cache_size": 20, "sigma_floor": 0.01, "warmup_min": 5,
                "ra_window": 10, "two_sided": False}
    key_map = {"cache_max_size": "cache_size", "sigma_floor": "sigma_floor",
               "warmup_min": "warmup_min", "ra_window": "ra_window",
               "two_sided": "two_sided"}
    for path in (os.environ.get(CONFIG_ENV), getattr(args, "risk_table", None)):
        if not path:
            continue
        loaded = load_risk_config(path)
        table = loaded["table"]
        for key, value in loaded["engine"].items():
            settings[key_map[key]] = value
    for flag, key in (("cache_size", "cache_size"),
                      ("sigma_floor", "sigma_floor"),
                      ("warmup", "warmup_min"),
                      ("ra_window", "ra_window"),
                      ("two_sided", "two_sided")):
        value = getattr(args, flag, None)
        if value is not None:
            settings[key] = value
    return table, settings


def write_manifest(out_dir: Path, subcommand: str, config: dict,
                   inputs: dict, outputs: dict) -> Path:
    manifest = {
        "tool": "busnids",
        "version": __version__,
        "subcommand": subcommand,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_manifest(path: str) -> dict:
    manifest = json.loads(Path(path).read_text())
    if manifest.get("tool") != "busnids":
        raise ValueError(f"{path} is not a busnids manifest")
    return manifest


def cmd_analyze(args) -> int:
    table, settings = resolve_engine(args)
    if args.from_manifest:
        stored = _load_manifest(args.from_manifest)
        settings.update(stored["config"]["engine"])
        args.pcap = args.pcap or stored["inputs"]["pcap"]
    if not args.pcap:
        print("analyze: no pcap given", file=sys.stderr)
        return EXIT_ERROR
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    try:
        alerts, summary = analyze_records(
            read_pcap(args.pcap), table=table, flag_dir=out_dir, **settings)
    except (OSError, PcapError) as err:
        print(f"analyze: {err}", file=sys.stderr)
        return EXIT_ERROR

    alerts_path = out_dir / "alerts.jsonl"
    with open(alerts_path, "w") as fh:
        for alert in alerts:
            line = json.dumps(alert.to_json())
            fh.write(line + "\n")
            print(line)
    summary_path = out_dir / "summary.json"
    summary_path.write_text(json.dumps(summary.to_json(), indent=2) + "\n")
    write_manifest(out_dir, "analyze",
                   {"engine": settings},
                   {"pcap": str(args.pcap)},
                   {"alerts": str(alerts_path), "summary": str(summary_path)})
    print(f"packets={summary.packets} caches={summary.caches} "
          f"flags={summary.flags} mean={summary.mean:.6f} "
          f"sigma={summary.sigma:.6f} moving_avg={summary.moving_avg:.6f}")
    return EXIT_ALERTS if alerts else EXIT_CLEAN


def cmd_simulate(args) -> int:
    table, settings = resolve_engine(args)
    if args.from_manifest:
        stored = _load_manifest(args.from_manifest)["config"]
        config = SimConfig(
            seed=stored["seed"], duration_s=stored["duration_s"],
            poll_period_ms=stored["poll_period_ms"],
            write_period_s=stored["write_period_s"],
            write_offset_s=stored["write_offset_s"],
            scan_period_ms=stored["scan_period_ms"],
            attacks=tuple(AttackEvent(kind=AttackKind(a["kind"]),
                                      trigger_time_s=a["trigger_time_s"],
                                      source_frame=a["source_frame"],
                                      repeat_count=a["repeat_count"],
                                      gap_ms=a["gap_ms"])
                          for a in stored["attacks"]),
            error_poll_every=stored["error_poll_every"],
            engine=dict(stored["engine"], table=table))
    else:
        try:
            attacks = tuple(parse_attack_spec(s) for s in args.attack or ())
        except ValueError as err:
            print(f"simulate: {err}", file=sys.stderr)
            return EXIT_ERROR
        config = SimConfig(
            seed=args.seed,
            duration_s=_parse_duration_s(args.duration),
            poll_period_ms=_parse_duration_ms(args.poll_period),
            write_period_s=_parse_duration_s(args.write_period),
            write_offset_s=_parse_duration_s(args.write_offset),
            scan_period_ms=int(_parse_duration_ms(args.scan)),
            attacks=attacks,
            error_poll_every=args.error_poll_every,
            engine=dict(settings, table=table))

    try:
        result = run_simulation(config)
    except InvalidConfig as err:
        print(f"simulate: {err}", file=sys.stderr)
        return EXIT_ERROR

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pcap_path = out_dir / "traffic.pcap"
    write_pcap(result.records, pcap_path)
    labels_path = out_dir / "labels.jsonl"
    with open(labels_path, "w") as fh:
        for label in result.labels:
            fh.write(json.dumps(label.to_json()) + "\n")

    engine_echo = {k: v for k, v in config.engine.items() if k != "table"}
    config_echo = {
        "seed": config.seed, "duration_s": config.duration_s,
        "poll_period_ms": config.poll_period_ms,
        "write_period_s": config.write_period_s,
        "write_offset_s": config.write_offset_s,
        "scan_period_ms": config.scan_period_ms,
        "attacks": [{"kind": a.kind.value, "trigger_time_s": a.trigger_time_s,
                     "source_frame": a.source_frame,
                     "repeat_count": a.repeat_count, "gap_ms": a.gap_ms}
                    for a in config.attacks],
        "error_poll_every": config.error_poll_every,
        "engine": engine_echo,
    }
    write_manifest(out_dir, "simulate", config_echo, {},
                   {"pcap": str(pcap_path), "labels": str(labels_path)})
    attack_count = sum(1 for lab in result.labels if lab.label == "attack")
    print(f"frames={len(result.records)} attacks={attack_count} "
          f"polls={result.stats.polls} errors={result.stats.errors} "
          f"error_percent={result.stats.error_percent:.4f}")
    print(f"wrote {pcap_path} and {labels_path}")
    return EXIT_CLEAN


def cmd_evaluate(args) -> int:
    try:
        alerts = load_jsonl(args.alerts)
        labels = load_jsonl(args.labels)
    except OSError as err:
        print(f"evaluate: {err}", file=sys.stderr)
        return EXIT_ERROR

    summary_path = Path(args.alerts).parent / "summary.json"
    if summary_path.exists():
        analyzed = json.loads(summary_path.read_text()).get("packets")
        if analyzed is not None and analyzed != len(labels):
            print(f"evaluate: analyzer saw {analyzed} packets but labels "
                  f"cover {len(labels)}", file=sys.stderr)
            return EXIT_ERROR
    try:
        predictions = align(alerts, labels)
    except IndexError as err:
        print(f"evaluate: {err}", file=sys.stderr)
        return EXIT_ERROR

    report = MetricsReport.build(
        confusion(predictions, effective_labels(labels)),
        config={"alerts": str(args.alerts), "labels": str(args.labels)})
    print(report.to_table())
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(report.to_json(), indent=2) + "\n")
    write_manifest(out_dir, "evaluate", report.config,
                   {"alerts": str(args.alerts), "labels": str(args.labels)},
                   {"report": str(report_path)})
    return EXIT_CLEAN


def cmd_monitor(args) -> int:
    table, settings = resolve_engine(args)
    try:
        live = open_live(args.iface, args.filter)
    except CaptureUnavailable as err:
        print(f"monitor: {err}", file=sys.stderr)
        return EXIT_ERROR

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    feed: queue.Queue = queue.Queue(maxsize=4096)
    stop = object()

    def pump() -> None:
        try:
            for record in live:
                feed.put(record)
        finally:
            feed.put(stop)

    producer = threading.Thread(target=pump, daemon=True)
    producer.start()
    # Ctrl-C lands inside the analysis loop, which flushes the partial
    # cache into the summary without flagging it.
    alerts, summary = analyze_records(
        queue_records(feed, stop), table=table, flag_dir=out_dir,
        on_alert=lambda a: print(json.dumps(a.to_json()), flush=True),
        **settings)
    print(json.dumps(summary.to_json()))
    return EXIT_ALERTS if alerts else EXIT_CLEAN


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="busnids",
        description="Risk-scoring replay-attack detector for Modbus TCP, "
                    "with a simulated traffic-light testbed")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    analyze = sub.add_parser("analyze", help="score a pcap file")
    analyze.add_argument("--pcap", help="capture file to analyze")
    analyze.add_argument("--out", default="busnids-out",
                         help="directory for alerts, summary, flagged pcaps")
    analyze.add_argument("--from-manifest", help="re-run a recorded analysis")
    _engine_flags(analyze)
    analyze.set_defaults(func=cmd_analyze)

    simulate = sub.add_parser("simulate", help="generate a labeled dataset")
    simulate.add_argument("--out", default="busnids-sim",
                          help="directory for traffic.pcap and labels.jsonl")
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--duration", default="60s")
    simulate.add_argument("--poll-period", default="100ms")
    simulate.add_argument("--write-period", default="600s")
    simulate.add_argument("--write-offset", default="10s")
    simulate.add_argument("--scan", default="50ms")
    simulate.add_argument("--attack", action="append", metavar="SPEC",
                          help="kind:trigger[:count[:gap]], repeatable")
    simulate.add_argument("--error-poll-every", type=int, default=None)
    simulate.add_argument("--from-manifest", help="re-run a recorded simulation")
    _engine_flags(simulate)
    simulate.set_defaults(func=cmd_simulate)

    evaluate = sub.add_parser("evaluate", help="score alerts against labels")
    evaluate.add_argument("--alerts", required=True)
    evaluate.add_argument("--labels", required=True)
    evaluate.add_argument("--out", default="busnids-eval")
    evaluate.set_defaults(func=cmd_evaluate)

    monitor = sub.add_parser("monitor", help="live capture (needs privileges)")
    monitor.add_argument("--iface", required=True)
    monitor.add_argument("--filter", default="tcp port 502")
    monitor.add_argument("--out", default="busnids-monitor")
    _engine_flags(monitor)
    monitor.set_defaults(func=cmd_monitor)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as err:
        print(f"busnids: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
