"""Wires capture records through the codec into the risk engine.

The same function drives offline file analysis and live monitoring, so
a capture of a session and the session itself produce identical alerts.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from .modbus import MODBUS_TCP_PORT, Direction, iter_adus
from .pcap import CaptureRecord, write_pcap
from .risk import Alert, RiskEngine, RiskTable


@dataclass
class AnalysisSummary:
    records_total: int = 0
    packets: int = 0
    caches: int = 0
    flags: int = 0
    alerts: int = 0
    mean: float = 0.0
    sigma: float = 0.0
    moving_avg: float = 0.0
    partial_cache: dict | None = None

    def to_json(self) -> dict:
        return {
            "records_total": self.records_total,
            "packets": self.packets,
            "caches": self.caches,
            "flags": self.flags,
            "alerts": self.alerts,
            "mean": self.mean,
            "sigma": self.sigma,
            "moving_avg": self.moving_avg,
            "partial_cache": self.partial_cache,
        }


def analyze_records(records: Iterable[CaptureRecord], *,
                    table: RiskTable | None = None,
                    flag_dir: str | Path | None = None,
                    port: int = MODBUS_TCP_PORT,
                    on_alert=None,
                    **engine_kwargs) -> tuple[list[Alert], AnalysisSummary]:
    """Run the detector over a record stream.

    Flagged cache windows are exported as pcap files under ``flag_dir``
    when given. ``on_alert`` is called with each alert as it fires, so
    live monitors can report before the stream ends.
    """
    engine = RiskEngine(table=table, **engine_kwargs)
    window: deque[CaptureRecord] = deque(maxlen=engine.cache_size)
    alerts: list[Alert] = []
    summary = AnalysisSummary()
    if flag_dir is not None:
        flag_dir = Path(flag_dir)
        flag_dir.mkdir(parents=True, exist_ok=True)

    try:
        for record in records:
            summary.records_total += 1
            if record.decoded is None:
                continue
            decoded = record.decoded
            direction = (Direction.TO_SLAVE if decoded.dst_port == port
                         else Direction.TO_MASTER)
            for item in iter_adus(decoded.payload, direction, record.timestamp,
                                  (decoded.src_ip, decoded.src_port),
                                  (decoded.dst_ip, decoded.dst_port)):
                window.append(record)
                fired = engine.push(item)
                if not fired:
                    continue
                path = None
                if flag_dir is not None:
                    path = flag_dir / \
                        f"flagged-cache-{fired[0].cache.index:05d}.pcap"
                    unique: list[CaptureRecord] = []
                    for rec in window:
                        if not unique or rec is not unique[-1]:
                            unique.append(rec)
                    write_pcap(unique, path)
                for alert in fired:
                    alert.pcap_path = str(path) if path else None
                    alerts.append(alert)
                    if on_alert:
                        on_alert(alert)
    except KeyboardInterrupt:
        pass  # shut down cleanly; the partial window is reported below

    summary.packets = engine.packets_seen
    summary.caches = engine.caches_completed
    summary.flags = engine.flag_count
    summary.alerts = len(alerts)
    summary.mean = engine.history.mean
    summary.sigma = engine.history.sigma
    summary.moving_avg = engine.history.moving_avg
    partial = engine.flush()
    if partial is not None:
        summary.partial_cache = {
            "packets": len(partial),
            "cache_risk": partial.cache_risk,
            "first_ts": partial.first_ts,
            "last_ts": partial.last_ts,
        }
    return alerts, summary


def queue_records(q, sentinel=None) -> Iterator[CaptureRecord]:
    """Drain a bounded queue of records until the sentinel arrives.

    Producers block when the queue is full; nothing is ever dropped, so
    live runs keep the offline determinism guarantee.
    """
    while True:
        item = q.get()
        if item is sentinel:
            return
        yield item
