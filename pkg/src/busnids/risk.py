"""Streaming risk scoring for Modbus TCP traffic.

Every packet gets a risk from its function code, bumped when the packet
is erroneous. Packets fill fixed-size caches; each completed cache is
summarized by its mean risk. A history of accepted cache risks yields a
running mean and population standard deviation, and a cache whose risk
sits more than one standard deviation (with a small floor) above that
mean is flagged as a suspected replay. Flagged caches are remembered,
and any later cache with an identical risk pattern is flagged again no
matter what the statistics say at that point. Flagged caches never feed
the baseline statistics, so an attack cannot poison its own threshold.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

from .modbus import ModbusFrame, ParseError, is_erroneous

# Write-capable function codes carry most of the risk: on a fixed-function
# network there are few reasons to see writes at all.
DEFAULT_BASE_RISK: dict[int, float] = {
    1: 0.5,   # Read Coils
    2: 0.1,   # Read Discrete Inputs
    3: 0.5,   # Read Multiple Holding Registers
    4: 0.1,   # Read Input Registers
    5: 0.9,   # Write Single Coil
    6: 0.9,   # Write Single Holding Register
    15: 0.9,  # Write Multiple Coils
    16: 0.9,  # Write Multiple Holding Registers
    20: 0.5,  # Read File Record
    21: 0.5,  # Write File Record
    22: 0.5,  # Mask Write Register
    23: 0.9,  # Read/Write Multiple Registers
    24: 0.1,  # Read FIFO Queue
}

RISK_CAP = 1.0


@dataclass(frozen=True)
class RiskTable:
    base_risk: dict[int, float] = field(
        default_factory=lambda: dict(DEFAULT_BASE_RISK))
    unknown_code_risk: float = 0.9
    error_increment: float = 0.5

    def __post_init__(self):
        for code, value in self.base_risk.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"risk for code {code} outside [0,1]: {value}")
        if not 0.0 <= self.unknown_code_risk <= 1.0:
            raise ValueError("unknown_code_risk outside [0,1]")
        if not 0.0 <= self.error_increment <= 1.0:
            raise ValueError("error_increment outside [0,1]")

    def base_for(self, item: ModbusFrame | ParseError) -> float:
        if isinstance(item, ParseError):
            return self.unknown_code_risk
        code = item.function_code
        if item.is_exception_response:
            # Score the operation that failed, not the exception marker.
            code &= 0x7F
        return self.base_risk.get(code, self.unknown_code_risk)


@dataclass(frozen=True)
class ScoredPacket:
    function_code: int | None  # None when the packet failed to parse
    risk: float
    erroneous: bool
    timestamp: int = 0


def packet_risk(item: ModbusFrame | ParseError,
                table: RiskTable | None = None) -> ScoredPacket:
    """Score one packet: base risk by function code, capped error bump."""
    table = table or RiskTable()
    erroneous = is_erroneous(item)
    risk = table.base_for(item)
    if erroneous:
        risk = min(RISK_CAP, risk + table.error_increment)
    if isinstance(item, ParseError):
        return ScoredPacket(None, risk, True, item.timestamp)
    return ScoredPacket(item.function_code, risk, erroneous, item.timestamp)


class FlagReason(Enum):
    NONE = "none"
    DEVIATION = "deviation"
    STORED_MATCH = "stored_match"


@dataclass
class CacheSummary:
    index: int                 # ordinal of this cache in the stream
    start_index: int           # global index of the cache's first packet
    cache_risk: float          # mean packet risk over the window
    risk_sequence: tuple[tuple[int | None, float], ...]
    first_ts: int
    last_ts: int
    flagged: bool = False
    flag_reason: FlagReason = FlagReason.NONE

    def __len__(self) -> int:
        return len(self.risk_sequence)


@dataclass
class Alert:
    kind: FlagReason
    cache: CacheSummary
    offending: tuple[int, ...]  # indices into the cache's risk sequence
    mean: float                 # history mean at flag time
    sigma: float                # history std deviation at flag time
    moving_avg: float
    pcap_path: str | None = None

    @property
    def offending_global(self) -> tuple[int, ...]:
        return tuple(self.cache.start_index + i for i in self.offending)

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "cache_index": self.cache.index,
            "r_c": self.cache.cache_risk,
            "mean": self.mean,
            "sigma": self.sigma,
            "moving_avg": self.moving_avg,
            "first_ts": self.cache.first_ts,
            "last_ts": self.cache.last_ts,
            "offending": list(self.offending_global),
            "pcap": self.pcap_path,
        }


class RiskHistory:
    """Statistics over the risks of accepted (unflagged) caches.

    Mean and standard deviation are recomputed over the retained values
    after every accepted cache; retention is bounded so the detector
    stays sensitive to regime changes. The standard deviation is the
    population form, defined from the first sample onward.
    """

    def __init__(self, window: int = 10, warmup_min: int = 5,
                 retention: int = 1000):
        if window < 1 or warmup_min < 1 or retention < 1:
            raise ValueError("window, warmup_min and retention must be >= 1")
        self.window = window
        self.warmup_min = warmup_min
        self.values: deque[float] = deque(maxlen=retention)
        self.mean = 0.0
        self.sigma = 0.0
        self.moving_avg = 0.0

    def __len__(self) -> int:
        return len(self.values)

    def accept(self, cache_risk: float) -> None:
        """Fold one accepted cache risk into the statistics."""
        self.values.append(cache_risk)
        n = len(self.values)
        self.mean = math.fsum(self.values) / n
        if min(self.values) == max(self.values):
            self.sigma = 0.0  # exactly, so constant history never self-flags
        else:
            self.sigma = math.sqrt(
                math.fsum((v - self.mean) ** 2 for v in self.values) / n)
        tail = list(self.values)[-min(self.window, n):]
        self.moving_avg = math.fsum(tail) / len(tail)

    def deviates(self, cache_risk: float, sigma_floor: float = 0.01,
                 two_sided: bool = False) -> bool:
        """One-sided 1-sigma test against the mean, strict inequality.

        Quiet during warm-up: too few caches make the deviation
        meaningless. The floor keeps a constant history (sigma == 0)
        from flagging every fluctuation.
        """
        if len(self.values) < self.warmup_min:
            return False
        threshold = max(self.sigma, sigma_floor)
        if cache_risk - self.mean > threshold:
            return True
        return two_sided and self.mean - cache_risk > threshold


def offending_packets(risks: Iterable[float], mean: float) -> tuple[int, ...]:
    """Indices of packets with risk above the history mean at flag time.

    Falls back to every index when nothing exceeds the mean (a stored
    match over uniformly low risks), so an alert always points somewhere.
    """
    risks = list(risks)
    above = tuple(i for i, r in enumerate(risks) if r > mean)
    return above if above else tuple(range(len(risks)))


class RiskEngine:
    """Single-writer streaming detector.

    Deterministic: no clock or randomness; identical packet sequences
    produce identical alert sequences.
    """

    def __init__(self, table: RiskTable | None = None, *,
                 cache_size: int = 20, sigma_floor: float = 0.01,
                 warmup_min: int = 5, ra_window: int = 10,
                 history_retention: int = 1000, two_sided: bool = False):
        if cache_size < 1:
            raise ValueError("cache_size must be >= 1")
        if sigma_floor < 0:
            raise ValueError("sigma_floor must be >= 0")
        self.table = table or RiskTable()
        self.cache_size = cache_size
        self.sigma_floor = sigma_floor
        self.two_sided = two_sided
        self.history = RiskHistory(window=ra_window, warmup_min=warmup_min,
                                   retention=history_retention)
        self._cache: list[ScoredPacket] = []
        self._stored: dict[tuple, CacheSummary] = {}
        self.packets_seen = 0
        self.caches_completed = 0
        self.flag_count = 0

    def push(self, item: ModbusFrame | ParseError) -> list[Alert]:
        """Score a raw frame (or parse failure) and push it."""
        return self.push_scored(packet_risk(item, self.table))

    def push_scored(self, scored: ScoredPacket) -> list[Alert]:
        """Append one scored packet; finalize the cache when it fills."""
        self._cache.append(scored)
        self.packets_seen += 1
        if len(self._cache) < self.cache_size:
            return []
        return self._finalize_cache()

    def _summarize(self, packets: list[ScoredPacket]) -> CacheSummary:
        risks = [p.risk for p in packets]
        return CacheSummary(
            index=self.caches_completed,
            start_index=self.packets_seen - len(packets),
            cache_risk=math.fsum(risks) / len(risks),
            risk_sequence=tuple((p.function_code, p.risk) for p in packets),
            first_ts=packets[0].timestamp,
            last_ts=packets[-1].timestamp,
        )

    def _finalize_cache(self) -> list[Alert]:
        summary = self._summarize(self._cache)
        self._cache = []
        self.caches_completed += 1

        deviated = self.history.deviates(summary.cache_risk, self.sigma_floor,
                                         self.two_sided)
        matched = self._stored.get(summary.risk_sequence)

        alerts: list[Alert] = []
        if deviated or matched is not None:
            summary.flagged = True
            summary.flag_reason = (FlagReason.DEVIATION if deviated
                                   else FlagReason.STORED_MATCH)
            offending = offending_packets(
                (r for _, r in summary.risk_sequence), self.history.mean)
            if deviated:
                alerts.append(self._alert(FlagReason.DEVIATION, summary,
                                          offending))
            if matched is not None:
                alerts.append(self._alert(FlagReason.STORED_MATCH, summary,
                                          offending))
            self._stored.setdefault(summary.risk_sequence, summary)
            self.flag_count += 1
        else:
            self.history.accept(summary.cache_risk)
        return alerts

    def _alert(self, kind: FlagReason, summary: CacheSummary,
               offending: tuple[int, ...]) -> Alert:
        return Alert(kind=kind, cache=summary, offending=offending,
                     mean=self.history.mean, sigma=self.history.sigma,
                     moving_avg=self.history.moving_avg)

    def flush(self) -> CacheSummary | None:
        """Summarize a partially filled cache without flagging it.

        Used at shutdown so the operator sees the tail of the stream;
        the partial window never touches the statistics.
        """
        if not self._cache:
            return None
        summary = self._summarize(self._cache)
        self._cache = []
        return summary

    @property
    def stored_caches(self) -> list[CacheSummary]:
        return list(self._stored.values())


ENGINE_OPTION_KEYS = ("cache_max_size", "sigma_floor", "warmup_min",
                      "ra_window", "two_sided")


def load_risk_config(path: str | Path) -> dict:
    """Read a JSON risk-table override file.

    Integer keys override per-code base risks; the named keys
    unknown_code_risk, error_increment, cache_max_size, sigma_floor,
    warmup_min, ra_window and two_sided tune the table and engine.
    Returns {"table": RiskTable, "engine": {engine kwargs present}}.
    """
    raw = json.loads(Path(path).read_text())
    base = dict(DEFAULT_BASE_RISK)
    engine: dict = {}
    unknown = 0.9
    increment = 0.5
    for key, value in raw.items():
        if key == "unknown_code_risk":
            unknown = float(value)
        elif key == "error_increment":
            increment = float(value)
        elif key in ENGINE_OPTION_KEYS:
            engine[key] = bool(value) if key == "two_sided" else \
                (float(value) if key == "sigma_floor" else int(value))
        else:
            try:
                code = int(key)
            except ValueError:
                raise ValueError(f"unrecognized risk config key: {key!r}")
            if not 0 <= code <= 255:
                raise ValueError(f"function code out of range: {code}")
            base[code] = float(value)
    table = RiskTable(base_risk=base, unknown_code_risk=unknown,
                      error_increment=increment)
    return {"table": table, "engine": engine}
