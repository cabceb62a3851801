"""Deterministic software testbed: traffic-light PLC, polling master, replay attacker.

Everything runs on a simulated integer-microsecond clock, so a run is a
pure function of its configuration: same seed, byte-identical capture.
The master polls the PLC's coils and periodically writes a manual
override coil; the attacker re-sends previously captured write frames
byte for byte. Every emitted frame carries a ground-truth label.
"""

from __future__ import annotations

import heapq
import math
import random
import socket
import struct
import threading
from dataclasses import dataclass, field, replace
from enum import Enum

from .modbus import (Direction, ModbusFrame, encode_frame, make_frame,
                     iter_adus, EXCEPTION_BIT)
from .pcap import CaptureRecord, build_tcp_frame, make_record
from .risk import RiskHistory, RiskTable, packet_risk

SIM_EPOCH_US = 1_700_000_000 * 1_000_000

MASTER_MAC = bytes.fromhex("020000000001")
SLAVE_MAC = bytes.fromhex("020000000002")
MASTER_IP = "192.168.0.10"
SLAVE_IP = "192.168.0.20"
MASTER_PORT = 49152
SLAVE_PORT = 502

RESPONSE_LATENCY_US = 1000      # plus seeded jitter for legit responses
ATTACK_LATENCY_US = 1500        # fixed so injection plans stay exact

NORMAL = "normal"
ATTACK = "attack"


class InvalidConfig(ValueError):
    pass


# --- traffic-light PLC ---

class Phase(Enum):
    NS_GREEN = "ns_green"
    NS_AMBER = "ns_amber"
    ALL_RED = "all_red"
    EW_GREEN = "ew_green"
    EW_AMBER = "ew_amber"


# Ladder-logic timings are not published for the original rig; these give
# a realistic cycle at desk scale. One full cycle is 74,000 ms.
PHASE_CYCLE: tuple[tuple[Phase, int], ...] = (
    (Phase.NS_GREEN, 30_000),
    (Phase.NS_AMBER, 5_000),
    (Phase.ALL_RED, 2_000),
    (Phase.EW_GREEN, 30_000),
    (Phase.EW_AMBER, 5_000),
    (Phase.ALL_RED, 2_000),
)

# Coil map
NS_RED, NS_AMBER, NS_GREEN, EW_RED, EW_AMBER, EW_GREEN = range(6)
OVERRIDE_COIL = 6  # operator-controlled: forces all-red when set

_PHASE_LAMPS = {
    Phase.NS_GREEN: (NS_GREEN, EW_RED),
    Phase.NS_AMBER: (NS_AMBER, EW_RED),
    Phase.ALL_RED: (NS_RED, EW_RED),
    Phase.EW_GREEN: (EW_GREEN, NS_RED),
    Phase.EW_AMBER: (EW_AMBER, NS_RED),
}


@dataclass
class PlcState:
    coils: list[bool] = field(default_factory=lambda: [False] * 16)
    discrete_inputs: list[bool] = field(default_factory=lambda: [False] * 16)
    holding_registers: list[int] = field(default_factory=lambda: [0] * 16)
    input_registers: list[int] = field(default_factory=lambda: [0] * 16)
    cycle_pos: int = 0
    phase_remaining_ms: int = PHASE_CYCLE[0][1]
    scan_period_ms: int = 50
    scan_count: int = 0

    def __post_init__(self):
        self.apply_outputs()

    @property
    def phase(self) -> Phase:
        return PHASE_CYCLE[self.cycle_pos][0]

    def apply_outputs(self) -> None:
        lamps = ((NS_RED, EW_RED) if self.coils[OVERRIDE_COIL]
                 else _PHASE_LAMPS[self.phase])
        for i in range(6):
            self.coils[i] = i in lamps
            self.discrete_inputs[i] = self.coils[i]
        self.holding_registers[0] = self.cycle_pos
        self.holding_registers[1] = self.phase_remaining_ms
        self.input_registers[0] = self.scan_count & 0xFFFF


def step_plc(state: PlcState, elapsed_ms: int) -> PlcState:
    """Advance the PLC by whole scan ticks; elapsed must divide evenly."""
    if elapsed_ms % state.scan_period_ms != 0:
        raise ValueError(f"elapsed {elapsed_ms}ms is not a multiple of the "
                         f"{state.scan_period_ms}ms scan period")
    for _ in range(elapsed_ms // state.scan_period_ms):
        state.scan_count += 1
        state.phase_remaining_ms -= state.scan_period_ms
        while state.phase_remaining_ms <= 0:
            state.cycle_pos = (state.cycle_pos + 1) % len(PHASE_CYCLE)
            state.phase_remaining_ms += PHASE_CYCLE[state.cycle_pos][1]
        state.apply_outputs()
    return state


# --- Modbus slave behaviour ---

def _exception(request: ModbusFrame, code: int, timestamp: int) -> ModbusFrame:
    return make_frame(request.header.transaction_id, request.header.unit_id,
                      request.function_code | EXCEPTION_BIT, bytes([code]),
                      direction=Direction.TO_MASTER, timestamp=timestamp,
                      src=request.dst, dst=request.src)


def _pack_bits(bits: list[bool]) -> bytes:
    out = bytearray((len(bits) + 7) // 8)
    for i, bit in enumerate(bits):
        if bit:
            out[i // 8] |= 1 << (i % 8)
    return bytes(out)


def slave_respond(state: PlcState, request: ModbusFrame,
                  timestamp: int | None = None) -> ModbusFrame:
    """Serve one request against the PLC memory, mutating it for writes.

    Anything the slave cannot do comes back as a Modbus exception
    response rather than an error.
    """
    if request.direction is not Direction.TO_SLAVE:
        raise ValueError("slave_respond needs a request frame")
    ts = request.timestamp if timestamp is None else timestamp
    fc = request.function_code
    payload = request.pdu_payload

    def reply(body: bytes) -> ModbusFrame:
        return make_frame(request.header.transaction_id,
                          request.header.unit_id, fc, body,
                          direction=Direction.TO_MASTER, timestamp=ts,
                          src=request.dst, dst=request.src)

    if fc in (1, 2, 3, 4):
        if len(payload) != 4:
            return _exception(request, 0x03, ts)
        addr, qty = struct.unpack(">HH", payload)
        bank: list = (state.coils if fc == 1 else
                      state.discrete_inputs if fc == 2 else
                      state.holding_registers if fc == 3 else
                      state.input_registers)
        if qty < 1 or addr + qty > len(bank):
            return _exception(request, 0x02, ts)
        if fc in (1, 2):
            return reply(bytes([(qty + 7) // 8]) + _pack_bits(bank[addr:addr + qty]))
        data = b"".join(struct.pack(">H", v & 0xFFFF) for v in bank[addr:addr + qty])
        return reply(bytes([2 * qty]) + data)

    if fc == 5:
        if len(payload) != 4:
            return _exception(request, 0x03, ts)
        addr, value = struct.unpack(">HH", payload)
        if value not in (0xFF00, 0x0000):
            return _exception(request, 0x03, ts)
        if addr >= len(state.coils):
            return _exception(request, 0x02, ts)
        state.coils[addr] = value == 0xFF00
        return reply(payload)

    if fc == 6:
        if len(payload) != 4:
            return _exception(request, 0x03, ts)
        addr, value = struct.unpack(">HH", payload)
        if addr >= len(state.holding_registers):
            return _exception(request, 0x02, ts)
        state.holding_registers[addr] = value
        return reply(payload)

    if fc == 15:
        if len(payload) < 5:
            return _exception(request, 0x03, ts)
        addr, qty, count = struct.unpack(">HHB", payload[:5])
        if count != (qty + 7) // 8 or len(payload) != 5 + count:
            return _exception(request, 0x03, ts)
        if qty < 1 or addr + qty > len(state.coils):
            return _exception(request, 0x02, ts)
        for i in range(qty):
            state.coils[addr + i] = bool(payload[5 + i // 8] >> (i % 8) & 1)
        return reply(payload[:4])

    if fc == 16:
        if len(payload) < 5:
            return _exception(request, 0x03, ts)
        addr, qty, count = struct.unpack(">HHB", payload[:5])
        if count != 2 * qty or len(payload) != 5 + count:
            return _exception(request, 0x03, ts)
        if qty < 1 or addr + qty > len(state.holding_registers):
            return _exception(request, 0x02, ts)
        for i in range(qty):
            state.holding_registers[addr + i] = struct.unpack_from(
                ">H", payload, 5 + 2 * i)[0]
        return reply(payload[:4])

    return _exception(request, 0x01, ts)


# --- simulation config ---

class AttackKind(Enum):
    REPLAY_WRITE = "replay_write"
    REPLAY_BURST = "replay_burst"
    SLOW_RAMP = "slow_ramp"


@dataclass(frozen=True)
class AttackEvent:
    kind: AttackKind
    trigger_time_s: float
    source_frame: int = -1      # index into captured legit writes; negative = from latest
    repeat_count: int = 1
    gap_ms: float = 5.0


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    duration_s: float = 60.0
    poll_period_ms: float = 100.0
    write_period_s: float = 600.0
    write_offset_s: float = 10.0  # first override write, so short runs still capture one
    scan_period_ms: int = 50
    attacks: tuple[AttackEvent, ...] = ()
    time_scale: float = 1.0       # live-demo pacing only; offline runs ignore it
    error_poll_every: int | None = None  # every Nth poll reads out of range
    engine: dict = field(default_factory=dict)  # detector geometry for ramp planning


def validate_config(config: SimConfig) -> None:
    if config.duration_s <= 0:
        raise InvalidConfig("duration must be positive")
    if config.poll_period_ms < config.scan_period_ms:
        raise InvalidConfig(
            f"poll period {config.poll_period_ms}ms below the "
            f"{config.scan_period_ms}ms scan period")
    if config.write_offset_s <= 0 or config.write_period_s <= 0:
        raise InvalidConfig("write schedule must be positive")
    if config.error_poll_every is not None and config.error_poll_every < 1:
        raise InvalidConfig("error_poll_every must be >= 1")
    ramps = sum(a.kind is AttackKind.SLOW_RAMP for a in config.attacks)
    if ramps > 1:
        raise InvalidConfig("at most one slow-ramp event per run")
    for attack in config.attacks:
        if attack.trigger_time_s <= config.write_offset_s:
            raise InvalidConfig(
                f"attack at {attack.trigger_time_s}s precedes the first "
                f"write at {config.write_offset_s}s; nothing to replay")
        if attack.repeat_count < 1:
            raise InvalidConfig("repeat_count must be >= 1")


@dataclass
class LabeledFrame:
    index: int
    frame: ModbusFrame
    label: str
    attack_kind: str | None = None
    response_to: int | None = None

    def to_json(self) -> dict:
        return {
            "frame_index": self.index,
            "label": self.label,
            "attack_kind": self.attack_kind,
            "timestamp": self.frame.timestamp,
            "response_to": self.response_to,
        }


@dataclass(frozen=True)
class SimStats:
    polls: int
    ok: int
    errors: int

    @property
    def error_percent(self) -> float:
        if self.polls == 0:
            return 0.0
        return round(100.0 * self.errors / self.polls, 4)

    @classmethod
    def from_counts(cls, polls: int, errors: int) -> "SimStats":
        return cls(polls=polls, ok=polls - errors, errors=errors)


def sim_stats(records: list[CaptureRecord]) -> SimStats:
    """Count polls and error frames the same way the analyzer sees them."""
    polls = 0
    errors = 0
    for rec in records:
        if rec.decoded is None:
            continue
        direction = (Direction.TO_SLAVE if rec.decoded.dst_port == SLAVE_PORT
                     else Direction.TO_MASTER)
        for item in iter_adus(rec.decoded.payload, direction, rec.timestamp):
            if isinstance(item, ModbusFrame):
                if direction is Direction.TO_SLAVE:
                    polls += 1
                elif item.is_exception_response:
                    errors += 1
            else:
                errors += 1
    return SimStats(polls=polls, ok=polls - errors, errors=errors)


@dataclass
class SimResult:
    records: list[CaptureRecord]
    labels: list[LabeledFrame]
    stats: SimStats
    config: SimConfig


# --- the event loop ---

class _Sim:
    def __init__(self, config: SimConfig,
                 ramp_injections: list[int] | None = None):
        self.config = config
        self.jitter = random.Random(config.seed)
        self.state = PlcState(scan_period_ms=config.scan_period_ms)
        self.records: list[CaptureRecord] = []
        self.labels: list[LabeledFrame] = []
        self.legit_writes: list[tuple[int, ModbusFrame, bytes]] = []
        self.master_seq = 1000
        self.slave_seq = 5000
        self.master_ip_id = 1
        self.slave_ip_id = 1
        self.tid = 0
        self.poll_count = 0
        self.write_on = False
        self.duration_us = int(config.duration_s * 1_000_000)
        self.ramp_injections = sorted(ramp_injections or [])
        self._heap: list[tuple[int, int, tuple]] = []
        self._push_seq = 0

    def _push(self, t_us: int, action: tuple) -> None:
        heapq.heappush(self._heap, (t_us, self._push_seq, action))
        self._push_seq += 1

    def _emit(self, frame: ModbusFrame, link: bytes, label: str,
              attack_kind: str | None = None,
              response_to: int | None = None) -> int:
        index = len(self.records)
        self.records.append(make_record(frame.timestamp, link))
        self.labels.append(LabeledFrame(index, frame, label, attack_kind,
                                        response_to))
        return index

    def _master_send(self, fc: int, payload: bytes,
                     t_us: int) -> tuple[int, ModbusFrame, bytes]:
        self.tid = (self.tid + 1) & 0xFFFF
        frame = make_frame(self.tid, 1, fc, payload,
                           direction=Direction.TO_SLAVE,
                           timestamp=SIM_EPOCH_US + t_us,
                           src=(MASTER_IP, MASTER_PORT),
                           dst=(SLAVE_IP, SLAVE_PORT))
        adu = encode_frame(frame)
        link = build_tcp_frame(MASTER_MAC, SLAVE_MAC, MASTER_IP, SLAVE_IP,
                               MASTER_PORT, SLAVE_PORT, self.master_seq,
                               self.slave_seq, adu, ip_id=self.master_ip_id)
        self.master_seq += len(adu)
        self.master_ip_id += 1
        index = self._emit(frame, link, NORMAL)
        return index, frame, link

    def _slave_send(self, request: ModbusFrame, request_index: int,
                    t_us: int) -> None:
        response = slave_respond(self.state, request,
                                 timestamp=SIM_EPOCH_US + t_us)
        adu = encode_frame(response)
        link = build_tcp_frame(SLAVE_MAC, MASTER_MAC, SLAVE_IP, MASTER_IP,
                               SLAVE_PORT, MASTER_PORT, self.slave_seq,
                               self.master_seq, adu, ip_id=self.slave_ip_id)
        self.slave_seq += len(adu)
        self.slave_ip_id += 1
        self._emit(response, link, NORMAL, response_to=request_index)

    def _latency(self) -> int:
        return RESPONSE_LATENCY_US + self.jitter.randrange(0, 1000)

    def _select_write(self, selector: int) -> tuple[int, ModbusFrame, bytes]:
        if not self.legit_writes:
            raise InvalidConfig("attack fired before any legitimate write")
        try:
            return self.legit_writes[selector]
        except IndexError:
            raise InvalidConfig(
                f"write selector {selector} out of range "
                f"({len(self.legit_writes)} captured)") from None

    def _replay(self, t_us: int, selector: int, kind: AttackKind) -> None:
        _, src_frame, src_link = self._select_write(selector)
        frame = replace(src_frame, timestamp=SIM_EPOCH_US + t_us)
        index = self._emit(frame, src_link, ATTACK, attack_kind=kind.value)
        self._push(t_us + ATTACK_LATENCY_US, ("respond", frame, index))

    def run(self) -> SimResult:
        cfg = self.config
        poll_us = int(cfg.poll_period_ms * 1000)
        scan_us = cfg.scan_period_ms * 1000
        write_us = int(cfg.write_period_s * 1_000_000)

        self._push(scan_us, ("scan",))
        self._push(0, ("poll",))
        self._push(int(cfg.write_offset_s * 1_000_000), ("write",))
        for attack in cfg.attacks:
            if attack.kind is AttackKind.SLOW_RAMP:
                continue  # planned separately, injected below
            t0 = int(attack.trigger_time_s * 1_000_000)
            for k in range(attack.repeat_count):
                self._push(t0 + int(k * attack.gap_ms * 1000),
                           ("attack", attack.source_frame, attack.kind))
        for t_us in self.ramp_injections:
            self._push(t_us, ("attack", -1, AttackKind.SLOW_RAMP))

        while self._heap:
            t_us, _, action = heapq.heappop(self._heap)
            if t_us >= self.duration_us:
                break
            kind = action[0]
            if kind == "scan":
                step_plc(self.state, cfg.scan_period_ms)
                self._push(t_us + scan_us, ("scan",))
            elif kind == "poll":
                self.poll_count += 1
                addr = 0
                if (cfg.error_poll_every and
                        self.poll_count % cfg.error_poll_every == 0):
                    addr = 60000  # out of range on purpose: exception response
                index, frame, _ = self._master_send(
                    1, struct.pack(">HH", addr, 8), t_us)
                self._push(t_us + self._latency(), ("respond", frame, index))
                self._push(t_us + poll_us, ("poll",))
            elif kind == "write":
                self.write_on = not self.write_on
                value = 0xFF00 if self.write_on else 0x0000
                index, frame, link = self._master_send(
                    5, struct.pack(">HH", OVERRIDE_COIL, value), t_us)
                self.legit_writes.append((index, frame, link))
                self._push(t_us + self._latency(), ("respond", frame, index))
                self._push(t_us + write_us, ("write",))
            elif kind == "respond":
                _, frame, index = action
                self._slave_send(frame, index, t_us)
            elif kind == "attack":
                _, selector, attack_kind = action
                self._replay(t_us, selector, attack_kind)

        return SimResult(self.records, self.labels, sim_stats(self.records),
                         cfg)


def _plan_slow_ramp(base: SimResult, config: SimConfig,
                    event: AttackEvent) -> list[int]:
    """Choose replay times that keep every cache under the flag threshold.

    Walks the baseline stream against a shadow copy of the detector
    statistics, inserting write/response pairs into inter-frame gaps
    only while the projected cache risk stays at or below the history
    mean plus the deviation allowance. The baseline schedule is
    time-driven, so injections never move it; the plan stays exact.
    """
    params = dict(config.engine)
    cache_size = int(params.get("cache_size", 20))
    sigma_floor = float(params.get("sigma_floor", 0.01))
    warmup_min = int(params.get("warmup_min", 5))
    ra_window = int(params.get("ra_window", 10))
    retention = int(params.get("history_retention", 1000))
    table = params.get("table") or RiskTable()

    trigger_us = int(event.trigger_time_s * 1_000_000)
    pair_risk = min(1.0, table.base_risk.get(5, table.unknown_code_risk))
    base_risks = [packet_risk(lf.frame, table).risk for lf in base.labels]
    base_times = [lf.frame.timestamp - SIM_EPOCH_US for lf in base.labels]

    history = RiskHistory(window=ra_window, warmup_min=warmup_min,
                          retention=retention)
    cache: list[float] = []
    injections: list[int] = []
    budget = event.repeat_count

    def close_if_full() -> None:
        nonlocal cache
        if len(cache) == cache_size:
            risk = math.fsum(cache) / cache_size
            # The plan never produces a flaggable cache; accept it.
            history.accept(risk)
            cache = []

    for i, (t, risk) in enumerate(zip(base_times, base_risks)):
        prev_t = base_times[i - 1] if i else 0
        inject_t = t - 4000
        if (budget > 0 and len(history) >= warmup_min
                and len(cache) <= cache_size - 2
                and inject_t > max(prev_t, trigger_us)
                and t - prev_t >= 10_000):
            need = cache_size - len(cache) - 2
            projected = (math.fsum(cache) + 2 * pair_risk
                         + math.fsum(base_risks[i:i + need])) / cache_size
            allowance = max(history.sigma, sigma_floor)
            if projected - history.mean <= allowance - 1e-9:
                injections.append(inject_t)
                budget -= 1
                cache.extend([pair_risk, pair_risk])
                close_if_full()
        cache.append(risk)
        close_if_full()
    return injections


def run_simulation(config: SimConfig) -> SimResult:
    """Generate one labeled dataset; a pure function of the config."""
    validate_config(config)
    ramp = next((a for a in config.attacks
                 if a.kind is AttackKind.SLOW_RAMP), None)
    injections: list[int] = []
    if ramp is not None:
        baseline_cfg = replace(config, attacks=tuple(
            a for a in config.attacks if a.kind is not AttackKind.SLOW_RAMP))
        base = _Sim(baseline_cfg).run()
        injections = _plan_slow_ramp(base, config, ramp)
    return _Sim(config, ramp_injections=injections).run()


# --- optional live slave, for loopback demos ---

class LiveSlave:
    """Serves the PLC over a real TCP socket, one thread per client.

    One lock guards the PLC state: requests are applied one at a time,
    matching the single-writer contract of the simulated loop.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 1502,
                 scan_period_ms: int = 50):
        self.state = PlcState(scan_period_ms=scan_period_ms)
        self._lock = threading.Lock()
        self._server = socket.create_server((host, port))
        self.address = self._server.getsockname()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def start(self) -> None:
        thread = threading.Thread(target=self._accept_loop, daemon=True)
        thread.start()
        self._threads.append(thread)

    def _accept_loop(self) -> None:
        self._server.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self._server.accept()
            except TimeoutError:
                continue
            except OSError:
                return
            worker = threading.Thread(target=self._serve, args=(conn,),
                                      daemon=True)
            worker.start()
            self._threads.append(worker)

    def _serve(self, conn: socket.socket) -> None:
        with conn:
            buffer = b""
            while not self._stop.is_set():
                try:
                    chunk = conn.recv(4096)
                except OSError:
                    return
                if not chunk:
                    return
                buffer += chunk
                while len(buffer) >= 6:
                    length = struct.unpack_from(">H", buffer, 4)[0]
                    end = 6 + length
                    if len(buffer) < end:
                        break
                    adu, buffer = buffer[:end], buffer[end:]
                    for item in iter_adus(adu, Direction.TO_SLAVE):
                        if not isinstance(item, ModbusFrame):
                            return  # framing broken; drop the connection
                        with self._lock:
                            response = slave_respond(self.state, item)
                        conn.sendall(encode_frame(response))

    def step(self, elapsed_ms: int) -> None:
        with self._lock:
            step_plc(self.state, elapsed_ms)

    def stop(self) -> None:
        self._stop.set()
        self._server.close()
