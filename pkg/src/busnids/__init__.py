"""busnids: risk-scoring replay-attack detection for Modbus TCP."""

__version__ = "0.1.0"

from .modbus import (Direction, FunctionClass, MbapHeader, ModbusFrame,
                     ParseError, classify_function, encode_frame,
                     is_erroneous, make_frame, parse_frame)
from .pcap import CaptureRecord, read_pcap, write_pcap
from .pipeline import analyze_records
from .risk import (Alert, CacheSummary, FlagReason, RiskEngine, RiskHistory,
                   RiskTable, ScoredPacket, packet_risk)
from .simulate import (AttackEvent, AttackKind, LabeledFrame, PlcState,
                       SimConfig, SimStats, run_simulation, sim_stats,
                       slave_respond, step_plc)
from .metrics import (Confusion, MetricsReport, accuracy, align, confusion,
                      detection_rate, effective_labels, false_positive_rate)

__all__ = [name for name in dir() if not name.startswith("_")]
