"""Classic pcap reading/writing and the link-layer codec the analyzer needs.

Export uses the classic microsecond format, linktype Ethernet. Reads
accept either byte order of the classic magic. Decoding goes exactly as
deep as the detector requires: Ethernet -> IPv4 -> TCP payload, keyed on
the Modbus service port; everything else is passed through undecoded so
total counts survive for reporting.
"""

from __future__ import annotations

import socket
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from .modbus import MODBUS_TCP_PORT

PCAP_MAGIC = 0xA1B2C3D4
GLOBAL_HEADER = struct.Struct("<IHHiIII")
RECORD_HEADER = struct.Struct("<IIII")
LINKTYPE_ETHERNET = 1

ETHERTYPE_IPV4 = 0x0800
IP_PROTO_TCP = 6


class PcapError(Exception):
    pass


class BadMagic(PcapError):
    pass


class TruncatedRecord(PcapError):
    pass


class CaptureUnavailable(PcapError):
    pass


class PermissionDenied(CaptureUnavailable):
    pass


class NoSuchInterface(CaptureUnavailable):
    pass


@dataclass(frozen=True)
class TcpSegment:
    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    payload: bytes


@dataclass(frozen=True)
class CaptureRecord:
    ts_sec: int
    ts_usec: int
    link_bytes: bytes
    decoded: TcpSegment | None = None

    @property
    def timestamp(self) -> int:
        """Microseconds since epoch."""
        return self.ts_sec * 1_000_000 + self.ts_usec


def decode_tcp(link_bytes: bytes, port: int = MODBUS_TCP_PORT) -> TcpSegment | None:
    """Decode Ethernet/IPv4/TCP and return the segment when it touches
    ``port`` and carries payload; None otherwise."""
    if len(link_bytes) < 14:
        return None
    ethertype = struct.unpack_from(">H", link_bytes, 12)[0]
    if ethertype != ETHERTYPE_IPV4:
        return None
    ip = link_bytes[14:]
    if len(ip) < 20:
        return None
    ihl = (ip[0] & 0x0F) * 4
    if (ip[0] >> 4) != 4 or ihl < 20 or len(ip) < ihl:
        return None
    total_len = struct.unpack_from(">H", ip, 2)[0]
    if ip[9] != IP_PROTO_TCP or total_len > len(ip):
        return None
    src_ip = socket.inet_ntoa(ip[12:16])
    dst_ip = socket.inet_ntoa(ip[16:20])
    tcp = ip[ihl:total_len]
    if len(tcp) < 20:
        return None
    src_port, dst_port = struct.unpack_from(">HH", tcp)
    data_off = (tcp[12] >> 4) * 4
    if data_off < 20 or len(tcp) < data_off:
        return None
    payload = tcp[data_off:]
    if port not in (src_port, dst_port) or not payload:
        return None
    return TcpSegment(src_ip, src_port, dst_ip, dst_port, payload)


def make_record(ts_usec_total: int, link_bytes: bytes,
                port: int = MODBUS_TCP_PORT) -> CaptureRecord:
    sec, usec = divmod(ts_usec_total, 1_000_000)
    return CaptureRecord(sec, usec, link_bytes, decode_tcp(link_bytes, port))


def read_pcap(path: str | Path, port: int = MODBUS_TCP_PORT) -> Iterator[CaptureRecord]:
    """Yield records in file order, decoding Modbus-port TCP frames."""
    with open(path, "rb") as fh:
        head = fh.read(GLOBAL_HEADER.size)
        if len(head) < GLOBAL_HEADER.size:
            raise BadMagic(f"{path}: shorter than a pcap global header")
        magic_le = struct.unpack_from("<I", head)[0]
        if magic_le == PCAP_MAGIC:
            rec_hdr = RECORD_HEADER
        elif struct.unpack_from(">I", head)[0] == PCAP_MAGIC:
            rec_hdr = struct.Struct(">IIII")
        else:
            raise BadMagic(f"{path}: magic 0x{magic_le:08X} is not classic pcap")
        while True:
            hdr = fh.read(rec_hdr.size)
            if not hdr:
                return
            if len(hdr) < rec_hdr.size:
                raise TruncatedRecord(f"{path}: partial record header at EOF")
            ts_sec, ts_usec, incl_len, _orig = rec_hdr.unpack(hdr)
            data = fh.read(incl_len)
            if len(data) < incl_len:
                raise TruncatedRecord(
                    f"{path}: record body truncated ({len(data)}/{incl_len})")
            yield CaptureRecord(ts_sec, ts_usec, data, decode_tcp(data, port))


def write_pcap(records: Iterable[CaptureRecord], path: str | Path) -> int:
    """Write records in order as classic pcap; returns the record count."""
    records = list(records)
    if not records:
        raise ValueError("refusing to write an empty capture")
    with open(path, "wb") as fh:
        fh.write(GLOBAL_HEADER.pack(PCAP_MAGIC, 2, 4, 0, 0, 65535,
                                    LINKTYPE_ETHERNET))
        for rec in records:
            fh.write(RECORD_HEADER.pack(rec.ts_sec, rec.ts_usec,
                                        len(rec.link_bytes),
                                        len(rec.link_bytes)))
            fh.write(rec.link_bytes)
    return len(records)


# Frame construction, used by the traffic simulator.

def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f">{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def build_tcp_frame(src_mac: bytes, dst_mac: bytes,
                    src_ip: str, dst_ip: str,
                    src_port: int, dst_port: int,
                    seq: int, ack: int, payload: bytes,
                    ip_id: int = 0, flags: int = 0x18) -> bytes:
    """Ethernet + IPv4 + TCP (PSH/ACK) frame with valid checksums."""
    src_addr = socket.inet_aton(src_ip)
    dst_addr = socket.inet_aton(dst_ip)
    tcp_hdr = struct.pack(">HHIIBBHHH", src_port, dst_port,
                          seq & 0xFFFFFFFF, ack & 0xFFFFFFFF,
                          5 << 4, flags, 65535, 0, 0)
    pseudo = src_addr + dst_addr + struct.pack(">BBH", 0, IP_PROTO_TCP,
                                               len(tcp_hdr) + len(payload))
    csum = _checksum(pseudo + tcp_hdr + payload)
    tcp_hdr = tcp_hdr[:16] + struct.pack(">H", csum) + tcp_hdr[18:]
    total_len = 20 + len(tcp_hdr) + len(payload)
    ip_hdr = struct.pack(">BBHHHBBH4s4s", 0x45, 0, total_len, ip_id & 0xFFFF,
                         0x4000, 64, IP_PROTO_TCP, 0, src_addr, dst_addr)
    ip_hdr = ip_hdr[:10] + struct.pack(">H", _checksum(ip_hdr)) + ip_hdr[12:]
    eth_hdr = dst_mac + src_mac + struct.pack(">H", ETHERTYPE_IPV4)
    return eth_hdr + ip_hdr + tcp_hdr + payload


# Optional live capture. Requires CAP_NET_RAW; nothing in the offline
# pipeline depends on it.

def parse_filter(expression: str) -> int:
    """Accepts only the supported 'tcp port <n>' form."""
    parts = expression.split()
    if len(parts) != 3 or parts[0] != "tcp" or parts[1] != "port":
        raise ValueError(f"unsupported filter {expression!r}; "
                         "only 'tcp port <n>' is recognized")
    port = int(parts[2])
    if not 0 < port < 65536:
        raise ValueError(f"port out of range: {port}")
    return port


def open_live(interface: str, filter_expression: str = "tcp port 502",
              snaplen: int = 65535) -> Iterator[CaptureRecord]:
    """Stream records from a live interface, filtered to one TCP port.

    Frames that do not match the filter are dropped (unlike file reads,
    which preserve them); live monitoring only ever wants the service
    port.
    """
    port = parse_filter(filter_expression)
    if not hasattr(socket, "AF_PACKET"):
        raise CaptureUnavailable("raw packet sockets unsupported on this platform")
    try:
        sock = socket.socket(socket.AF_PACKET, socket.SOCK_RAW,
                             socket.htons(0x0003))  # ETH_P_ALL
    except PermissionError as err:
        raise PermissionDenied(f"raw capture needs CAP_NET_RAW: {err}") from err
    try:
        sock.bind((interface, 0))
    except OSError as err:
        sock.close()
        raise NoSuchInterface(f"cannot bind {interface!r}: {err}") from err

    def stream() -> Iterator[CaptureRecord]:
        try:
            while True:
                data, address = sock.recvfrom(snaplen)
                if address[2] == socket.PACKET_OUTGOING:
                    continue  # loopback shows the transmit copy too
                decoded = decode_tcp(data, port)
                if decoded is None:
                    continue
                now = time.time()
                sec = int(now)
                usec = int((now - sec) * 1_000_000)
                yield CaptureRecord(sec, usec, data, decoded)
        finally:
            sock.close()

    return stream()
