"""Nexmon CSI frames carried in UDP datagrams inside classic pcap files.

Payload layout (little-endian)::

    0-1   magic 0x1111
    2     RSSI (int8)
    3     frame control byte
    4-9   source MAC
    10-11 sequence number
    12-13 core / spatial stream
    14-15 chanspec
    16-17 chip version
    18-   256 x (int16 real, int16 imag)

The radio reports tones in FFT-bin order (DC first). Frames hold them
fft-shifted so that tone -128 is index 0 and DC is index 128.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Optional, Union

import numpy as np

from ..errors import FormatError

logger = logging.getLogger(__name__)

PCAP_MAGIC_US = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D
LINKTYPE_ETHERNET = 1
NEXMON_PORT = 5500
CSI_MAGIC = 0x1111
N_SUBCARRIERS = 256
CSI_HEADER_LEN = 18
CSI_PAYLOAD_LEN = CSI_HEADER_LEN + 4 * N_SUBCARRIERS
MAX_RECORD_LEN = 1 << 18

_ETH_IPV4 = 0x0800
_ETH_VLAN = 0x8100
_IPPROTO_UDP = 17


class PcapFormatError(FormatError):
    """The byte stream is not a readable pcap capture."""


@dataclass(frozen=True)
class CsiFrame:
    timestamp_us: int
    source: bytes
    sequence: int
    rssi: int
    chanspec: int
    csi: np.ndarray = field(repr=False)
    frame_control: int = 0
    core_stream: int = 0
    chip: int = 0

    def __post_init__(self):
        if self.csi.shape != (N_SUBCARRIERS,):
            raise ValueError(f"CSI vector must hold {N_SUBCARRIERS} tones, got {self.csi.shape}")
        if len(self.source) != 6:
            raise ValueError("source MAC must be 6 bytes")

    @property
    def mac(self) -> str:
        return ":".join(f"{b:02x}" for b in self.source)


@dataclass
class ParseStats:
    packets: int = 0
    frames: int = 0
    non_csi: int = 0
    truncated: int = 0
    bad_magic: int = 0

    @property
    def skipped(self) -> int:
        """Packets on the CSI port that could not be decoded."""
        return self.truncated + self.bad_magic


class PayloadError(ValueError):
    pass


class TruncatedPayload(PayloadError):
    pass


def decode_csi_payload(payload: bytes, timestamp_us: int = 0) -> CsiFrame:
    if len(payload) < CSI_PAYLOAD_LEN:
        raise TruncatedPayload(f"CSI payload has {len(payload)} bytes, need {CSI_PAYLOAD_LEN}")
    magic, rssi, fc = struct.unpack_from("<HbB", payload, 0)
    if magic != CSI_MAGIC:
        raise PayloadError(f"bad CSI magic 0x{magic:04x}")
    source = bytes(payload[4:10])
    seq, core, chanspec, chip = struct.unpack_from("<HHHH", payload, 10)
    raw = np.frombuffer(payload, dtype="<i2", count=2 * N_SUBCARRIERS, offset=CSI_HEADER_LEN)
    csi = (raw[0::2].astype(np.float32) + 1j * raw[1::2].astype(np.float32)).astype(np.complex64)
    return CsiFrame(timestamp_us, source, seq, rssi, chanspec, np.fft.fftshift(csi), fc, core, chip)


def encode_csi_payload(frame: CsiFrame) -> bytes:
    """Inverse of :func:`decode_csi_payload`; CSI values are rounded to int16."""
    fft_order = np.fft.ifftshift(frame.csi)
    pairs = np.empty(2 * N_SUBCARRIERS, dtype="<i2")
    pairs[0::2] = np.clip(np.rint(fft_order.real), -32768, 32767)
    pairs[1::2] = np.clip(np.rint(fft_order.imag), -32768, 32767)
    head = struct.pack("<HbB", CSI_MAGIC, frame.rssi, frame.frame_control) + bytes(frame.source)
    head += struct.pack("<HHHH", frame.sequence & 0xFFFF, frame.core_stream, frame.chanspec, frame.chip)
    return head + pairs.tobytes()


# pcap container ----------------------------------------------------------


def _open(source) -> tuple[BinaryIO, bool]:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return io.BytesIO(bytes(source)), True
    if isinstance(source, (str, Path)):
        return open(source, "rb"), True
    return source, False


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def iter_records(stream: BinaryIO, stats: ParseStats) -> Iterator[tuple[int, bytes]]:
    """Yield ``(timestamp_us, packet bytes)``; stops at the first truncated record."""
    header = _read_exact(stream, 24)
    if len(header) < 24:
        raise PcapFormatError("file shorter than the 24-byte pcap global header")
    magic_le = struct.unpack("<I", header[:4])[0]
    if magic_le in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
        endian = "<"
    elif struct.unpack(">I", header[:4])[0] in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
        endian = ">"
    else:
        raise PcapFormatError(f"bad pcap magic 0x{magic_le:08x}")
    nanos = struct.unpack(endian + "I", header[:4])[0] == PCAP_MAGIC_NS
    linktype = struct.unpack(endian + "I", header[20:24])[0] & 0x0FFFFFFF
    if linktype != LINKTYPE_ETHERNET:
        raise PcapFormatError(f"unsupported link type {linktype}; expected Ethernet")
    rec = struct.Struct(endian + "IIII")
    while True:
        head = _read_exact(stream, 16)
        if not head:
            return
        if len(head) < 16:
            stats.truncated += 1
            logger.warning("pcap ends inside a record header")
            return
        sec, frac, incl, orig = rec.unpack(head)
        if incl > MAX_RECORD_LEN:
            stats.truncated += 1
            logger.warning("record length %d exceeds sanity limit; stopping", incl)
            return
        data = _read_exact(stream, incl)
        stats.packets += 1
        if len(data) < incl:
            stats.truncated += 1
            logger.warning("pcap ends inside a record body")
            return
        usec = frac // 1000 if nanos else frac
        yield sec * 1_000_000 + usec, data


def udp_payload(packet: bytes, port: Optional[int]) -> Optional[bytes]:
    """Payload of an Ethernet/IPv4/UDP packet whose destination is ``port``, else None."""
    if len(packet) < 14:
        return None
    off = 12
    (ethertype,) = struct.unpack_from("!H", packet, off)
    off += 2
    while ethertype == _ETH_VLAN:
        if len(packet) < off + 4:
            return None
        (ethertype,) = struct.unpack_from("!H", packet, off + 2)
        off += 4
    if ethertype != _ETH_IPV4 or len(packet) < off + 20:
        return None
    vihl = packet[off]
    ihl = (vihl & 0x0F) * 4
    if vihl >> 4 != 4 or ihl < 20 or packet[off + 9] != _IPPROTO_UDP:
        return None
    off += ihl
    if len(packet) < off + 8:
        return None
    _, dport, ulen = struct.unpack_from("!HHH", packet, off)
    if port is not None and dport != port:
        return None
    end = off + ulen if ulen >= 8 else len(packet)
    return packet[off + 8:min(end, len(packet))]


def parse_pcap(source: Union[str, Path, bytes, BinaryIO], port: Optional[int] = NEXMON_PORT,
               stats: Optional[ParseStats] = None) -> Iterator[CsiFrame]:
    """Decode CSI frames from a pcap file, byte string or binary stream, in capture order.

    Packets that are not UDP to ``port`` are skipped silently; packets on the
    port that are truncated or carry the wrong magic are skipped and counted
    in ``stats``. A bad global header raises :class:`PcapFormatError`.
    """
    stats = stats if stats is not None else ParseStats()
    stream, owned = _open(source)
    try:
        for ts, packet in iter_records(stream, stats):
            payload = udp_payload(packet, port)
            if payload is None:
                stats.non_csi += 1
                continue
            try:
                frame = decode_csi_payload(payload, ts)
            except TruncatedPayload:
                stats.truncated += 1
                continue
            except PayloadError:
                stats.bad_magic += 1
                continue
            stats.frames += 1
            yield frame
    finally:
        if owned:
            stream.close()


# writing -----------------------------------------------------------------


def _udp_packet(payload: bytes, port: int, src_mac: bytes) -> bytes:
    udp = struct.pack("!HHHH", port, port, 8 + len(payload), 0) + payload
    total = 20 + len(udp)
    ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, total, 0, 0x4000, 64, _IPPROTO_UDP, 0,
                     bytes([10, 10, 10, 10]), bytes([255, 255, 255, 255]))
    eth = b"\xff" * 6 + src_mac + struct.pack("!H", _ETH_IPV4)
    return eth + ip + udp


def pcap_header(snaplen: int = 65535) -> bytes:
    return struct.pack("<IHHiIII", PCAP_MAGIC_US, 2, 4, 0, 0, snaplen, LINKTYPE_ETHERNET)


def pcap_record(timestamp_us: int, packet: bytes) -> bytes:
    sec, usec = divmod(int(timestamp_us), 1_000_000)
    return struct.pack("<IIII", sec, usec, len(packet), len(packet)) + packet


def frame_record(frame: CsiFrame, port: int = NEXMON_PORT) -> bytes:
    return pcap_record(frame.timestamp_us, _udp_packet(encode_csi_payload(frame), port, frame.source))


def write_pcap(frames: Iterable[CsiFrame], dest, port: int = NEXMON_PORT) -> int:
    """Write frames as a pcap capture of UDP datagrams; returns the frame count."""
    stream, owned = (open(dest, "wb"), True) if isinstance(dest, (str, Path)) else (dest, False)
    n = 0
    try:
        stream.write(pcap_header())
        for frame in frames:
            stream.write(frame_record(frame, port))
            n += 1
    finally:
        if owned:
            stream.close()
    return n
