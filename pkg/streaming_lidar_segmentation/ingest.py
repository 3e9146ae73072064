"""
Packet sources: pcap captures, length-prefixed raw record files and a live UDP socket.

All sources yield raw UDP payloads; `decode_payloads` turns them into
DataPackets and counts the ones that do not decode.
"""

import logging
import socket
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

import dpkt

from .exceptions import CaptureError, PacketError, TruncatedCapture
from .packet import DataPacket, decode_packet, encode_packet

logger = logging.getLogger(__name__)


DEFAULT_PORT = 2368
SENSOR_ADDRESS = '192.168.1.201'
BROADCAST_ADDRESS = '255.255.255.255'
RAW_LENGTH_PREFIX = 4
MAX_DATAGRAM = 65535


@dataclass
class IngestStats:
    datagrams: int = 0
    skipped: int = 0
    decoded: int = 0
    decode_failures: int = 0

    @property
    def failure_rate(self):
        attempted = self.decoded + self.decode_failures
        return self.decode_failures / attempted if attempted else 0.0

    def to_dict(self):
        return {
            'datagrams': self.datagrams,
            'skipped': self.skipped,
            'decoded': self.decoded,
            'decode_failures': self.decode_failures,
            'failure_rate': self.failure_rate,
        }


def decode_payloads(payloads: Iterable[bytes], stats: Optional[IngestStats] = None) -> Iterator[DataPacket]:
    """Decode payloads, skipping and counting the ones that are not valid data packets"""
    stats = stats if stats is not None else IngestStats()
    for payload in payloads:
        try:
            packet = decode_packet(payload)
        except PacketError as e:
            stats.decode_failures += 1
            logger.debug("Dropping undecodable payload: %s", e)
            continue
        stats.decoded += 1
        yield packet


def read_pcap(path, port: int = DEFAULT_PORT, stats: Optional[IngestStats] = None) -> Iterator[bytes]:
    """Yield the UDP payloads addressed to `port` from a pcap capture"""
    stats = stats if stats is not None else IngestStats()
    try:
        f = open(path, 'rb')
    except OSError as e:
        raise CaptureError(f"Cannot open capture {path}: {e}")

    with f:
        try:
            reader = dpkt.pcap.Reader(f)
        except (ValueError, dpkt.UnpackError) as e:
            raise CaptureError(f"{path} is not a pcap capture: {e}")

        try:
            for _, frame in reader:
                stats.datagrams += 1
                udp = _udp_of(frame)
                if udp is None or udp.dport != port:
                    stats.skipped += 1
                    continue
                payload = bytes(udp.data)
                if len(payload) < udp.ulen - udp.__hdr_len__:
                    raise TruncatedCapture(
                        f"{path}: record {stats.datagrams} holds {len(payload)} of "
                        f"{udp.ulen - udp.__hdr_len__} payload bytes"
                    )
                yield payload
        except dpkt.UnpackError as e:
            raise TruncatedCapture(f"{path}: capture ends inside record {stats.datagrams + 1}: {e!r}")


def _udp_of(frame):
    try:
        eth = dpkt.ethernet.Ethernet(frame)
    except dpkt.UnpackError:
        return None
    ip = eth.data
    if not isinstance(ip, dpkt.ip.IP):
        return None
    udp = ip.data
    if not isinstance(udp, dpkt.udp.UDP):
        return None
    return udp


def write_pcap(path, payloads: Iterable[bytes], port: int = DEFAULT_PORT, start_time: float = 0.0,
               packet_interval: float = 0.000553):
    """Write payloads as sensor-to-broadcast UDP frames; returns the frame count"""
    count = 0
    with open(path, 'wb') as f:
        writer = dpkt.pcap.Writer(f)
        for payload in payloads:
            udp = dpkt.udp.UDP(sport=port, dport=port, data=payload)
            udp.ulen = udp.__hdr_len__ + len(payload)
            ip = dpkt.ip.IP(
                src=socket.inet_aton(SENSOR_ADDRESS),
                dst=socket.inet_aton(BROADCAST_ADDRESS),
                p=dpkt.ip.IP_PROTO_UDP,
                ttl=64,
                data=udp,
            )
            ip.len = ip.__hdr_len__ + udp.ulen
            eth = dpkt.ethernet.Ethernet(
                src=b'\x60\x76\x88\x00\x00\x00',
                dst=b'\xff\xff\xff\xff\xff\xff',
                type=dpkt.ethernet.ETH_TYPE_IP,
                data=ip,
            )
            writer.writepkt(eth, ts=start_time + count * packet_interval)
            count += 1
    return count


def read_raw(path, stats: Optional[IngestStats] = None) -> Iterator[bytes]:
    """Yield records of a raw packet file: uint32 LE length followed by the payload"""
    stats = stats if stats is not None else IngestStats()
    try:
        f = open(path, 'rb')
    except OSError as e:
        raise CaptureError(f"Cannot open raw packet file {path}: {e}")

    with f:
        while True:
            prefix = f.read(RAW_LENGTH_PREFIX)
            if not prefix:
                return
            if len(prefix) < RAW_LENGTH_PREFIX:
                raise TruncatedCapture(f"{path}: length prefix cut short after record {stats.datagrams}")
            length = int.from_bytes(prefix, 'little')
            payload = f.read(length)
            if len(payload) < length:
                raise TruncatedCapture(
                    f"{path}: record {stats.datagrams + 1} holds {len(payload)} of {length} bytes"
                )
            stats.datagrams += 1
            yield payload


def write_raw(path, payloads: Iterable[bytes]):
    count = 0
    with open(path, 'wb') as f:
        for payload in payloads:
            f.write(len(payload).to_bytes(RAW_LENGTH_PREFIX, 'little'))
            f.write(payload)
            count += 1
    return count


def packets_to_payloads(packets: Iterable[DataPacket]) -> Iterator[bytes]:
    for packet in packets:
        yield encode_packet(packet)


def listen_udp(port: int = DEFAULT_PORT, host: str = '0.0.0.0', timeout: float = 1.0,
               max_packets: Optional[int] = None, idle_limit: Optional[float] = None,
               stop_event=None, stats: Optional[IngestStats] = None) -> Iterator[bytes]:
    """
    Yield datagrams from a live sensor.

    Stops after max_packets datagrams, after idle_limit seconds without data,
    or once stop_event is set.
    """
    stats = stats if stats is not None else IngestStats()
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
    except OSError as e:
        sock.close()
        raise CaptureError(f"Cannot listen on {host}:{port}: {e}")
    sock.settimeout(timeout)
    logger.info("Listening for data packets on %s:%d", host, port)

    idle = 0.0
    try:
        while stop_event is None or not stop_event.is_set():
            if max_packets is not None and stats.datagrams >= max_packets:
                break
            try:
                data, _ = sock.recvfrom(MAX_DATAGRAM)
            except socket.timeout:
                idle += timeout
                if idle_limit is not None and idle >= idle_limit:
                    logger.info("No data for %.1f s, stopping listener", idle)
                    break
                continue
            idle = 0.0
            stats.datagrams += 1
            yield data
    finally:
        sock.close()
