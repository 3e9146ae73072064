import os
import socket
import tempfile
import threading

import dpkt
import numpy as np
from django.test import SimpleTestCase

from ..exceptions import CaptureError, TruncatedCapture
from ..ingest import (
    IngestStats, decode_payloads, listen_udp, packets_to_payloads, read_pcap, read_raw, write_pcap, write_raw,
)
from ..packet import DataPacket


def payloads(count=5):
    rng = np.random.default_rng(11)
    packets = [DataPacket.build(np.arange(12) * 20 + 240 * k, rng.integers(0, 5000, (12, 32)), timestamp_us=k)
               for k in range(count)]
    return packets, list(packets_to_payloads(packets))


class PcapTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, 'capture.pcap')

    def tearDown(self):
        self.tmp.cleanup()

    def test_write_read_round_trip(self):
        packets, data = payloads()
        self.assertEqual(write_pcap(self.path, data), 5)
        stats = IngestStats()
        decoded = list(decode_payloads(read_pcap(self.path, stats=stats), stats))
        self.assertEqual(decoded, packets)
        self.assertEqual(stats.datagrams, 5)
        self.assertEqual(stats.failure_rate, 0.0)

    def test_other_ports_are_skipped(self):
        _, data = payloads(3)
        write_pcap(self.path, data, port=2369)
        stats = IngestStats()
        self.assertEqual(list(read_pcap(self.path, port=2368, stats=stats)), [])
        self.assertEqual(stats.skipped, 3)

    def test_position_packets_fail_decoding(self):
        _, data = payloads(3)
        write_pcap(self.path, data + [bytes(512)])
        stats = IngestStats()
        decoded = list(decode_payloads(read_pcap(self.path, stats=stats), stats))
        self.assertEqual(len(decoded), 3)
        self.assertEqual(stats.decode_failures, 1)
        self.assertAlmostEqual(stats.failure_rate, 0.25)

    def test_truncated_capture(self):
        _, data = payloads(4)
        write_pcap(self.path, data)
        with open(self.path, 'rb') as f:
            content = f.read()
        with open(self.path, 'wb') as f:
            f.write(content[:-300])
        with self.assertRaises(TruncatedCapture):
            list(read_pcap(self.path))

    def test_unreadable_capture(self):
        with self.assertRaises(CaptureError):
            list(read_pcap(os.path.join(self.tmp.name, 'missing.pcap')))
        with open(self.path, 'wb') as f:
            f.write(b'definitely not a capture')
        with self.assertRaises(CaptureError):
            list(read_pcap(self.path))

    def test_frames_are_ethernet_ip_udp(self):
        _, data = payloads(1)
        write_pcap(self.path, data)
        with open(self.path, 'rb') as f:
            (_, frame), = list(dpkt.pcap.Reader(f))
        udp = dpkt.ethernet.Ethernet(frame).data.data
        self.assertEqual(udp.dport, 2368)
        self.assertEqual(udp.ulen, 8 + 1248)


class RawTests(SimpleTestCase):

    def test_round_trip_and_truncation(self):
        packets, data = payloads()
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'packets.raw')
            self.assertEqual(write_raw(path, data), 5)
            self.assertEqual(list(decode_payloads(read_raw(path))), packets)

            with open(path, 'rb') as f:
                content = f.read()
            with open(path, 'wb') as f:
                f.write(content[:-10])
            with self.assertRaises(TruncatedCapture):
                list(read_raw(path))

            with open(path, 'wb') as f:
                f.write(content + b'\x01\x02')
            with self.assertRaises(TruncatedCapture):
                list(read_raw(path))

    def test_missing_file(self):
        with self.assertRaises(CaptureError):
            list(read_raw('/nonexistent/packets.raw'))


class UdpListenerTests(SimpleTestCase):

    def test_receives_datagrams(self):
        probe = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        probe.bind(('127.0.0.1', 0))
        port = probe.getsockname()[1]
        probe.close()

        _, data = payloads(3)
        stats = IngestStats()
        received = []
        listener = threading.Thread(target=lambda: received.extend(
            listen_udp(port, host='127.0.0.1', timeout=0.05, max_packets=3, idle_limit=2.0, stats=stats)))
        listener.start()

        sender = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            for _ in range(100):
                if not listener.is_alive():
                    break
                sender.sendto(data[0], ('127.0.0.1', port))
                listener.join(timeout=0.05)
        finally:
            sender.close()
        listener.join(timeout=2.0)
        self.assertFalse(listener.is_alive())
        self.assertEqual(stats.datagrams, 3)
        self.assertEqual(len(received), 3)

    def test_stop_event(self):
        stop = threading.Event()
        stop.set()
        self.assertEqual(list(listen_udp(0, host='127.0.0.1', timeout=0.05, stop_event=stop)), [])

    def test_idle_limit(self):
        self.assertEqual(list(listen_udp(0, host='127.0.0.1', timeout=0.05, idle_limit=0.1)), [])
