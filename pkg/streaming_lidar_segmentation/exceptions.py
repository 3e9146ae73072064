"""
Error types raised by the segmentation engine.

Library code raises these; the management commands map them onto exit codes.
"""


class SegmentationError(Exception):
    """Base class for every error raised by this app"""


class PacketError(SegmentationError, ValueError):
    """A raw data packet could not be decoded or ordered"""


class WrongLength(PacketError):
    def __init__(self, length, expected):
        super().__init__(f"Data packet must be {expected} bytes, got {length}")
        self.length = length
        self.expected = expected


class BadAzimuth(PacketError):
    def __init__(self, block_index, azimuth):
        super().__init__(
            f"Block {block_index} azimuth {azimuth} is not below 36000 centidegrees"
        )
        self.block_index = block_index
        self.azimuth = azimuth


class OutOfOrderPacket(PacketError):
    def __init__(self, previous, current):
        super().__init__(
            f"Azimuth went back from {previous:.2f} to {current:.2f} degrees "
            f"without wrapping past 0"
        )
        self.previous = previous
        self.current = current


class CaptureError(SegmentationError, OSError):
    """A capture file (pcap or raw records) is unreadable"""


class TruncatedCapture(CaptureError):
    """The capture ends in the middle of a record"""


class CalibrationError(SegmentationError, ValueError):
    pass


class ConfigError(SegmentationError, ValueError):
    pass


class DegenerateBlock(SegmentationError):
    """A line-fit block holds fewer than two candidate ground points"""

    def __init__(self, block, candidates):
        super().__init__(f"Block {block} has {candidates} candidate points, need 2")
        self.block = block
        self.candidates = candidates


class IndexMismatch(SegmentationError, ValueError):
    """Predicted clusters reference points outside the ground-truth scan"""


class SceneError(SegmentationError, ValueError):
    """A scene description is invalid"""
