"""Little-endian bit packing.

Bits are written least-significant first: the first bit written lands in
bit 0 of byte 0.  A field of width w holding value v occupies the next w
bit positions with v's bit 0 first.
"""


class BitWriter:
    def __init__(self):
        self._acc = 0
        self._nbits = 0

    def write(self, value: int, width: int) -> None:
        if width < 0:
            raise ValueError("negative field width")
        if width == 0:
            return
        if value < 0 or value >> width:
            raise ValueError(f"value {value} does not fit in {width} bits")
        self._acc |= value << self._nbits
        self._nbits += width

    def write_signed(self, value: int, width: int) -> None:
        """Write ``value`` as a width-bit two's-complement field."""
        lo, hi = -(1 << (width - 1)), (1 << (width - 1)) - 1
        if width == 0 or not lo <= value <= hi:
            raise ValueError(f"{value} is not representable in {width}-bit two's complement")
        self.write(value & ((1 << width) - 1), width)

    @property
    def bit_length(self) -> int:
        return self._nbits

    def getvalue(self) -> bytes:
        return self._acc.to_bytes((self._nbits + 7) // 8, "little")


class BitReader:
    def __init__(self, data: bytes):
        self._acc = int.from_bytes(data, "little")
        self._limit = len(data) * 8
        self._pos = 0

    @property
    def position(self) -> int:
        return self._pos

    def read(self, width: int) -> int:
        if self._pos + width > self._limit:
            raise EOFError("read past end of bitstream")
        v = (self._acc >> self._pos) & ((1 << width) - 1)
        self._pos += width
        return v

    def read_signed(self, width: int) -> int:
        v = self.read(width)
        if width and v >> (width - 1):
            v -= 1 << width
        return v
