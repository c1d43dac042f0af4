import random

import pytest

from ecalloc.bitio import BitReader, BitWriter


def test_lsb_first_layout():
    w = BitWriter()
    w.write(1, 1)
    w.write(0b10, 2)
    w.write(0b11111, 5)
    assert w.getvalue() == bytes([0b11111101])


def test_roundtrip_random_fields():
    rnd = random.Random(3)
    fields = []
    w = BitWriter()
    for _ in range(500):
        width = rnd.randint(1, 20)
        if rnd.random() < 0.5:
            v = rnd.randrange(1 << width)
            w.write(v, width)
            fields.append(("u", v, width))
        else:
            v = rnd.randint(-(1 << (width - 1)), (1 << (width - 1)) - 1)
            w.write_signed(v, width)
            fields.append(("s", v, width))
    total = sum(f[2] for f in fields)
    assert w.bit_length == total
    data = w.getvalue()
    assert len(data) == (total + 7) // 8
    r = BitReader(data)
    for kind, v, width in fields:
        assert (r.read(width) if kind == "u" else r.read_signed(width)) == v
    assert r.position == total


def test_signed_extremes():
    w = BitWriter()
    w.write_signed(-256, 9)
    w.write_signed(255, 9)
    r = BitReader(w.getvalue())
    assert r.read_signed(9) == -256
    assert r.read_signed(9) == 255


def test_rejects_overflow():
    w = BitWriter()
    with pytest.raises(ValueError):
        w.write(4, 2)
    with pytest.raises(ValueError):
        w.write_signed(2, 2)


def test_read_past_end():
    r = BitReader(b"\x01")
    r.read(8)
    with pytest.raises(EOFError):
        r.read(1)
