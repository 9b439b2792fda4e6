"""Regenerates the checked-in fuzz corpus seeds under fuzz/corpus/."""

import json
import math
import struct
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent / "fuzz" / "corpus"


def u32(v):
    return struct.pack("<I", v)


def f32s(vals):
    return struct.pack(f"<{len(vals)}f", *vals)


def mfld():
    w, h = 3, 2
    body = []
    for i in range(w * h):
        l, o = 1 + 2 * i, math.radians(30 * i)
        body += [l * math.cos(o), l * math.sin(o)]
    yield "small", b"MFLD" + u32(w) + u32(h) + f32s(body)
    yield "identity", b"MFLD" + u32(1) + u32(1) + f32s([1.0, 0.0])
    yield "empty", b"MFLD" + u32(0) + u32(0)


def cnnw():
    pool = bytes([1]) + u32(0) + u32(0) + u32(30) + u32(30)
    soft = bytes([3]) + u32(73) + u32(3) + u32(0) + u32(0)
    soft += f32s([0.01 * (i % 7) for i in range(73 * 3)]) + f32s([0.0] * 73)
    yield "pool_softmax_v1", b"CNNW" + u32(1) + u32(2) + pool + soft
    yield "pool_softmax_v2", b"CNNW" + u32(2) + u32(2) + f32s([0.5, 0.4, 0.3]) + pool + soft
    conv = bytes([0]) + u32(2) + u32(3) + u32(3) + u32(3) + f32s([0.1] * 54) + f32s([0.0, 0.1])
    pool2 = bytes([1]) + u32(0) + u32(0) + u32(2) + u32(2)
    fc = bytes([2]) + u32(4) + u32(2 * 14 * 14) + u32(0) + u32(0) + f32s([0.001] * (4 * 392)) + f32s([0.0] * 4)
    soft2 = bytes([3]) + u32(73) + u32(4) + u32(0) + u32(0) + f32s([0.01] * 292) + f32s([0.0] * 73)
    yield "conv_pool_fc_softmax", b"CNNW" + u32(1) + u32(4) + conv + pool2 + fc + soft2


def gmmp():
    cov = [0.01 if i % 65 == 0 else 0.0 for i in range(4096)]
    comp = f32s([1.0]) + f32s([0.0] * 64) + f32s(cov)
    yield "one_component", b"GMMP" + u32(1) + u32(64) + comp
    half = f32s([0.5]) + f32s([0.0] * 64) + f32s(cov)
    yield "two_components", b"GMMP" + u32(2) + u32(64) + half + half


def ptch():
    rec = bytes([5]) + bytes((i * 7) % 256 for i in range(2700))
    yield "one_record", b"PTCH" + u32(1) + rec
    yield "two_records", b"PTCH" + u32(2) + rec + bytes([72]) + bytes(2700)
    yield "empty", b"PTCH" + u32(0)


def conf():
    vals = [1.0 / 73] * (2 * 2 * 73)
    yield "base_2x2", b"CONF" + u32(2) + u32(2) + u32(73) + f32s(vals)
    vals = [0.0] * 361
    vals[10] = 1.0
    yield "extended_1x1", b"CONF" + u32(1) + u32(1) + u32(361) + f32s(vals)


def main():
    for name, gen in [("decode_mfld", mfld), ("decode_cnnw", cnnw), ("decode_gmmp", gmmp), ("decode_ptch", ptch), ("decode_conf", conf)]:
        d = ROOT / name
        d.mkdir(parents=True, exist_ok=True)
        for stem, data in gen():
            (d / stem).write_bytes(data)
            # A truncated copy keeps an error path in the corpus.
            if len(data) > 12:
                (d / f"{stem}_truncated").write_bytes(data[: len(data) // 2])


if __name__ == "__main__":
    main()
