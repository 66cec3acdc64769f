"""Stand-in video codec for harness tests.

    mock_codec.py encode IN.y4m OUT.bin QP
    mock_codec.py decode IN.bin OUT.(y4m|yuv)
    mock_codec.py fail ...

Encoding quantises every 8-bit sample with a step that doubles every 6
QP and deflates the result, so the bitrate falls as QP rises.
"""

import struct
import sys
import zlib

import numpy as np


def encode(src, dst, qp):
    data = open(src, "rb").read()
    nl = data.index(b"\n")
    header = data[: nl + 1]
    tokens = dict((t[:1], t[1:]) for t in header.split()[1:])
    w, h = int(tokens[b"W"]), int(tokens[b"H"])
    fsize = w * h * 3 // 2
    frames, pos = [], nl + 1
    while pos < len(data):
        start = data.index(b"\n", pos) + 1  # skip the FRAME line
        frames.append(data[start : start + fsize])
        pos = start + fsize
    step = 2.0 ** ((qp - 4) / 6.0)
    planes = np.frombuffer(b"".join(frames), np.uint8).astype(np.float64)
    assert planes.size == fsize * len(frames)
    idx = np.rint(planes / step).astype(np.int16)
    payload = zlib.compress(idx.tobytes(), 9)
    with open(dst, "wb") as fh:
        fh.write(struct.pack("<Id", len(header), step))
        fh.write(header)
        fh.write(payload)


def decode(src, dst):
    data = open(src, "rb").read()
    hlen, step = struct.unpack("<Id", data[:12])
    header = data[12 : 12 + hlen]
    tokens = dict((t[:1], t[1:]) for t in header.split()[1:])
    fsize = int(tokens[b"W"]) * int(tokens[b"H"]) * 3 // 2
    idx = np.frombuffer(zlib.decompress(data[12 + hlen :]), np.int16)
    samples = np.clip(np.rint(idx * step), 0, 255).astype(np.uint8).tobytes()
    frames = [samples[i : i + fsize] for i in range(0, len(samples), fsize)]
    with open(dst, "wb") as fh:
        if dst.endswith(".yuv"):
            fh.write(b"".join(frames))
        else:
            fh.write(header)
            for f in frames:
                fh.write(b"FRAME\n" + f)


if __name__ == "__main__":
    mode = sys.argv[1]
    if mode == "encode":
        encode(sys.argv[2], sys.argv[3], int(sys.argv[4]))
    elif mode == "decode":
        decode(sys.argv[2], sys.argv[3])
    else:
        sys.stderr.write("mock codec: deliberate failure\n")
        sys.exit(3)
