"""NFWT weight container shared by the decoder, the flow and learned code sets.

Layout (little endian)::

    b"NFWT" | u32 version | u32 n_sections
    per section: u32 tag | u64 payload length | payload
    u32 CRC-32 of every preceding byte

Decoder payload: u32 n_layers, (u32 in, u32 out) per layer, u32 latent_dim,
u32 skip_layer, f64 beta, then f64 W/b per layer. Flow payload: u32
n_blocks, u32 dim, u32 K, u32 n_reflections, then f64 V, mu, log_h, logits
per block. Codes payload: u32 n, u32 dim, f64 codes.
"""

import struct
import zlib

import numpy as np

from .decoder import DecoderWeights
from .flow import FlowBlock, FlowWeights

MAGIC = b"NFWT"
VERSION = 1
TAG_DECODER = 1
TAG_FLOW = 2
TAG_CODES = 3


class ChecksumError(ValueError):
    pass


def _f64(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _read_f64(buf, off, shape):
    n = int(np.prod(shape))
    a = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
    return a, off + 8 * n


def decoder_payload(theta):
    parts = [struct.pack("<I", len(theta.W))]
    for w in theta.W:
        parts.append(struct.pack("<II", *w.shape))
    parts.append(struct.pack("<IId", theta.latent_dim, theta.skip_layer, theta.beta))
    for w, b in zip(theta.W, theta.b):
        parts.append(_f64(w))
        parts.append(_f64(b))
    return b"".join(parts)


def decoder_from_payload(buf):
    (n,) = struct.unpack_from("<I", buf, 0)
    off = 4
    shapes = []
    for _ in range(n):
        shapes.append(struct.unpack_from("<II", buf, off))
        off += 8
    latent_dim, skip, beta = struct.unpack_from("<IId", buf, off)
    off += 16
    W, b = [], []
    for shp in shapes:
        w, off = _read_f64(buf, off, shp)
        bb, off = _read_f64(buf, off, (shp[1],))
        W.append(w)
        b.append(bb)
    return DecoderWeights(W, b, latent_dim, beta, skip)


def flow_payload(phi):
    m = phi.blocks[0].V.shape[0]
    parts = [struct.pack("<IIII", len(phi.blocks), phi.dim, phi.K, m)]
    for blk in phi.blocks:
        parts.extend(_f64(a) for a in blk.arrays())
    return b"".join(parts)


def flow_from_payload(buf):
    nb, dim, K, m = struct.unpack_from("<IIII", buf, 0)
    off = 16
    blocks = []
    for _ in range(nb):
        V, off = _read_f64(buf, off, (m, dim))
        mu, off = _read_f64(buf, off, (dim, K))
        lh, off = _read_f64(buf, off, (dim, K))
        lg, off = _read_f64(buf, off, (dim, K))
        blocks.append(FlowBlock(V, mu, lh, lg))
    return FlowWeights(blocks, dim)


def codes_payload(codes):
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    return struct.pack("<II", *codes.shape) + _f64(codes)


def codes_from_payload(buf):
    n, d = struct.unpack_from("<II", buf, 0)
    return _read_f64(buf, 8, (n, d))[0]


def pack(decoder=None, flow=None, codes=None):
    sections = []
    if decoder is not None:
        sections.append((TAG_DECODER, decoder_payload(decoder)))
    if flow is not None:
        sections.append((TAG_FLOW, flow_payload(flow)))
    if codes is not None:
        sections.append((TAG_CODES, codes_payload(codes)))
    body = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for tag, payload in sections:
        body.append(struct.pack("<IQ", tag, len(payload)))
        body.append(payload)
    data = b"".join(body)
    return data + struct.pack("<I", zlib.crc32(data) & 0xFFFFFFFF)


def unpack(data):
    """Parse a container; returns a dict with any of 'decoder', 'flow', 'codes'."""
    if len(data) < 16 or data[:4] != MAGIC:
        raise ValueError("not an NFWT weight file")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumError("NFWT checksum mismatch")
    version, n = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported NFWT version {version}")
    off = 12
    out = {}
    for _ in range(n):
        tag, length = struct.unpack_from("<IQ", data, off)
        off += 12
        payload = data[off : off + length]
        off += length
        if tag == TAG_DECODER:
            out["decoder"] = decoder_from_payload(payload)
        elif tag == TAG_FLOW:
            out["flow"] = flow_from_payload(payload)
        elif tag == TAG_CODES:
            out["codes"] = codes_from_payload(payload)
        else:
            raise ValueError(f"unknown NFWT section tag {tag}")
    if off != len(data) - 4:
        raise ValueError("NFWT section lengths do not match the file size")
    return out


def save_weights(path, decoder=None, flow=None, codes=None):
    with open(path, "wb") as fh:
        fh.write(pack(decoder, flow, codes))


def load_weights(path):
    with open(path, "rb") as fh:
        return unpack(fh.read())
