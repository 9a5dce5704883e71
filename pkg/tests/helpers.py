"""Shared test oracles and byte-level tools for container images."""

import hashlib
import json

import numpy as np

from fptq.formats.container import ALIGN, HEADER
from fptq.quantizers import Granularity, QuantTensor


def split_image(data: bytes):
    _, version, mlen, _ = HEADER.unpack_from(data)
    manifest = json.loads(data[HEADER.size : HEADER.size + mlen])
    start = -(-(HEADER.size + mlen) // ALIGN) * ALIGN
    return version, manifest, data[start:]


def rebuild_image(manifest: dict, payload: bytes, version: int = 1, fix_payload_hash: bool = False) -> bytes:
    """Re-encode with a valid manifest checksum so semantic checks are reached."""
    if fix_payload_hash:
        manifest = {**manifest, "payload_sha256": hashlib.sha256(payload).hexdigest()}
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    head = HEADER.pack(b"FPTQCKPT", version, len(mbytes), hashlib.sha256(mbytes).digest()) + mbytes
    pad = -len(head) % ALIGN
    return head + b"\0" * pad + payload


def int_gemm_oracle(qx: QuantTensor, qw: QuantTensor) -> np.ndarray:
    """int32 accumulation of q_x * q_w per scale block, then the scale product."""
    n, k = qx.shape
    m = qw.shape[1]
    sx = qx.params.scale_map(n, k)
    sw = qw.params.scale_map(k, m)
    gsize = qw.params.group_size if qw.params.granularity is Granularity.GROUP_WISE else k
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            total = 0.0
            for g0 in range(0, k, gsize):
                acc = np.int32(0)
                for t in range(g0, min(k, g0 + gsize)):
                    acc = np.int32(acc + np.int32(qx.q[i, t]) * np.int32(qw.q[t, j]))
                total += float(acc) * float(sx[i, g0]) * float(sw[g0, j])
            out[i, j] = total
    return out
