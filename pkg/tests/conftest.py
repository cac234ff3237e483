import struct

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def nifti_bytes(data, datatype, spacing=(1.0, 1.0, 1.0), endian="<", vox_offset=352,
                slope=0.0, inter=0.0, magic=b"n+1\x00"):
    """Hand-assemble a single-file NIfTI-1 image, field by field."""
    hdr = bytearray(348)
    struct.pack_into(endian + "i", hdr, 0, 348)
    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    struct.pack_into(endian + "8h", hdr, 40, *dim)
    bitpix = {2: 8, 4: 16, 16: 32}[datatype]
    struct.pack_into(endian + "hh", hdr, 70, datatype, bitpix)
    struct.pack_into(endian + "8f", hdr, 76, 1.0, *spacing, 0, 0, 0, 0)
    struct.pack_into(endian + "3f", hdr, 108, float(vox_offset), slope, inter)
    hdr[344:348] = magic
    np_type = {2: "u1", 4: "i2", 16: "f4"}[datatype]
    payload = np.asarray(data).astype(endian + np_type).ravel(order="F").tobytes()
    return bytes(hdr) + b"\x00" * (vox_offset - 348) + payload


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
