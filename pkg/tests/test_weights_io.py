import numpy as np
import pytest

from flowsdf.weights_io import ChecksumError, load_weights, pack, save_weights, unpack

from conftest import fitted_flow, perturbed_decoder


def test_roundtrip_is_bit_exact(tmp_path):
    theta = perturbed_decoder(hidden=16)
    phi, Z = fitted_flow(n=30)
    path = tmp_path / "w.nfwt"
    save_weights(path, theta, phi, Z)
    out = load_weights(path)
    assert np.array_equal(out["decoder"].flat(), theta.flat())
    assert out["decoder"].beta == theta.beta
    assert np.array_equal(out["flow"].flat(), phi.flat())
    assert np.array_equal(out["codes"], Z)
    assert pack(out["decoder"], out["flow"], out["codes"]) == path.read_bytes()


def test_partial_container():
    data = pack(codes=np.eye(3, 16))
    assert set(unpack(data)) == {"codes"}


def test_bad_magic_and_checksum():
    data = bytearray(pack(decoder=perturbed_decoder(hidden=8)))
    with pytest.raises(ValueError):
        unpack(b"XXXX" + bytes(data[4:]))
    data[40] ^= 0xFF
    with pytest.raises(ChecksumError):
        unpack(bytes(data))
