import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from faasml.errors import PSProtocolError, WireFormatError
from faasml.ps import (OP_ACK, OP_ERR, OP_MODEL, OP_PULL, OP_PUSH, PSClient,
                       decode_frame, encode_frame, ps_serve)


@settings(deadline=None, max_examples=60)
@given(st.sampled_from([OP_PUSH, OP_PULL, OP_MODEL, OP_ACK, OP_ERR]),
       st.integers(0, 2 ** 32 - 1), st.integers(0, 2 ** 32 - 1),
       st.binary(max_size=256))
def test_frame_roundtrip(opcode, epoch, iteration, payload):
    frame = encode_frame(opcode, epoch, iteration, payload)
    assert decode_frame(frame) == (opcode, epoch, iteration, payload)


def test_frame_rejects_bad_opcode_and_length():
    with pytest.raises(WireFormatError):
        encode_frame(9, 0, 0)
    good = encode_frame(OP_ACK, 1, 2)
    with pytest.raises(WireFormatError):
        decode_frame(good[:-1] + b"\0\0")
    with pytest.raises(WireFormatError):
        decode_frame(b"\x01\x00\x00")


@pytest.fixture
def server():
    srv = ps_serve(dim=3, lr=0.5, expected_pushes=1)
    yield srv
    srv.stop()


def test_pull_before_push_returns_zeros(server):
    client = PSClient(server.address)
    version, model = client.pull()
    assert version == 0
    assert np.array_equal(model, np.zeros(3))
    client.close()


def test_single_push_applies_step(server):
    client = PSClient(server.address)
    client.push(np.array([2.0, 0.0, 0.0]), 0, 0)
    version, model = client.pull()
    assert version == 1
    assert np.allclose(model, [-1.0, 0.0, 0.0])
    client.close()


def test_push_wrong_dim_surfaces_err(server):
    client = PSClient(server.address)
    with pytest.raises(PSProtocolError, match="dim mismatch"):
        client.push(np.zeros(5), 0, 0)
    client.close()


def test_two_pushes_mean_then_step():
    srv = ps_serve(dim=1, lr=0.5, expected_pushes=2)
    try:
        c1 = PSClient(srv.address)
        c2 = PSClient(srv.address)
        acked = []

        def pusher(client, grad):
            client.push(np.array([grad]), 0, 0)
            acked.append(grad)

        t1 = threading.Thread(target=pusher, args=(c1, 2.0))
        t2 = threading.Thread(target=pusher, args=(c2, 4.0))
        t1.start()
        t2.start()
        t1.join()
        t2.join()
        assert sorted(acked) == [2.0, 4.0]
        _, model = c1.pull()
        assert np.allclose(model, [-1.5])  # mean(2,4)=3, step -0.5*3
        c1.close()
        c2.close()
    finally:
        srv.stop()


def test_large_model_roundtrips_exactly():
    dim = 1_500_000  # 12 MB of float64
    srv = ps_serve(dim=dim, lr=1.0, expected_pushes=1)
    try:
        client = PSClient(srv.address)
        rng = np.random.default_rng(3)
        grad = rng.standard_normal(dim)
        client.push(grad, 0, 0)
        _, model = client.pull()
        assert np.array_equal(model, -grad)  # lr=1, single push
        client.close()
    finally:
        srv.stop()


def test_model_version_monotonic():
    srv = ps_serve(dim=2, lr=0.1, expected_pushes=1)
    try:
        client = PSClient(srv.address)
        seen = []
        for it in range(5):
            client.push(np.ones(2), 0, it)
            version, _ = client.pull()
            seen.append(version)
        assert seen == sorted(seen)
        assert len(set(seen)) == len(seen)
        client.close()
    finally:
        srv.stop()


def test_malformed_frame_closes_connection():
    srv = ps_serve(dim=2, lr=0.1, expected_pushes=1)
    try:
        import socket
        sock = socket.create_connection(srv.address)
        sock.sendall(b"\x0c\x00\x00\x00\x63" + b"\0" * 11)  # opcode 0x63 bogus
        data = sock.recv(64)
        assert data == b""  # server dropped the connection
        sock.close()
        # server still serves valid clients afterwards
        client = PSClient(srv.address)
        version, model = client.pull()
        assert version == 0
        client.close()
    finally:
        srv.stop()


def test_server_model_snapshot_matches_pull():
    srv = ps_serve(dim=2, lr=0.25, expected_pushes=1)
    try:
        client = PSClient(srv.address)
        client.push(np.array([4.0, -4.0]), 1, 0)
        version, model = client.pull()
        snap_version, snap = srv.model_snapshot()
        assert version == snap_version
        assert np.array_equal(model, snap)
        client.close()
    finally:
        srv.stop()
