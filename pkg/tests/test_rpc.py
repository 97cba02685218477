import socket
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qnetctl.rpc import (Agent, AgentClient, AgentError, AgentServer, DecodeError, LocalTransport, ProvenanceLog, RemoteError,
                         Request, Response, RetryPolicy, TcpTransport, TransportError, decode, encode, serve_agent)
from qnetctl.rpc.agent import parse_endpoint
from qnetctl.rpc.protocol import read_frame, write_frame

from qnetctl.config import load_profile
from qnetctl.devices import build_agents
from qnetctl.network import Network
from qnetctl import testbed

from conftest import make_network


def echo_agent(name="dev"):
    a = Agent(name)
    a.register("echo", lambda p: p)
    a.register("fail", lambda p: (_ for _ in ()).throw(AgentError("busy", "device busy")))
    a.register("bad", lambda p: p["missing"])
    return a


# -- framing ------------------------------------------------------------------

json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-2**53, 2**53) | st.text(max_size=20) | st.binary(max_size=20),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=8), inner, max_size=4),
    max_leaves=15)


@given(st.integers(0, 2**31), st.text(min_size=1, max_size=20), st.dictionaries(st.text(max_size=8), json_values, max_size=5))
def test_request_round_trip(req_id, method, params):
    req = Request(req_id, method, params, 1500)
    assert decode(encode(req)) == req


@given(st.integers(0, 2**31), json_values)
def test_response_round_trip(req_id, result):
    resp = Response.success(req_id, result)
    assert decode(encode(resp)) == resp
    err = Response.failure(req_id, "busy", "try later")
    assert decode(encode(err)) == err


def test_frame_header_is_big_endian_length():
    frame = encode(Request(1, "ping"))
    assert struct.unpack(">I", frame[:4])[0] == len(frame) - 4


def test_decode_errors_report_offsets():
    frame = encode(Request(7, "ping"))
    with pytest.raises(DecodeError, match="truncated"):
        decode(frame[:-3])
    with pytest.raises(DecodeError, match="trailing"):
        decode(frame + b"x")
    with pytest.raises(DecodeError, match="truncated frame header"):
        decode(b"\x00\x00")
    body = b'{"id": 1, "method": '
    with pytest.raises(DecodeError) as info:
        decode(struct.pack(">I", len(body)) + body)
    assert info.value.offset >= 4
    body = b'{"id": "x"}'
    with pytest.raises(DecodeError, match="integer id"):
        decode(struct.pack(">I", len(body)) + body)


def test_parse_endpoint():
    assert parse_endpoint("127.0.0.1:5000") == ("127.0.0.1", 5000)
    with pytest.raises(ValueError):
        parse_endpoint("localhost")


# -- client semantics ---------------------------------------------------------

def test_local_call_and_errors():
    log = ProvenanceLog()
    c = AgentClient("dev", LocalTransport(echo_agent(), check_wire=True), log, RetryPolicy(2, 100, 0))
    assert c.call("echo", {"x": 1, "b": b"\x00\x01"}) == {"x": 1, "b": b"\x00\x01"}
    assert c.call("ping") == {"agent": "dev"}
    with pytest.raises(RemoteError) as info:
        c.call("fail")
    assert info.value.code == "busy"
    with pytest.raises(RemoteError, match="bad_params|missing"):
        c.call("bad")
    with pytest.raises(RemoteError, match="unknown_method|no method"):
        c.call("nope")
    # application errors are not retried
    assert [r.outcome for r in log.for_agent("dev", "fail")] == ["error"]


@pytest.mark.parametrize("drops,attempts,ok", [(0, 3, True), (2, 3, True), (3, 3, False), (1, 1, False)])
def test_retries_on_dropped_requests(drops, attempts, ok):
    agent = echo_agent()
    agent.drop_next = drops
    log = ProvenanceLog()
    sleeps = []
    c = AgentClient("dev", LocalTransport(agent), log, RetryPolicy(attempts, 50, 10), sleep=sleeps.append)
    if ok:
        assert c.call("echo", {"v": 1}) == {"v": 1}
    else:
        with pytest.raises(TransportError):
            c.call("echo", {"v": 1})
    outcomes = [r.outcome for r in log.records]
    n = min(drops, attempts)
    assert outcomes[:n] == ["timeout"] * n
    assert len(outcomes) == (n + 1 if ok else attempts)
    assert [r.attempt for r in log.records] == list(range(1, len(outcomes) + 1))
    assert len({r.request_id for r in log.records}) == len(outcomes)  # fresh id per attempt
    assert len(sleeps) == min(drops, attempts - 1)


def test_provenance_records_digest_and_jsonl():
    log = ProvenanceLog(virtual_clock=lambda: 42.0)
    c = AgentClient("dev", LocalTransport(echo_agent()), log)
    c.call("echo", {"a": 1})
    c.call("echo", {"a": 2})
    recs = log.records
    assert [r.seq for r in recs] == [0, 1]
    assert recs[0].params_digest != recs[1].params_digest
    assert recs[0].virtual_time == 42.0
    assert log.to_jsonl().count("\n") == 2


def test_retry_policy_validation():
    with pytest.raises(ValueError):
        RetryPolicy(0)
    assert RetryPolicy(3, 2000, 100).worst_case_ms == 6300


# -- TCP path -----------------------------------------------------------------

def test_tcp_round_trip_and_timeout():
    agent = echo_agent()
    with AgentServer(agent) as server:
        c = AgentClient("dev", TcpTransport(server.endpoint), ProvenanceLog(), RetryPolicy(3, 300, 0))
        assert c.call("echo", {"arr": [1, 2, 3], "blob": b"xyz"}) == {"arr": [1, 2, 3], "blob": b"xyz"}
        agent.drop_next = 1
        assert c.call("echo", {"k": 1}) == {"k": 1}  # first attempt times out, reconnects, retries
        assert [r.outcome for r in c.provenance.records][-2:] == ["timeout", "ok"]
        with pytest.raises(RemoteError):
            c.call("fail")
        c.close()


def test_tcp_unreachable_endpoint_is_transport_error():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    c = AgentClient("dev", TcpTransport(f"127.0.0.1:{port}"), ProvenanceLog(), RetryPolicy(2, 200, 0))
    with pytest.raises(TransportError):
        c.call("ping")


def test_tcp_malformed_frame_gets_error_response():
    server = serve_agent(echo_agent())
    try:
        host, port = parse_endpoint(server.endpoint)
        with socket.create_connection((host, port), timeout=2) as sock:
            body = b"not json"
            sock.sendall(struct.pack(">I", len(body)) + body)
            resp = decode_frame(read_frame(sock))
            assert resp.status == "error" and resp.error_code == "malformed_frame"
            write_frame(sock, Request(5, "ping"))
            assert decode_frame(read_frame(sock)).result == {"agent": "dev"}
    finally:
        server.stop()


def decode_frame(body):
    from qnetctl.rpc.protocol import decode_body
    return decode_body(body)


def test_local_wire_check_and_tcp_paths_agree():
    net_local, _ = make_network("ideal", seed=4)
    net_wire, _ = make_network("ideal", seed=4, check_wire=True)
    tb = testbed.Testbed(load_profile("ideal").scenario(), 4)
    servers = [serve_agent(a) for a in build_agents(tb).values()]
    try:
        endpoints = {name: srv.endpoint for name, srv in zip(build_agents(tb), servers)}
        net_tcp = Network.tcp(endpoints, tb.sites, RetryPolicy(3, 5000, 10))
        runs = [n.acquire(0.05) for n in (net_local, net_wire, net_tcp)]
        for s in net_local.sites:
            assert np.array_equal(runs[0][s].times, runs[1][s].times)
            assert np.array_equal(runs[0][s].times, runs[2][s].times)
        assert len(net_tcp.provenance) > 0
        net_tcp.close()
    finally:
        for srv in servers:
            srv.stop()
