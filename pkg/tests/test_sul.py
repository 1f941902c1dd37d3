import socket

import pytest

from conftest import make_mapper
from kexlearn.mapper import CONNECTION_CLOSED, NO_RESPONSE, Credentials, Mapper
from kexlearn.sul import (BUILTIN_SPECS, SulServer, builtin_spec, compliant_spec, in_process,
                          make_violation_spec, serve)
from kexlearn.transport import ResponseWindow, TCPEndpoint, parse_endpoint

HAPPY = ["KEXINIT", "KEX_ECDH_INIT", "NEWKEYS", "SERVICE_REQUEST"]
HAPPY_OUT = ("KEXINIT", "KEX_ECDH_REPLY|NEWKEYS", NO_RESPONSE, "SERVICE_ACCEPT")


def run(sul, names, flow="ecdh"):
    mapper, _ = make_mapper(sul, flow)
    return mapper.run_query(mapper.alphabet.word(names))


def insert(i, names):
    return HAPPY[:i] + list(names) + HAPPY[i:]


@pytest.mark.parametrize("sul", sorted(set(BUILTIN_SPECS) - {"flaky"}))
@pytest.mark.parametrize("flow", ["ecdh", "dh", "dhgex"])
def test_every_sul_interoperates(sul, flow):
    mapper, _ = make_mapper(sul, flow)
    out = mapper.run_query(mapper.alphabet.happy_flow())
    assert out[-1] == "SERVICE_ACCEPT"


def test_first_packet_must_be_kexinit():
    assert run("compliant", ["IGNORE", "KEXINIT"]) == (CONNECTION_CLOSED, CONNECTION_CLOSED)


def test_retroactive_close():
    # the optional message is swallowed, the close comes once strict KEX is agreed
    assert run("compliant-retro", ["IGNORE", "KEXINIT"]) == (NO_RESPONSE, CONNECTION_CLOSED)
    assert run("compliant-retro", HAPPY) == HAPPY_OUT


def test_c1_accepts_early_ignore():
    assert run("c1", ["IGNORE"] + HAPPY) == (NO_RESPONSE,) + HAPPY_OUT
    assert run("c1", insert(1, ["IGNORE"]))[1] == CONNECTION_CLOSED


def test_c3_tolerates_during_handshake():
    out = run("c3", ["KEXINIT", "IGNORE", "KEX_ECDH_INIT", "DEBUG", "NEWKEYS", "SERVICE_REQUEST"])
    assert out == ("KEXINIT", NO_RESPONSE, "KEX_ECDH_REPLY|NEWKEYS", NO_RESPONSE, NO_RESPONSE,
                   "SERVICE_ACCEPT")
    assert run("c3", insert(1, ["UNDEFINED_35"]))[1] == "UNIMPLEMENTED"
    assert run("c3", ["IGNORE"])[0] == CONNECTION_CLOSED


def test_c4_only_late_and_below_50():
    assert run("c4", insert(2, ["UNDEFINED_9"])) == HAPPY_OUT[:2] + ("UNIMPLEMENTED",) + HAPPY_OUT[2:]
    assert run("c4", insert(2, ["UNDEFINED_54"]))[2] == CONNECTION_CLOSED
    assert run("c4", insert(1, ["UNDEFINED_9"]))[1] == CONNECTION_CLOSED


def test_c2_only_under_dhgex():
    gex = ["KEXINIT", "IGNORE", "KEX_DH_GEX_REQUEST", "KEX_DH_GEX_INIT", "NEWKEYS", "SERVICE_REQUEST"]
    assert run("c2", gex, "dhgex")[-1] == "SERVICE_ACCEPT"
    assert run("c2", insert(1, ["IGNORE"]))[1] == CONNECTION_CLOSED
    assert run("c2", ["KEXINIT", "IGNORE", "KEXDH_INIT"], "dh")[1] == CONNECTION_CLOSED


def test_taint_defers_termination():
    out = run("taint", insert(1, ["IGNORE"]))
    assert out == ("KEXINIT", NO_RESPONSE, "KEX_ECDH_REPLY|NEWKEYS", CONNECTION_CLOSED, CONNECTION_CLOSED)
    # messages of the connection protocol still close at once
    assert run("taint", insert(1, ["USERAUTH_REQUEST_NONE"]))[1] == CONNECTION_CLOSED


def test_erlang_runs_early_channel():
    mapper, endpoint = make_mapper("erlang")
    sessions = []
    opener = endpoint.server.open_session
    endpoint.server.open_session = lambda: sessions.append(opener()) or sessions[-1]
    out = mapper.run_query(mapper.alphabet.word(insert(1, ["CHANNEL_OPEN", "CHANNEL_REQUEST_EXEC"])))
    assert out[1:3] == (NO_RESPONSE, NO_RESPONSE)
    assert out[4].split("|")[:3] == ["CHANNEL_OPEN_CONFIRMATION", "CHANNEL_SUCCESS", "CHANNEL_DATA"]
    assert out[-1] == "SERVICE_ACCEPT"
    sent = [name for d, name in sessions[0].trace if d == "out"]
    assert sent.index("CHANNEL_DATA") > sent.index("NEWKEYS")


def test_erlang_channel_close_reverts():
    out = run("erlang", insert(1, ["CHANNEL_OPEN", "CHANNEL_CLOSE"]))
    assert out[1:3] == (NO_RESPONSE, NO_RESPONSE)
    assert out[4:] == (NO_RESPONSE, "SERVICE_ACCEPT")


def test_tectia_buffers_auth_request():
    mapper, _ = make_mapper("tectia")
    word = mapper.alphabet.word(insert(1, ["USERAUTH_REQUEST_PASSWORD"]))
    out = mapper.run_query(word)
    assert out[1] == NO_RESPONSE and out[-1] == "SERVICE_ACCEPT"
    hijack = mapper.run_trace(word, credentials=Credentials("attacker", "attacker-password"))[0]
    assert "USERAUTH_SUCCESS" in hijack[3]


def test_flaky_is_seeded_and_rare():
    def failures(seed):
        mapper, _ = make_mapper("flaky", seed=seed)
        word = mapper.alphabet.word(HAPPY)
        return [mapper.run_query(word)[-1] != "SERVICE_ACCEPT" for _ in range(400)]
    a = failures(3)
    assert a == failures(3)
    assert 2 <= sum(a) <= 40


def test_unknown_spec():
    with pytest.raises(ValueError):
        builtin_spec("nope")
    with pytest.raises(ValueError):
        make_violation_spec("C9")


def test_overrides():
    spec = builtin_spec("compliant", flaky=0.5, seed=9)
    assert (spec.flaky, spec.seed) == (0.5, 9)
    assert compliant_spec().flaky == 0.0


def test_host_key_shared_across_sessions():
    server = SulServer(compliant_spec())
    a, b = server.open_session(), server.open_session()
    assert a.server.host_key is b.server.host_key
    assert server.connections == 2


def test_serve_over_tcp():
    handle = serve(compliant_spec())
    try:
        endpoint = TCPEndpoint("127.0.0.1", handle.port, ResponseWindow(0.3, 0.05))
        mapper = Mapper(endpoint, make_mapper()[0].alphabet)
        assert mapper.run_query(mapper.alphabet.word(HAPPY + ["USERAUTH_REQUEST_PASSWORD"])) == \
            HAPPY_OUT + ("USERAUTH_FAILURE",)
        assert mapper.run_query(mapper.alphabet.word(["SERVICE_REQUEST", "KEXINIT"])) == \
            (CONNECTION_CLOSED, CONNECTION_CLOSED)
        assert endpoint.connections == 2
        with socket.create_connection(("127.0.0.1", handle.port), timeout=2) as sock:
            assert sock.recv(64).startswith(b"SSH-2.0-SimSSH_1.0")
    finally:
        handle.shutdown()


def test_serve_bind_failure():
    handle = serve(compliant_spec())
    try:
        with pytest.raises(RuntimeError):
            serve(compliant_spec(), "127.0.0.1", handle.port)
    finally:
        handle.shutdown()


def test_parse_endpoint():
    ep = parse_endpoint("localhost:2222")
    assert (ep.host, ep.port) == ("localhost", 2222)
    with pytest.raises(ValueError):
        parse_endpoint("no-port")


def test_in_process_counts_connections():
    endpoint = in_process("compliant")
    endpoint.connect()
    endpoint.connect()
    assert endpoint.connections == 2
