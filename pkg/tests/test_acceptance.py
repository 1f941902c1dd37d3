"""Acceptance criteria, one test per criterion, each printing a pass/fail line."""
import json
import os
import random
import socket
import time

import pytest

from conftest import criterion, learned
from dualside import first_protected_packet, handshake, oracle_keys, oracle_verify
from kexlearn import cli
from kexlearn import kex as kx
from kexlearn.alphabet import default_alphabet
from kexlearn.analysis import channel_pattern, closed_states, happy_path
from kexlearn.cache import MembershipOracle
from kexlearn.mapper import CONNECTION_CLOSED
from kexlearn.oracles import HappyFlow, MutationOracle, MutationPlan, enumerate_words, mutation_count
from reference import HANDSHAKE_STATES, SINK, compliant_reference

HAPPY = ["KEXINIT", "KEX_ECDH_INIT", "NEWKEYS", "SERVICE_REQUEST"]


def test_criterion_1_counting(capsys):
    with criterion(1, "mutation counting formula") as c:
        start = time.perf_counter()
        cli.main(["count-mutations", "--alphabet-size", "94", "--flow-length", "4", "-n", "2"])
        cli.main(["count-mutations", "--alphabet-size", "94", "--flow-length", "5", "-n", "2"])
        counts = capsys.readouterr().out.split()
        count_time = time.perf_counter() - start
        assert counts == ["133011", "186121"]
        assert count_time < 1.0
        rng = random.Random(1)
        start = time.perf_counter()
        for _ in range(200):
            size, length, n = rng.randint(1, 20), rng.randint(0, 6), rng.randint(0, 2)
            words = sum(1 for _ in enumerate_words(range(size), range(100, 100 + length), n))
            assert words == mutation_count(size, length, n), (size, length, n)
        enum_time = time.perf_counter() - start
        assert enum_time < 60
        c.detail = f"counts {count_time:.3f}s, 200 enumerations {enum_time:.1f}s"


def test_criterion_2_crypto_fidelity():
    with criterion(2, "handshake crypto fidelity") as c:
        host_key = kx.HostKey()
        flows = [kx.ECDH, kx.DH, kx.DHGEX]
        start = time.perf_counter()
        for i in range(1000):
            hs = handshake(flows[i % 3], host_key)
            h = hs.client.exchange_hash
            assert h == hs.server.exchange_hash
            assert hs.client.shared_secret == hs.server.shared_secret
            oracle_verify(hs.reply, h)
            keys_c = kx.derive_keys(hs.client.shared_secret, h, hs.client.session_id)
            keys_s = kx.derive_keys(hs.server.shared_secret, hs.server.exchange_hash,
                                    hs.server.session_id)
            assert keys_c == keys_s
            if i < 30:
                expected = oracle_keys(hs.client.shared_secret, h, h)
                assert {k: getattr(keys_c, k) for k in expected} == expected
            up, down = first_protected_packet(hs, keys_c, keys_s, reset=hs.strict)
            assert up[0] == 5 and down[0] == 6
        elapsed = time.perf_counter() - start
        assert elapsed < 30
        c.detail = f"1000 handshakes in {elapsed:.1f}s"


def test_criterion_3_compliant_convergence():
    with criterion(3, "compliant server learns to the reference machine") as c:
        start = time.perf_counter()
        result, _, _ = learned("compliant")
        machine = result.machine
        assert result.stats.converged
        assert len(machine) == 6
        mapping = machine.isomorphism(compliant_reference())
        assert mapping is not None
        path = happy_path(machine, HAPPY)
        assert len(set(path.states)) == 5
        sink = closed_states(machine)
        assert len(sink) == 1 and mapping[next(iter(sink))] == SINK
        for i in HANDSHAKE_STATES:
            s = path.states[i]
            for a in machine.inputs:
                if a != HAPPY[i]:
                    assert machine.step(s, a) == (next(iter(sink)), CONNECTION_CLOSED), (i, a)
        elapsed = time.perf_counter() - start
        assert elapsed < 600
        c.detail = f"6 states, {result.stats.queries_total} queries, {result.stats.seconds:.1f}s"


EXPECTED = {
    "compliant": set(), "c1": {"C1"}, "c3": {"C3"}, "c4": {"C4"}, "c2": {"C2"},
    "tectia": {"C1", "C3"}, "erlang": {"C3"}, "taint": set(),
}


def test_criterion_4_violation_labels(tmp_path):
    with criterion(4, "seeded servers get exactly their categories") as c:
        seen = {}
        for sul, expected in EXPECTED.items():
            out = tmp_path / sul
            argv = ["full", "--sul", sul, "--out", str(out)]
            if sul == "c2":
                argv += ["--flows", "ecdh,dhgex"]
            assert cli.main(argv) == 0, sul
            report = json.loads((out / "report.json").read_text())
            assert set(report["categories"]) == expected, (sul, report["categories"])
            for flow in report["flows"]:
                for f in flow["findings"]:
                    if f["category"] in expected:
                        assert f["confirmed"] and f["confirmation_outputs"][-1] == "SERVICE_ACCEPT"
            assert report["auth_bypass"] == (sul == "tectia"), sul
            if sul == "erlang":
                assert report["channel_pattern"]
            if sul == "taint":
                dead = [f for flow in report["flows"] for f in flow["dead_tolerances"]]
                assert dead and not any(f["confirmed"] for f in dead)
                assert not any(flow["findings"] for flow in report["flows"])
            seen[sul] = sorted(report["categories"]) + (["auth-bypass"] if report["auth_bypass"] else [])
        c.detail = "; ".join(f"{k}={v}" for k, v in seen.items())


def test_criterion_5_erlang_pattern():
    with criterion(5, "early channel pattern of the Erlang-like server") as c:
        result, mapper, _ = learned("erlang")
        machine = result.machine
        path = happy_path(machine, HAPPY)
        pre_open = path.states[1]
        opened, _ = machine.step(pre_open, "CHANNEL_OPEN")
        assert opened != pre_open and opened not in closed_states(machine)
        assert machine.target(opened, "CHANNEL_CLOSE") == pre_open
        assert channel_pattern(machine, pre_open)
        word = ["KEXINIT", "CHANNEL_OPEN", "CHANNEL_REQUEST_EXEC", "KEX_ECDH_INIT", "NEWKEYS",
                "SERVICE_REQUEST"]
        outputs, trace = mapper.run_trace(mapper.alphabet.word(word))
        assert outputs[-1] == "SERVICE_ACCEPT"
        received = [name for d, name in trace if d == "in"]
        newkeys = received.index("NEWKEYS")
        end = received.index("USERAUTH_SUCCESS") if "USERAUTH_SUCCESS" in received else len(received)
        window = received[newkeys:end]
        assert "CHANNEL_SUCCESS" in window and "CHANNEL_DATA" in window
        c.detail = f"{len(machine)} states, trace after NEWKEYS: {'|'.join(received[newkeys + 1:])}"


def test_criterion_6_nondeterminism():
    with criterion(6, "flaky server converges to the deterministic machine") as c:
        start = time.perf_counter()
        flaky, _, endpoint = learned("flaky")
        clean, _, _ = learned("compliant")
        assert endpoint.server.spec.flaky == 0.05
        assert flaky.stats.converged
        assert flaky.stats.votes, "no conflict was ever voted on"
        assert all(v.trials <= 13 for v in flaky.stats.votes)
        assert flaky.machine.isomorphic(clean.machine)
        elapsed = time.perf_counter() - start
        assert elapsed < 1200
        c.detail = (f"{len(flaky.stats.votes)} votes, max {max(v.trials for v in flaky.stats.votes)} "
                    f"trials, {flaky.stats.restarts} restarts, {flaky.stats.seconds:.1f}s")


def test_criterion_7_cache_economics():
    with criterion(7, "cache answers re-runs and closed extensions") as c:
        result, mapper, endpoint = learned("compliant")
        mq = result.mq
        alphabet = mapper.alphabet
        before = endpoint.connections
        oracle = MutationOracle(MutationPlan(tuple(alphabet), HappyFlow.for_alphabet(alphabet), 2))
        assert oracle.find_counterexample(result.machine, mq) is None
        assert endpoint.connections == before
        closed = [w for w, outs in mq.cache.words() if outs[-1] == CONNECTION_CLOSED]
        assert closed
        for word in closed[:200]:
            extended = alphabet.word(list(word) + ["IGNORE", "SERVICE_REQUEST"])
            assert mq.query(extended)[-2:] == (CONNECTION_CLOSED, CONNECTION_CLOSED)
        assert endpoint.connections == before
        c.detail = f"{oracle.checked} mutation words and 200 closed extensions, 0 new connections"


def _local_sshd():
    target = os.environ.get("KEXLEARN_SSH_ENDPOINT", "127.0.0.1:22")
    host, _, port = target.rpartition(":")
    try:
        with socket.create_connection((host, int(port)), timeout=1) as sock:
            if sock.recv(64).startswith(b"SSH-2.0"):
                return host, int(port)
    except OSError:
        pass
    return None


@pytest.mark.network
def test_criterion_8_local_server_happy_flow():
    with criterion(8, "optional happy flow against a local SSH server") as c:
        target = _local_sshd()
        if target is None:
            c.detail = "no local SSH server; results against real server builds are out of scope"
            pytest.skip("no SSH server at KEXLEARN_SSH_ENDPOINT or 127.0.0.1:22")
        from kexlearn.mapper import Mapper
        from kexlearn.transport import TCPEndpoint
        mapper = Mapper(TCPEndpoint(*target), default_alphabet())
        outputs = mapper.run_query(mapper.alphabet.happy_flow())
        assert "SERVICE_ACCEPT" in outputs[-1].split("|")
        c.detail = f"{target[0]}:{target[1]} answered {outputs}"
