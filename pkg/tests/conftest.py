import functools

import pytest

from kexlearn.alphabet import default_alphabet
from kexlearn.cache import MembershipOracle
from kexlearn.kex import flow_by_name
from kexlearn.learner import learn
from kexlearn.mapper import Mapper
from kexlearn.oracles import default_oracles
from kexlearn.sul import in_process


def make_mapper(sul="compliant", flow="ecdh", **overrides):
    alphabet = default_alphabet(flow_by_name(flow))
    endpoint = in_process(sul, **overrides)
    return Mapper(endpoint, alphabet), endpoint


@functools.lru_cache(maxsize=None)
def learned(sul="compliant", flow="ecdh", budget=600.0, **overrides):
    """Learn once per session and share the result between test modules."""
    mapper, endpoint = make_mapper(sul, flow, **overrides)
    mq = MembershipOracle(mapper.run_query)
    result = learn(mapper.alphabet, mq, default_oracles(mapper.alphabet), budget)
    return result, mapper, endpoint


@pytest.fixture
def compliant():
    return make_mapper("compliant")


@pytest.fixture(scope="session")
def compliant_learned():
    return learned("compliant")


ACCEPTANCE = []


class criterion:
    """Records one acceptance line: PASS when the body finishes, FAIL otherwise."""

    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        if exc_type is pytest.skip.Exception:
            status = "SKIP"
        line = f"criterion {self.number} {status}: {self.title}"
        if self.detail:
            line += f" ({self.detail})"
        ACCEPTANCE.append(line)
        print(line)
        return False


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
