"""Command line entry point: learn, analyze, confirm, full, sul serve, count-mutations."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

from . import __version__
from .alphabet import Alphabet, default_alphabet
from .analysis import (AnalysisError, FlowReport, analyze_machine, build_report, confirm_finding,
                       export_machine, kex_phase_states, scan_hypothesis, summary_table)
from .cache import MembershipOracle, NondeterminismError
from .kex import UnsupportedFlow, flow_by_name
from .learner import learn
from .mapper import Credentials, Mapper
from .mealy import MealyMachine
from .oracles import default_oracles, mutation_count
from .sul import BUILTIN_SPECS, builtin_spec, in_process, serve
from .transport import ResponseWindow, TCPEndpoint, parse_endpoint
from .wire import SSHError, exchange_banner

log = logging.getLogger("kexlearn")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_BUDGET = 3
EXIT_NONDETERMINISM = 4
EXIT_SETUP = 5

LEARN_FLOWS = ("ecdh", "dh", "dhgex")


class SetupError(Exception):
    pass


def parse_duration(text) -> float:
    text = str(text).strip().lower()
    units = {"ms": 0.001, "s": 1, "m": 60, "h": 3600}
    for suffix in ("ms", "s", "m", "h"):
        if text.endswith(suffix):
            return float(text[:-len(suffix)]) * units[suffix]
    return float(text)


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Keys use option names."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise SetupError(f"{path}:{lineno}: expected key = value")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


# -- endpoints -------------------------------------------------------------------

@contextmanager
def open_endpoint(args):
    """Yields (endpoint, spec or None). Built-in SULs run in-process unless --tcp."""
    window = ResponseWindow(args.window_first, args.window_idle)
    if args.endpoint:
        yield parse_endpoint(args.endpoint, window), None
        return
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.flaky is not None:
        overrides["flaky"] = args.flaky
    try:
        spec = builtin_spec(args.sul, **overrides)
    except ValueError as exc:
        raise SetupError(str(exc)) from exc
    if not args.tcp:
        yield in_process(spec), spec
        return
    handle = serve(spec, "127.0.0.1", 0)
    try:
        yield TCPEndpoint("127.0.0.1", handle.port, window), spec
    finally:
        handle.shutdown()


def probe(endpoint) -> None:
    try:
        transport = endpoint.connect()
    except OSError as exc:
        raise SetupError(f"cannot reach {endpoint}: {exc}") from exc
    try:
        exchange_banner(transport)
    except (SSHError, OSError) as exc:
        raise SetupError(f"no SSH banner from {endpoint}: {exc}") from exc
    finally:
        transport.close()
    endpoint.connections = max(0, endpoint.connections - 1)


def load_alphabet(args, flow_name: str) -> Alphabet:
    try:
        flow = flow_by_name(flow_name).activate()
    except UnsupportedFlow as exc:
        raise SetupError(str(exc)) from exc
    if args.alphabet:
        return Alphabet.load(args.alphabet, flow)
    return default_alphabet(flow)


def attacker_credentials(args, spec) -> Optional[Credentials]:
    if args.attacker_user:
        return Credentials(args.attacker_user, args.attacker_password or "")
    if spec is not None and spec.attacker_credential:
        return Credentials(*spec.attacker_credential)
    return None


def make_mapper(args, endpoint, alphabet) -> Mapper:
    creds = Credentials(args.user, args.password)
    return Mapper(endpoint, alphabet, creds, rekey_cutoff=args.rekey_cutoff)


def sul_label(args) -> str:
    return args.endpoint or args.sul


# -- learn -------------------------------------------------------------------------

def run_learning(args, endpoint, flow_name: str, out: Path):
    alphabet = load_alphabet(args, flow_name)
    mapper = make_mapper(args, endpoint, alphabet)
    mq = MembershipOracle(mapper.run_query, nondeterministic=args.nondeterministic)
    oracles = default_oracles(alphabet, args.mutations_n, args.random_count, args.random_min,
                              args.random_max, args.seed or 0)
    log.info("learning %s with %d symbols (flow %s)", sul_label(args), len(alphabet), flow_name)
    try:
        result = learn(alphabet, mq, oracles, args.budget)
    except NondeterminismError as exc:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"conflicts-{flow_name}.json").write_text(json.dumps({
            "word": [getattr(s, "name", s) for s in exc.word],
            "tally": [{"outputs": list(k), "count": v} for k, v in exc.tally.items()],
            "votes": [{"word": list(v.word), "trials": v.trials} for v in mq.stats.votes],
        }, indent=1) + "\n")
        raise
    happy = [s.name for s in alphabet.happy_flow()]
    machine = result.machine
    stats = result.stats.to_dict()
    stats["states_total"] = len(machine)
    stats["states_kex"] = kex_phase_states(machine, happy)
    stats["alphabet_size"] = len(alphabet)
    stem = out / f"machine-{flow_name}"
    export_machine(machine, stem, happy)
    manifest = {
        "version": __version__, "sul": sul_label(args), "flow": flow_name,
        "alphabet_digest": alphabet.digest(), "alphabet_size": len(alphabet),
        "budget_seconds": args.budget, "mutations_n": args.mutations_n,
        "random": {"count": args.random_count, "min": args.random_min, "max": args.random_max},
        "seed": args.seed or 0, "flaky": args.flaky, "tcp": bool(args.tcp),
        "window": {"first": args.window_first, "idle": args.window_idle},
        "rekey_cutoff": args.rekey_cutoff, "statistics": stats,
        "connections": getattr(endpoint, "connections", None),
    }
    (out / f"manifest-{flow_name}.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    alphabet.save(out / f"alphabet-{flow_name}.txt")
    return result, mapper, alphabet


def cmd_learn(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open_endpoint(args) as (endpoint, _spec):
        probe(endpoint)
        result, _, _ = run_learning(args, endpoint, args.flow, out)
    s = result.stats
    print(f"{'converged' if s.converged else 'budget expired'}: {s.states} states, "
          f"{s.queries_total} queries ({s.queries_final} final round), {s.seconds:.1f}s")
    print(f"machine written to {out / ('machine-' + args.flow + '.json')}")
    return EXIT_OK if s.converged else EXIT_BUDGET


# -- analyze / confirm ---------------------------------------------------------------

def cmd_analyze(args) -> int:
    machine = MealyMachine.from_json(Path(args.machine).read_text())
    alphabet = load_alphabet(args, args.flow)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.no_confirm:
        report = analyze_machine(machine, None, alphabet)
    else:
        with open_endpoint(args) as (endpoint, spec):
            probe(endpoint)
            mapper = make_mapper(args, endpoint, alphabet)
            report = analyze_machine(machine, mapper, alphabet, attacker_credentials(args, spec))
    full = build_report(sul_label(args), [report])
    (out / f"report-{args.flow}.json").write_text(full.to_json())
    print_report(full)
    return EXIT_OK if not report.error else EXIT_FAILURE


def cmd_confirm(args) -> int:
    machine = MealyMachine.from_json(Path(args.machine).read_text())
    alphabet = load_alphabet(args, args.flow)
    happy = [s.name for s in alphabet.happy_flow()]
    try:
        raw = scan_hypothesis(machine, happy, args.flow)
    except AnalysisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    picked = [f for f in raw if f.symbol == args.symbol and (args.index is None or f.index == args.index)]
    if not picked:
        print(f"no raw tolerance of {args.symbol} on the happy flow", file=sys.stderr)
        return EXIT_FAILURE
    confirmed = False
    with open_endpoint(args) as (endpoint, _spec):
        probe(endpoint)
        mapper = make_mapper(args, endpoint, alphabet)
        for f in picked:
            confirm_finding(f, mapper, happy, machine)
            print(f"{f.category} {f.role} state {f.state} {f.symbol}: "
                  f"{'confirmed' if f.confirmed else 'not confirmed'}")
            for direction, name in f.confirmation_trace:
                print(f"  {'->' if direction == 'out' else '<-'} {name}")
            confirmed |= f.confirmed
    return EXIT_OK if confirmed else EXIT_FAILURE


def print_report(report) -> None:
    print(summary_table([report]), end="")
    for r in report.flows:
        if r.error:
            print(f"{r.flow}: {r.error}")
            continue
        for f in r.findings:
            mark = "confirmed" if f.confirmed else "unconfirmed"
            print(f"{r.flow}: {f.category} at {f.role} state {f.state}: {f.symbol} -> {f.output} ({mark})")
        dead = [f for f in r.raw if not f.live]
        if dead:
            print(f"{r.flow}: {len(dead)} tolerance(s) leading into a dead region (not violations)")
    for note in report.notes:
        print(f"note: {note}")


# -- full ----------------------------------------------------------------------------

def cmd_full(args) -> int:
    flows = [f.strip().lower() for f in args.flows.split(",") if f.strip()]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    flow_reports = []
    status = EXIT_OK
    with open_endpoint(args) as (endpoint, spec):
        probe(endpoint)
        for flow_name in flows:
            try:
                result, mapper, alphabet = run_learning(args, endpoint, flow_name, out)
            except (NondeterminismError, SetupError) as exc:
                log.error("%s: %s", flow_name, exc)
                flow_reports.append(FlowReport(flow_name, [], error=str(exc)))
                status = EXIT_NONDETERMINISM if isinstance(exc, NondeterminismError) else status
                continue
            if not result.stats.converged:
                status = status or EXIT_BUDGET
            report = analyze_machine(result.machine, mapper, alphabet, attacker_credentials(args, spec))
            report.stats = result.stats.to_dict()
            flow_reports.append(report)
    full = build_report(sul_label(args), flow_reports)
    (out / "report.json").write_text(full.to_json())
    (out / "summary.txt").write_text(summary_table([full]))
    print_report(full)
    return status


# -- sul serve / count-mutations --------------------------------------------------------

def cmd_sul_serve(args) -> int:
    overrides = {"seed": args.seed or 0}
    if args.flaky is not None:
        overrides["flaky"] = args.flaky
    try:
        spec = builtin_spec(args.spec, **overrides)
        handle = serve(spec, args.host, args.port)
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SETUP
    print(f"serving {spec.name} on {handle.address[0]}:{handle.port}", flush=True)
    try:
        if args.duration:
            time.sleep(args.duration)
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        handle.shutdown()
    return EXIT_OK


def cmd_count(args) -> int:
    if args.alphabet_size is not None:
        size = args.alphabet_size
    else:
        size = len(load_alphabet(args, args.flow))
    if args.flow_length is not None:
        length = args.flow_length
    else:
        length = len(default_alphabet(flow_by_name(args.flow)).happy_flow())
    print(mutation_count(size, length, args.n))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, target: bool = True) -> None:
    if target:
        g = p.add_mutually_exclusive_group()
        g.add_argument("--sul", default="compliant", help=f"built-in SUL ({', '.join(BUILTIN_SPECS)})")
        g.add_argument("--endpoint", help="host:port of an SSH server")
        p.add_argument("--tcp", action="store_true", help="serve built-in SULs on loopback TCP")
        p.add_argument("--flaky", type=float, help="drop probability for built-in SULs")
        p.add_argument("--window-first", type=float, default=0.4)
        p.add_argument("--window-idle", type=float, default=0.15)
        p.add_argument("--user", default=Credentials.user)
        p.add_argument("--password", default=Credentials.password)
        p.add_argument("--attacker-user")
        p.add_argument("--attacker-password")
        p.add_argument("--rekey-cutoff", action="store_true",
                       help="answer KEXINIT inside the secure channel with CONNECTION_CLOSED")
    p.add_argument("--alphabet", help="alphabet file (name id class [variant] per line)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="kexlearn-out")
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _learning(p: argparse.ArgumentParser) -> None:
    p.add_argument("--budget", type=parse_duration, default=3600.0, help="wall clock, e.g. 90s, 10m, 1h")
    p.add_argument("--mutations-n", type=int, default=2)
    p.add_argument("--random-count", type=int, default=10_000)
    p.add_argument("--random-min", type=int, default=5)
    p.add_argument("--random-max", type=int, default=15)
    p.add_argument("--nondeterministic", action="store_true",
                   help="double-check every closing answer from the start")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kexlearn", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("learn", help="learn a Mealy machine of one key exchange flow")
    _common(p)
    _learning(p)
    p.add_argument("--flow", default="ecdh", choices=LEARN_FLOWS)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("analyze", help="scan a learned machine and confirm findings")
    p.add_argument("machine")
    _common(p)
    p.add_argument("--flow", default="ecdh", choices=LEARN_FLOWS)
    p.add_argument("--no-confirm", action="store_true", help="scan only")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("confirm", help="run the confirmation flow for one tolerated input")
    p.add_argument("machine")
    _common(p)
    p.add_argument("--flow", default="ecdh", choices=LEARN_FLOWS)
    p.add_argument("--symbol", required=True)
    p.add_argument("--index", type=int, help="happy-flow position (default: all)")
    p.set_defaults(func=cmd_confirm)

    p = sub.add_parser("full", help="learn and analyze several flows, then compare them")
    _common(p)
    _learning(p)
    p.add_argument("--flows", default="ecdh,dh,dhgex")
    p.set_defaults(func=cmd_full)

    p = sub.add_parser("sul", help="simulated servers")
    ssub = p.add_subparsers(dest="sul_command", required=True)
    s = ssub.add_parser("serve", help="serve a built-in SUL over TCP")
    s.add_argument("--spec", default="compliant", choices=sorted(BUILTIN_SPECS))
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=2222)
    s.add_argument("--seed", type=int)
    s.add_argument("--flaky", type=float)
    s.add_argument("--duration", type=float, help="stop after this many seconds")
    s.add_argument("-v", "--verbose", action="count", default=0)
    s.set_defaults(func=cmd_sul_serve, config=None)

    p = sub.add_parser("count-mutations", help="size of the happy-flow mutation space")
    p.add_argument("--alphabet-size", type=int)
    p.add_argument("--flow-length", type=int)
    p.add_argument("--flow", default="ecdh", choices=LEARN_FLOWS)
    p.add_argument("--alphabet")
    p.add_argument("-n", type=int, default=2)
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_count, config=None)
    return parser


def _apply_config(parser, argv, args):
    """Re-parse with config values as defaults so explicit flags still win."""
    if not getattr(args, "config", None):
        return args
    values = read_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        if key not in known:
            raise SetupError(f"unknown config key {key!r}")
        action = known[key]
        if action.const is True and action.nargs == 0:
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = action.type(value) if action.type else value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _apply_config(parser, argv, args)
        if getattr(args, "budget", 1) is not None and getattr(args, "budget", 1) <= 0:
            raise SetupError("budget must be positive")
        return args.func(args)
    except SetupError as exc:
        print(f"setup error: {exc}", file=sys.stderr)
        return EXIT_SETUP
    except NondeterminismError as exc:
        print(f"nondeterminism: {exc}", file=sys.stderr)
        return EXIT_NONDETERMINISM


if __name__ == "__main__":
    sys.exit(main())
