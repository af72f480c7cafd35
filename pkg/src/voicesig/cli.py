"""Command-line front end.

Exit codes: 0 success / Valid, 1 I/O or read error, 2 usage or bad scenario,
3 ValidTruncatedTail, 4 Invalid.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from .archive import read_archive
from .core import FormatError
from .crypto import (
    CertificateError,
    SigningKey,
    TrustAnchor,
    decode_cert_file,
    decode_key_file,
    encode_cert_file,
    encode_key_file,
    issue_certificate,
    make_root,
)
from .policy import ConfigError, PolicyConfig, load_policy
from .simnet import (
    BitFlip,
    LinkModel,
    ScenarioError,
    SimScenario,
    SpliceSwap,
    TailTruncation,
    apply_post_attack,
    parse_attack,
    parse_scenario,
    run_simulation,
)
from .verifier import render_report, verify_archive

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_TRUNCATED, EXIT_INVALID = 0, 1, 2, 3, 4
DAY_MS = 24 * 3600 * 1000


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_IO):
        super().__init__(message)
        self.code = code


def _read(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from None


def _write(path: str, data: bytes, force: bool = True) -> None:
    p = Path(path)
    if p.exists() and not force:
        raise CliError(f"{path} exists (use --force to overwrite)")
    try:
        p.write_bytes(data)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror}") from None


def _policy(path: Optional[str]) -> PolicyConfig:
    if path is None:
        return PolicyConfig()
    try:
        return load_policy(_read(path).decode("utf-8"))
    except (ConfigError, UnicodeDecodeError) as exc:
        raise CliError(f"bad policy file {path}: {exc}", EXIT_USAGE) from None


# -- keygen -----------------------------------------------------------------

def cmd_keygen(args) -> int:
    if not args.root and (args.issuer_cert is None or args.issuer_key is None):
        raise CliError("a non-root certificate needs --issuer-cert and --issuer-key")
    for path in (args.out_cert, args.out_key):
        if Path(path).exists() and not args.force:
            raise CliError(f"{path} exists (use --force to overwrite)")
    start = args.not_before if args.not_before is not None else int(time.time() * 1000)
    validity = (start, start + args.days * DAY_MS)
    key = SigningKey.from_seed(args.seed.encode()) if args.seed else SigningKey.generate()
    try:
        if args.root:
            cert, key = make_root(args.subject, validity, key)
        else:
            issuer_cert = decode_cert_file(_read(args.issuer_cert))
            issuer_key = decode_key_file(_read(args.issuer_key))
            cert, key = issue_certificate(issuer_key, issuer_cert, args.subject, validity, key)
    except FormatError as exc:
        raise CliError(f"bad issuer file: {exc}") from None
    except CertificateError as exc:
        raise CliError(str(exc)) from None
    _write(args.out_cert, encode_cert_file(cert))
    _write(args.out_key, encode_key_file(key))
    print(f"wrote {args.out_cert} ({cert.subject_uri}, issued by {cert.issuer_uri}) and {args.out_key}")
    return EXIT_OK


# -- simulate ---------------------------------------------------------------

def _scenario(args) -> SimScenario:
    if args.scenario is not None:
        try:
            text = _read(args.scenario).decode("utf-8")
        except UnicodeDecodeError:
            raise CliError(f"scenario {args.scenario} is not text", EXIT_USAGE) from None
        base = parse_scenario(text)
    else:
        base = SimScenario()
    changes: dict = {}
    for name in ("seed", "duration_ms", "packet_rate_hz", "payload_bytes", "interval_length_ms", "hangup_by"):
        value = getattr(args, name)
        if value is not None:
            changes[name] = value
    media = {k: v for k, v in (("loss_prob", args.loss), ("reorder_prob", args.reorder),
                               ("dup_prob", args.dup), ("loss_pattern", args.loss_pattern)) if v is not None}
    if media:
        changes["media"] = LinkModel(**{**base.media.__dict__, **media})
    if args.sig_loss is not None:
        changes["sig"] = LinkModel(**{**base.sig.__dict__, "loss_prob": args.sig_loss})
    if args.policy is not None:
        changes["policy"] = _policy(args.policy)
    if args.attack is not None:
        params = {}
        for item in args.attack_param:
            key, sep, value = item.partition("=")
            if not sep:
                raise ScenarioError(f"attack parameter {item!r} is not key=value")
            params[key.strip()] = value.strip()
        changes["attack"] = parse_attack(args.attack, params)
    return SimScenario(**{**base.__dict__, **changes})


def cmd_simulate(args) -> int:
    try:
        scenario = _scenario(args)
    except (ScenarioError, ValueError, TypeError) as exc:
        raise CliError(f"bad scenario: {exc}", EXIT_USAGE) from None
    outcome = run_simulation(scenario)
    _write(args.out, outcome.archive)
    root_out = args.root_out or str(Path(args.out).with_suffix(".root.vcrt"))
    _write(root_out, encode_cert_file(outcome.root_cert))
    if args.transcript:
        _write(args.transcript, outcome.transcript_lines().encode())
    for party in ("A", "B"):
        t = outcome.termination[party]
        if t is None:
            print(f"{party}: no termination")
            continue
        extra = f" ({t.violation.name})" if t.violation is not None else ""
        signed = "signed" if t.signed else "unsigned"
        print(f"{party}: {t.reason.name}{extra} at +{t.end_wallclock - scenario.start_wallclock} ms, {signed}")
    for party, v in outcome.violations:
        print(f"violation at {party}: {v.kind.name}: {v.detail}")
    print(f"recorder outcome: {outcome.recorder_outcome.value}")
    print(f"archive: {args.out} ({len(outcome.archive)} bytes), root certificate: {root_out}")
    if outcome.deadlocked:
        print("simulation did not finish within its event budget", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


# -- verify -----------------------------------------------------------------

def cmd_verify(args) -> int:
    try:
        roots = [decode_cert_file(_read(p)) for p in args.root]
    except FormatError as exc:
        raise CliError(f"bad root certificate: {exc}") from None
    config = _policy(args.policy)
    try:
        report = verify_archive(_read(args.archive), TrustAnchor(roots), args.signer, config)
    except FormatError as exc:
        raise CliError(f"cannot read archive: {exc}") from None
    sys.stdout.write(render_report(report, "json-lines" if args.json else "human"))
    return report.exit_code


# -- attack -----------------------------------------------------------------

ATTACK_TYPES = {
    "truncate": (TailTruncation, 1), "tail-truncation": (TailTruncation, 1),
    "splice": (SpliceSwap, 2), "splice-swap": (SpliceSwap, 2),
    "bitflip": (BitFlip, (2, 3)), "bit-flip": (BitFlip, (2, 3)),
}


def cmd_attack(args) -> int:
    kind, *raw = args.type
    if kind not in ATTACK_TYPES:
        raise CliError(f"unknown attack type {kind!r}; choose from {', '.join(sorted(ATTACK_TYPES))}", EXIT_USAGE)
    cls, arity = ATTACK_TYPES[kind]
    allowed = arity if isinstance(arity, tuple) else (arity,)
    try:
        params = [int(x) for x in raw]
    except ValueError:
        raise CliError(f"{kind} parameters must be integers", EXIT_USAGE) from None
    if len(params) not in allowed:
        raise CliError(f"{kind} takes {' or '.join(map(str, allowed))} integer parameters", EXIT_USAGE)
    attack = cls(*params)
    try:
        mutated = apply_post_attack(_read(args.archive), attack)
    except ScenarioError as exc:
        raise CliError(str(exc)) from None
    _write(args.out, mutated)
    print(f"wrote {args.out}: {attack}")
    return EXIT_OK


# -- inspect ----------------------------------------------------------------

def cmd_inspect(args) -> int:
    data = _read(args.archive)
    try:
        arch = read_archive(data, strict=False)
    except FormatError as exc:
        raise CliError(f"cannot read archive: {exc}") from None
    print(f"archive: version {arch.version}, {len(data)} bytes")
    if arch.header is not None:
        h = arch.header
        print(f"call: {h.caller_uri} -> {h.callee_uri}")
        print(f"start: {h.call_start_wallclock} ms, interval length {h.interval_length_ms} ms")
    elif arch.header_error is not None:
        print(f"start chunk unreadable: {arch.header_error}")
    print(f"intervals: {len(arch.intervals)}")
    for c in arch.intervals:
        if c.sealed is None:
            print(f"  #{c.position}: unreadable ({c.error})")
            continue
        p = c.sealed.payload
        span = p.end_wallclock - p.start_wallclock
        print(f"  #{c.position}: index {p.interval_index} {p.channel.name} "
              f"[{p.start_wallclock}, {p.end_wallclock}] {span} ms, {len(c.packets)} packets")
    if arch.trailer is not None:
        t = arch.trailer
        duration = "" if arch.header is None else f", duration {t.end_wallclock - arch.header.call_start_wallclock} ms"
        print(f"end: {t.reason.name} at {t.end_wallclock} ms{duration}, {'signed' if t.signed else 'unsigned'}")
    else:
        print("end: missing")
    if arch.truncated:
        print(f"truncated at byte {arch.truncated_at}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voicesig", description="Signed VoIP call recording toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    k = sub.add_parser("keygen", help="create a root or leaf certificate and key")
    k.add_argument("--root", action="store_true", help="self-signed root")
    k.add_argument("--subject", required=True, help="subject URI, e.g. sip:alice@example.com")
    k.add_argument("--issuer-cert")
    k.add_argument("--issuer-key")
    k.add_argument("--out-cert", required=True)
    k.add_argument("--out-key", required=True)
    k.add_argument("--days", type=int, default=365)
    k.add_argument("--not-before", type=int, help="validity start, ms since the epoch (default now)")
    k.add_argument("--seed", help="derive the key deterministically from this string")
    k.add_argument("--force", action="store_true")
    k.set_defaults(func=cmd_keygen)

    s = sub.add_parser("simulate", help="simulate a signed call and write B's archive")
    s.add_argument("--scenario", help="scenario file (key=value, optional [policy] and [attack])")
    s.add_argument("--out", required=True)
    s.add_argument("--root-out", help="where to write the simulation's root certificate")
    s.add_argument("--transcript", help="write the event transcript (JSON lines)")
    s.add_argument("--seed", type=int)
    s.add_argument("--duration-ms", type=int)
    s.add_argument("--packet-rate-hz", type=int)
    s.add_argument("--payload-bytes", type=int)
    s.add_argument("--interval-length-ms", type=int)
    s.add_argument("--hangup-by", choices=("A", "B"))
    s.add_argument("--loss", type=float, help="media loss probability per link")
    s.add_argument("--loss-pattern", choices=("bernoulli", "periodic"))
    s.add_argument("--reorder", type=float)
    s.add_argument("--dup", type=float)
    s.add_argument("--sig-loss", type=float, help="signalling loss probability per link")
    s.add_argument("--policy", help="policy file")
    s.add_argument("--attack", help="in-protocol attack type, e.g. mutilation-by-b")
    s.add_argument("--attack-param", action="append", default=[], metavar="KEY=VALUE")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify", help="verify an archive")
    v.add_argument("archive")
    v.add_argument("--root", action="append", required=True, help="trusted root certificate (repeatable)")
    v.add_argument("--signer", help="expected signer URI (default: the caller in the header)")
    v.add_argument("--policy", help="policy file")
    v.add_argument("--json", action="store_true", help="JSON-lines report")
    v.set_defaults(func=cmd_verify)

    a = sub.add_parser("attack", help="apply a post-hoc edit to an archive")
    a.add_argument("archive")
    a.add_argument("--type", required=True, nargs="+", metavar="TYPE [PARAM]",
                   help="truncate N | splice I J | bitflip CHUNK OFFSET [BIT]")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attack)

    i = sub.add_parser("inspect", help="summarize an archive without verifying it")
    i.add_argument("archive")
    i.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"voicesig: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
