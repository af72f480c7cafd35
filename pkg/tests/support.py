"""Shared fixtures data for the test-suite.

Run ``python3 tests/support.py --regenerate`` to rewrite the frozen golden
files after a deliberate format change.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

from voicesig.archive import read_archive
from voicesig.core import ChannelDirection
from voicesig.crypto import TrustAnchor, decode_cert_file, encode_cert_file
from voicesig.protocol import TERMINATE_ACK, Ack, Announce, IntervalSig, SeqList, Terminate, encode_sig_msg
from voicesig.simnet import LinkModel, SimScenario, run_simulation

GOLDEN_DIR = Path(__file__).parent / "golden"
GOLDEN_ARCHIVE = GOLDEN_DIR / "call5.vsc"
GOLDEN_ROOT = GOLDEN_DIR / "call5.root.vcrt"
GOLDEN_MESSAGES = GOLDEN_DIR / "sig_messages.json"

# PASS/FAIL lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []

# five sealed intervals, 5 packets/s of 44-byte frames, lossless links
GOLDEN_SCENARIO = SimScenario(
    seed=2024, duration_ms=3010, packet_rate_hz=5, payload_bytes=44, media=LinkModel()
)


@functools.lru_cache(maxsize=None)
def golden_outcome():
    return run_simulation(GOLDEN_SCENARIO)


def golden_bytes() -> bytes:
    return GOLDEN_ARCHIVE.read_bytes()


def golden_anchor() -> TrustAnchor:
    return TrustAnchor([decode_cert_file(GOLDEN_ROOT.read_bytes())])


def sample_messages(archive_bytes: bytes) -> dict:
    arch = read_archive(archive_bytes)
    t0 = arch.header.call_start_wallclock
    return {
        "announce": Announce(arch.header_envelope),
        "seq_list": SeqList(0, ChannelDirection.A_TO_B, t0 + 20, t0 + 1020, (100, 101, 103)),
        "interval_sig": IntervalSig(arch.intervals[0].sealed),
        "ack": Ack(3),
        "terminate_ack": Ack(TERMINATE_ACK),
        "terminate": Terminate(arch.trailer, arch.trailer_envelope),
    }


def regenerate() -> None:
    GOLDEN_DIR.mkdir(exist_ok=True)
    outcome = golden_outcome()
    GOLDEN_ARCHIVE.write_bytes(outcome.archive)
    GOLDEN_ROOT.write_bytes(encode_cert_file(outcome.root_cert))
    msgs = {k: encode_sig_msg(m).hex() for k, m in sample_messages(outcome.archive).items()}
    GOLDEN_MESSAGES.write_text(json.dumps(msgs, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__" and "--regenerate" in sys.argv:
    regenerate()
    print(f"wrote {GOLDEN_ARCHIVE}, {GOLDEN_ROOT}, {GOLDEN_MESSAGES}")
