"""Sans-IO protocol machines for the signer (A) and recorder (B)."""

from .events import (
    ClockTick,
    EmitArchiveChunk,
    LocalHangup,
    MediaArrived,
    ProtocolAction,
    ProtocolEvent,
    RaiseViolation,
    ResumeTimer,
    SendSigMsg,
    SigMsgArrived,
    StartTimer,
    SuspendTimer,
    TerminateCall,
    TimerFired,
)
from .machine import Phase
from .messages import (
    MAX_MESSAGE_BYTES,
    TERMINATE_ACK,
    Ack,
    Announce,
    IntervalSig,
    SeqList,
    SigMessage,
    Terminate,
    decode_sig_msg,
    encode_sig_msg,
)
from .recorder import Recorder, RecorderOutcome, recorder_on_event
from .signer import Signer, signer_init, signer_on_event

__all__ = [
    "Ack", "Announce", "ClockTick", "EmitArchiveChunk", "IntervalSig", "LocalHangup",
    "MAX_MESSAGE_BYTES", "MediaArrived", "Phase", "ProtocolAction", "ProtocolEvent",
    "RaiseViolation", "Recorder", "RecorderOutcome", "ResumeTimer", "SendSigMsg", "SeqList",
    "SigMessage", "SigMsgArrived", "Signer", "StartTimer", "SuspendTimer", "TERMINATE_ACK",
    "Terminate", "TerminateCall", "TimerFired", "decode_sig_msg", "encode_sig_msg",
    "recorder_on_event", "signer_init", "signer_on_event",
]
