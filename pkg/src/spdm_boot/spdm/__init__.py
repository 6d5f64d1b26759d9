"""SPDM protocol core: message codec, connection context, requester and responder."""
from .context import (AlgorithmSelection, Capability, ConnectionContext, EndpointConfig,
                      MeasurementBlock, MeasurementType, Role, SessionState, State)
from .errors import DecodeError, OrderingError, SpdmError, TruncatedMessage, UnknownKind
from .messages import Kind, SpdmMessage, decode_message, encode_message
from .requester import Requester, RequesterIdentity
from .responder import MutAuthMode, Responder, RequesterTrust, responder_dispatch

__all__ = [
    "AlgorithmSelection", "Capability", "ConnectionContext", "DecodeError", "EndpointConfig",
    "Kind", "MeasurementBlock", "MeasurementType", "MutAuthMode", "OrderingError", "Requester",
    "RequesterIdentity", "RequesterTrust", "Responder", "Role", "SessionState", "SpdmError",
    "SpdmMessage", "State", "TruncatedMessage", "UnknownKind", "decode_message", "encode_message",
    "responder_dispatch",
]
