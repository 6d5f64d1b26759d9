"""SPDM responder: answers requests, keeps its half of every transcript.

The responder also drives Basic Mutual Authentication through encapsulated
requests: after a CHALLENGE in which it set the mutual-auth flag, each
ENCAPSULATED_RESPONSE from the requester is answered with the next request the
responder wants to issue (GET_DIGESTS, GET_CERTIFICATE..., CHALLENGE), wrapped
in ENCAPSULATED_REQUEST, until a final ENCAPSULATED_REQUEST with the DONE flag
carries the verdict.
"""
from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass, field

from ..codes import StatusCode
from ..crypto import (ChainError, RandomSource, SIGNATURE_SIZE, hmac_digest,
                      parse_spdm_cert_chain_blob, sign, verify, verify_chain)
from . import dh
from .context import (ALL_CAPABILITIES, Capability, ConnectionContext, EndpointConfig, MeasurementBlock,
                      AlgorithmSelection, AsymAlgo, HashAlgo, AeadAlgo, DheAlgo, MEASUREMENT_SPEC_DMTF,
                      Role, SessionState, State)
from .errors import DecodeError, SpdmError
from .messages import (NONCE_SIZE, Kind, Reader, SpdmMessage, algorithms_body, capabilities_body,
                       certificate_body, decode_message, error_message, get_certificate_body,
                       parse_algorithms_body, parse_capabilities_body, parse_certificate_body,
                       version_body)

log = logging.getLogger(__name__)

BASIC_MUT_AUTH_REQUESTED = 0x80
SESSION_MUT_AUTH_REQUESTED = 0x01
ENCAP_DONE = 0x01
MEASUREMENTS_ALL = 0xFF
VERIFY_DATA_SIZE = 32
DEFAULT_MAX_PORTION = 1024


class MutAuthMode(enum.Enum):
    NONE = "none"
    BASIC = "basic"
    SESSION = "session"


@dataclass(frozen=True)
class RequesterTrust:
    """How a responder decides whether to believe a requester's identity.

    ``trusted_root_hash`` demands full chain validation up to that root.
    ``pinned_leaf_key`` accepts any well-formed chain whose leaf carries that key.
    ``expected_chain_blob`` is the responder's provisioned copy of the requester
    chain, used for session-based mutual auth where no certificate is fetched.
    """

    trusted_root_hash: bytes | None = None
    pinned_leaf_key: bytes | None = None
    expected_chain_blob: bytes | None = None

    def accepts(self, blob: bytes) -> bool:
        try:
            chain = parse_spdm_cert_chain_blob(blob)
            leaf_key = chain.leaf.public_key
        except ChainError:
            return False
        if self.pinned_leaf_key is not None:
            return leaf_key == self.pinned_leaf_key
        return verify_chain(chain, self.trusted_root_hash)


@dataclass
class _EncapState:
    request_id: int = 0
    expected: Kind | None = None
    digest: bytes = b""
    blob: bytearray = field(default_factory=bytearray)
    prefix_hash: bytes = b""


def _select(preferred, offered_mask: int):
    for alg in preferred:
        if int(alg) & offered_mask:
            return alg
    return None


class Responder:
    def __init__(self, cert_chain_blob: bytes, private_key: bytes, *, rng: RandomSource,
                 config: EndpointConfig = EndpointConfig(),
                 measurements: tuple[MeasurementBlock, ...] = (),
                 mut_auth: MutAuthMode = MutAuthMode.NONE,
                 requester_trust: RequesterTrust | None = None,
                 faults: frozenset[str] = frozenset(),
                 max_portion: int = DEFAULT_MAX_PORTION):
        self.cert_chain_blob = bytes(cert_chain_blob)
        self.private_key = bytes(private_key)
        self.rng = rng
        self.config = config
        self.measurements = tuple(measurements)
        self.mut_auth = mut_auth
        self.requester_trust = requester_trust
        self.faults = frozenset(faults)
        self.max_portion = max_portion
        self.ctx = ConnectionContext(Role.RESPONDER, local_capabilities=config.capabilities)
        self._vca_step = 0
        self._encap: _EncapState | None = None
        self._pending_session: SessionState | None = None

    # -- entry point --------------------------------------------------------------

    def dispatch(self, request: bytes) -> bytes:
        request = bytes(request)
        version = self.ctx.negotiated_version or (1, 0)
        try:
            msg = decode_message(request)
        except DecodeError as exc:
            return self._log(request, error_message(exc.code, version).encode())
        if self.ctx.failed:
            return self._log(request, error_message(StatusCode.UNEXPECTED_REQUEST, version).encode())
        handler = self._handlers.get(msg.kind)
        try:
            if handler is None:
                raise SpdmError(StatusCode.UNSUPPORTED_REQUEST if msg.is_request
                                else StatusCode.INVALID_REQUEST, f"cannot handle {msg.kind.name}")
            response = handler(self, msg, request)
        except SpdmError as exc:
            log.debug("responder failing on %s: %s", msg.kind.name, exc)
            self.ctx.fail(exc.code)
            response = error_message(exc.code, version).encode()
        return self._log(request, response)

    def _log(self, request: bytes, response: bytes) -> bytes:
        self.ctx.message_log += request + response
        return response

    def _reply(self, kind: Kind, param1: int = 0, param2: int = 0, body: bytes = b"") -> bytes:
        return SpdmMessage(kind, self.ctx.negotiated_version, param1, param2, body).encode()

    def _require_vca(self, msg: SpdmMessage) -> None:
        if self._vca_step < 3:
            raise SpdmError(StatusCode.UNEXPECTED_REQUEST, f"{msg.kind.name} before VCA completed")
        if msg.version != self.ctx.negotiated_version:
            raise SpdmError(StatusCode.VERSION_MISMATCH, "request version differs from negotiated")

    def _require_cap(self, cap: Capability) -> None:
        if not (self.config.capabilities & cap):
            raise SpdmError(StatusCode.UNSUPPORTED_REQUEST, f"capability {cap.name} not supported")

    def _hash(self, data: bytes) -> bytes:
        return self.ctx.hash(data)

    # -- VCA ----------------------------------------------------------------------

    def _get_version(self, msg, raw):
        if self._vca_step != 0:
            raise SpdmError(StatusCode.UNEXPECTED_REQUEST, "GET_VERSION after VCA started")
        rsp = SpdmMessage(Kind.VERSION, (1, 0), 0, 0, version_body(list(self.config.versions))).encode()
        self.ctx.transcript_vca += raw + rsp
        self._vca_step = 1
        return rsp

    def _get_capabilities(self, msg, raw):
        if self._vca_step != 1:
            raise SpdmError(StatusCode.UNEXPECTED_REQUEST, "GET_CAPABILITIES out of order")
        if msg.version not in self.config.versions:
            raise SpdmError(StatusCode.VERSION_MISMATCH, f"version {msg.version} not supported")
        _, flags = parse_capabilities_body(msg.body)
        self.ctx.negotiated_version = msg.version
        self.ctx.peer_capabilities = Capability(flags & int(ALL_CAPABILITIES))
        rsp = self._reply(Kind.CAPABILITIES, body=capabilities_body(self.config.ct_exponent,
                                                                    int(self.config.capabilities)))
        self.ctx.transcript_vca += raw + rsp
        self._vca_step = 2
        return rsp

    def _negotiate_algorithms(self, msg, raw):
        if self._vca_step != 2:
            raise SpdmError(StatusCode.UNEXPECTED_REQUEST, "NEGOTIATE_ALGORITHMS out of order")
        spec, asym, hash_, aead, dhe = parse_algorithms_body(msg.body)
        chosen = (_select(self.config.asymmetric, asym), _select(self.config.hashes, hash_),
                  _select(self.config.symmetric, aead), _select(self.config.key_exchange, dhe))
        if None in chosen or not spec & MEASUREMENT_SPEC_DMTF:
            raise SpdmError(StatusCode.NO_COMMON_ALGORITHM, "no common algorithm")
        self.ctx.algorithms = AlgorithmSelection(AsymAlgo(chosen[0]), HashAlgo(chosen[1]),
                                                 AeadAlgo(chosen[2]), DheAlgo(chosen[3]))
        rsp = self._reply(Kind.ALGORITHMS, body=algorithms_body(
            MEASUREMENT_SPEC_DMTF, *(int(c) for c in chosen)))
        self.ctx.transcript_vca += raw + rsp
        self._vca_step = 3
        self.ctx.advance(State.VCA_DONE)
        return rsp

    # -- authentication -------------------------------------------------------------

    def _get_digests(self, msg, raw):
        self._require_vca(msg)
        self._require_cap(Capability.CERT)
        rsp = self._reply(Kind.DIGESTS, 0, 0x01, self._hash(self.cert_chain_blob))
        self.ctx.transcript_m1m2 = bytearray(raw + rsp)
        return rsp

    def _get_certificate(self, msg, raw):
        self._require_vca(msg)
        self._require_cap(Capability.CERT)
        if msg.param1 & 0x0F != 0:
            raise SpdmError(StatusCode.INVALID_REQUEST, "only slot 0 is provisioned")
        offset, length = struct.unpack("<HH", msg.body[:4])
        blob = self.cert_chain_blob
        if offset > len(blob):
            raise SpdmError(StatusCode.INVALID_REQUEST, "certificate offset beyond chain")
        portion = blob[offset:offset + min(length, self.max_portion)]
        rsp = self._reply(Kind.CERTIFICATE, 0, 0,
                          certificate_body(portion, len(blob) - offset - len(portion)))
        self.ctx.transcript_m1m2 += raw + rsp
        return rsp

    def _challenge(self, msg, raw):
        self._require_vca(msg)
        self._require_cap(Capability.CHAL)
        if msg.param1 & 0x0F != 0:
            raise SpdmError(StatusCode.INVALID_REQUEST, "only slot 0 is provisioned")
        vca = bytes(self.ctx.transcript_vca)
        self.ctx.transcript_m1m2 += raw
        prefix_hash = self._hash(vca + self.ctx.transcript_m1m2)
        basic = self.mut_auth is MutAuthMode.BASIC and bool(
            self.config.capabilities & Capability.MUT_AUTH
            and self.ctx.peer_capabilities & Capability.MUT_AUTH)
        body = self._hash(self.cert_chain_blob) + self.rng.bytes(NONCE_SIZE) + prefix_hash
        partial = self._reply(Kind.CHALLENGE_AUTH, BASIC_MUT_AUTH_REQUESTED if basic else 0, 0x01, body)
        self.ctx.transcript_m1m2 += partial
        signature = sign(vca + self.ctx.transcript_m1m2, self.private_key)
        self.ctx.challenge_transcript_hash = self._hash(vca + self.ctx.transcript_m1m2)
        self.ctx.advance(State.AUTHENTICATED)
        self._encap = _EncapState() if basic else None
        return partial + signature

    def _get_measurements(self, msg, raw):
        self._require_vca(msg)
        self._require_cap(Capability.MEAS_SIG)
        signed = bool(msg.param1 & 0x01)
        index = msg.param2
        blocks = [b for b in self.measurements if index == MEASUREMENTS_ALL or b.index == index]
        if not blocks:
            raise SpdmError(StatusCode.INVALID_REQUEST, f"no measurement at index {index}")
        body = bytes([len(blocks)]) + b"".join(b.encode() for b in blocks) + self.rng.bytes(NONCE_SIZE)
        partial = self._reply(Kind.MEASUREMENTS, len(blocks), 0, body)
        vca = bytes(self.ctx.transcript_vca)
        self.ctx.transcript_l1l2 = bytearray(raw + partial)
        rsp = partial + (sign(vca + self.ctx.transcript_l1l2, self.private_key) if signed else b"")
        self.ctx.measurement_transcript_hash = self._hash(vca + self.ctx.transcript_l1l2)
        self.ctx.transcript_m1m2.clear()
        self.ctx.advance(State.MEASURED)
        return rsp

    # -- session ------------------------------------------------------------------------

    def _key_exchange(self, msg, raw):
        self._require_vca(msg)
        self._require_cap(Capability.KEY_EX)
        r = Reader(msg.body)
        req_sid, _random = r.u16(), r.take(NONCE_SIZE)
        peer_public = r.take(r.u16())
        r.done()
        private = dh.generate_private(self.rng)
        public = dh.public_value(private)
        rsp_sid = struct.unpack("<H", self.rng.bytes(2))[0] | 1
        mut = SESSION_MUT_AUTH_REQUESTED if self.mut_auth is MutAuthMode.SESSION else 0
        body = struct.pack("<H", rsp_sid) + self.rng.bytes(NONCE_SIZE) + struct.pack("<H", len(public)) + public
        partial = self._reply(Kind.KEY_EXCHANGE_RSP, 0, mut, body)
        th = bytes(self.ctx.transcript_vca) + self._hash(self.cert_chain_blob) + raw
        signature = sign(th + partial, self.private_key)
        if "substitute_ephemeral" in self.faults:
            private = dh.generate_private(self.rng)
        try:
            shared = dh.shared_secret(private, peer_public)
        except dh.DhError as exc:
            raise SpdmError(StatusCode.INVALID_REQUEST, str(exc)) from None
        th1_hash = self._hash(th + partial + signature)
        handshake_secret = self._hash(shared + th1_hash)
        verify_data = hmac_digest(handshake_secret, th1_hash, self.ctx.hash_algorithm)
        rsp = partial + signature + verify_data
        self.ctx.transcript_th = bytearray(th + rsp)
        self._pending_session = SessionState((req_sid << 16) | rsp_sid, handshake_secret)
        return rsp

    def _finish(self, msg, raw):
        self._require_vca(msg)
        session = self._pending_session
        if session is None or session.established:
            raise SpdmError(StatusCode.UNEXPECTED_REQUEST, "FINISH without KEY_EXCHANGE")
        signed = bool(msg.param1 & 0x01)
        expected_len = (SIGNATURE_SIZE if signed else 0) + VERIFY_DATA_SIZE
        if len(msg.body) != expected_len:
            raise SpdmError(StatusCode.INVALID_REQUEST, "FINISH body has the wrong size")
        if self.mut_auth is MutAuthMode.SESSION and not signed:
            raise SpdmError(StatusCode.AUTHENTICATION_FAILURE, "mutual authentication required")
        th = bytes(self.ctx.transcript_th)
        if signed:
            trust = self.requester_trust
            blob = trust.expected_chain_blob if trust else None
            if blob is None or not trust.accepts(blob):
                raise SpdmError(StatusCode.AUTHENTICATION_FAILURE, "requester chain not trusted")
            th += self._hash(blob)
            leaf_key = parse_spdm_cert_chain_blob(blob).leaf.public_key
            if not verify(th + raw[:5], msg.body[:SIGNATURE_SIZE], leaf_key):
                raise SpdmError(StatusCode.AUTHENTICATION_FAILURE, "FINISH signature invalid")
        expected = hmac_digest(session.handshake_secret, self._hash(th + raw[:-VERIFY_DATA_SIZE]),
                               self.ctx.hash_algorithm)
        if expected != raw[-VERIFY_DATA_SIZE:]:
            raise SpdmError(StatusCode.HANDSHAKE_FAILURE, "requester verify data mismatch")
        th += raw
        header = self._reply(Kind.FINISH_RSP)
        rsp = header + hmac_digest(session.handshake_secret, self._hash(th + header),
                                   self.ctx.hash_algorithm)
        th += rsp
        session.data_secret = self._hash(session.handshake_secret + b"finish" + self._hash(th))
        session.established = True
        self.ctx.transcript_th = bytearray(th)
        self.ctx.session = session
        self.ctx.mutual_auth_done = self.ctx.mutual_auth_done or signed
        self.ctx.advance(State.SESSION_ESTABLISHED)
        return rsp

    # -- basic mutual authentication (encapsulated) -----------------------------------------

    def _issue(self, inner: SpdmMessage) -> bytes:
        st = self._encap
        st.request_id = (st.request_id % 0xFF) + 1
        st.expected = {Kind.GET_DIGESTS: Kind.DIGESTS, Kind.GET_CERTIFICATE: Kind.CERTIFICATE,
                       Kind.CHALLENGE: Kind.CHALLENGE_AUTH}[inner.kind]
        inner_raw = inner.encode()
        self.ctx.transcript_encap += inner_raw
        if inner.kind is Kind.CHALLENGE:
            st.prefix_hash = self._hash(bytes(self.ctx.transcript_vca) + self.ctx.transcript_encap)
        return self._reply(Kind.ENCAPSULATED_REQUEST, st.request_id, 0, inner_raw)

    def _encap_done(self, status: int) -> bytes:
        self._encap = None
        if status == StatusCode.SUCCESS:
            self.ctx.mutual_auth_done = True
        else:
            self.ctx.fail(status)
        return self._reply(Kind.ENCAPSULATED_REQUEST, 0, ENCAP_DONE, struct.pack("<I", status))

    def _encapsulated_response(self, msg, raw):
        self._require_vca(msg)
        st = self._encap
        if st is None:
            raise SpdmError(StatusCode.UNEXPECTED_REQUEST, "no encapsulated flow in progress")
        v = self.ctx.negotiated_version
        if msg.param1 == 0 and st.request_id == 0:
            self.ctx.transcript_encap = bytearray()
            return self._issue(SpdmMessage(Kind.GET_DIGESTS, v))
        if msg.param1 != st.request_id:
            raise SpdmError(StatusCode.INVALID_REQUEST, "encapsulated response id mismatch")
        try:
            inner = decode_message(msg.body)
        except DecodeError:
            return self._encap_done(StatusCode.AUTHENTICATION_FAILURE)
        if inner.kind is not st.expected:
            return self._encap_done(StatusCode.AUTHENTICATION_FAILURE)
        auth = StatusCode.AUTHENTICATION_FAILURE

        if inner.kind is Kind.DIGESTS:
            self.ctx.transcript_encap += msg.body
            st.digest = inner.body[:self.ctx.hash_algorithm.digest_size]
            return self._issue(SpdmMessage(Kind.GET_CERTIFICATE, v, 0, 0,
                                           get_certificate_body(0, self.max_portion)))
        if inner.kind is Kind.CERTIFICATE:
            self.ctx.transcript_encap += msg.body
            try:
                portion, remainder = parse_certificate_body(inner.body)
            except DecodeError:
                return self._encap_done(auth)
            st.blob += portion
            if remainder:
                if not portion:
                    return self._encap_done(auth)
                return self._issue(SpdmMessage(Kind.GET_CERTIFICATE, v, 0, 0,
                                               get_certificate_body(len(st.blob), self.max_portion)))
            trust = self.requester_trust or RequesterTrust()
            if self._hash(bytes(st.blob)) != st.digest or not trust.accepts(bytes(st.blob)):
                return self._encap_done(auth)
            return self._issue(SpdmMessage(Kind.CHALLENGE, v, 0, 0, self.rng.bytes(NONCE_SIZE)))

        # CHALLENGE_AUTH from the requester
        body = msg.body
        partial, signature = body[:-SIGNATURE_SIZE], body[-SIGNATURE_SIZE:]
        self.ctx.transcript_encap += partial
        size = self.ctx.hash_algorithm.digest_size
        r = Reader(inner.body)
        try:
            cert_hash, _nonce, prefix = r.take(size), r.take(NONCE_SIZE), r.take(size)
        except DecodeError:
            return self._encap_done(auth)
        blob = bytes(st.blob)
        leaf_key = parse_spdm_cert_chain_blob(blob).leaf.public_key
        ok = (cert_hash == self._hash(blob) and prefix == st.prefix_hash
              and verify(bytes(self.ctx.transcript_vca) + self.ctx.transcript_encap, signature, leaf_key))
        return self._encap_done(StatusCode.SUCCESS if ok else auth)

    _handlers = {
        Kind.GET_VERSION: _get_version,
        Kind.GET_CAPABILITIES: _get_capabilities,
        Kind.NEGOTIATE_ALGORITHMS: _negotiate_algorithms,
        Kind.GET_DIGESTS: _get_digests,
        Kind.GET_CERTIFICATE: _get_certificate,
        Kind.CHALLENGE: _challenge,
        Kind.GET_MEASUREMENTS: _get_measurements,
        Kind.KEY_EXCHANGE: _key_exchange,
        Kind.FINISH: _finish,
        Kind.ENCAPSULATED_RESPONSE: _encapsulated_response,
    }


def responder_dispatch(responder: Responder, request: bytes) -> bytes:
    return responder.dispatch(request)
