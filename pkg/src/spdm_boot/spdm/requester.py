"""SPDM requester: drives VCA, authentication, measurement and session setup.

Every failure detected by the requester marks its context Failed with a status
code and raises ``SpdmError``. Calling an operation in the wrong state raises
``OrderingError`` and leaves the context untouched.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Protocol

from ..codes import StatusCode
from ..crypto import (SIGNATURE_SIZE, ChainError, MalformedKey, RandomSource, hmac_digest,
                      parse_spdm_cert_chain_blob, sign, verify, verify_chain)
from . import dh
from .context import (Capability, ConnectionContext, EndpointConfig, MeasurementBlock,
                      AlgorithmSelection, AsymAlgo, HashAlgo, AeadAlgo, DheAlgo, MEASUREMENT_SPEC_DMTF,
                      Role, SessionState, State)
from .errors import DecodeError, OrderingError, SpdmError
from .messages import (NONCE_SIZE, RESPONSE_FOR, Kind, Reader, SpdmMessage, algorithms_body,
                       capabilities_body, certificate_body, decode_message, error_code,
                       error_message, get_certificate_body, parse_algorithms_body,
                       parse_capabilities_body, parse_certificate_body, parse_version_body)
from .responder import (BASIC_MUT_AUTH_REQUESTED, DEFAULT_MAX_PORTION, ENCAP_DONE,
                        MEASUREMENTS_ALL, SESSION_MUT_AUTH_REQUESTED, VERIFY_DATA_SIZE)

AUTH = StatusCode.AUTHENTICATION_FAILURE
MAX_ENCAP_ROUNDS = 64
MAX_CERT_ROUNDS = 256


class Transport(Protocol):
    def send_request(self, data: bytes) -> None: ...

    def receive_response(self) -> bytes: ...


@dataclass(frozen=True)
class RequesterIdentity:
    """The requester's own chain and signing key, as read from firmware variables."""

    chain_blob: bytes
    private_key: bytes


def _single_flag(value: int, enum_type, allowed: int):
    if value == 0 or value & (value - 1) or not value & allowed:
        return None
    try:
        return enum_type(value)
    except ValueError:
        return None


class Requester:
    def __init__(self, transport: Transport, *, rng: RandomSource,
                 config: EndpointConfig = EndpointConfig(),
                 identity: RequesterIdentity | None = None,
                 digest_cache: dict[bytes, bytes] | None = None,
                 allow_unauthenticated_measurements: bool = False,
                 max_portion: int = DEFAULT_MAX_PORTION):
        self.transport = transport
        self.rng = rng
        self.config = config
        self.identity = identity
        self.digest_cache = digest_cache if digest_cache is not None else {}
        self.allow_unauthenticated_measurements = allow_unauthenticated_measurements
        self.max_portion = max_portion
        self.ctx = ConnectionContext(Role.REQUESTER, local_capabilities=config.capabilities)
        self.basic_mut_auth_requested = False
        self.last_nonce: bytes | None = None
        self.certificate_requests = 0

    # -- plumbing -------------------------------------------------------------------

    def _fail(self, code: int, message: str) -> SpdmError:
        self.ctx.fail(code)
        return SpdmError(code, message)

    def _message(self, kind: Kind, param1: int = 0, param2: int = 0, body: bytes = b"") -> SpdmMessage:
        return SpdmMessage(kind, self.ctx.negotiated_version or (1, 0), param1, param2, body)

    def _exchange(self, msg: SpdmMessage) -> tuple[SpdmMessage, bytes, bytes]:
        from ..transports import TransportError

        request = msg.encode()
        try:
            self.transport.send_request(request)
            raw = bytes(self.transport.receive_response())
        except TransportError as exc:
            raise self._fail(StatusCode.TRANSPORT_FAILURE, str(exc)) from None
        self.ctx.message_log += request + raw
        try:
            rsp = decode_message(raw)
        except DecodeError as exc:
            raise self._fail(StatusCode.INVALID_REQUEST, f"undecodable response: {exc}") from None
        if rsp.kind is Kind.ERROR:
            code = error_code(rsp)
            raise self._fail(code, f"responder returned ERROR for {msg.kind.name}")
        if rsp.kind is not RESPONSE_FOR[msg.kind]:
            raise self._fail(StatusCode.INVALID_REQUEST,
                             f"{rsp.kind.name} is not a response to {msg.kind.name}")
        if self.ctx.negotiated_version and rsp.version != self.ctx.negotiated_version:
            raise self._fail(StatusCode.VERSION_MISMATCH, "response version differs from negotiated")
        return rsp, request, raw

    def _require(self, *states: State) -> None:
        if self.ctx.failed:
            raise SpdmError(self.ctx.failure_code, "connection already failed")
        if self.ctx.state not in states:
            raise OrderingError(f"operation not allowed in state {self.ctx.state.name}")

    def _hash(self, data: bytes) -> bytes:
        return self.ctx.hash(data)

    def _sign(self, data: bytes) -> bytes:
        # An unusable key still produces a (worthless) signature so the peer can
        # observe and report the failure.
        try:
            return sign(data, self.identity.private_key)
        except MalformedKey:
            return bytes(SIGNATURE_SIZE)

    def _peer_leaf_key(self) -> bytes:
        return self.ctx.peer_cert_chain.leaf.public_key

    # -- VCA ----------------------------------------------------------------------

    def init_connection(self) -> ConnectionContext:
        self._require(State.FRESH)
        ctx = self.ctx
        rsp, req, raw = self._exchange(SpdmMessage(Kind.GET_VERSION, (1, 0)))
        ctx.transcript_vca += req + raw
        try:
            offered = parse_version_body(rsp.body)
        except DecodeError as exc:
            raise self._fail(StatusCode.INVALID_REQUEST, str(exc)) from None
        common = set(self.config.versions) & set(offered)
        if not common:
            raise self._fail(StatusCode.VERSION_MISMATCH, f"no common version in {offered}")
        ctx.negotiated_version = max(common)

        rsp, req, raw = self._exchange(self._message(
            Kind.GET_CAPABILITIES, body=capabilities_body(self.config.ct_exponent,
                                                          int(self.config.capabilities))))
        ctx.transcript_vca += req + raw
        _, flags = parse_capabilities_body(rsp.body)
        ctx.peer_capabilities = Capability(flags & int(Capability.CERT | Capability.CHAL
                                                       | Capability.MEAS_SIG | Capability.ENCRYPT
                                                       | Capability.MAC | Capability.MUT_AUTH
                                                       | Capability.KEY_EX | Capability.ENCAP
                                                       | Capability.HANDSHAKE_IN_THE_CLEAR))

        masks = [EndpointConfig.mask(x) for x in (self.config.asymmetric, self.config.hashes,
                                                  self.config.symmetric, self.config.key_exchange)]
        rsp, req, raw = self._exchange(self._message(
            Kind.NEGOTIATE_ALGORITHMS, body=algorithms_body(MEASUREMENT_SPEC_DMTF, *masks)))
        ctx.transcript_vca += req + raw
        _, asym, hash_, aead, dhe = parse_algorithms_body(rsp.body)
        chosen = [_single_flag(v, t, m) for v, t, m in
                  zip((asym, hash_, aead, dhe), (AsymAlgo, HashAlgo, AeadAlgo, DheAlgo), masks)]
        if None in chosen:
            raise self._fail(StatusCode.NO_COMMON_ALGORITHM, "responder selected an unoffered algorithm")
        ctx.algorithms = AlgorithmSelection(*chosen)
        ctx.advance(State.VCA_DONE)
        return ctx

    # -- authentication -----------------------------------------------------------

    def authenticate(self, trusted_root_hash: bytes | None) -> ConnectionContext:
        """Digests, certificate (unless cached), CHALLENGE; verify CHALLENGE_AUTH.

        ``trusted_root_hash`` is the expected root digest of the responder chain;
        ``None`` means the chain only has to be internally consistent.
        """
        self._require(State.VCA_DONE, State.AUTHENTICATED, State.MEASURED)
        ctx = self.ctx
        if not ctx.peer_capabilities & Capability.CHAL:
            raise self._fail(StatusCode.UNSUPPORTED_REQUEST, "responder cannot be challenged")
        size = ctx.hash_algorithm.digest_size
        vca = bytes(ctx.transcript_vca)

        rsp, req, raw = self._exchange(self._message(Kind.GET_DIGESTS))
        ctx.transcript_m1m2 = bytearray(req + raw)
        digest = rsp.body[:size]
        if len(digest) != size or not rsp.param2 & 0x01:
            raise self._fail(AUTH, "no certificate digest in slot 0")
        ctx.peer_cert_digests = [digest]

        blob = self.digest_cache.get(digest)
        if blob is None or self._hash(blob) != digest:
            blob = self._fetch_certificate()
        try:
            chain = parse_spdm_cert_chain_blob(blob, ctx.hash_algorithm)
        except ChainError as exc:
            raise self._fail(AUTH, f"responder chain malformed: {exc}") from None
        if self._hash(blob) != digest or not verify_chain(chain, trusted_root_hash):
            raise self._fail(AUTH, "responder chain not trusted")

        nonce = self.rng.bytes(NONCE_SIZE)
        self.last_nonce = nonce
        challenge = self._message(Kind.CHALLENGE, 0, 0, nonce).encode()
        ctx.transcript_m1m2 += challenge
        expected_prefix = self._hash(vca + ctx.transcript_m1m2)
        rsp, _, raw = self._exchange(decode_message(challenge))
        try:
            r = Reader(rsp.body)
            cert_hash, _rsp_nonce, prefix = r.take(size), r.take(NONCE_SIZE), r.take(size)
            signature = r.rest()
        except DecodeError:
            raise self._fail(AUTH, "CHALLENGE_AUTH truncated") from None
        ctx.transcript_m1m2 += raw[:len(raw) - len(signature)]
        leaf_key = chain.leaf.public_key
        if (cert_hash != digest or prefix != expected_prefix
                or not verify(vca + ctx.transcript_m1m2, signature, leaf_key)):
            raise self._fail(AUTH, "CHALLENGE_AUTH verification failed")

        ctx.peer_cert_blob = blob
        ctx.peer_cert_chain = chain
        ctx.challenge_transcript_hash = self._hash(vca + ctx.transcript_m1m2)
        self.digest_cache[digest] = blob
        self.basic_mut_auth_requested = bool(rsp.param1 & BASIC_MUT_AUTH_REQUESTED)
        ctx.advance(State.AUTHENTICATED)
        return ctx

    def _fetch_certificate(self) -> bytes:
        blob = bytearray()
        for _ in range(MAX_CERT_ROUNDS):
            self.certificate_requests += 1
            rsp, req, raw = self._exchange(self._message(
                Kind.GET_CERTIFICATE, 0, 0, get_certificate_body(len(blob), self.max_portion)))
            self.ctx.transcript_m1m2 += req + raw
            try:
                portion, remainder = parse_certificate_body(rsp.body)
            except DecodeError:
                raise self._fail(AUTH, "CERTIFICATE body malformed") from None
            blob += portion
            if remainder == 0:
                return bytes(blob)
            if not portion:
                break
        raise self._fail(AUTH, "certificate retrieval did not converge")

    # -- measurement ----------------------------------------------------------------

    def get_measurements(self, index: int = MEASUREMENTS_ALL) -> list[MeasurementBlock]:
        if self.allow_unauthenticated_measurements:
            self._require(State.VCA_DONE, State.AUTHENTICATED, State.MEASURED)
        else:
            self._require(State.AUTHENTICATED, State.MEASURED)
        ctx = self.ctx
        if not ctx.peer_capabilities & Capability.MEAS_SIG:
            raise self._fail(StatusCode.UNSUPPORTED_REQUEST, "responder has no measurements")
        signed = ctx.peer_cert_chain is not None
        nonce = self.rng.bytes(NONCE_SIZE)
        rsp, req, raw = self._exchange(self._message(Kind.GET_MEASUREMENTS, int(signed), index, nonce))
        try:
            r = Reader(rsp.body)
            blocks = [MeasurementBlock.read(r) for _ in range(r.u8())]
            r.take(NONCE_SIZE)
            signature = r.rest()
        except SpdmError:
            raise self._fail(StatusCode.INVALID_REQUEST, "MEASUREMENTS malformed") from None
        for block in blocks:
            if block.type.is_hash and len(block.value) != ctx.hash_algorithm.digest_size:
                raise self._fail(StatusCode.INVALID_REQUEST, "measurement width mismatch")
        l1l2 = req + raw[:len(raw) - len(signature)]
        vca = bytes(ctx.transcript_vca)
        if signed:
            if len(signature) != SIGNATURE_SIZE or not verify(vca + l1l2, signature, self._peer_leaf_key()):
                raise self._fail(AUTH, "MEASUREMENTS signature invalid")
        elif signature:
            raise self._fail(StatusCode.INVALID_REQUEST, "unexpected signature")
        ctx.transcript_l1l2 = bytearray(l1l2)
        ctx.measurement_transcript_hash = self._hash(vca + l1l2)
        ctx.transcript_m1m2.clear()
        ctx.advance(State.MEASURED)
        return blocks

    # -- session --------------------------------------------------------------------

    def establish_session(self, mutual: bool = False) -> SessionState:
        self._require(State.AUTHENTICATED, State.MEASURED)
        ctx = self.ctx
        if not ctx.peer_capabilities & Capability.KEY_EX:
            raise self._fail(StatusCode.UNSUPPORTED_REQUEST, "responder lacks KEY_EX")
        alg = ctx.hash_algorithm
        private = dh.generate_private(self.rng)
        public = dh.public_value(private)
        req_sid = struct.unpack("<H", self.rng.bytes(2))[0] | 1
        body = struct.pack("<H", req_sid) + self.rng.bytes(NONCE_SIZE) + struct.pack("<H", len(public)) + public
        rsp, req, raw = self._exchange(self._message(Kind.KEY_EXCHANGE, 0, 0, body))
        tail = SIGNATURE_SIZE + VERIFY_DATA_SIZE
        try:
            r = Reader(rsp.body[:-tail] if len(rsp.body) > tail else b"")
            rsp_sid, _random = r.u16(), r.take(NONCE_SIZE)
            peer_public = r.take(r.u16())
            r.done()
        except DecodeError:
            raise self._fail(StatusCode.INVALID_REQUEST, "KEY_EXCHANGE_RSP malformed") from None
        partial, signature, verify_data = raw[:-tail], raw[-tail:-VERIFY_DATA_SIZE], raw[-VERIFY_DATA_SIZE:]

        th = bytes(ctx.transcript_vca) + self._hash(ctx.peer_cert_blob) + req
        if not verify(th + partial, signature, self._peer_leaf_key()):
            raise self._fail(AUTH, "KEY_EXCHANGE_RSP signature invalid")
        try:
            shared = dh.shared_secret(private, peer_public)
        except dh.DhError as exc:
            raise self._fail(StatusCode.HANDSHAKE_FAILURE, str(exc)) from None
        th += partial + signature
        handshake_secret = self._hash(shared + self._hash(th))
        if hmac_digest(handshake_secret, self._hash(th), alg) != verify_data:
            raise self._fail(StatusCode.HANDSHAKE_FAILURE, "responder verify data mismatch")
        th += verify_data

        do_sign = mutual or bool(rsp.param2 & SESSION_MUT_AUTH_REQUESTED)
        if do_sign:
            if self.identity is None:
                raise self._fail(AUTH, "mutual authentication requested but no requester identity")
            th += self._hash(self.identity.chain_blob)
        header = self._message(Kind.FINISH, int(do_sign), 0).encode()
        req_sig = self._sign(th + header) if do_sign else b""
        finish_mac = hmac_digest(handshake_secret, self._hash(th + header + req_sig), alg)
        finish = decode_message(header + req_sig + finish_mac)
        rsp, req, raw = self._exchange(finish)
        th += req
        expected = hmac_digest(handshake_secret, self._hash(th + raw[:5]), alg)
        if raw[5:] != expected:
            raise self._fail(StatusCode.HANDSHAKE_FAILURE, "FINISH_RSP verify data mismatch")
        th += raw

        session = SessionState((req_sid << 16) | rsp_sid, handshake_secret,
                               self._hash(handshake_secret + b"finish" + self._hash(th)), True)
        ctx.transcript_th = bytearray(th)
        ctx.session = session
        ctx.mutual_auth_done = ctx.mutual_auth_done or do_sign
        ctx.advance(State.SESSION_ESTABLISHED)
        return session

    # -- basic mutual authentication ----------------------------------------------------

    def mutual_auth_encapsulated(self) -> ConnectionContext:
        """Answer the responder's encapsulated requests until it announces a verdict."""
        self._require(State.AUTHENTICATED, State.MEASURED, State.SESSION_ESTABLISHED)
        ctx = self.ctx
        if self.identity is None:
            raise OrderingError("no requester identity for mutual authentication")
        ctx.transcript_encap = bytearray()
        request_id, body = 0, b""
        for _ in range(MAX_ENCAP_ROUNDS):
            rsp, _, _ = self._exchange(self._message(Kind.ENCAPSULATED_RESPONSE, request_id, 0, body))
            if rsp.param2 & ENCAP_DONE:
                status = struct.unpack("<I", rsp.body[:4])[0] if len(rsp.body) >= 4 else int(AUTH)
                if status != StatusCode.SUCCESS:
                    raise self._fail(status, "responder rejected requester identity")
                ctx.mutual_auth_done = True
                return ctx
            request_id = rsp.param1
            ctx.transcript_encap += rsp.body
            body = self._answer(rsp.body)
        raise self._fail(StatusCode.UNEXPECTED_REQUEST, "encapsulated flow did not terminate")

    def _answer(self, inner_raw: bytes) -> bytes:
        ctx = self.ctx
        version = ctx.negotiated_version
        blob = self.identity.chain_blob
        try:
            inner = decode_message(inner_raw)
        except DecodeError:
            inner = None
        if inner is None or inner.version != version:
            answer = error_message(StatusCode.INVALID_REQUEST, version).encode()
        elif inner.kind is Kind.GET_DIGESTS:
            answer = SpdmMessage(Kind.DIGESTS, version, 0, 0x01, self._hash(blob)).encode()
        elif inner.kind is Kind.GET_CERTIFICATE:
            offset, length = struct.unpack("<HH", inner.body[:4])
            portion = blob[offset:offset + min(length, self.max_portion)]
            answer = SpdmMessage(Kind.CERTIFICATE, version, 0, 0,
                                 certificate_body(portion, max(len(blob) - offset - len(portion), 0))).encode()
        elif inner.kind is Kind.CHALLENGE:
            vca = bytes(ctx.transcript_vca)
            body = self._hash(blob) + self.rng.bytes(NONCE_SIZE) + self._hash(vca + ctx.transcript_encap)
            partial = SpdmMessage(Kind.CHALLENGE_AUTH, version, 0, 0x01, body).encode()
            ctx.transcript_encap += partial
            return partial + self._sign(vca + ctx.transcript_encap)
        else:
            answer = error_message(StatusCode.UNSUPPORTED_REQUEST, version).encode()
        ctx.transcript_encap += answer
        return answer
