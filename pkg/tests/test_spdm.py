import struct

import pytest
from hypothesis import given, settings, strategies as st

from spdm_boot.codes import StatusCode
from spdm_boot.crypto import RandomSource
from spdm_boot.spdm import (
    DecodeError, Kind, MutAuthMode, OrderingError, Requester, Responder, SpdmError, SpdmMessage,
    State, decode_message, responder_dispatch,
)
from spdm_boot.spdm import dh
from spdm_boot.spdm.messages import (
    TruncatedMessage, UnknownKind, error_code, error_message, parse_version_body, version_body,
)
from spdm_boot.transports import DirectBinding, Tap

from conftest import make_pair

AUTH = StatusCode.AUTHENTICATION_FAILURE


# --- messages ---------------------------------------------------------------------

def test_message_wire_layout():
    msg = SpdmMessage(Kind.GET_VERSION, (1, 0))
    assert msg.encode() == bytes([1, 0, 0x84, 0, 0])
    assert decode_message(msg.encode()) == msg
    err = error_message(StatusCode.ORDERING_VIOLATION, (1, 2))
    assert err.encode() == bytes([1, 2, 0x7F, 0xFF, 0]) + struct.pack("<I", 0x80000008)
    assert error_code(decode_message(err.encode())) == 0x80000008


def test_decode_rejects_short_and_unknown():
    with pytest.raises(TruncatedMessage):
        decode_message(b"\x01\x00\x84")
    with pytest.raises(UnknownKind):
        decode_message(b"\x01\x00\x99\x00\x00")
    with pytest.raises(TruncatedMessage):
        decode_message(bytes([1, 0, int(Kind.CHALLENGE), 0, 0]) + bytes(31))


def test_version_body_round_trip():
    assert parse_version_body(version_body([(1, 0), (1, 2)])) == [(1, 0), (1, 2)]


kinds = st.sampled_from(list(Kind))


@settings(max_examples=200)
@given(kinds, st.integers(0, 255), st.integers(0, 255), st.integers(0, 255), st.binary(max_size=80))
def test_message_round_trip_property(kind, minor, p1, p2, extra):
    from spdm_boot.spdm.messages import MIN_BODY
    body = bytes(MIN_BODY.get(kind, 0)) + extra
    msg = SpdmMessage(kind, (1, minor), p1, p2, body)
    assert decode_message(msg.encode()) == msg


# --- DH ---------------------------------------------------------------------------

def test_dh_agreement_and_bad_peer():
    rng = RandomSource(5)
    a, b = dh.generate_private(rng), dh.generate_private(rng)
    assert dh.shared_secret(a, dh.public_value(b)) == dh.shared_secret(b, dh.public_value(a))
    for bad in (bytes(256), (1).to_bytes(256, "big"), b"\x01"):
        with pytest.raises(dh.DhError):
            dh.shared_secret(a, bad)


# --- full flows ---------------------------------------------------------------------

def run_session(requester, root_hash, mutual=True):
    requester.init_connection()
    requester.authenticate(root_hash)
    blocks = requester.get_measurements()
    return blocks, requester.establish_session(mutual=mutual)


def test_session_flow_is_symmetric(material):
    requester, responder = make_pair(material)
    blocks, session = run_session(requester, material.device_identities["nvme0"].chain.root_hash)
    assert len(blocks) == 1 and blocks[0].index == 1
    assert requester.ctx.state is State.SESSION_ESTABLISHED
    assert responder.ctx.state is State.SESSION_ESTABLISHED
    assert responder.ctx.session.data_secret == session.data_secret
    assert responder.ctx.session.session_id == session.session_id
    assert requester.ctx.transcript_hashes() == responder.ctx.transcript_hashes()
    assert responder.ctx.mutual_auth_done


def test_basic_mutual_auth_flow(material):
    requester, responder = make_pair(material, mut_auth=MutAuthMode.BASIC,
                                     responder_identity=material.tpm_identity)
    requester.init_connection()
    requester.authenticate(material.tpm_identity.chain.root_hash)
    assert requester.basic_mut_auth_requested
    requester.mutual_auth_encapsulated()
    assert requester.ctx.mutual_auth_done and responder.ctx.mutual_auth_done
    assert requester.ctx.transcript_encap == responder.ctx.transcript_encap


def test_tampered_requester_key_fails_both_modes(material, small_identity):
    bad_key = small_identity.key.private_key
    requester, responder = make_pair(material, requester_key=bad_key)
    with pytest.raises(SpdmError) as info:
        run_session(requester, material.device_identities["nvme0"].chain.root_hash)
    assert info.value.code == AUTH
    assert responder.ctx.failure_code == AUTH

    requester, responder = make_pair(material, mut_auth=MutAuthMode.BASIC,
                                     responder_identity=material.tpm_identity, requester_key=bad_key)
    requester.init_connection()
    requester.authenticate(material.tpm_identity.chain.root_hash)
    with pytest.raises(SpdmError) as info:
        requester.mutual_auth_encapsulated()
    assert info.value.code == AUTH
    assert not responder.ctx.mutual_auth_done


def test_unloadable_requester_key_is_reported_by_peer(material):
    requester, responder = make_pair(material, requester_key=b"\x30\x03garbage")
    with pytest.raises(SpdmError) as info:
        run_session(requester, material.device_identities["nvme0"].chain.root_hash)
    assert info.value.code == AUTH
    assert responder.ctx.failure_code == AUTH


def test_substituted_ephemeral_is_handshake_failure(material):
    requester, _ = make_pair(material, faults={"substitute_ephemeral"})
    with pytest.raises(SpdmError) as info:
        run_session(requester, material.device_identities["nvme0"].chain.root_hash)
    assert info.value.code == StatusCode.HANDSHAKE_FAILURE


def test_untrusted_root_is_auth_failure(material):
    requester, _ = make_pair(material)
    requester.init_connection()
    with pytest.raises(SpdmError) as info:
        requester.authenticate(material.tpm_identity.chain.root_hash)
    assert info.value.code == AUTH
    assert requester.ctx.failed
    with pytest.raises(SpdmError):
        requester.get_measurements()


def test_requester_ordering_enforced(material):
    requester, _ = make_pair(material)
    with pytest.raises(OrderingError):
        requester.authenticate(None)
    with pytest.raises(OrderingError):
        requester.establish_session()


def _raw_request(kind, body=b"", version=(1, 0), p1=0, p2=0):
    return SpdmMessage(kind, version, p1, p2, body).encode()


def test_responder_rejects_out_of_order_requests(material):
    _, responder = make_pair(material)
    reply = decode_message(responder_dispatch(responder, _raw_request(Kind.GET_DIGESTS)))
    assert reply.kind is Kind.ERROR
    assert error_code(reply) == StatusCode.UNEXPECTED_REQUEST


def test_responder_decode_error_leaves_state(material):
    requester, responder = make_pair(material)
    requester.init_connection()
    state = responder.ctx.state
    reply = decode_message(responder.dispatch(b"\x01\x00"))
    assert reply.kind is Kind.ERROR and error_code(reply) == StatusCode.INVALID_REQUEST
    assert responder.ctx.state is state
    requester.authenticate(material.device_identities["nvme0"].chain.root_hash)


def test_replayed_finish_is_rejected(material):
    tap = Tap()
    requester, responder = make_pair(material, binding_factory=lambda r: DirectBinding(r.dispatch, tap))
    run_session(requester, material.device_identities["nvme0"].chain.root_hash)
    finish = next(m for d, m in reversed(tap.messages) if d == "request")
    reply = decode_message(responder.dispatch(finish))
    assert reply.kind is Kind.ERROR


def test_failed_responder_stays_failed(material):
    _, responder = make_pair(material)
    responder.dispatch(_raw_request(Kind.GET_DIGESTS))
    assert responder.ctx.failed
    again = decode_message(responder.dispatch(_raw_request(Kind.GET_VERSION)))
    assert error_code(again) == StatusCode.UNEXPECTED_REQUEST


def test_challenge_nonces_are_fresh(material):
    nonces = set()
    for seed in range(4):
        requester, _ = make_pair(material, seed=seed)
        requester.init_connection()
        requester.authenticate(material.device_identities["nvme0"].chain.root_hash)
        nonces.add(requester.last_nonce)
    requester, _ = make_pair(material, seed=0)
    requester.init_connection()
    requester.authenticate(None)
    first = requester.last_nonce
    requester.authenticate(None)
    assert requester.last_nonce != first
    assert len(nonces) == 4


def test_digest_cache_skips_certificate_fetch(material):
    ident = material.device_identities["nvme0"]
    from spdm_boot.crypto import hash_bytes
    cache = {hash_bytes(ident.blob): ident.blob}
    requester, _ = make_pair(material, digest_cache=cache)
    requester.init_connection()
    requester.authenticate(ident.chain.root_hash)
    assert requester.certificate_requests == 0

    requester, _ = make_pair(material)
    requester.init_connection()
    requester.authenticate(ident.chain.root_hash)
    assert requester.certificate_requests == -(-len(ident.blob) // 1024)


def test_small_portions_reassemble(material):
    ident = material.device_identities["nvme0"]
    requester, _ = make_pair(material)
    requester.max_portion = 100
    requester.init_connection()
    requester.authenticate(ident.chain.root_hash)
    assert requester.certificate_requests == -(-len(ident.blob) // 100)


def test_requester_without_identity_cannot_mutually_authenticate(material):
    ident = material.device_identities["nvme0"]
    responder = Responder(ident.blob, ident.key.private_key, rng=RandomSource(1))
    requester = Requester(DirectBinding(responder.dispatch), rng=RandomSource(2))
    requester.init_connection()
    requester.authenticate(ident.chain.root_hash)
    with pytest.raises(SpdmError) as info:
        requester.establish_session(mutual=True)
    assert info.value.code == AUTH
    with pytest.raises(OrderingError):
        Requester(DirectBinding(responder.dispatch), rng=RandomSource(2)).mutual_auth_encapsulated()


def test_session_without_mutual_auth(material):
    ident = material.device_identities["nvme0"]
    responder = Responder(ident.blob, ident.key.private_key, rng=RandomSource(1))
    requester = Requester(DirectBinding(responder.dispatch), rng=RandomSource(2))
    requester.init_connection()
    requester.authenticate(ident.chain.root_hash)
    session = requester.establish_session()
    assert session.established and not responder.ctx.mutual_auth_done
    assert responder.ctx.session.data_secret == session.data_secret


def test_decode_error_is_value_error():
    assert issubclass(DecodeError, ValueError)
