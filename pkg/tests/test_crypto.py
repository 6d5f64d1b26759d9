import hashlib
import hmac

import pytest
from hypothesis import given, settings, strategies as st

from spdm_boot.crypto import (
    ChainError, CryptoCounter, HashAlgorithm, MalformedKey, RandomSource,
    UnsupportedAlgorithm, build_spdm_cert_chain_blob, count_crypto_ops, export_material,
    generate_keypair, generate_platform_identity, hash_bytes, hmac_digest, load_material,
    make_chain, parse_spdm_cert_chain_blob, public_key_of, sign, verify, verify_chain,
)


def test_hash_matches_hashlib():
    assert hash_bytes(b"abc") == hashlib.sha256(b"abc").digest()
    assert hash_bytes(b"abc", HashAlgorithm.SHA384) == hashlib.sha384(b"abc").digest()
    assert hmac_digest(b"k", b"m") == hmac.new(b"k", b"m", "sha256").digest()


def test_random_source_is_reproducible_and_forks_independently():
    # Frozen: guards against silent changes in the seeding scheme.
    assert RandomSource(0).bytes(8).hex() == "cd072cd8be6f9f62"
    assert RandomSource(0).fork("a").bytes(8).hex() == "4a62ad71010aa823"
    assert RandomSource(1).bytes(8) != RandomSource(0).bytes(8)


def test_keypair_generation_is_deterministic(material):
    a = generate_keypair(RandomSource(3))
    b = generate_keypair(RandomSource(3))
    assert a == b
    assert public_key_of(a.private_key) == a.public_key
    assert len(a.public_key) == 260


def test_unsupported_algorithm():
    with pytest.raises(UnsupportedAlgorithm):
        generate_keypair(RandomSource(0), "ecdsa-p256")


def test_sign_verify_round_trip(material):
    key = material.requester.key
    sig = sign(b"payload", key.private_key)
    assert verify(b"payload", sig, key.public_key)
    assert not verify(b"payload!", sig, key.public_key)
    assert not verify(b"payload", sig[:-1] + bytes([sig[-1] ^ 1]), key.public_key)
    assert not verify(b"payload", sig, b"\x00" * 10)


def test_malformed_private_key():
    with pytest.raises(MalformedKey):
        sign(b"x", b"not a key")


def test_chain_round_trip_and_verification(material):
    chain = material.requester.chain
    blob = build_spdm_cert_chain_blob(chain)
    parsed = parse_spdm_cert_chain_blob(blob)
    assert parsed == chain
    assert verify_chain(parsed, chain.root_hash)
    assert not verify_chain(parsed, bytes(32))
    assert parsed.leaf.subject == "firmware-requester"
    assert parsed.root.is_ca and not parsed.leaf.is_ca


def test_chain_from_other_root_rejected(material):
    device = material.device_identities["nvme0"].chain
    assert not verify_chain(material.tpm_identity.chain, device.root_hash)


@pytest.mark.parametrize("blob", [b"", b"\x00" * 10, b"\x24\x00\x01\x00" + bytes(32)])
def test_parse_rejects_garbage(blob):
    with pytest.raises(ChainError):
        parse_spdm_cert_chain_blob(blob)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_chain_blob_single_byte_corruption_never_verifies(material, data):
    chain = material.device_identities["nvme0"].chain
    blob = bytearray(chain.to_blob())
    i = data.draw(st.integers(0, len(blob) - 1))
    blob[i] ^= data.draw(st.integers(1, 255))
    try:
        parsed = parse_spdm_cert_chain_blob(bytes(blob))
    except ChainError:
        return
    assert not verify_chain(parsed, chain.root_hash)


def test_crypto_counter_counts_only_inside_context(material):
    counter = CryptoCounter()
    hash_bytes(b"outside")
    with count_crypto_ops(counter):
        hash_bytes(b"a")
        sig = sign(b"a", material.requester.key.private_key)
        verify(b"a", sig, material.requester.key.public_key)
    hash_bytes(b"outside")
    assert (counter.hash, counter.sign, counter.verify) == (1, 1, 1)
    assert counter.total == 3


def test_platform_identity_signs_code_digest():
    code = b"firmware" * 100
    ident = generate_platform_identity(code, RandomSource(11))
    assert ident.hcrtm.digest == hashlib.sha256(code).digest()
    assert verify(ident.hcrtm.digest, ident.hcrtm.signature, ident.anchors.pk.leaf.public_key)
    assert verify_chain(ident.anchors.kek, ident.anchors.pk.root_hash)


def test_single_certificate_chain_is_small(small_identity):
    assert len(small_identity.blob) <= 600
    assert verify_chain(small_identity.chain, small_identity.chain.root_hash)


def test_material_export_round_trip(tmp_path):
    manifest = export_material(tmp_path / "m", {"a": b"\x01\x02", "b": b""})
    assert load_material(manifest) == {"a": b"\x01\x02", "b": b""}


def test_make_chain_links_issuers():
    keys = [generate_keypair(RandomSource(i)) for i in (21, 22, 23)]
    chain = make_chain(["root", "mid", "leaf"], keys)
    assert verify_chain(chain)
    assert [c.issuer for c in map(type(chain.root).from_bytes, chain.certificates)] == ["root", "root", "mid"]
