import datetime as dt
import uuid

import pytest
from hypothesis import given, settings, strategies as st

from spdm_boot.efi_store import (
    HCRTM_SIGNATURE, PK, PLATFORM_GUID, REQUESTER_CERT_CHAIN, REQUESTER_PRIVATE_KEY, DuplicateVariable,
    EfiVariable, FlashImage, MissingInput, Mutation, ParseError, VariableStore, WriteProtected,
    default_code_section, deserialize_store, flip_byte, get_data, identity_mutation, provision,
    responder_chain_name, serialize_store, tamper_variable, variables_from,
)

TS = dt.datetime(2025, 1, 1, tzinfo=dt.timezone.utc)


def test_default_code_section_is_stable():
    code = default_code_section()
    assert len(code) == 64 * 1024
    assert FlashImage(code).code_digest().hex() == (
        "81f0705e3d31a3502d81e9145cd091ae7b78aeedfac40af02c32b19ace039567")


def test_provisioned_store_contents(material):
    store = material.store
    assert store.write_protected
    assert get_data(store, REQUESTER_CERT_CHAIN) == material.requester.blob
    assert get_data(store, REQUESTER_PRIVATE_KEY) == material.requester.key.private_key
    assert get_data(store, responder_chain_name("tpm")) == material.tpm_identity.blob
    for device_id, ident in material.device_identities.items():
        assert get_data(store, responder_chain_name(device_id)) == ident.blob
    with pytest.raises(WriteProtected):
        store.set(EfiVariable(PLATFORM_GUID, "x", 7, b""))


def test_provision_requires_every_input(material):
    ident = material.platform_identity
    with pytest.raises(MissingInput):
        provision(VariableStore(), ident.anchors, None, material.requester, {})
    with pytest.raises(WriteProtected):
        provision(material.store, ident.anchors, ident.hcrtm, material.requester, {})


def test_serialization_round_trip(material):
    text = serialize_store(material.store)
    back = deserialize_store(text)
    assert back.variables == material.store.variables
    assert serialize_store(back) == text


def test_empty_document_is_empty_store():
    assert len(deserialize_store("")) == 0


@pytest.mark.parametrize("doc, needle", [
    ("variables: [", "line"),
    ("- 1", "mapping"),
    ("variables:\n- {name: a}", "missing"),
    ("variables:\n- {guid: nope, name: a, attributes: 7, data_b64: ''}", "bad guid"),
    ("variables:\n- {guid: 6b5a3f2e-1d4c-4e8b-9a7f-3c2d1e0f5a6b, name: a, attributes: -1, data_b64: ''}",
     "attributes"),
    ("variables:\n- {guid: 6b5a3f2e-1d4c-4e8b-9a7f-3c2d1e0f5a6b, name: a, attributes: 7, data_b64: '!!'}",
     "base64"),
    ("variables:\n- {guid: 6b5a3f2e-1d4c-4e8b-9a7f-3c2d1e0f5a6b, name: a, attributes: 7, data_b64: '',"
     " timestamp: yesterday}", "timestamp"),
    ("variables:\n- {guid: 6b5a3f2e-1d4c-4e8b-9a7f-3c2d1e0f5a6b, name: a, attributes: 7, data_b64: '',"
     " colour: red}", "unknown"),
])
def test_parse_errors_are_located(doc, needle):
    with pytest.raises(ParseError, match=needle):
        deserialize_store(doc)


def test_duplicate_variable_rejected():
    rec = "{guid: 6b5a3f2e-1d4c-4e8b-9a7f-3c2d1e0f5a6b, name: a, attributes: 7, data_b64: ''}"
    with pytest.raises(DuplicateVariable):
        deserialize_store(f"variables:\n- {rec}\n- {rec}")
    var = EfiVariable(PLATFORM_GUID, "a", 7, b"")
    with pytest.raises(DuplicateVariable):
        variables_from([var, var])


def test_tamper_bypasses_write_protection_and_copies(material):
    store = material.store
    tampered = tamper_variable(store, HCRTM_SIGNATURE, flip_byte(0))
    original = get_data(store, HCRTM_SIGNATURE)
    changed = get_data(tampered, HCRTM_SIGNATURE)
    assert changed[0] == original[0] ^ 0xFF and changed[1:] == original[1:]
    assert get_data(store, HCRTM_SIGNATURE) == original
    with pytest.raises(KeyError):
        tamper_variable(store, "Nope", identity_mutation())


def test_mutation_forms():
    assert Mutation(offset=1, xor=0x0F)(b"\x00\x00\x00") == b"\x00\x0f\x00"
    assert Mutation(truncate=2)(b"abcd") == b"ab"
    assert Mutation(replacement=b"z")(b"abcd") == b"z"
    assert identity_mutation()(b"abc") == b"abc"


def test_variable_names_must_be_utf16():
    with pytest.raises(ValueError):
        EfiVariable(PLATFORM_GUID, "\ud800", 7, b"")


names = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=20)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.uuids(), names, st.integers(0, 0xFFFFFFFF), st.binary(max_size=64)),
                max_size=8, unique_by=lambda t: (t[0], t[1])))
def test_round_trip_property(records):
    store = variables_from(EfiVariable(g, n, a, d, TS) for g, n, a, d in records)
    assert deserialize_store(serialize_store(store)).variables == store.variables


def test_pk_attribute_is_time_authenticated(material):
    assert material.store.get(PLATFORM_GUID, PK).attributes == 0x27
    assert material.store.get(uuid.UUID(int=0), PK) is None
