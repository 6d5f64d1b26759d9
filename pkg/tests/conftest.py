from __future__ import annotations

import pytest

from spdm_boot.crypto import Identity, RandomSource, generate_keypair, make_chain
from spdm_boot.harness import provision_platform
from spdm_boot.spdm import MutAuthMode, Requester, RequesterIdentity, Responder, RequesterTrust
from spdm_boot.spdm.context import MeasurementBlock, MeasurementType
from spdm_boot.transports import DirectBinding


@pytest.fixture(scope="session")
def material():
    return provision_platform(0)


@pytest.fixture(scope="session")
def small_identity() -> Identity:
    """Single self-signed certificate; the blob stays under 600 bytes."""
    key = generate_keypair(RandomSource(7).fork("small"))
    return Identity(make_chain(["d"], [key]), key)


MEASUREMENTS = (MeasurementBlock(1, MeasurementType.FIRMWARE_HASH, bytes(range(32))),)


def make_pair(material, *, seed=0, mut_auth=MutAuthMode.SESSION, responder_identity=None,
              requester_key=None, faults=frozenset(), binding_factory=None, digest_cache=None):
    """A device-style responder and a requester wired to it."""
    ident = responder_identity or material.device_identities["nvme0"]
    req_ident = material.requester
    if mut_auth is MutAuthMode.BASIC:
        trust = RequesterTrust(pinned_leaf_key=req_ident.key.public_key)
    else:
        trust = RequesterTrust(trusted_root_hash=req_ident.chain.root_hash,
                               expected_chain_blob=req_ident.blob)
    rng = RandomSource(seed)
    responder = Responder(ident.blob, ident.key.private_key, rng=rng.fork("rsp"),
                          measurements=MEASUREMENTS, mut_auth=mut_auth,
                          requester_trust=trust, faults=frozenset(faults))
    binding = (binding_factory or (lambda r: DirectBinding(r.dispatch)))(responder)
    requester = Requester(binding, rng=rng.fork("req"),
                          identity=RequesterIdentity(req_ident.blob,
                                                     requester_key or req_ident.key.private_key),
                          digest_cache=digest_cache)
    return requester, responder
