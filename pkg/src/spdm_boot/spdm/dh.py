"""Finite-field Diffie-Hellman over the RFC 7919 ffdhe2048 group."""
from __future__ import annotations

import gmpy2

from ..crypto import RandomSource

FFDHE2048_P = int(
    "FFFFFFFFFFFFFFFFADF85458A2BB4A9AAFDC5620273D3CF1D8B9C583CE2D3695A9E13641146433FBCC939DCE24"
    "9B3EF97D2FE363630C75D8F681B202AEC4617AD3DF1ED5D5FD65612433F51F5F066ED0856365553DED1AF3B557"
    "135E7F57C935984F0C70E0E68B77E2A689DAF3EFE8721DF158A136ADE73530ACCA4F483A797ABC0AB182B324FB"
    "61D108A94BB2C8E3FBB96ADAB760D7F4681D4F42A3DE394DF4AE56EDE76372BB190B07A7C8EE0A6D709E02FCE1"
    "CDF7E2ECC03404CD28342F619172FE9CE98583FF8E4F1232EEF28183C3FE3B1B4C6FAD733BB5FCBC2EC22005C5"
    "8EF1837D1683B2C6F34A26C1B2EFFA886B423861285C97FFFFFFFFFFFFFFFF", 16)
FFDHE2048_G = 2
PUBLIC_SIZE = 256
# Short exponents are acceptable for ffdhe2048 (RFC 7919 recommends >= 225 bits).
PRIVATE_BITS = 256


class DhError(ValueError):
    pass


def generate_private(rng: RandomSource) -> int:
    while True:
        x = rng.getrandbits(PRIVATE_BITS)
        if x > 1:
            return x


def public_value(private: int) -> bytes:
    return int(gmpy2.powmod(FFDHE2048_G, private, FFDHE2048_P)).to_bytes(PUBLIC_SIZE, "big")


def shared_secret(private: int, peer_public: bytes) -> bytes:
    if len(peer_public) != PUBLIC_SIZE:
        raise DhError("peer public value has the wrong size")
    y = int.from_bytes(peer_public, "big")
    if not 1 < y < FFDHE2048_P - 1:
        raise DhError("peer public value out of range")
    return int(gmpy2.powmod(y, private, FFDHE2048_P)).to_bytes(PUBLIC_SIZE, "big")
