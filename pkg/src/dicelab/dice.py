"""DICE layered identity: measurement, CDI derivation, DeviceID and alias keys,
and the alias certificate.

Everything here is a pure function of its inputs. Primitives: SHA-256 for
measurements, HKDF-SHA256 with ASCII labels for derivation, Ed25519 for the
asymmetric pairs (deterministic from a 32-byte seed).

Certificate byte layout (all length prefixes little-endian u16)::

    offset  size  field
    0       4     magic  b"ACR1"
    4       2+32  subject public key (alias)
    38      2+32  firmware measurement (app layer)
    72      2+32  boot-cycle input (all zero when unused)
    106     2+32  issuer public key (DeviceID)
    140     2+64  Ed25519 signature over bytes [0, 140)
    206           end
"""
from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.kdf.hkdf import HKDFExpand

from .errors import CryptoError, InvalidLayer

HASH_LEN = 32
SEED_LEN = 32
PUBLIC_LEN = 32
SIGNATURE_LEN = 64

LABEL_CDI = b"CDI"
LABEL_ID = b"ID"
LABEL_ALIAS = b"ALIAS"

CERT_MAGIC = b"ACR1"
CERT_LEN = 206
_CLAIMS_LEN = 140
NO_BOOT_INPUT = bytes(32)


def measure(layer_bytes: bytes) -> bytes:
    """SHA-256 digest of a firmware layer."""
    if not layer_bytes:
        raise InvalidLayer("cannot measure an empty layer")
    return hashlib.sha256(bytes(layer_bytes)).digest()


def hkdf_extract(salt: bytes, ikm: bytes) -> bytes:
    if not salt:
        salt = bytes(HASH_LEN)
    return hmac.new(salt, ikm, hashlib.sha256).digest()


def hkdf_expand(prk: bytes, info: bytes, length: int = 32) -> bytes:
    if length > 255 * HASH_LEN:
        raise ValueError("HKDF output too long")
    return HKDFExpand(hashes.SHA256(), length, bytes(info)).derive(bytes(prk))


def kdf(ikm: bytes, salt: bytes, info: bytes, length: int = 32) -> bytes:
    return hkdf_expand(hkdf_extract(salt, ikm), info, length)


def _check32(name: str, value: bytes) -> bytes:
    value = bytes(value)
    if len(value) != 32:
        raise ValueError(f"{name} must be 32 bytes, got {len(value)}")
    return value


def derive_layer_secret(uds: bytes, riot_measurement: bytes) -> bytes:
    """CDI handed to the RIOT layer: bound to the UDS and the RIOT measurement."""
    return kdf(_check32("uds", uds), _check32("measurement", riot_measurement), LABEL_CDI)


@dataclass(frozen=True)
class KeyPair:
    private: bytes  # Ed25519 seed
    public: bytes

    @classmethod
    def from_seed(cls, seed: bytes) -> KeyPair:
        seed = _check32("seed", seed)
        pub = Ed25519PrivateKey.from_private_bytes(seed).public_key().public_bytes_raw()
        return cls(seed, pub)

    def sign(self, message: bytes) -> bytes:
        try:
            return Ed25519PrivateKey.from_private_bytes(self.private).sign(message)
        except ValueError as exc:
            raise CryptoError(str(exc)) from exc

    def __repr__(self) -> str:
        return f"KeyPair(public={self.public.hex()[:16]}...)"


def verify_signature(public: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(bytes(public)).verify(bytes(signature), bytes(message))
    except (InvalidSignature, ValueError):
        return False
    return True


def derive_device_id(secret: bytes) -> KeyPair:
    return KeyPair.from_seed(kdf(_check32("secret", secret), b"", LABEL_ID))


def derive_alias_key(secret: bytes, app_measurement: bytes,
                     boot_input: bytes | None = None) -> KeyPair:
    """Alias key bound to the app measurement and, optionally, a per-boot input."""
    info = LABEL_ALIAS
    if boot_input is not None and bytes(boot_input) != NO_BOOT_INPUT:
        info += _check32("boot input", boot_input)
    seed = kdf(_check32("secret", secret), _check32("measurement", app_measurement), info)
    return KeyPair.from_seed(seed)


def _field(data: bytes) -> bytes:
    return struct.pack("<H", len(data)) + data


@dataclass(frozen=True)
class AliasCertificate:
    subject_public_key: bytes
    firmware_measurement: bytes
    boot_input: bytes
    issuer: bytes
    signature: bytes

    def claims(self) -> bytes:
        return claims_bytes(self.subject_public_key, self.firmware_measurement,
                            self.boot_input, self.issuer)

    def encode(self) -> bytes:
        return self.claims() + _field(self.signature)

    @classmethod
    def decode(cls, data: bytes) -> AliasCertificate:
        data = bytes(data)
        if len(data) != CERT_LEN or data[:4] != CERT_MAGIC:
            raise ValueError("malformed certificate")
        fields, pos = [], 4
        for size in (32, 32, 32, 32, 64):
            (n,) = struct.unpack_from("<H", data, pos)
            if n != size:
                raise ValueError("malformed certificate field length")
            fields.append(data[pos + 2:pos + 2 + n])
            pos += 2 + n
        return cls(*fields)

    def verify(self, issuer_public: bytes) -> bool:
        if bytes(issuer_public) != self.issuer:
            return False
        return verify_signature(issuer_public, self.claims(), self.signature)


def claims_bytes(subject: bytes, measurement: bytes, boot_input: bytes, issuer: bytes) -> bytes:
    out = CERT_MAGIC + b"".join(_field(_check32("claim", f))
                                for f in (subject, measurement, boot_input, issuer))
    assert len(out) == _CLAIMS_LEN
    return out


def issue_alias_certificate(device_id: KeyPair, alias_public: bytes, app_measurement: bytes,
                            boot_input: bytes | None = None) -> AliasCertificate:
    boot_input = NO_BOOT_INPUT if boot_input is None else bytes(boot_input)
    claims = claims_bytes(alias_public, app_measurement, boot_input, device_id.public)
    return AliasCertificate(bytes(alias_public), bytes(app_measurement), boot_input,
                            device_id.public, device_id.sign(claims))


@dataclass(frozen=True)
class DiceIdentity:
    """Result of one boot's worth of DICE derivation."""

    riot_measurement: bytes
    app_measurement: bytes
    device_id: KeyPair
    alias: KeyPair
    certificate: AliasCertificate


def derive_identity(uds: bytes, riot_bytes: bytes, app_bytes: bytes,
                    boot_input: bytes | None = None) -> DiceIdentity:
    """Full pipeline (uds, riot layer, app layer) -> DeviceID, alias key, certificate.

    The layer secret is a local here and is never returned.
    """
    riot_m = measure(riot_bytes)
    app_m = measure(app_bytes)
    secret = derive_layer_secret(uds, riot_m)
    device_id = derive_device_id(secret)
    alias = derive_alias_key(secret, app_m, boot_input)
    cert = issue_alias_certificate(device_id, alias.public, app_m, boot_input)
    return DiceIdentity(riot_m, app_m, device_id, alias, cert)
