"""Attestation wire format, device responder, backend verifier and transports.

Envelope layout (u16 little-endian length prefixes)::

    magic  b"ATT1"                 4
    kind   0 challenge, 1 boot     1
    label                          2 + n (UTF-8, at most 64 bytes)
    nonce                          2 + 16
    signature                      2 + 64
    alias certificate              2 + 206

The signed message is ``b"DICE-ATTEST" || kind || label || nonce``. A
device-initiated (boot) envelope carries the boot counter as a big-endian
16-byte nonce.
"""
from __future__ import annotations

import enum
import os
import socket
import struct
import threading
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Callable

from .countermeasures import InputSource, parse_boot_input
from .dice import CERT_LEN, AliasCertificate, KeyPair, verify_signature
from .errors import DeviceUnavailable, KeyUnavailable, PayloadTooLarge, Unenrolled
from .mcu import Device

MTU = 1280
NONCE_LEN = 16
ENVELOPE_MAGIC = b"ATT1"
MAX_LABEL = 64

KIND_CHALLENGE = 0
KIND_BOOT = 1


def _field(data: bytes) -> bytes:
    return struct.pack("<H", len(data)) + data


@dataclass(frozen=True)
class AttestationEnvelope:
    nonce: bytes
    signature: bytes
    cert: bytes  # raw certificate bytes, exactly as read from device RAM
    device_label: str
    kind: int = KIND_CHALLENGE

    @property
    def alias_cert(self) -> AliasCertificate:
        return AliasCertificate.decode(self.cert)

    def encode(self) -> bytes:
        label = self.device_label.encode()
        return (ENVELOPE_MAGIC + bytes([self.kind]) + _field(label) + _field(self.nonce)
                + _field(self.signature) + _field(self.cert))

    @classmethod
    def decode(cls, data: bytes) -> AttestationEnvelope:
        data = bytes(data)
        if len(data) < 5 or data[:4] != ENVELOPE_MAGIC or data[4] not in (0, 1):
            raise ValueError("bad envelope header")
        pos, parts = 5, []
        for limit in (MAX_LABEL, NONCE_LEN, 64, CERT_LEN):
            if pos + 2 > len(data):
                raise ValueError("truncated envelope")
            (n,) = struct.unpack_from("<H", data, pos)
            if n > limit or pos + 2 + n > len(data):
                raise ValueError("bad envelope field length")
            parts.append(data[pos + 2:pos + 2 + n])
            pos += 2 + n
        if pos != len(data):
            raise ValueError("trailing bytes after envelope")
        label, nonce, sig, cert = parts
        if len(nonce) != NONCE_LEN or len(sig) != 64 or len(cert) != CERT_LEN:
            raise ValueError("bad envelope field size")
        try:
            text = label.decode()
        except UnicodeDecodeError as exc:
            raise ValueError("label is not UTF-8") from exc
        if text.encode() != label:
            raise ValueError("non-canonical label")
        return cls(nonce, sig, cert, text, data[4])


def signed_message(kind: int, label: str, nonce: bytes) -> bytes:
    return b"DICE-ATTEST" + bytes([kind]) + label.encode() + nonce


def _sign(key: bytes, cert: bytes, label: str, nonce: bytes, kind: int) -> AttestationEnvelope:
    if not any(key):
        raise KeyUnavailable("alias private key has been zeroized")
    sig = KeyPair.from_seed(key).sign(signed_message(kind, label, nonce))
    return AttestationEnvelope(bytes(nonce), sig, bytes(cert), label, kind)


def respond(device: Device, nonce: bytes, layout=None) -> AttestationEnvelope:
    """Sign ``nonce`` with whatever alias key currently sits in device RAM."""
    from .firmware import CredentialLayout

    layout = layout or device.config.get("credentials", CredentialLayout())
    if device.trapped:
        raise DeviceUnavailable(f"device trapped: {device.trap}")
    if device.running:
        raise DeviceUnavailable("device is not in its main loop")
    if len(nonce) != NONCE_LEN:
        raise ValueError("nonce must be 16 bytes")
    key = device.peek_ram(layout.alias_private_ram_addr, 32)
    cert = device.peek_ram(layout.alias_cert_ram_addr, CERT_LEN)
    return _sign(key, cert, device.label.decode(), nonce, KIND_CHALLENGE)


def device_initiated_envelope(label: str, key: bytes, cert: bytes, counter: int) -> AttestationEnvelope:
    return _sign(key, cert, label, counter.to_bytes(NONCE_LEN, "big"), KIND_BOOT)


# -- verifier ------------------------------------------------------------------

class Mode(enum.Enum):
    BASELINE = "baseline"
    BOOT_NONCE = "boot-nonce"
    COUNTER = "counter"


class Reason(enum.Enum):
    MALFORMED = "Malformed"
    UNENROLLED = "Unenrolled"
    STALE_NONCE = "StaleNonce"
    BAD_CERT = "BadCertificate"
    BAD_SIGNATURE = "BadSignature"
    WRONG_MEASUREMENT = "WrongMeasurement"
    WRONG_KEY = "WrongKey"
    STALE_COUNTER = "StaleCounter"
    DEVICE_UNAVAILABLE = "DeviceUnavailable"


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: Reason | None = None

    def __str__(self) -> str:
        return "Accept" if self.accepted else f"Reject({self.reason.value})"


ACCEPT = Verdict(True)


def reject(reason: Reason) -> Verdict:
    return Verdict(False, reason)


@dataclass
class Enrollment:
    device_id_public: bytes
    expected_measurement: bytes | None = None
    boot_nonce: bytes | None = None  # boot-nonce mode: last nonce issued
    min_counter: int = 0  # counter mode: lowest acceptable boot counter
    counter_seen: int = 0  # counter mode: newest boot counter accepted
    last_boot_counter: int = -1  # device-initiated replay guard


@dataclass
class VerifierPolicy:
    trusted_device_ids: dict[str, Enrollment] = field(default_factory=dict)
    expected_measurement: bytes | None = None
    nonce_freshness_window: int = 1024
    mode: Mode = Mode.BASELINE


class Verifier:
    """Backend verifier; nonce state changes happen under one lock."""

    def __init__(self, policy: VerifierPolicy | None = None,
                 rng: Callable[[int], bytes] = os.urandom):
        self.policy = policy or VerifierPolicy()
        self._rng = rng
        self._lock = threading.Lock()
        self._outstanding: OrderedDict[bytes, str] = OrderedDict()

    def enroll(self, label: str, device_id_public: bytes,
               expected_measurement: bytes | None = None) -> None:
        self.policy.trusted_device_ids[label] = Enrollment(bytes(device_id_public),
                                                           expected_measurement)

    def _enrollment(self, label: str) -> Enrollment:
        try:
            return self.policy.trusted_device_ids[label]
        except KeyError:
            raise Unenrolled(label) from None

    def pin_measurement(self, label: str, measurement: bytes | None) -> None:
        self._enrollment(label).expected_measurement = measurement

    def challenge(self, label: str) -> bytes:
        self._enrollment(label)
        with self._lock:
            while True:
                nonce = self._rng(NONCE_LEN)
                if nonce not in self._outstanding:
                    break
            self._outstanding[nonce] = label
            while len(self._outstanding) > self.policy.nonce_freshness_window:
                self._outstanding.popitem(last=False)
        return nonce

    def issue_boot_nonce(self, label: str) -> bytes:
        """Boot-nonce mode: a value the device must fold into its next boot."""
        enr = self._enrollment(label)
        with self._lock:
            enr.boot_nonce = self._rng(NONCE_LEN)
        return enr.boot_nonce

    def require_reboot(self, label: str, counter: int | None = None) -> int:
        """Counter mode: only keys derived at boot ``counter`` or later are
        accepted. Defaults to one past the newest counter seen so far."""
        enr = self._enrollment(label)
        with self._lock:
            if counter is None:
                counter = enr.counter_seen + 1
            enr.min_counter = max(enr.min_counter, counter)
            return enr.min_counter

    def _consume(self, nonce: bytes, label: str) -> bool:
        with self._lock:
            owner = self._outstanding.pop(nonce, None)
        return owner == label

    def _check_credentials(self, env: AttestationEnvelope, enr: Enrollment) -> Verdict | None:
        try:
            cert = env.alias_cert
        except ValueError:
            return reject(Reason.MALFORMED)
        if not cert.verify(enr.device_id_public):
            return reject(Reason.BAD_CERT)
        if not verify_signature(cert.subject_public_key,
                                signed_message(env.kind, env.device_label, env.nonce),
                                env.signature):
            return reject(Reason.BAD_SIGNATURE)
        pinned = enr.expected_measurement or self.policy.expected_measurement
        if pinned is not None and cert.firmware_measurement != pinned:
            return reject(Reason.WRONG_MEASUREMENT)
        return None

    def _fresh_input(self, cert: AliasCertificate, enr: Enrollment) -> bool:
        source, value = parse_boot_input(cert.boot_input)
        if self.policy.mode is Mode.BOOT_NONCE:
            return (source is InputSource.NONCE and enr.boot_nonce is not None
                    and value == enr.boot_nonce)
        if self.policy.mode is Mode.COUNTER:
            return source is InputSource.COUNTER and value >= enr.min_counter
        return True

    def verify(self, envelope: AttestationEnvelope | bytes) -> Verdict:
        if isinstance(envelope, (bytes, bytearray)):
            try:
                envelope = AttestationEnvelope.decode(envelope)
            except ValueError:
                return reject(Reason.MALFORMED)
        fresh = self._consume(envelope.nonce, envelope.device_label)
        enr = self.policy.trusted_device_ids.get(envelope.device_label)
        if enr is None:
            return reject(Reason.UNENROLLED)
        if envelope.kind != KIND_CHALLENGE:
            return reject(Reason.MALFORMED)
        if not fresh:
            return reject(Reason.STALE_NONCE)
        bad = self._check_credentials(envelope, enr)
        if bad is not None:
            return bad
        cert = envelope.alias_cert
        if not self._fresh_input(cert, enr):
            return reject(Reason.WRONG_KEY)
        source, value = parse_boot_input(cert.boot_input)
        if source is InputSource.COUNTER:
            with self._lock:
                enr.counter_seen = max(enr.counter_seen, value)
        return ACCEPT

    def verify_device_initiated(self, envelope: AttestationEnvelope | bytes) -> Verdict:
        """Boot-time envelope protected by the device's monotonic counter."""
        if isinstance(envelope, (bytes, bytearray)):
            try:
                envelope = AttestationEnvelope.decode(envelope)
            except ValueError:
                return reject(Reason.MALFORMED)
        enr = self.policy.trusted_device_ids.get(envelope.device_label)
        if enr is None:
            return reject(Reason.UNENROLLED)
        if envelope.kind != KIND_BOOT:
            return reject(Reason.MALFORMED)
        bad = self._check_credentials(envelope, enr)
        if bad is not None:
            return bad
        counter = int.from_bytes(envelope.nonce, "big")
        with self._lock:
            if counter <= enr.last_boot_counter:
                return reject(Reason.STALE_COUNTER)
            enr.last_boot_counter = counter
        return ACCEPT


# -- transports ----------------------------------------------------------------

BACKEND_PORT = 5683
ATTEST_PORT = 5684
APP_PORT = 5685


class InProcTransport:
    """Datagram queues keyed by port."""

    def __init__(self, mtu: int = MTU):
        self.mtu = mtu
        self._queues: dict[int, deque[bytes]] = {}

    def send(self, port: int, payload: bytes) -> None:
        if len(payload) > self.mtu:
            raise PayloadTooLarge(f"{len(payload)} bytes exceeds MTU {self.mtu}")
        self._queues.setdefault(port, deque()).append(bytes(payload))

    def recv(self, port: int, timeout: float = 0.0) -> bytes | None:
        q = self._queues.get(port)
        return q.popleft() if q else None

    def close(self) -> None:
        self._queues.clear()


class UdpTransport:
    """Same contract over real localhost UDP sockets (``base_port`` + offset)."""

    def __init__(self, mtu: int = MTU, host: str = "127.0.0.1", base_port: int = 0):
        self.mtu = mtu
        self.host = host
        self.base_port = base_port
        self._socks: dict[int, socket.socket] = {}
        self._out = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)

    def _sock(self, port: int) -> socket.socket:
        s = self._socks.get(port)
        if s is None:
            s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            s.bind((self.host, self.base_port + port if self.base_port else 0))
            self._socks[port] = s
        return s

    def send(self, port: int, payload: bytes) -> None:
        if len(payload) > self.mtu:
            raise PayloadTooLarge(f"{len(payload)} bytes exceeds MTU {self.mtu}")
        self._out.sendto(bytes(payload), self._sock(port).getsockname())

    def recv(self, port: int, timeout: float = 1.0) -> bytes | None:
        s = self._sock(port)
        s.settimeout(timeout)
        try:
            data, _ = s.recvfrom(65535)
        except socket.timeout:
            return None
        return data

    def close(self) -> None:
        for s in self._socks.values():
            s.close()
        self._out.close()
        self._socks.clear()


class DeviceEndpoint:
    """Network glue on the device side: app datagrams and attestation requests."""

    def __init__(self, device: Device, transport):
        self.device = device
        self.transport = transport

    def deliver(self, payload: bytes) -> None:
        """Send to the app port and hand the datagram over without running."""
        self.transport.send(APP_PORT, payload)
        data = self.transport.recv(APP_PORT)
        if data is None:
            raise DeviceUnavailable("datagram lost")
        self.device.deliver_datagram(data, run=False)

    def serve_attestation(self) -> None:
        nonce = self.transport.recv(ATTEST_PORT)
        if nonce is None:
            return
        try:
            reply = respond(self.device, nonce).encode()
        except (DeviceUnavailable, ValueError):
            reply = b""
        self.transport.send(BACKEND_PORT, reply)


def attest_over(transport, verifier: Verifier, endpoint: DeviceEndpoint, label: str) -> Verdict:
    """One challenge/response round trip across ``transport``."""
    transport.send(ATTEST_PORT, verifier.challenge(label))
    endpoint.serve_attestation()
    reply = transport.recv(BACKEND_PORT)
    if not reply:
        return reject(Reason.DEVICE_UNAVAILABLE)
    return verifier.verify(reply)

