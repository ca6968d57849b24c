"""Mitigations against credential replay and how each one is wired in.

Five kinds are supported. A firmware update that fixes the bug, secure boot
backed by an authenticated watchdog, a per-boot derivation input (backend
nonce or flash counter), attestation before the network opens followed by
key zeroization, and the bounds-checked handler that stands in for a
memory-safe rewrite.

The flash boot counter programs one byte per boot. NVMC only lets a store
land on erased bytes, so a byte, not a bit, is the smallest unit that can be
consumed without an erase. A 4 KiB page therefore lasts 4096 boots.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from . import memmap as mm
from .dice import KeyPair, verify_signature
from .errors import CounterExhausted
from .mcu import Device, awdt_message


class Kind(enum.Enum):
    FIRMWARE_UPDATE = "firmware-update"
    SECURE_BOOT_AWDT = "secure-boot-awdt"
    ADDITIONAL_INPUT = "additional-input"
    NO_KEY_EXPOSURE = "no-key-exposure"
    MEMORY_SAFE = "memory-safe"


class InputSource(enum.Enum):
    NONCE = "nonce"
    COUNTER = "counter"


class Decision(enum.Enum):
    PROCEED = "proceed"
    HALT = "halt"


@dataclass(frozen=True)
class CountermeasureConfig:
    kind: Kind
    version: int = 2  # firmware-update: the version shipped in the update
    fix_bug: bool = True  # firmware-update: does the update bound the copy?
    vendor_seed: bytes = bytes(range(32))  # secure-boot: layer-signing key seed
    awdt_period: int = 20_000  # secure-boot: instructions between tokens
    input_source: InputSource = InputSource.NONCE  # additional-input
    counter_page: int = mm.COUNTER_PAGE
    counter_bytes: int = mm.PAGE_SIZE

    def firmware_config(self, version: int = 1):
        """Firmware build flags for a device shipped with this mitigation."""
        from .firmware import BootInput, FirmwareConfig

        if self.kind is Kind.SECURE_BOOT_AWDT:
            return FirmwareConfig(version=version, secure_boot=True,
                                  vendor_seed=self.vendor_seed, awdt_period=self.awdt_period)
        if self.kind is Kind.ADDITIONAL_INPUT:
            return FirmwareConfig(version=version, boot_input=BootInput(self.input_source.value),
                                  counter_bytes=self.counter_bytes)
        if self.kind is Kind.NO_KEY_EXPOSURE:
            return FirmwareConfig(version=version, attest_then_zeroize=True,
                                  counter_bytes=self.counter_bytes)
        if self.kind is Kind.MEMORY_SAFE:
            return FirmwareConfig(version=version, bounded_handler=True)
        # a firmware update starts from the vulnerable baseline
        return FirmwareConfig(version=version)

    def update_config(self):
        from .firmware import FirmwareConfig

        return FirmwareConfig(version=self.version, bounded_handler=self.fix_bug)


# -- secure boot ---------------------------------------------------------------

def sign_layer(layer_bytes: bytes, vendor: KeyPair) -> bytes:
    return vendor.sign(b"LAYER" + bytes(layer_bytes))


def secure_boot_check(layer_bytes: bytes, signature: bytes, vendor_key: bytes) -> Decision:
    if verify_signature(vendor_key, b"LAYER" + bytes(layer_bytes), signature):
        return Decision.PROCEED
    return Decision.HALT


class AwdtIssuer:
    """Backend side of the authenticated watchdog: signs deferral tokens."""

    def __init__(self, seed: bytes, label: str):
        self.key = KeyPair.from_seed(seed)
        self.label = label.encode()
        self.seq = 0

    @property
    def public(self) -> bytes:
        return self.key.public

    def token(self) -> bytes:
        self.seq += 1
        return self.seq.to_bytes(4, "little") + self.key.sign(awdt_message(self.label, self.seq))


# -- per-boot derivation input -----------------------------------------------------

_TAG = {InputSource.NONCE: 1, InputSource.COUNTER: 2}


def boot_cycle_input(source: InputSource, *, nonce: bytes | None = None,
                     counter: int | None = None) -> bytes:
    """32-byte claim mixed into the alias derivation.

    Layout: tag byte (1 nonce, 2 counter), 7 zero bytes, u64 counter, 16-byte nonce.
    """
    if source is InputSource.NONCE:
        if nonce is None or len(nonce) != 16:
            raise ValueError("nonce input needs 16 bytes")
        return bytes([1]) + bytes(15) + bytes(nonce)
    if counter is None or counter < 0:
        raise ValueError("counter input needs a non-negative value")
    return bytes([2]) + bytes(7) + struct.pack("<Q", counter) + bytes(16)


def parse_boot_input(value: bytes) -> tuple[InputSource | None, bytes | int | None]:
    value = bytes(value)
    if len(value) != 32:
        raise ValueError("boot input must be 32 bytes")
    if value[0] == 1:
        return InputSource.NONCE, value[16:]
    if value[0] == 2:
        return InputSource.COUNTER, struct.unpack_from("<Q", value, 8)[0]
    return None, None


def counter_value(page: bytes, capacity: int = mm.PAGE_SIZE) -> int:
    """Number of programmed bytes at the start of the counter area."""
    for i in range(capacity):
        if page[i] == 0xFF:
            return i
    return capacity


def counter_next_offset(page: bytes, capacity: int = mm.PAGE_SIZE) -> int:
    value = counter_value(page, capacity)
    if value >= capacity:
        raise CounterExhausted(f"boot counter used all {capacity} bytes")
    return value


def read_counter(device: Device, capacity: int = mm.PAGE_SIZE) -> int:
    off = mm.COUNTER_PAGE
    return counter_value(device.flash[off:off + mm.PAGE_SIZE], capacity)


# -- host-level procedures -------------------------------------------------------

def apply_firmware_update(device: Device, fixed_image) -> Device:
    """Bootloader-style update: rewrite the app region (and signatures) and reset.

    Pages outside the app layer, including anything malware parked at the top of
    flash, are left as they are.
    """
    device.flash[mm.APP_BASE:mm.APP_END] = b"\xff" * mm.APP_LEN
    for s in fixed_image.sections:
        if mm.APP_BASE <= s.base < mm.APP_END or s.name == "signatures":
            device.load_flash(s.base, s.data)
    device.reset()
    return device


def attest_then_zeroize(device: Device, fuel: int = 200_000) -> list[bytes]:
    """Boot a zeroizing device to its main loop; return the envelopes it emitted."""
    before = len(device.outbox)
    device.run_until(fuel=fuel)
    return device.outbox[before:]
