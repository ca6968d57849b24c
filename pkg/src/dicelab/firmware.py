"""Three-layer reference firmware for the simulator.

The boot layer reads the UDS, measures the riot layer, derives the CDI and
then locks the UDS page and the boot region with the ACL. The riot layer
derives the DeviceID and alias credentials, wipes the CDI and jumps to the app.
The app runs two init functions, then a wait/receive loop whose datagram
handler copies the payload into a 64-byte stack buffer without a length check.

Cryptography runs as supervisor-call intrinsics (``svc #n``) that call into
:mod:`dicelab.dice` on simulated memory. Everything else is toy-ISA code
produced by :func:`dicelab.isa.assemble`.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace
from pathlib import Path

from . import countermeasures as cm
from . import isa
from . import memmap as mm
from .dice import (
    CERT_LEN,
    KeyPair,
    derive_alias_key,
    derive_device_id,
    derive_layer_secret,
    issue_alias_certificate,
    measure,
)
from .errors import BuildError, CounterExhausted
from .mcu import Device, FaultKind, InterruptSchedule, Trap

SVC_BOOT_MEASURE = 1
SVC_RIOT_DERIVE = 2
SVC_COUNTER_BUMP = 3
SVC_VERIFY_LAYER = 4
SVC_ATTEST_BOOT = 5
SVC_RIOT_DERIVE_INPUT = 6

SCHED_MAGIC = 0x5CED
TIMER_MAGIC = 0x71E5
BUFFER_LEN = 64
SAVED_REGS = 2  # r4, r5 pushed below lr by the handler
MAIN_STACK_RESERVE = 1536


class GadgetStyle(enum.Enum):
    FOUND = "found"  # cpsid i; pop {r4, pc} / str r5, [r4]; pop {r4, r5, r6, pc}
    IDEAL = "ideal"  # cpsid i; pop {r4, r5, pc} / str r4, [r5]; pop {r4, r5, pc}
    MINIMAL = "minimal"  # cpsid i; pop {pc} / str r4, [r5]; pop {r4, r5, pc}


class BootInput(enum.Enum):
    NONE = "none"
    NONCE = "nonce"
    COUNTER = "counter"


@dataclass(frozen=True)
class FirmwareConfig:
    version: int = 1
    bounded_handler: bool = False
    gadgets: GadgetStyle = GadgetStyle.FOUND
    secure_boot: bool = False
    vendor_seed: bytes | None = None
    awdt_period: int = 0  # instructions; 0 disables the watchdog
    boot_input: BootInput = BootInput.NONE
    attest_then_zeroize: bool = False
    counter_bytes: int = mm.PAGE_SIZE
    app_data: bytes = b""

    @property
    def uses_counter(self) -> bool:
        return self.boot_input is not BootInput.NONE or self.attest_then_zeroize


@dataclass(frozen=True)
class CredentialLayout:
    alias_private_ram_addr: int = mm.ALIAS_KEY_RAM
    alias_cert_ram_addr: int = mm.ALIAS_CERT_RAM
    combined_length: int = 32 + CERT_LEN + 2  # rounded up to whole words
    adjacency: bool = True

    def __post_init__(self):
        for addr in (self.alias_private_ram_addr, self.alias_cert_ram_addr):
            if not mm.RAM_BASE <= addr < mm.RAM_END:
                raise ValueError(f"credential address {addr:#x} outside RAM")
        if self.adjacency and self.alias_cert_ram_addr != self.alias_private_ram_addr + 32:
            raise ValueError("adjacent layout needs the certificate right after the key")
        if self.combined_length % 4:
            raise ValueError("combined length must be whole words")


@dataclass(frozen=True)
class StackFrame:
    """What an attacker with a debugger learns about the handler's frame."""

    buffer_len: int = BUFFER_LEN
    saved_regs: int = SAVED_REGS

    @property
    def padding(self) -> int:
        return self.buffer_len + 4 * self.saved_regs

    @property
    def return_slot(self) -> int:
        return self.padding


@dataclass(frozen=True)
class Section:
    name: str
    base: int
    data: bytes

    @property
    def end(self) -> int:
        return self.base + len(self.data)


@dataclass(frozen=True)
class FirmwareImage:
    sections: tuple[Section, ...]
    symbols: dict[str, int]
    version: int
    config: FirmwareConfig
    frame: StackFrame = StackFrame()
    credentials: CredentialLayout = CredentialLayout()
    vendor_public: bytes | None = None

    def section(self, name: str) -> Section:
        for s in self.sections:
            if s.name == name:
                return s
        raise KeyError(name)

    def flash(self) -> bytes:
        out = bytearray(b"\xff" * mm.FLASH_SIZE)
        for s in self.sections:
            out[s.base:s.end] = s.data
        return bytes(out)

    def riot_layer(self) -> bytes:
        return self.flash()[mm.RIOT_BASE:mm.RIOT_BASE + mm.RIOT_LEN]

    def app_layer(self) -> bytes:
        return self.flash()[mm.APP_BASE:mm.APP_END]

    def manifest(self) -> str:
        lines = [f"# version {self.version}"]
        offset = 0
        for s in self.sections:
            lines.append(f"{s.name} {s.base:#010x} {len(s.data)} {offset}")
            offset += len(s.data)
        return "\n".join(lines) + "\n"

    def symbol_map(self) -> str:
        rows = sorted(self.symbols.items(), key=lambda kv: (kv[1], kv[0]))
        return "".join(f"{addr:08x} {name}\n" for name, addr in rows)

    def write(self, directory: str | Path) -> Path:
        """Emit ``image.bin`` (sections back to back), ``layout.txt`` and ``symbols.map``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "image.bin").write_bytes(b"".join(s.data for s in self.sections))
        (d / "layout.txt").write_text(self.manifest())
        (d / "symbols.map").write_text(self.symbol_map())
        return d


def read_layout(directory: str | Path) -> tuple[list[Section], dict[str, int]]:
    """Inverse of :meth:`FirmwareImage.write` for the sections and symbols."""
    d = Path(directory)
    blob = (d / "image.bin").read_bytes()
    sections = []
    for line in (d / "layout.txt").read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        name, base, length, offset = line.split()
        off, n = int(offset), int(length)
        sections.append(Section(name, int(base, 16), blob[off:off + n]))
    symbols = {}
    for line in (d / "symbols.map").read_text().splitlines():
        if line.strip():
            addr, name = line.split()
            symbols[name] = int(addr, 16)
    return sections, symbols


def load_sections(device: Device, sections) -> None:
    for s in sections:
        device.load_flash(s.base, s.data)


# -- assembly sources ----------------------------------------------------------

def _asm_symbols() -> dict[str, int]:
    names = [n for n in dir(mm) if n.isupper()]
    syms = {n: getattr(mm, n) for n in names}
    syms.update({f"ACL{i}": mm.acl_addr(i) for i in range(mm.ACL_REGIONS)})
    syms.update(SVC_BOOT_MEASURE=SVC_BOOT_MEASURE, SVC_RIOT_DERIVE=SVC_RIOT_DERIVE,
                SVC_COUNTER_BUMP=SVC_COUNTER_BUMP, SVC_VERIFY_LAYER=SVC_VERIFY_LAYER,
                SVC_ATTEST_BOOT=SVC_ATTEST_BOOT, SVC_RIOT_DERIVE_INPUT=SVC_RIOT_DERIVE_INPUT,
                SCHED_MAGIC=SCHED_MAGIC, TIMER_MAGIC=TIMER_MAGIC, BUFFER_LEN=BUFFER_LEN,
                MAIN_STACK_RESERVE=MAIN_STACK_RESERVE)
    return syms


def _load(reg: str, expr: str) -> str:
    return f"    movw {reg}, #lo({expr})\n    movt {reg}, #hi({expr})\n"


def _acl_lock(region: int, base: str, size: str, perm: str) -> str:
    return (_load("r0", f"ACL{region}") + _load("r1", base) + "    str r1, [r0, #0]\n"
            + _load("r1", size) + "    str r1, [r0, #4]\n"
            + f"    movw r1, #{perm}\n    str r1, [r0, #8]\n")


def boot_source(config: FirmwareConfig) -> str:
    src = """
.org BOOT_BASE
    .word STACK_TOP
    .word boot_entry
.org BOOT_CODE
boot_entry:
""" + _load("r0", "UDS_PAGE") + _load("r1", "RIOT_BASE") + _load("r2", "RIOT_LEN") \
        + _load("r3", "CDI_RAM") + "    svc #SVC_BOOT_MEASURE\n" \
        + _acl_lock(0, "UDS_PAGE", "PAGE_SIZE", "ACL_NO_READ_NO_WRITE") \
        + _acl_lock(1, "BOOT_BASE", "PROTECTED_END", "ACL_NO_WRITE")
    if config.awdt_period:
        src += _load("r0", "AWDT_PERIOD") + _load("r1", str(config.awdt_period)) \
            + "    str r1, [r0, #0]\n    movw r1, #1\n    str r1, [r0, #4]\n"
    if config.secure_boot:
        src += _load("r0", "RIOT_BASE") + _load("r1", "RIOT_LEN") + _load("r2", "RIOT_SIG") \
            + _load("r3", "VENDOR_KEY") + "    svc #SVC_VERIFY_LAYER\n"
    src += _load("r0", "riot_entry") + "    bx r0\nboot_end:\n"
    return src


def riot_source(config: FirmwareConfig) -> str:
    src = ".org RIOT_BASE\nriot_entry:\n"
    if config.uses_counter:
        # bump the boot counter with interrupts masked, then lock its page
        src += "    cpsid i\n" + _load("r0", "NVMC_CONFIG") + "    movw r1, #NVMC_WEN\n" \
            "    str r1, [r0, #0]\n" + _load("r0", "COUNTER_PAGE") + "    svc #SVC_COUNTER_BUMP\n" \
            + _load("r0", "NVMC_CONFIG") + "    movw r1, #NVMC_REN\n    str r1, [r0, #0]\n" \
            "    cpsie i\n" + _acl_lock(2, "COUNTER_PAGE", "PAGE_SIZE", "ACL_NO_WRITE")
    if config.secure_boot:
        src += _load("r0", "APP_BASE") + _load("r1", "APP_LEN") + _load("r2", "APP_SIG") \
            + _load("r3", "VENDOR_KEY") + "    svc #SVC_VERIFY_LAYER\n"
    svc = "SVC_RIOT_DERIVE_INPUT" if config.boot_input is not BootInput.NONE else "SVC_RIOT_DERIVE"
    src += _load("r0", "CDI_RAM") + _load("r1", "APP_BASE") + _load("r2", "APP_LEN") \
        + _load("r3", "ALIAS_KEY_RAM") + f"    svc #{svc}\n"
    src += _load("r0", "CDI_RAM") + "    movw r1, #0\n" \
        + "".join(f"    str r1, [r0, #{4 * i}]\n" for i in range(8))
    src += _load("r0", "APP_BASE") + "    ldr r0, [r0, #8]\n    bx r0\nriot_end:\n"
    return src


def app_source(config: FirmwareConfig) -> str:
    src = f"""
.org APP_BASE
    .word APP_HEADER_MAGIC
    .word {config.version}
    .word app_main
.org APP_CODE
app_main:
    add sp, sp, #-MAIN_STACK_RESERVE
"""
    if config.attest_then_zeroize:
        src += _load("r0", "ALIAS_KEY_RAM") + "    svc #SVC_ATTEST_BOOT\n" \
            + "    movw r1, #0\n" + "".join(f"    str r1, [r0, #{4 * i}]\n" for i in range(8))
    src += """
    bl app_sched_init
    cmp r0, #0
    bne app_fatal
    bl app_timer_init
    cmp r0, #0
    bne app_fatal
main_loop:
    wfe
    bl udp_handler
    b main_loop
app_fatal:
    udf

; datagram callback: copies rx_len bytes of the receive buffer to a local buffer
udp_handler:
    push {r4, r5, lr}
    add sp, sp, #-BUFFER_LEN
""" + _load("r1", "RX_BUF") + _load("r2", "RX_LEN") + "    ldr r2, [r2, #0]\n"
    if config.bounded_handler:
        src += """    cmp r2, #BUFFER_LEN
    bls copy_ok
    movw r2, #BUFFER_LEN
copy_ok:
"""
    src += """    add r0, sp, #0
copy_words:
    cmp r2, #4
    blo copy_bytes
    ldr r3, [r1, #0]
    str r3, [r0, #0]
    add r0, r0, #4
    add r1, r1, #4
    add r2, r2, #-4
    b copy_words
copy_bytes:
    cmp r2, #0
    beq copy_done
    ldrb r3, [r1, #0]
    strb r3, [r0, #0]
    add r0, r0, #1
    add r1, r1, #1
    add r2, r2, #-1
    b copy_bytes
copy_done:
    add sp, sp, #BUFFER_LEN
    pop {r4, r5, pc}
udp_handler_end:
""" + _library_source(config.gadgets) + """
.org SCHED_INIT_PAGE
app_sched_init:
""" + _load("r0", "SCHED_STATE") + """    movw r1, #SCHED_MAGIC
    str r1, [r0, #0]
    movw r1, #16
    str r1, [r0, #4]
    movw r1, #0
    str r1, [r0, #8]
    str r1, [r0, #12]
    movw r0, #0
    nop
    bx lr
app_sched_init_end:

.org TIMER_INIT_PAGE
app_timer_init:
""" + _load("r0", "TIMER_STATE") + """    movw r1, #TIMER_MAGIC
    str r1, [r0, #0]
    movw r0, #0
    nop
    bx lr
app_timer_init_end:
"""
    return src


def _library_source(style: GadgetStyle) -> str:
    """Driver helpers whose epilogues double as the two gadgets."""
    if style is GadgetStyle.FOUND:
        irq_pop, st, st_pop = "{r4, pc}", "str r5, [r4, #0]", "{r4, r5, r6, pc}"
        irq_push, st_push = "{r4, lr}", "{r4, r5, r6, lr}"
    elif style is GadgetStyle.IDEAL:
        irq_pop, st, st_pop = "{r4, r5, pc}", "str r4, [r5, #0]", "{r4, r5, pc}"
        irq_push, st_push = "{r4, r5, lr}", "{r4, r5, lr}"
    else:
        irq_pop, st, st_pop = "{pc}", "str r4, [r5, #0]", "{r4, r5, pc}"
        irq_push, st_push = "{lr}", "{r4, r5, lr}"
    st_regs = ("r4", "r5") if style is GadgetStyle.FOUND else ("r5", "r4")
    return f"""
.org LIB_BASE
lib_start:
; critical-section entry used by the radio driver
lib_irq_lock:
    push {irq_push}
    movw r0, #1
gadget_irq:
    cpsid i
    pop {irq_pop}
; memory-mapped register write: *r0 = r1
lib_reg_write:
    push {st_push}
    add {st_regs[0]}, r0, #0
    add {st_regs[1]}, r1, #0
gadget_store:
    {st}
    pop {st_pop}
; word fill: r0 = dst, r1 = value, r2 = count
lib_memset32:
    cmp r2, #0
    beq lib_memset32_done
    str r1, [r0, #0]
    add r0, r0, #4
    add r2, r2, #-1
    b lib_memset32
lib_memset32_done:
    bx lr
lib_end:
"""


# -- intrinsics ----------------------------------------------------------------

def _svc_boot_measure(device: Device) -> None:
    r = device.regs.r
    uds = device.read_bytes(r[0], mm.UDS_LEN)
    riot = device.read_bytes(r[1], r[2])
    device.write_ram(r[3], derive_layer_secret(uds, measure(riot)))


def _riot_derive(device: Device, boot_input: bytes | None) -> None:
    r = device.regs.r
    secret = device.peek_ram(r[0], 32)
    app_m = measure(device.read_bytes(r[1], r[2]))
    device_id = derive_device_id(secret)
    alias = derive_alias_key(secret, app_m, boot_input)
    cert = issue_alias_certificate(device_id, alias.public, app_m, boot_input)
    device.write_ram(r[3], alias.private + cert.encode())


def _svc_riot_derive(device: Device) -> None:
    _riot_derive(device, None)


def _svc_riot_derive_input(device: Device) -> None:
    nonce = b"".join(w.to_bytes(4, "little") for w in device.retained)
    if any(nonce):
        value = cm.boot_cycle_input(cm.InputSource.NONCE, nonce=nonce)
        device.retained[:] = [0] * mm.RETAINED_WORDS
    else:
        # no nonce was cached before this reset: fall back to the counter
        count = cm.counter_value(device.read_bytes(mm.COUNTER_PAGE, mm.PAGE_SIZE),
                                 device.config.get("counter_bytes", mm.PAGE_SIZE))
        value = cm.boot_cycle_input(cm.InputSource.COUNTER, counter=count)
    _riot_derive(device, value)


def _svc_counter_bump(device: Device) -> None:
    base = device.regs.r[0]
    limit = device.config.get("counter_bytes", mm.PAGE_SIZE)
    try:
        offset = cm.counter_next_offset(device.read_bytes(base, mm.PAGE_SIZE), limit)
    except CounterExhausted as exc:
        raise Trap(FaultKind.WRITE, base, str(exc)) from None
    device.store8(base + offset, 0)


def _svc_verify_layer(device: Device) -> None:
    r = device.regs.r
    layer = device.read_bytes(r[0], r[1])
    sig = device.read_bytes(r[2], 64)
    key = device.read_bytes(r[3], 32)
    if cm.secure_boot_check(layer, sig, key) is cm.Decision.HALT:
        device.trigger_fault(FaultKind.SECURE_BOOT, r[0], "layer signature invalid")


def _svc_attest_boot(device: Device) -> None:
    from .protocol import device_initiated_envelope

    r = device.regs.r
    layout = device.config.get("credentials", CredentialLayout())
    count = cm.counter_value(device.read_bytes(mm.COUNTER_PAGE, mm.PAGE_SIZE),
                             device.config.get("counter_bytes", mm.PAGE_SIZE))
    key = device.peek_ram(r[0], 32)
    cert = device.peek_ram(layout.alias_cert_ram_addr, CERT_LEN)
    device.outbox.append(device_initiated_envelope(device.label.decode(), key, cert, count).encode())


SERVICES = {
    SVC_BOOT_MEASURE: _svc_boot_measure,
    SVC_RIOT_DERIVE: _svc_riot_derive,
    SVC_COUNTER_BUMP: _svc_counter_bump,
    SVC_VERIFY_LAYER: _svc_verify_layer,
    SVC_ATTEST_BOOT: _svc_attest_boot,
    SVC_RIOT_DERIVE_INPUT: _svc_riot_derive_input,
}


# -- build ---------------------------------------------------------------------

def _blob(prog: isa.Program, start: int, end: int) -> bytes:
    return prog.blob(start, end)


def build_firmware(config: FirmwareConfig = FirmwareConfig()) -> FirmwareImage:
    if config.secure_boot and not config.vendor_seed:
        raise BuildError("secure boot needs a vendor signing key")
    if config.awdt_period and not config.secure_boot:
        raise BuildError("an authenticated watchdog without secure boot cannot stop malware")
    if config.awdt_period < 0 or config.awdt_period >= 1 << 32:
        raise BuildError("watchdog period out of range")
    if config.version < 0 or config.version >= 1 << 32:
        raise BuildError("version out of range")
    if not 0 < config.counter_bytes <= mm.PAGE_SIZE:
        raise BuildError("counter must fit in its page")
    if len(config.app_data) > mm.APP_END - mm.APP_DATA:
        raise BuildError("app data too large")

    syms = _asm_symbols()
    try:
        boot = isa.assemble(boot_source(config), syms | {"riot_entry": mm.RIOT_BASE})
        riot = isa.assemble(riot_source(config), syms)
        app = isa.assemble(app_source(config), syms)
    except Exception as exc:  # assembler problems are build problems
        raise BuildError(str(exc)) from exc
    if boot.symbols["boot_end"] > mm.RIOT_BASE or riot.symbols["riot_end"] > mm.SIG_BASE:
        raise BuildError("boot or riot layer overflows its region")

    sections = [
        Section("boot", mm.BOOT_BASE, _blob(boot, mm.BOOT_BASE, mm.RIOT_BASE)),
        Section("riot", mm.RIOT_BASE, _blob(riot, mm.RIOT_BASE, mm.SIG_BASE)),
        Section("app", mm.APP_BASE, _blob(app, mm.APP_BASE, mm.LIB_BASE)),
        Section("library", mm.LIB_BASE, _blob(app, mm.LIB_BASE, mm.SCHED_INIT_PAGE)),
        Section("sched_init", mm.SCHED_INIT_PAGE,
                _blob(app, mm.SCHED_INIT_PAGE, mm.TIMER_INIT_PAGE)),
        Section("timer_init", mm.TIMER_INIT_PAGE,
                _blob(app, mm.TIMER_INIT_PAGE, mm.APP_DATA)),
    ]
    if config.app_data:
        sections.append(Section("app_data", mm.APP_DATA, bytes(config.app_data)))

    symbols = {k: v for k, v in {**boot.symbols, **riot.symbols, **app.symbols}.items()
               if k not in syms}
    symbols.update(cdi_ram=mm.CDI_RAM, alias_key_ram=mm.ALIAS_KEY_RAM,
                   alias_cert_ram=mm.ALIAS_CERT_RAM, uds_page=mm.UDS_PAGE)

    image = FirmwareImage(tuple(sections), symbols, config.version, config)
    if config.secure_boot:
        vendor = KeyPair.from_seed(config.vendor_seed)
        flash = image.flash()
        sig_block = bytearray(b"\xff" * 0xA0)
        sig_block[0:64] = cm.sign_layer(flash[mm.RIOT_BASE:mm.RIOT_BASE + mm.RIOT_LEN], vendor)
        sig_block[0x40:0x80] = cm.sign_layer(flash[mm.APP_BASE:mm.APP_END], vendor)
        sig_block[0x80:0xA0] = vendor.public
        image = replace(image, sections=image.sections[:2]
                        + (Section("signatures", mm.SIG_BASE, bytes(sig_block)),)
                        + image.sections[2:], vendor_public=vendor.public)
    return image


# -- provisioning --------------------------------------------------------------

def provision(image: FirmwareImage, uds: bytes, *, label: str = "dev0",
              irq: InterruptSchedule | None = None,
              awdt_backend_key: bytes | None = None) -> Device:
    """Factory step: program the image and the UDS into a fresh device and reset it."""
    if len(uds) != mm.UDS_LEN:
        raise ValueError("UDS must be 32 bytes")
    dev = Device(services=SERVICES, irq=irq, label=label.encode())
    for s in image.sections:
        dev.load_flash(s.base, s.data)
    dev.load_flash(mm.UDS_PAGE, bytes(uds))
    dev.config.update(credentials=image.credentials, counter_bytes=image.config.counter_bytes)
    dev.awdt.backend_key = awdt_backend_key
    dev.reset()
    return dev


def boot(device: Device, fuel: int = 200_000):
    """Run from reset to the main loop's first ``wfe`` (or a trap)."""
    return device.run_until(fuel=fuel)


def credentials(device: Device, layout: CredentialLayout = CredentialLayout()) -> bytes:
    return device.peek_ram(layout.alias_private_ram_addr, layout.combined_length)


def init_state_ok(device: Device) -> bool:
    """Postcondition of both init functions."""
    sched = struct.unpack("<4I", device.peek_ram(mm.SCHED_STATE, 16))
    timer = struct.unpack("<I", device.peek_ram(mm.TIMER_STATE, 4))[0]
    return sched == (SCHED_MAGIC, 16, 0, 0) and timer == TIMER_MAGIC
