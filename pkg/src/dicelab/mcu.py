"""Miniature Cortex-M-like microcontroller.

Memory map: 1 MiB flash at 0, 256 KiB RAM at 0x2000_0000, word-addressed
peripherals (NVMC, ACL, retained registers, authenticated watchdog) and the
AIRCR soft-reset register. Flash is only writable through NVMC rules and is
preserved across reset; RAM, registers, NVMC and ACL are not.
"""
from __future__ import annotations

import copy
import enum
import random
import struct
from dataclasses import dataclass, field
from typing import Callable

from . import isa
from . import memmap as mm
from .dice import verify_signature
from .errors import FuelExhausted, Rejected

MASK32 = 0xFFFF_FFFF
_u32 = struct.Struct("<I")


class RunMode(enum.Enum):
    RUNNING = "running"
    HALTED = "halted"  # waiting for an event (wfe) in the main loop
    TRAPPED = "trapped"


class FaultKind(enum.Enum):
    BUS = "BusFault"
    WRITE = "WriteFault"
    ACCESS = "AccessFault"
    UNDEF = "UndefFault"
    SECURE_BOOT = "SecureBootHalt"


class StopReason(enum.Enum):
    PREDICATE = "predicate"
    HALTED = "halted"
    TRAPPED = "trapped"


@dataclass(frozen=True)
class Fault:
    kind: FaultKind
    addr: int
    pc: int
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.kind.value} at pc={self.pc:#010x} addr={self.addr:#010x} {self.detail}".rstrip()


class Trap(Exception):
    def __init__(self, kind: FaultKind, addr: int, detail: str = ""):
        super().__init__(f"{kind.value} @ {addr:#x}: {detail}")
        self.kind = kind
        self.addr = addr
        self.detail = detail


class _ResetRequest(Exception):
    pass


class NvmcConfig(enum.IntEnum):
    READ_ONLY = mm.NVMC_REN
    WRITE_ENABLE = mm.NVMC_WEN
    ERASE_ENABLE = mm.NVMC_EEN


@dataclass
class NvmcState:
    config: NvmcConfig = NvmcConfig.READ_ONLY


@dataclass
class AclRegion:
    addr: int = 0
    size: int = 0
    perm: int = 0

    @property
    def active(self) -> bool:
        return self.perm != 0

    def covers(self, addr: int) -> bool:
        return self.perm != 0 and self.addr <= addr < self.addr + self.size


@dataclass
class AclState:
    regions: list[AclRegion] = field(
        default_factory=lambda: [AclRegion() for _ in range(mm.ACL_REGIONS)])

    def active(self) -> list[AclRegion]:
        return [r for r in self.regions if r.active]

    def denies(self, addr: int, write: bool) -> bool:
        bit = 0b010 if write else 0b100
        return any(r.covers(addr) and r.perm & bit for r in self.regions)

    def first_denied(self, start: int, end: int, write: bool) -> int | None:
        """Lowest address in [start, end) the ACL denies, if any."""
        bit = 0b010 if write else 0b100
        hits = [max(start, r.addr) for r in self.regions
                if r.perm & bit and r.addr < end and start < r.addr + r.size]
        return min(hits) if hits else None


@dataclass
class Registers:
    r: list[int] = field(default_factory=lambda: [0] * 16)
    primask: int = 0
    n: bool = False
    z: bool = False
    c: bool = False
    v: bool = False

    @property
    def sp(self) -> int:
        return self.r[isa.SP]

    @property
    def lr(self) -> int:
        return self.r[isa.LR]

    @property
    def pc(self) -> int:
        return self.r[isa.PC]


@dataclass
class InterruptSchedule:
    """Seeded timer interrupt: fires between instructions with probability ``rate``."""

    seed: int
    rate: float = 1 / 256
    rng: random.Random = field(init=False, repr=False)

    def __post_init__(self):
        self.rng = random.Random(self.seed)

    def fires(self) -> bool:
        return self.rng.random() < self.rate


@dataclass
class Awdt:
    """Authenticated watchdog: counts instructions and idle cycles, refreshed
    only by backend-signed tokens, resets the device on expiry."""

    backend_key: bytes | None = None
    label: bytes = b""
    period: int = 0
    remaining: int = 0
    armed: bool = False
    last_seq: int = -1
    expirations: int = 0

    def disarm(self):
        self.armed = False
        self.remaining = 0

    def tick(self, n: int = 1) -> bool:
        if not self.armed:
            return False
        self.remaining -= n
        return self.remaining <= 0

    def feed(self, token: bytes) -> bool:
        if self.backend_key is None or len(token) != 4 + 64:
            return False
        seq = int.from_bytes(token[:4], "little")
        if seq <= self.last_seq:
            return False
        if not verify_signature(self.backend_key, awdt_message(self.label, seq), token[4:]):
            return False
        self.last_seq = seq
        if self.armed:
            self.remaining = self.period
        return True


def awdt_message(label: bytes, seq: int) -> bytes:
    return b"AWDT" + label + seq.to_bytes(4, "little")


_COND = [
    lambda f: f.z, lambda f: not f.z, lambda f: f.c, lambda f: not f.c,
    lambda f: f.n, lambda f: not f.n, lambda f: f.v, lambda f: not f.v,
    lambda f: f.c and not f.z, lambda f: not f.c or f.z,
    lambda f: f.n == f.v, lambda f: f.n != f.v,
    lambda f: not f.z and f.n == f.v, lambda f: f.z or f.n != f.v,
    lambda f: True,
]

Service = Callable[["Device"], None]


class Device:
    """Complete simulated microcontroller state plus the stepping engine."""

    def __init__(self, *, services: dict[int, Service] | None = None,
                 irq: InterruptSchedule | None = None, label: bytes = b"dev",
                 rx_buf: int = mm.RX_BUF, rx_len_addr: int = mm.RX_LEN,
                 mtu: int = mm.RX_BUF_LEN):
        self.flash = bytearray(b"\xff" * mm.FLASH_SIZE)
        self.ram = bytearray(mm.RAM_SIZE)
        self.regs = Registers()
        self.nvmc = NvmcState()
        self.acl = AclState()
        self.retained = [0] * mm.RETAINED_WORDS
        self.awdt = Awdt(label=label)
        self.services = dict(services or {})
        self.irq = irq
        self.label = label
        self.rx_buf = rx_buf
        self.rx_len_addr = rx_len_addr
        self.mtu = mtu
        self.mode = RunMode.HALTED
        self.trap: Fault | None = None
        self.steps = 0
        self.reset_count = 0
        self.irq_count = 0
        self.outbox: list[bytes] = []
        self.trace: Callable[[str], None] | None = None
        self.config: dict = {}  # firmware-provided constants used by services
        self._decoded: dict[int, isa.Insn] = {}

    # -- lifecycle -----------------------------------------------------------

    def load_flash(self, addr: int, data: bytes):
        """Factory programming: bypasses NVMC and ACL."""
        if addr < 0 or addr + len(data) > mm.FLASH_SIZE:
            raise ValueError("image does not fit in flash")
        self.flash[addr:addr + len(data)] = data

    def reset(self):
        """Power-on defaults except flash and retained registers."""
        self.regs = Registers()
        self.nvmc = NvmcState()
        self.acl = AclState()
        self.ram[:] = bytes(mm.RAM_SIZE)
        self.awdt.disarm()
        self.trap = None
        self.reset_count += 1
        self.regs.r[isa.SP] = _u32.unpack_from(self.flash, mm.BOOT_BASE)[0]
        self.regs.r[isa.PC] = _u32.unpack_from(self.flash, mm.BOOT_BASE + 4)[0]
        self.mode = RunMode.RUNNING

    def snapshot(self) -> Device:
        trace, self.trace = self.trace, None
        try:
            return copy.deepcopy(self)
        finally:
            self.trace = trace

    @property
    def running(self) -> bool:
        return self.mode is RunMode.RUNNING

    @property
    def halted(self) -> bool:
        return self.mode is RunMode.HALTED

    @property
    def trapped(self) -> bool:
        return self.mode is RunMode.TRAPPED

    # -- bus -----------------------------------------------------------------

    def load32(self, addr: int) -> int:
        if addr & 3:
            raise Trap(FaultKind.BUS, addr, "unaligned word load")
        off = addr - mm.RAM_BASE
        if 0 <= off < mm.RAM_SIZE:
            return _u32.unpack_from(self.ram, off)[0]
        if 0 <= addr < mm.FLASH_SIZE:
            if self.acl.denies(addr, write=False):
                raise Trap(FaultKind.ACCESS, addr, "ACL read protection")
            return _u32.unpack_from(self.flash, addr)[0]
        return self._periph_read(addr)

    def load8(self, addr: int) -> int:
        off = addr - mm.RAM_BASE
        if 0 <= off < mm.RAM_SIZE:
            return self.ram[off]
        if 0 <= addr < mm.FLASH_SIZE:
            if self.acl.denies(addr, write=False):
                raise Trap(FaultKind.ACCESS, addr, "ACL read protection")
            return self.flash[addr]
        raise Trap(FaultKind.BUS, addr, "byte load outside memory")

    def store32(self, addr: int, value: int):
        if addr & 3:
            raise Trap(FaultKind.BUS, addr, "unaligned word store")
        off = addr - mm.RAM_BASE
        if 0 <= off < mm.RAM_SIZE:
            _u32.pack_into(self.ram, off, value & MASK32)
        elif 0 <= addr < mm.FLASH_SIZE:
            self._flash_write(addr, (value & MASK32).to_bytes(4, "little"))
        else:
            self._periph_write(addr, value & MASK32)

    def store8(self, addr: int, value: int):
        off = addr - mm.RAM_BASE
        if 0 <= off < mm.RAM_SIZE:
            self.ram[off] = value & 0xFF
        elif 0 <= addr < mm.FLASH_SIZE:
            self._flash_write(addr, bytes([value & 0xFF]))
        else:
            raise Trap(FaultKind.BUS, addr, "byte store outside memory")

    def read_bytes(self, addr: int, n: int) -> bytes:
        """Bus read of ``n`` bytes (ACL enforced)."""
        if 0 <= addr and addr + n <= mm.FLASH_SIZE:
            denied = self.acl.first_denied(addr, addr + n, write=False)
            if denied is not None:
                raise Trap(FaultKind.ACCESS, denied, "ACL read protection")
            return bytes(self.flash[addr:addr + n])
        if n % 4 == 0 and addr % 4 == 0:
            return b"".join(self.load32(addr + i).to_bytes(4, "little") for i in range(0, n, 4))
        return bytes(self.load8(addr + i) for i in range(n))

    def write_ram(self, addr: int, data: bytes):
        off = addr - mm.RAM_BASE
        if not (0 <= off and off + len(data) <= mm.RAM_SIZE):
            raise Trap(FaultKind.BUS, addr, "RAM write out of range")
        self.ram[off:off + len(data)] = data

    def peek_ram(self, addr: int, n: int) -> bytes:
        """Debugger view of RAM (no side effects)."""
        off = addr - mm.RAM_BASE
        return bytes(self.ram[off:off + n])

    def _flash_write(self, addr: int, data: bytes):
        end = addr + len(data)
        if end > mm.FLASH_SIZE:
            raise Trap(FaultKind.BUS, addr, "flash write out of range")
        if any(self.acl.denies(a, write=True) for a in (addr, end - 1)):
            raise Trap(FaultKind.ACCESS, addr, "ACL write protection")
        if self.nvmc.config is not NvmcConfig.WRITE_ENABLE:
            raise Trap(FaultKind.WRITE, addr, f"NVMC config {self.nvmc.config.name}")
        if self.flash[addr:end] != b"\xff" * len(data):
            raise Trap(FaultKind.WRITE, addr, "target not erased")
        self.flash[addr:end] = data

    def erase_page(self, addr: int):
        if self.nvmc.config is not NvmcConfig.ERASE_ENABLE:
            raise Trap(FaultKind.WRITE, addr, f"erase with NVMC config {self.nvmc.config.name}")
        if addr % mm.PAGE_SIZE or not 0 <= addr < mm.FLASH_SIZE:
            raise Trap(FaultKind.WRITE, addr, "erase address not a page start")
        if self.acl.denies(addr, write=True):
            raise Trap(FaultKind.ACCESS, addr, "ACL write protection")
        self.flash[addr:addr + mm.PAGE_SIZE] = b"\xff" * mm.PAGE_SIZE

    def _periph_read(self, addr: int) -> int:
        if addr == mm.NVMC_READY:
            return 1
        if addr == mm.NVMC_CONFIG:
            return int(self.nvmc.config)
        if mm.ACL_BASE + 0x800 <= addr < mm.acl_addr(mm.ACL_REGIONS):
            region = self.acl.regions[(addr - mm.ACL_BASE - 0x800) // 0x10]
            return [region.addr, region.size, region.perm, 0][(addr & 0xF) // 4]
        if mm.RETAINED_BASE <= addr < mm.RETAINED_BASE + 4 * mm.RETAINED_WORDS:
            return self.retained[(addr - mm.RETAINED_BASE) // 4]
        if addr == mm.AWDT_PERIOD:
            return self.awdt.period
        if addr == mm.AWDT_CTRL:
            return int(self.awdt.armed)
        raise Trap(FaultKind.BUS, addr, "unmapped load")

    def _periph_write(self, addr: int, value: int):
        if addr == mm.NVMC_CONFIG:
            if value in (0, 1, 2):
                self.nvmc.config = NvmcConfig(value)
            return
        if addr == mm.NVMC_ERASEPAGE:
            self.erase_page(value)
            return
        if mm.ACL_BASE + 0x800 <= addr < mm.acl_addr(mm.ACL_REGIONS):
            region = self.acl.regions[(addr - mm.ACL_BASE - 0x800) // 0x10]
            if region.active:
                return  # write-once until reset
            slot = (addr & 0xF) // 4
            if slot == 0:
                region.addr = value
            elif slot == 1:
                region.size = value
            elif slot == 2:
                region.perm = value & 0b110
            return
        if mm.RETAINED_BASE <= addr < mm.RETAINED_BASE + 4 * mm.RETAINED_WORDS:
            self.retained[(addr - mm.RETAINED_BASE) // 4] = value
            return
        if addr == mm.AWDT_PERIOD:
            if not self.awdt.armed:
                self.awdt.period = value
            return
        if addr == mm.AWDT_CTRL:
            if value == 1 and not self.awdt.armed and self.awdt.period:
                self.awdt.armed = True
                self.awdt.remaining = self.awdt.period
            return
        if addr == mm.AIRCR:
            if value == mm.AIRCR_RESET:
                raise _ResetRequest()
            return
        raise Trap(FaultKind.BUS, addr, "unmapped store")

    # -- execution -----------------------------------------------------------

    def fetch(self, pc: int) -> isa.Insn:
        if pc & 3 or not 0 <= pc < mm.FLASH_SIZE:
            raise Trap(FaultKind.BUS, pc, "instruction fetch outside flash")
        if self.acl.denies(pc, write=False):
            raise Trap(FaultKind.ACCESS, pc, "fetch from read-protected flash")
        word = _u32.unpack_from(self.flash, pc)[0]
        insn = self._decoded.get(word)
        if insn is None:
            try:
                insn = isa.decode(word)
            except isa.UndefinedInstruction:
                raise Trap(FaultKind.UNDEF, pc, f"word {word:#010x}") from None
            self._decoded[word] = insn
        return insn

    def step(self) -> None:
        """Execute one instruction (plus any interrupt / watchdog effect)."""
        if self.mode is not RunMode.RUNNING:
            return
        regs = self.regs
        r = regs.r
        pc = r[15]
        try:
            insn = self.fetch(pc)
            if self.trace is not None:
                self.trace(f"{pc:08x}: {_u32.unpack_from(self.flash, pc)[0]:08x}  "
                           f"{isa.disasm(_u32.unpack_from(self.flash, pc)[0], pc)}")
            op, a, b, imm = insn
            nxt = pc + 4
            if op == isa.LDR:
                r[a] = self.load32((r[b] + imm) & MASK32)
            elif op == isa.STR:
                self.store32((r[b] + imm) & MASK32, r[a])
            elif op == isa.ADD:
                r[a] = (r[b] + imm) & MASK32
            elif op == isa.B:
                if _COND[a](regs):
                    nxt = pc + 4 + 4 * imm
            elif op == isa.CMP or op == isa.CMPI:
                x = r[a]
                y = r[b] if op == isa.CMP else imm
                res = (x - y) & MASK32
                regs.n = bool(res >> 31)
                regs.z = res == 0
                regs.c = x >= y
                regs.v = bool(((x ^ y) & (x ^ res)) >> 31)
            elif op == isa.LDRB:
                r[a] = self.load8((r[b] + imm) & MASK32)
            elif op == isa.STRB:
                self.store8((r[b] + imm) & MASK32, r[a])
            elif op == isa.MOVW:
                r[a] = imm
            elif op == isa.MOVT:
                r[a] = (r[a] & 0xFFFF) | (imm << 16)
            elif op == isa.PUSH:
                regs_list = isa.reglist(a)
                sp = (r[13] - 4 * len(regs_list)) & MASK32
                for i, reg in enumerate(regs_list):
                    self.store32(sp + 4 * i, r[reg])
                r[13] = sp
            elif op == isa.POP:
                sp = r[13]
                for reg in isa.reglist(a):
                    value = self.load32(sp)
                    if reg == 15:
                        nxt = value
                    else:
                        r[reg] = value
                    sp += 4
                r[13] = sp & MASK32
            elif op == isa.BL:
                r[14] = pc + 4
                nxt = pc + 4 + 4 * imm
            elif op == isa.BX:
                nxt = r[a] & ~1
            elif op == isa.CPSID:
                regs.primask = 1
            elif op == isa.CPSIE:
                regs.primask = 0
            elif op == isa.WFE:
                self.mode = RunMode.HALTED
            elif op == isa.SVC:
                service = self.services.get(imm)
                if service is None:
                    raise Trap(FaultKind.UNDEF, pc, f"no service #{imm}")
                r[15] = nxt
                service(self)
                if self.mode is RunMode.TRAPPED:
                    self.steps += 1
                    return
            r[15] = nxt & MASK32
        except Trap as t:
            self.mode = RunMode.TRAPPED
            self.trap = Fault(t.kind, t.addr, pc, t.detail)
            return
        except _ResetRequest:
            self.steps += 1
            self.reset()
            return
        self.steps += 1
        if self.awdt.armed and self.awdt.tick():
            self.awdt.expirations += 1
            self.reset()
            return
        if self.irq is not None and not regs.primask and self.mode is RunMode.RUNNING \
                and self.irq.fires():
            self._take_interrupt()

    def _take_interrupt(self):
        """Timer interrupt: exception frame stacked below sp, handler runs the
        flash driver's housekeeping (NVMC back to read-only), frame unstacked."""
        self.irq_count += 1
        r = self.regs.r
        frame_sp = (r[13] - 32) & MASK32
        try:
            for i, value in enumerate((r[0], r[1], r[2], r[3], r[12], r[14], r[15], 0x0100_0000)):
                self.store32(frame_sp + 4 * i, value)
        except Trap as t:
            self.mode = RunMode.TRAPPED
            self.trap = Fault(t.kind, t.addr, r[15], "exception stacking")
            return
        self.nvmc.config = NvmcConfig.READ_ONLY

    def trigger_fault(self, kind: FaultKind, addr: int, detail: str = ""):
        """Used by services to halt the core (e.g. failed secure-boot check)."""
        self.mode = RunMode.TRAPPED
        self.trap = Fault(kind, addr, self.regs.pc, detail)

    def run_until(self, stop: Callable[[Device], bool] | None = None,
                  fuel: int = 2_000_000) -> StopReason:
        """Step until ``stop`` holds, the core halts (wfe) or traps.

        Raises ``FuelExhausted`` if ``fuel`` instructions run without any of those.
        """
        if fuel <= 0:
            raise ValueError("fuel must be positive")
        used = 0
        while True:
            if stop is not None and stop(self):
                return StopReason.PREDICATE
            if self.mode is RunMode.HALTED:
                return StopReason.HALTED
            if self.mode is RunMode.TRAPPED:
                return StopReason.TRAPPED
            if used >= fuel:
                raise FuelExhausted(used)
            self.step()
            used += 1

    def deliver_datagram(self, payload: bytes, *, run: bool = True,
                         fuel: int = 2_000_000) -> StopReason | None:
        """Hand a received datagram to the firmware waiting in its main loop."""
        if self.mode is not RunMode.HALTED:
            raise Rejected(f"device is {self.mode.value}, not waiting for data")
        if len(payload) > self.mtu:
            raise Rejected(f"payload of {len(payload)} bytes exceeds MTU {self.mtu}")
        self.write_ram(self.rx_buf, bytes(payload))
        _u32.pack_into(self.ram, self.rx_len_addr - mm.RAM_BASE, len(payload))
        self.mode = RunMode.RUNNING
        if run:
            return self.run_until(fuel=fuel)
        return None

    def idle(self, cycles: int) -> bool:
        """Let wall-clock time pass while waiting; returns True if the
        watchdog fired (the device is then reset and running its boot code)."""
        if self.awdt.armed and self.awdt.tick(cycles):
            self.awdt.expirations += 1
            self.reset()
            return True
        return False

    def feed_awdt(self, token: bytes) -> bool:
        return self.awdt.feed(token)
