"""A fixed-width 32-bit, Thumb-flavoured toy instruction set.

Words are little-endian in memory. The top byte is the opcode; any word whose
fields do not match a row below is undefined and raises ``UndefinedInstruction``
when decoded. Registers are numbered r0-r12, sp=13, lr=14, pc=15.

======  ===========================  ==========================================
opcode  mnemonic                     fields (bit ranges)
======  ===========================  ==========================================
0x01    push {reglist}               15:0 mask (r0-r12, lr); 23:16 zero
0x02    pop {reglist}                15:0 mask (r0-r12, lr, pc); 23:16 zero
0x03    ldr rt, [rn, #imm]           23:20 rt, 19:16 rn, 15:12 zero, 11:0 imm
0x04    str rt, [rn, #imm]           as ldr
0x05    ldrb rt, [rn, #imm]          as ldr
0x06    strb rt, [rn, #imm]          as ldr
0x07    add rd, rn, #simm            23:20 rd, 19:16 rn, 15:0 signed imm
0x08    movw rd, #imm16              23:20 rd, 19:16 zero, 15:0 imm
0x09    movt rd, #imm16              as movw
0x0A    cmp rn, rm                   23:20 rn, 19:16 rm, 15:0 zero
0x0B    cmp rn, #imm16               23:20 rn, 19:16 zero, 15:0 imm
0x0C    b<cond> label                23:20 cond (0-14), 19:0 signed word offset
0x0D    bl label                     23:0 signed word offset
0x0E    bx rm                        23:20 rm, 19:0 zero
0x0F    cpsid i                      exact word 0x0F000000
0x10    cpsie i                      exact word 0x10000000
0x11    nop                          exact word 0x11000000
0x12    wfe                          exact word 0x12000000
0x13    svc #imm8                    23:8 zero, 7:0 service number
======  ===========================  ==========================================

Branch targets are ``pc + 4 + 4 * offset``. ``pc`` may not be used as a data
register, and ``sp`` may only appear as an ``add``/``ldr``/``str`` operand.
"""
from __future__ import annotations

import ast
import re
from dataclasses import dataclass
from typing import NamedTuple

from .errors import AssemblerError

SP, LR, PC = 13, 14, 15

PUSH, POP, LDR, STR, LDRB, STRB, ADD, MOVW, MOVT, CMP, CMPI, B, BL, BX = range(1, 15)
CPSID, CPSIE, NOP, WFE, SVC = range(15, 20)

OPNAMES = {
    PUSH: "push", POP: "pop", LDR: "ldr", STR: "str", LDRB: "ldrb", STRB: "strb",
    ADD: "add", MOVW: "movw", MOVT: "movt", CMP: "cmp", CMPI: "cmp", B: "b", BL: "bl",
    BX: "bx", CPSID: "cpsid", CPSIE: "cpsie", NOP: "nop", WFE: "wfe", SVC: "svc",
}

CONDS = ["eq", "ne", "hs", "lo", "mi", "pl", "vs", "vc", "hi", "ls", "ge", "lt", "gt", "le", "al"]
COND_AL = 14

REGNAMES = [f"r{i}" for i in range(13)] + ["sp", "lr", "pc"]
_PUSH_OK = 0x5FFF  # r0-r12, lr
_POP_OK = 0xDFFF  # r0-r12, lr, pc


UDF_WORD = 0x0000_0000  # opcode 0 is permanently undefined


class UndefinedInstruction(Exception):
    def __init__(self, word: int):
        super().__init__(f"undefined instruction {word:#010x}")
        self.word = word


class Insn(NamedTuple):
    op: int
    a: int = 0  # rt / rd / rn / cond / mask
    b: int = 0  # rn / rm
    imm: int = 0


def _sext(value: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    return (value & (sign - 1)) - (value & sign)


def decode(word: int) -> Insn:
    """Decode one 32-bit word or raise ``UndefinedInstruction``."""
    op = word >> 24
    a = (word >> 20) & 0xF
    b = (word >> 16) & 0xF
    if op in (PUSH, POP):
        mask = word & 0xFFFF
        ok = _PUSH_OK if op == PUSH else _POP_OK
        if (word >> 16) & 0xFF or not mask or mask & ~ok:
            raise UndefinedInstruction(word)
        return Insn(op, mask)
    if op in (LDR, STR, LDRB, STRB):
        if word & 0xF000 or a in (SP, PC) or b == PC:
            raise UndefinedInstruction(word)
        return Insn(op, a, b, word & 0xFFF)
    if op == ADD:
        if a == PC or b == PC:
            raise UndefinedInstruction(word)
        return Insn(op, a, b, _sext(word & 0xFFFF, 16))
    if op in (MOVW, MOVT):
        if b or a in (SP, PC):
            raise UndefinedInstruction(word)
        return Insn(op, a, 0, word & 0xFFFF)
    if op == CMP:
        if word & 0xFFFF or a in (SP, PC) or b in (SP, PC):
            raise UndefinedInstruction(word)
        return Insn(op, a, b)
    if op == CMPI:
        if b or a in (SP, PC):
            raise UndefinedInstruction(word)
        return Insn(op, a, 0, word & 0xFFFF)
    if op == B:
        if a == 15:
            raise UndefinedInstruction(word)
        return Insn(op, a, 0, _sext(word & 0xFFFFF, 20))
    if op == BL:
        return Insn(op, 0, 0, _sext(word & 0xFFFFFF, 24))
    if op == BX:
        if word & 0xFFFFF or a in (SP, PC):
            raise UndefinedInstruction(word)
        return Insn(op, a)
    if op in (CPSID, CPSIE, NOP, WFE):
        if word & 0xFFFFFF:
            raise UndefinedInstruction(word)
        return Insn(op)
    if op == SVC:
        if word & 0xFFFF00:
            raise UndefinedInstruction(word)
        return Insn(op, 0, 0, word & 0xFF)
    raise UndefinedInstruction(word)


def encode(insn: Insn) -> int:
    op, a, b, imm = insn
    if op in (PUSH, POP):
        word = (op << 24) | a
    elif op in (LDR, STR, LDRB, STRB):
        if not 0 <= imm < 0x1000:
            raise ValueError(f"offset {imm} out of range")
        word = (op << 24) | (a << 20) | (b << 16) | imm
    elif op == ADD:
        if not -0x8000 <= imm < 0x8000:
            raise ValueError(f"add immediate {imm} out of range")
        word = (op << 24) | (a << 20) | (b << 16) | (imm & 0xFFFF)
    elif op in (MOVW, MOVT, CMPI):
        if not 0 <= imm <= 0xFFFF:
            raise ValueError(f"immediate {imm:#x} out of range")
        word = (op << 24) | (a << 20) | imm
    elif op == CMP:
        word = (op << 24) | (a << 20) | (b << 16)
    elif op == B:
        if not -(1 << 19) <= imm < (1 << 19):
            raise ValueError("branch out of range")
        word = (op << 24) | (a << 20) | (imm & 0xFFFFF)
    elif op == BL:
        if not -(1 << 23) <= imm < (1 << 23):
            raise ValueError("branch out of range")
        word = (op << 24) | (imm & 0xFFFFFF)
    elif op == BX:
        word = (op << 24) | (a << 20)
    elif op == SVC:
        word = (op << 24) | (imm & 0xFF)
    else:
        word = op << 24
    try:
        decode(word)  # refuse to emit anything the decoder would reject
    except UndefinedInstruction:
        raise ValueError(f"operands do not form a valid instruction ({word:#010x})") from None
    return word


def reglist(mask: int) -> list[int]:
    return [r for r in range(16) if mask >> r & 1]


def mask_of(regs) -> int:
    m = 0
    for r in regs:
        m |= 1 << r
    return m


def disasm(word: int, addr: int | None = None) -> str:
    try:
        op, a, b, imm = decode(word)
    except UndefinedInstruction:
        return f".word {word:#010x}"
    name = OPNAMES[op]
    if op in (PUSH, POP):
        return f"{name} {{{', '.join(REGNAMES[r] for r in reglist(a))}}}"
    if op in (LDR, STR, LDRB, STRB):
        return f"{name} {REGNAMES[a]}, [{REGNAMES[b]}, #{imm}]"
    if op == ADD:
        return f"add {REGNAMES[a]}, {REGNAMES[b]}, #{imm}"
    if op in (MOVW, MOVT):
        return f"{name} {REGNAMES[a]}, #{imm:#x}"
    if op == CMP:
        return f"cmp {REGNAMES[a]}, {REGNAMES[b]}"
    if op == CMPI:
        return f"cmp {REGNAMES[a]}, #{imm}"
    if op in (B, BL):
        cond = "" if op == BL or a == COND_AL else CONDS[a]
        target = f"{addr + 4 + 4 * imm:#010x}" if addr is not None else f"pc+{4 + 4 * imm}"
        return f"{name}{cond} {target}"
    if op == BX:
        return f"bx {REGNAMES[a]}"
    if op in (CPSID, CPSIE):
        return f"{name} i"
    if op == SVC:
        return f"svc #{imm}"
    return name


# -- assembler ---------------------------------------------------------------

def lo(x: int) -> int:
    return x & 0xFFFF


def hi(x: int) -> int:
    return (x >> 16) & 0xFFFF


_ALLOWED_NODES = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Constant, ast.Name, ast.Call,
                  ast.Add, ast.Sub, ast.Mult, ast.LShift, ast.RShift, ast.BitAnd, ast.BitOr,
                  ast.USub, ast.Load, ast.FloorDiv, ast.Invert)


def _eval(expr: str, symbols: dict[str, int]) -> int:
    tree = ast.parse(expr.strip(), mode="eval")
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise AssemblerError(f"unsupported expression: {expr!r}")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name)
                                               and node.func.id in ("lo", "hi")):
            raise AssemblerError(f"unsupported call in {expr!r}")
    env = {"lo": lo, "hi": hi, **symbols}
    try:
        return int(eval(compile(tree, "<asm>", "eval"), {"__builtins__": {}}, env))
    except NameError as exc:
        raise AssemblerError(f"undefined symbol in {expr!r}") from exc


def _reg(tok: str) -> int:
    tok = tok.strip().lower()
    if tok in REGNAMES:
        return REGNAMES.index(tok)
    raise AssemblerError(f"bad register {tok!r}")


@dataclass
class Program:
    """Assembled output: a sparse address -> word map plus the symbol table."""

    words: dict[int, int]
    symbols: dict[str, int]

    def blob(self, start: int, end: int | None = None) -> bytes:
        addrs = [a for a in self.words if a >= start and (end is None or a < end)]
        if not addrs:
            return b""
        stop = max(addrs) + 4
        out = bytearray(b"\xff" * (stop - start))
        for a in addrs:
            out[a - start:a - start + 4] = self.words[a].to_bytes(4, "little")
        return bytes(out)


_MEM = re.compile(r"^\[\s*(\w+)\s*(?:,\s*#?(.+?))?\s*\]$")


def assemble(source: str, symbols: dict[str, int] | None = None, origin: int = 0) -> Program:
    """Two-pass assembler for the toy ISA.

    Grammar, one statement per line (``;`` starts a comment)::

        label:                 define label at current address
        .org EXPR              move the location counter
        .equ NAME, EXPR        define a constant
        .word EXPR             emit a literal word
        .space N               advance by N bytes (multiple of 4), no output
        MNEMONIC OPERANDS      one instruction (see module table)
        udf                    permanently undefined word (traps)

    Expressions are Python integer arithmetic over symbols, with ``lo()`` and
    ``hi()`` selecting 16-bit halves. Immediates may carry a ``#`` prefix.
    """
    syms = dict(symbols or {})
    lines = []
    for lineno, raw in enumerate(source.splitlines(), 1):
        text = raw.split(";", 1)[0].strip()
        while text:
            m = re.match(r"^([A-Za-z_.$][\w.$]*):\s*(.*)$", text)
            if not m:
                break
            lines.append((lineno, "label", m.group(1)))
            text = m.group(2).strip()
        if text:
            lines.append((lineno, "stmt", text))

    # pass 1: addresses
    pc = origin
    for lineno, kind, text in lines:
        if kind == "label":
            if text in syms:
                raise AssemblerError(f"line {lineno}: duplicate label {text}")
            syms[text] = pc
            continue
        head, _, rest = text.partition(" ")
        head = head.lower()
        if head == ".org":
            pc = _eval(rest, syms)
        elif head == ".equ":
            name, _, expr = rest.partition(",")
            syms[name.strip()] = _eval(expr, syms)
        elif head == ".space":
            pc += _eval(rest, syms)
        else:
            pc += 4
        if pc % 4:
            raise AssemblerError(f"line {lineno}: misaligned location {pc:#x}")

    # pass 2: encode
    words: dict[int, int] = {}
    pc = origin
    for lineno, kind, text in lines:
        if kind == "label":
            continue
        head, _, rest = text.partition(" ")
        head = head.lower()
        try:
            if head == ".org":
                pc = _eval(rest, syms)
                continue
            if head == ".equ":
                continue
            if head == ".space":
                pc += _eval(rest, syms)
                continue
            if head == ".word":
                word = _eval(rest, syms) & 0xFFFFFFFF
            elif head == "udf":
                word = UDF_WORD
            else:
                word = encode(_parse_insn(head, rest.strip(), pc, syms))
        except (AssemblerError, ValueError) as exc:
            raise AssemblerError(f"line {lineno}: {text!r}: {exc}") from exc
        if pc in words:
            raise AssemblerError(f"line {lineno}: overlapping output at {pc:#x}")
        words[pc] = word
        pc += 4
    return Program(words, syms)


def _imm(tok: str, syms) -> int:
    return _eval(tok.strip().lstrip("#"), syms)


def _parse_insn(head: str, rest: str, pc: int, syms) -> Insn:
    ops = [t.strip() for t in re.split(r",(?![^{\[]*[}\]])", rest)] if rest else []
    if head in ("push", "pop"):
        body = rest.strip()
        if not (body.startswith("{") and body.endswith("}")):
            raise AssemblerError("register list must be in braces")
        regs = [_reg(r) for r in body[1:-1].split(",") if r.strip()]
        return Insn(PUSH if head == "push" else POP, mask_of(regs))
    if head in ("ldr", "str", "ldrb", "strb"):
        m = _MEM.match(ops[1])
        if not m:
            raise AssemblerError("bad memory operand")
        off = _imm(m.group(2), syms) if m.group(2) else 0
        op = {"ldr": LDR, "str": STR, "ldrb": LDRB, "strb": STRB}[head]
        return Insn(op, _reg(ops[0]), _reg(m.group(1)), off)
    if head == "add":
        if len(ops) == 2:
            return Insn(ADD, _reg(ops[0]), _reg(ops[0]), _imm(ops[1], syms))
        return Insn(ADD, _reg(ops[0]), _reg(ops[1]), _imm(ops[2], syms))
    if head in ("movw", "movt"):
        return Insn(MOVW if head == "movw" else MOVT, _reg(ops[0]), 0, _imm(ops[1], syms))
    if head == "cmp":
        if ops[1].startswith("#") or ops[1].lower() not in REGNAMES:
            return Insn(CMPI, _reg(ops[0]), 0, _imm(ops[1], syms))
        return Insn(CMP, _reg(ops[0]), _reg(ops[1]))
    if head == "bl":
        return Insn(BL, 0, 0, _branch_offset(ops[0], pc, syms))
    if head == "bx":
        return Insn(BX, _reg(ops[0]))
    if head[0] == "b" and (head == "b" or head[1:] in CONDS):
        cond = COND_AL if head == "b" else CONDS.index(head[1:])
        return Insn(B, cond, 0, _branch_offset(ops[0], pc, syms))
    if head in ("cpsid", "cpsie"):
        if rest.strip().lower() != "i":
            raise AssemblerError("only 'i' is supported")
        return Insn(CPSID if head == "cpsid" else CPSIE)
    if head == "nop":
        return Insn(NOP)
    if head == "wfe":
        return Insn(WFE)
    if head == "svc":
        return Insn(SVC, 0, 0, _imm(ops[0], syms))
    raise AssemblerError(f"unknown mnemonic {head!r}")


def _branch_offset(tok: str, pc: int, syms) -> int:
    target = _eval(tok, syms)
    delta = target - (pc + 4)
    if delta % 4:
        raise AssemblerError("branch target not word aligned")
    return delta // 4
