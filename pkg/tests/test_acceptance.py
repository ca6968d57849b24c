"""Acceptance criteria, one test each.

Each test records a PASS/FAIL line that the conftest prints in the terminal
summary. Running this file directly prints the same lines.
"""
import random
import time

import pytest

from dicelab import isa
from dicelab import memmap as mm
from dicelab.countermeasures import Kind
from dicelab.dice import derive_identity
from dicelab.exploit import (GadgetKind, IPV6_UDP_HEADERS, MalwareBlob, assemble_install_chain,
                             build_chain, emit_utility_malware, nvmc_prologue, plan_split,
                             run_attack, scan_gadgets)
from dicelab.firmware import FirmwareConfig, GadgetStyle, boot, build_firmware, provision
from dicelab.mcu import Device, FaultKind, InterruptSchedule, NvmcConfig, Trap
from dicelab.protocol import AttestationEnvelope, Reason, Verifier, respond
from dicelab.scenario import BUILTIN, MATRIX, Lab, run_scenario

UDS = bytes(range(32))


# 1 -----------------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_toctou_bypass(criterion):
    t0 = time.monotonic()
    lab = Lab(BUILTIN["baseline-attack"])
    try:
        lab.boot()
        lab.enroll()
        assert lab.attest().accepted
        report = lab.attack()
        lab.boot()
        verdict = lab.attest()
    finally:
        lab.close()
    elapsed = time.monotonic() - t0
    patched = mm.page_of(lab.image.symbols["app_sched_init"])
    diff = report.flash_diff_pages
    criterion["detail"] = (f"pages changed {[hex(p) for p in diff]}, attestation {verdict}, "
                           f"{elapsed:.1f}s")
    assert report.succeeded
    assert len(diff) >= 3
    assert {mm.RAM2FLASH_PAGE, mm.PERSIST_PAGE, mm.FLASH2RAM_PAGE, patched} <= set(diff)
    assert patched == 0x34000
    assert verdict.accepted
    assert elapsed < 10


# 2 -----------------------------------------------------------------------------

@pytest.mark.criterion(2)
def test_exploit_size_structure(criterion):
    ideal = build_firmware(FirmwareConfig(gadgets=GadgetStyle.IDEAL))
    gadgets = scan_gadgets(ideal)
    assert all(g.dummy_slots == 0 for g in gadgets if g.kind is GadgetKind.STORE)
    for n in (1, 2, 3, 7, 16, 58, 200):
        blob = MalwareBlob(bytes(range(4 * n)) if n < 64 else bytes(4 * n), 0, mm.RAM2FLASH_PAGE)
        chain = assemble_install_chain(gadgets, blob, ideal.frame, blob.dest, mtu=1 << 20)
        assert len(chain.serialize()) == ideal.frame.padding + 4 * (1 + 3 + 3 * n + 3)

    found = build_firmware()
    r2f, f2r = emit_utility_malware(found.credentials, found)
    chain = assemble_install_chain(scan_gadgets(found), [r2f, f2r], found.frame, r2f.entry_address)
    blob_bytes = len(r2f.data) + len(f2r.data)
    ratio = len(chain) / blob_bytes
    criterion["detail"] = (f"ideal block law exact; malware {len(r2f.data)}+{len(f2r.data)} B, "
                           f"chain {len(chain)} B, ratio {ratio:.2f}")
    assert 3.5 <= ratio <= 4.5


# 3 -----------------------------------------------------------------------------

@pytest.mark.criterion(3)
def test_mtu_split_arithmetic(criterion):
    image = build_firmware()
    gadgets = scan_gadgets(image)
    blob_words = 100 * 1024 // 4
    full = build_chain(gadgets, nvmc_prologue() + [(mm.APP_DATA + 4 * i, 0) for i in range(blob_words)],
                       image.frame, mm.APP_DATA)
    parts = plan_split(gadgets, blob_words, image.frame, mtu=1280,
                       framing_overhead=IPV6_UDP_HEADERS)
    criterion["detail"] = (f"unsplit chain {len(full)} B, {parts} parts at MTU 1280 "
                           f"with {IPV6_UDP_HEADERS} B of IPv6/UDP headers (target 375..400)")
    assert 400 * 1000 <= len(full) <= 420 * 1024
    assert 375 <= parts <= 400


# 4 -----------------------------------------------------------------------------

@pytest.mark.criterion(4)
def test_countermeasure_matrix(criterion):
    t0 = time.monotonic()
    results = {name: run_scenario(BUILTIN[name]) for name in MATRIX}
    elapsed = time.monotonic() - t0
    by_kind = {r.scenario.kind: r for r in results.values()}
    assert len(by_kind) == 6

    base = by_kind[None]
    assert base.attack.succeeded and base.final.accepted

    upd = by_kind[Kind.FIRMWARE_UPDATE]
    assert not upd.attack.succeeded

    sb = by_kind[Kind.SECURE_BOOT_AWDT]
    # blocked when the device comes back from the reset that ends step 3
    assert sb.attack.blocked_at == 4
    assert all(s.ok for s in sb.attack.steps[:3])

    ai = by_kind[Kind.ADDITIONAL_INPUT]
    assert ai.attack.succeeded and not ai.final.accepted
    assert ai.final.reason is Reason.WRONG_KEY

    nke = by_kind[Kind.NO_KEY_EXPOSURE]
    assert nke.attack.stolen_key_zero

    ms = by_kind[Kind.MEMORY_SAFE]
    assert ms.attack.blocked_at == 1

    bad = [r.scenario.name for r in results.values() if not r.ok]
    criterion["detail"] = f"6 rows, {6 - len(bad)} pass, {elapsed:.1f}s"
    assert not bad
    assert elapsed < 60


# 5 -----------------------------------------------------------------------------

@pytest.mark.criterion(5)
def test_dice_layering(criterion):
    rng = random.Random(5)
    violations = []
    for i in range(200):
        uds = rng.randbytes(32)
        cfg = FirmwareConfig(version=rng.randrange(1, 1000),
                             bounded_handler=rng.random() < 0.5,
                             app_data=rng.randbytes(rng.randrange(4, 512)))
        image = build_firmware(cfg)
        riot, app = image.riot_layer(), image.app_layer()
        ident = derive_identity(uds, riot, app)

        flipped = bytearray(app)
        pos = rng.randrange(len(flipped))
        flipped[pos] ^= 1 << rng.randrange(8)
        mutated = derive_identity(uds, riot, bytes(flipped))
        if mutated.device_id.public != ident.device_id.public:
            violations.append((i, "DeviceID moved with the app layer"))
        if mutated.alias.public == ident.alias.public:
            violations.append((i, f"alias unchanged after flipping app byte {pos}"))

        again = derive_identity(uds, build_firmware(cfg).riot_layer(), build_firmware(cfg).app_layer())
        if (again.device_id.public, again.alias.private, again.certificate.encode()) != \
                (ident.device_id.public, ident.alias.private, ident.certificate.encode()):
            violations.append((i, "pipeline not deterministic"))

        # the simulated boot lands on the same credentials as the host pipeline
        if i % 10 == 0:
            dev = provision(image, uds)
            boot(dev)
            ram = dev.peek_ram(mm.ALIAS_KEY_RAM, 32 + len(ident.certificate.encode()))
            if ram != ident.alias.private + ident.certificate.encode():
                violations.append((i, "simulated boot disagrees with host derivation"))
    criterion["detail"] = f"200 builds, {len(violations)} violations"
    assert violations == []


# 6 -----------------------------------------------------------------------------

NVMC_EXPECTED = {
    # (config, operation) -> outcome
    (NvmcConfig.READ_ONLY, "write-erased"): "WriteFault",
    (NvmcConfig.READ_ONLY, "write-programmed"): "WriteFault",
    (NvmcConfig.READ_ONLY, "erase"): "WriteFault",
    (NvmcConfig.WRITE_ENABLE, "write-erased"): "written",
    (NvmcConfig.WRITE_ENABLE, "write-programmed"): "WriteFault",
    (NvmcConfig.WRITE_ENABLE, "erase"): "WriteFault",
    (NvmcConfig.ERASE_ENABLE, "write-erased"): "WriteFault",
    (NvmcConfig.ERASE_ENABLE, "write-programmed"): "WriteFault",
    (NvmcConfig.ERASE_ENABLE, "erase"): "erased",
}


def _nvmc_outcome(config: NvmcConfig, op: str) -> str:
    dev = Device()
    page = 0x80000
    if op == "write-programmed":
        dev.load_flash(page, b"\x12\x34\x56\x78")
    before = bytes(dev.flash[page:page + mm.PAGE_SIZE])
    dev.store32(mm.NVMC_CONFIG, int(config))
    try:
        if op == "erase":
            dev.store32(mm.NVMC_ERASEPAGE, page)
        else:
            dev.store32(page, 0x0BADF00D)
    except Trap as t:
        assert bytes(dev.flash[page:page + mm.PAGE_SIZE]) == before
        return t.kind.value
    if op == "erase":
        assert dev.flash[page:page + mm.PAGE_SIZE] == b"\xff" * mm.PAGE_SIZE
        return "erased"
    assert dev.load32(page) == 0x0BADF00D
    return "written"


@pytest.mark.criterion(6)
def test_simulator_soundness(criterion):
    violations = 0
    for (config, op), want in NVMC_EXPECTED.items():
        violations += _nvmc_outcome(config, op) != want

    dev = provision(build_firmware(), UDS)
    boot(dev)
    for addr in range(mm.UDS_PAGE, mm.UDS_PAGE + mm.PAGE_SIZE):
        for access in (dev.load8, lambda a: dev.store8(a, 0)):
            try:
                access(addr)
                violations += 1
            except Trap as t:
                violations += t.kind is not FaultKind.ACCESS

    rng = random.Random(6)
    defined = 0
    for _ in range(100_000):
        word = rng.getrandbits(32)
        try:
            insn = isa.decode(word)
        except isa.UndefinedInstruction:
            continue
        defined += 1
        violations += isa.encode(insn) != word
    criterion["detail"] = (f"NVMC 9 cells, ACL 4096 addresses x2, decoder 10^5 words "
                           f"({defined} defined), {violations} violations")
    assert violations == 0


# 7 -----------------------------------------------------------------------------

IRQ_RATE = 1 / 64


@pytest.mark.criterion(7)
def test_interrupt_gadget_necessity(criterion):
    image = build_firmware()
    dev = provision(image, UDS)
    boot(dev)
    idle = dev.snapshot()
    gadgets = scan_gadgets(image)
    r2f, f2r = emit_utility_malware(image.credentials, image)
    bare = assemble_install_chain(gadgets, [r2f, f2r], image.frame, r2f.entry_address,
                                  interrupt_gadget=False).serialize()

    bare_failures = 0
    complete_ok = 0
    for seed in range(200):
        d = idle.snapshot()
        d.irq = InterruptSchedule(seed, IRQ_RATE)
        d.deliver_datagram(bare, run=False)
        d.run_until(lambda x: x.regs.pc == r2f.entry_address or x.trapped, 100_000)
        written = all(d.flash[b.dest:b.dest + len(b.data)] == b.data for b in (r2f, f2r))
        bare_failures += d.trapped or not written

        d = idle.snapshot()
        d.irq = InterruptSchedule(seed, IRQ_RATE)
        complete_ok += run_attack(d, image).succeeded
    criterion["detail"] = (f"without step 1: {bare_failures}/200 failed; "
                           f"complete chain: {complete_ok}/200 succeeded")
    assert bare_failures >= 1
    assert complete_ok == 200


# 8 -----------------------------------------------------------------------------

@pytest.mark.criterion(8)
def test_protocol_soundness(criterion):
    image = build_firmware()
    ident = derive_identity(UDS, image.riot_layer(), image.app_layer())
    dev = provision(image, UDS, label="dev0")
    boot(dev)
    verifier = Verifier(rng=random.Random(8).randbytes)
    verifier.enroll("dev0", ident.device_id.public)

    accepted_tamper = []
    probe = respond(dev, verifier.challenge("dev0")).encode()
    for pos in range(len(probe)):
        for mask in (0x01, 0x80, 0xFF):
            raw = bytearray(respond(dev, verifier.challenge("dev0")).encode())
            raw[pos] ^= mask
            if verifier.verify(bytes(raw)).accepted:
                accepted_tamper.append((pos, mask))

    nonce = verifier.challenge("dev0")
    env = respond(dev, nonce)
    first = verifier.verify(env.encode())
    replay = verifier.verify(env.encode())

    clean = 0
    rng = random.Random(88)
    for i in range(100):
        uds, label = rng.randbytes(32), f"node{i}"
        verifier.enroll(label, derive_identity(uds, image.riot_layer(), image.app_layer()).device_id.public)
        d = provision(image, uds, label=label)
        boot(d)
        clean += verifier.verify(respond(d, verifier.challenge(label))).accepted
    criterion["detail"] = (f"{len(probe)} byte positions x3 masks, {len(accepted_tamper)} accepted; "
                           f"replay {replay}; {clean}/100 clean round-trips")
    assert AttestationEnvelope.decode(probe).encode() == probe
    assert accepted_tamper == []
    assert first.accepted
    assert replay.reason is Reason.STALE_NONCE
    assert clean == 100


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
