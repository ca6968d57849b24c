import struct

import pytest
from hypothesis import given, settings, strategies as st

from dicelab import isa
from dicelab import memmap as mm
from dicelab.dice import CERT_LEN, AliasCertificate, KeyPair, derive_identity
from dicelab.errors import BuildError
from dicelab.exploit import GadgetKind, scan_gadgets
from dicelab.firmware import (CredentialLayout, FirmwareConfig, GadgetStyle, StackFrame, boot,
                              build_firmware, credentials, init_state_ok, load_sections, provision,
                              read_layout)
from dicelab.mcu import Device, FaultKind, RunMode, StopReason, Trap

UDS = bytes(range(100, 132))

# Reference boot of the baseline build, recorded once and pinned: instructions
# from reset to the first wfe of the main loop.
BASELINE_BOOT_INSTRUCTIONS = 83

# Debugger-style dump of the handler frame from a reference run, taken before
# any exploit code existed: distance from the local buffer to the saved return
# address.
REFERENCE_RETURN_OFFSET = 72


@pytest.fixture(scope="module")
def image():
    return build_firmware()


@pytest.fixture
def device(image):
    dev = provision(image, UDS)
    assert boot(dev) is StopReason.HALTED
    return dev


def test_boot_reaches_main_loop_in_pinned_budget(image):
    dev = provision(image, UDS)
    boot(dev)
    assert dev.halted
    assert dev.steps == BASELINE_BOOT_INSTRUCTIONS


def test_ram_credentials_verify(image, device):
    ident = derive_identity(UDS, image.riot_layer(), image.app_layer())
    raw = credentials(device)
    key, cert = raw[:32], AliasCertificate.decode(raw[32:32 + CERT_LEN])
    assert cert.verify(ident.device_id.public)
    assert KeyPair.from_seed(key).public == cert.subject_public_key
    assert cert.firmware_measurement == ident.app_measurement
    assert init_state_ok(device)


def test_riot_wipes_layer_secret(image, device):
    assert device.peek_ram(mm.CDI_RAM, 32) == bytes(32)
    ident = derive_identity(UDS, image.riot_layer(), image.app_layer())
    ram = bytes(device.ram)
    assert UDS not in ram
    assert ident.device_id.private not in ram


def test_app_change_moves_alias_not_device_id(image):
    other = build_firmware(FirmwareConfig(app_data=b"\x01\x02\x03\x04"))
    a, b = provision(image, UDS), provision(other, UDS)
    boot(a)
    boot(b)
    ca = AliasCertificate.decode(credentials(a)[32:32 + CERT_LEN])
    cb = AliasCertificate.decode(credentials(b)[32:32 + CERT_LEN])
    assert ca.issuer == cb.issuer
    assert ca.subject_public_key != cb.subject_public_key


def test_version_participates_in_measurement():
    a, b = build_firmware(FirmwareConfig(version=1)), build_firmware(FirmwareConfig(version=2))
    assert a.riot_layer() == b.riot_layer()
    assert a.app_layer() != b.app_layer()


def test_uds_unreadable_after_boot(device):
    stub = isa.assemble(f"""
        movw r0, #lo({mm.UDS_PAGE})
        movt r0, #hi({mm.UDS_PAGE})
        ldr r1, [r0, #0]
        wfe
    """, origin=0x80000)
    device.load_flash(0x80000, stub.blob(0x80000))
    device.regs.r[15] = 0x80000
    device.mode = RunMode.RUNNING
    assert device.run_until(fuel=10) is StopReason.TRAPPED
    assert device.trap.kind is FaultKind.ACCESS
    assert device.trap.addr == mm.UDS_PAGE


def test_protected_region_is_write_locked(device):
    device.store32(mm.NVMC_CONFIG, mm.NVMC_EEN)
    with pytest.raises(Trap) as exc:
        device.store32(mm.NVMC_ERASEPAGE, mm.RIOT_BASE)
    assert exc.value.kind is FaultKind.ACCESS
    assert device.flash[mm.RIOT_BASE:mm.RIOT_BASE + 4] != b"\xff" * 4


def test_boot_determinism(image):
    a, b = provision(image, UDS), provision(build_firmware(), UDS)
    boot(a)
    boot(b)
    assert credentials(a) == credentials(b)
    assert a.ram == b.ram and a.regs == b.regs


# -- the vulnerable handler ------------------------------------------------------

def _return_address_slot(device, symbols) -> int:
    """Run a benign datagram under a trace and dump the frame at the copy loop."""
    lines = []
    device.trace = lines.append
    device.deliver_datagram(b"", run=False)
    device.run_until(lambda d: d.regs.pc == symbols["copy_words"], fuel=1000)
    device.trace = None
    assert any("push" in line for line in lines)
    buf = device.regs.sp
    ret = symbols["main_loop"] + 8  # instruction after "bl udp_handler"
    for off in range(0, 128, 4):
        if struct.unpack("<I", device.peek_ram(buf + off, 4))[0] == ret:
            return off
    raise AssertionError("return address not found on stack")


def test_stack_frame_dump_matches_descriptor(image, device):
    off = _return_address_slot(device, image.symbols)
    assert off == REFERENCE_RETURN_OFFSET
    assert image.frame.padding == off == StackFrame().return_slot


def test_short_payload_returns_normally(image, device):
    device.deliver_datagram(b"x" * 16)
    assert device.halted and init_state_ok(device)


def test_exact_buffer_payload_keeps_return_address(image, device):
    device.deliver_datagram(b"B" * 64)
    assert device.halted
    assert device.regs.sp == mm.STACK_TOP - 1536


def test_overflow_transfers_control(image, device):
    target = image.symbols["app_fatal"]
    device.deliver_datagram(b"A" * 72 + struct.pack("<I", target), run=False)
    device.run_until(lambda d: d.regs.pc == target, fuel=1000)
    assert device.regs.pc == target


def test_bounded_handler_ignores_overflow():
    img = build_firmware(FirmwareConfig(bounded_handler=True))
    dev = provision(img, UDS)
    boot(dev)
    dev.deliver_datagram(b"A" * 72 + struct.pack("<I", img.symbols["app_fatal"]))
    assert dev.halted


@settings(max_examples=40, deadline=None)
@given(st.binary(max_size=63))
def test_benign_traffic_safety(payload):
    image = build_firmware()
    dev = provision(image, UDS)
    boot(dev)
    dev.deliver_datagram(b"")  # warm the handler frame
    ram, regs = bytes(dev.ram), list(dev.regs.r)
    buf = mm.STACK_TOP - 1536 - 12 - 64
    dev.deliver_datagram(payload)
    assert dev.halted
    allowed = set(range(buf, buf + 64)) | set(range(mm.RX_LEN, mm.RX_BUF + mm.RX_BUF_LEN))
    changed = {mm.RAM_BASE + i for i, (a, b) in enumerate(zip(ram, dev.ram)) if a != b}
    assert changed <= allowed
    assert dev.regs.r[4:12] == regs[4:12]
    assert dev.regs.r[13:16] == regs[13:16]


# -- gadgets and layout ----------------------------------------------------------

def test_planted_gadgets_match_manifest(image):
    gadgets = scan_gadgets(image)
    irq = [g for g in gadgets if g.kind is GadgetKind.INTERRUPT]
    store = [g for g in gadgets if g.kind is GadgetKind.STORE]
    assert [g.address for g in irq] == [image.symbols["gadget_irq"]]
    assert [g.address for g in store] == [image.symbols["gadget_store"]]
    assert irq[0].text() == "cpsid i; pop {r4, pc}"
    assert store[0].text() == "str r5, [r4, #0]; pop {r4, r5, r6, pc}"
    assert (irq[0].dummy_slots, store[0].dummy_slots) == (1, 1)


def test_ideal_and_minimal_gadget_builds():
    ideal = scan_gadgets(build_firmware(FirmwareConfig(gadgets=GadgetStyle.IDEAL)))
    assert {g.text() for g in ideal} == {"cpsid i; pop {r4, r5, pc}",
                                         "str r4, [r5, #0]; pop {r4, r5, pc}"}
    minimal = scan_gadgets(build_firmware(FirmwareConfig(gadgets=GadgetStyle.MINIMAL)))
    assert "cpsid i; pop {pc}" in {g.text() for g in minimal}


def test_manifest_roundtrip(image, tmp_path):
    image.write(tmp_path)
    sections, symbols = read_layout(tmp_path)
    assert symbols == image.symbols
    dev = Device()
    load_sections(dev, sections)
    assert bytes(dev.flash) == image.flash()
    text = (tmp_path / "layout.txt").read_text()
    assert "sched_init 0x00034000" in text


def test_secure_boot_build_signs_layers():
    img = build_firmware(FirmwareConfig(secure_boot=True, vendor_seed=bytes(32)))
    sig = img.section("signatures")
    assert sig.base == mm.SIG_BASE
    assert sig.data[0x80:0xA0] == img.vendor_public
    dev = provision(img, UDS)
    assert boot(dev) is StopReason.HALTED


@pytest.mark.parametrize("cfg", [
    FirmwareConfig(secure_boot=True),
    FirmwareConfig(awdt_period=100),
    FirmwareConfig(version=-1),
    FirmwareConfig(counter_bytes=0),
    FirmwareConfig(app_data=bytes(mm.APP_END - mm.APP_DATA + 1)),
])
def test_build_errors(cfg):
    with pytest.raises(BuildError):
        build_firmware(cfg)


def test_credential_layout_validation():
    with pytest.raises(ValueError):
        CredentialLayout(alias_private_ram_addr=0x1000)
    with pytest.raises(ValueError):
        CredentialLayout(alias_cert_ram_addr=mm.ALIAS_KEY_RAM + 64)
    assert CredentialLayout().combined_length == 240


def test_provision_rejects_short_uds(image):
    with pytest.raises(ValueError):
        provision(image, bytes(31))
