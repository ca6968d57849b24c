"""End-to-end scenarios: build, provision, enroll, attest, attack, attest again.

A scenario is fully determined by its fields and seed. The seed drives the
UDS, the interrupt schedule and every backend nonce, so reports are
reproducible byte for byte.

Scenario files are ``key = value`` lines (``#`` comments)::

    name = my-run
    extends = additional-input-attack   # optional built-in to start from
    countermeasure = additional-input   # or none
    input_source = counter
    attack = yes
    seed = 7
    expect_attack = succeeds            # succeeds | blocked
    expect_attestation = reject         # accept | reject
"""
from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import memmap as mm
from .countermeasures import (
    AwdtIssuer,
    CountermeasureConfig,
    InputSource,
    Kind,
    apply_firmware_update,
)
from .dice import CERT_LEN, derive_identity, measure
from .errors import DeviceUnavailable, ScenarioError
from .exploit import AttackReport, run_attack
from .firmware import FirmwareConfig, build_firmware, provision
from .mcu import InterruptSchedule
from .protocol import (
    DeviceEndpoint,
    InProcTransport,
    Mode,
    Reason,
    UdpTransport,
    Verdict,
    Verifier,
    VerifierPolicy,
    _sign,
    attest_over,
    reject,
)

LABEL = "dev0"
EXPECT_ATTACK = ("succeeds", "blocked")
EXPECT_ATTESTATION = ("accept", "reject")


@dataclass(frozen=True)
class Scenario:
    name: str
    countermeasure: CountermeasureConfig | None = None
    attack: bool = True
    seed: int = 1
    transport: str = "inproc"
    irq_rate: float = 1 / 256
    expect_attack: str | None = None
    expect_attestation: str | None = None

    def __post_init__(self):
        if self.transport not in ("inproc", "udp"):
            raise ScenarioError(f"unknown transport {self.transport!r}")
        if self.expect_attack not in (None, *EXPECT_ATTACK):
            raise ScenarioError(f"bad expect_attack {self.expect_attack!r}")
        if self.expect_attestation not in (None, *EXPECT_ATTESTATION):
            raise ScenarioError(f"bad expect_attestation {self.expect_attestation!r}")
        if not 0 <= self.seed < 1 << 64:
            raise ScenarioError("seed must be an unsigned 64-bit integer")

    @property
    def kind(self) -> Kind | None:
        return self.countermeasure.kind if self.countermeasure else None


def _cm(kind: Kind, **kw) -> CountermeasureConfig:
    return CountermeasureConfig(kind, **kw)


BUILTIN: dict[str, Scenario] = {s.name: s for s in [
    Scenario("clean", attack=False, expect_attestation="accept"),
    Scenario("baseline-attack", expect_attack="succeeds", expect_attestation="accept"),
    Scenario("firmware-update-attack", _cm(Kind.FIRMWARE_UPDATE),
             expect_attack="blocked", expect_attestation="accept"),
    Scenario("firmware-update-nofix-attack", _cm(Kind.FIRMWARE_UPDATE, fix_bug=False),
             expect_attack="succeeds", expect_attestation="accept"),
    Scenario("secure-boot-awdt-attack", _cm(Kind.SECURE_BOOT_AWDT),
             expect_attack="blocked", expect_attestation="reject"),
    Scenario("additional-input-attack", _cm(Kind.ADDITIONAL_INPUT),
             expect_attack="succeeds", expect_attestation="reject"),
    Scenario("additional-input-counter-attack",
             _cm(Kind.ADDITIONAL_INPUT, input_source=InputSource.COUNTER),
             expect_attack="succeeds", expect_attestation="reject"),
    Scenario("no-key-exposure-attack", _cm(Kind.NO_KEY_EXPOSURE),
             expect_attack="succeeds", expect_attestation="reject"),
    Scenario("memory-safe-attack", _cm(Kind.MEMORY_SAFE),
             expect_attack="blocked", expect_attestation="accept"),
]}
BUILTIN["baseline"] = replace(BUILTIN["baseline-attack"], name="baseline")

MATRIX = ["baseline-attack", "firmware-update-attack", "secure-boot-awdt-attack",
          "additional-input-attack", "no-key-exposure-attack", "memory-safe-attack"]


# -- scenario files --------------------------------------------------------------

_BOOL = {"yes": True, "true": True, "1": True, "no": False, "false": False, "0": False}
_CM_KEYS = {"version": int, "fix_bug": "bool", "awdt_period": int, "counter_bytes": int,
            "input_source": InputSource}


def parse_scenario(text: str, default_name: str = "custom") -> Scenario:
    pairs: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ScenarioError(f"line {n}: expected 'key = value'")
        pairs[key.strip()] = value.strip()

    base = Scenario(default_name)
    if "extends" in pairs:
        name = pairs.pop("extends")
        if name not in BUILTIN:
            raise ScenarioError(f"unknown base scenario {name!r}")
        base = BUILTIN[name]
    kw: dict = {"name": default_name}
    cm_kw: dict = {}
    kind = base.kind
    try:
        for key, value in pairs.items():
            if key == "name":
                kw["name"] = value
            elif key == "countermeasure":
                kind = None if value == "none" else Kind(value)
            elif key == "attack":
                kw["attack"] = _BOOL[value.lower()]
            elif key == "seed":
                kw["seed"] = int(value, 0)
            elif key == "transport":
                kw["transport"] = value
            elif key == "irq_rate":
                kw["irq_rate"] = float(value)
            elif key in ("expect_attack", "expect_attestation"):
                kw[key] = None if value == "none" else value
            elif key in _CM_KEYS:
                conv = _CM_KEYS[key]
                cm_kw[key] = _BOOL[value.lower()] if conv == "bool" else conv(value)
            else:
                raise ScenarioError(f"unknown key {key!r}")
    except (KeyError, ValueError) as exc:
        raise ScenarioError(f"bad value: {exc}") from None
    if kind is None:
        if cm_kw:
            raise ScenarioError("countermeasure parameters given without a countermeasure")
        kw["countermeasure"] = None
    else:
        start = base.countermeasure if base.kind is kind else CountermeasureConfig(kind)
        kw["countermeasure"] = replace(start, **cm_kw)
    return replace(base, **kw)


def load_scenario(ref: str) -> Scenario:
    """A built-in name or a path to a scenario file."""
    if ref in BUILTIN:
        return BUILTIN[ref]
    path = Path(ref)
    if not path.is_file():
        raise ScenarioError(f"no built-in scenario or file named {ref!r}")
    return parse_scenario(path.read_text(), path.stem)


# -- the lab -------------------------------------------------------------------

class Lab:
    """One device, one backend, one transport."""

    def __init__(self, scenario: Scenario, trace=None):
        self.scenario = scenario
        self.rng = random.Random(scenario.seed)
        self.uds = self.rng.randbytes(32)
        cm = scenario.countermeasure
        self.kind = cm.kind if cm else None
        self.image = build_firmware(cm.firmware_config() if cm else FirmwareConfig())
        self.awdt = None
        if self.kind is Kind.SECURE_BOOT_AWDT:
            self.awdt = AwdtIssuer(self.rng.randbytes(32), LABEL)
        self.device = provision(self.image, self.uds, label=LABEL,
                                irq=InterruptSchedule(scenario.seed, scenario.irq_rate),
                                awdt_backend_key=self.awdt.public if self.awdt else None)
        self.device.trace = trace
        mode = Mode.BASELINE
        if self.kind is Kind.ADDITIONAL_INPUT:
            mode = Mode.BOOT_NONCE if cm.input_source is InputSource.NONCE else Mode.COUNTER
        self.verifier = Verifier(VerifierPolicy(mode=mode), rng=self.rng.randbytes)
        self.transport = UdpTransport() if scenario.transport == "udp" else InProcTransport()
        self.endpoint = DeviceEndpoint(self.device, self.transport)
        self.captured: list[bytes] = []  # envelopes an eavesdropper recorded

    def close(self):
        self.transport.close()

    # factory enrollment: the DeviceID public key is read out at manufacture
    def enroll(self) -> bytes:
        ident = derive_identity(self.uds, self.image.riot_layer(), self.image.app_layer())
        pinned = None
        if self.kind is Kind.NO_KEY_EXPOSURE:
            pinned = ident.app_measurement
        self.verifier.enroll(LABEL, ident.device_id.public, pinned)
        return ident.device_id.public

    def boot(self, fuel: int = 200_000) -> str:
        start = self.device.steps
        self.device.run_until(fuel=fuel)
        if self.awdt is not None and self.device.halted:
            self.device.feed_awdt(self.awdt.token())
        self.captured += self.device.outbox
        self.device.outbox.clear()
        if self.device.trapped:
            return f"trapped ({self.device.trap})"
        return f"main loop after {self.device.steps - start} instructions"

    def reboot(self) -> str:
        self.device.reset()
        return self.boot()

    def attest(self) -> Verdict:
        """Attestation as the deployed backend performs it for this variant."""
        if self.device.trapped:
            return reject(Reason.DEVICE_UNAVAILABLE)
        if self.kind is Kind.ADDITIONAL_INPUT:
            if self.verifier.policy.mode is Mode.BOOT_NONCE:
                nonce = self.verifier.issue_boot_nonce(LABEL)
                self.device.retained[:] = list(struct.unpack("<4I", nonce))
            else:
                self.verifier.require_reboot(LABEL)
            self.reboot()
        elif self.kind is Kind.NO_KEY_EXPOSURE:
            # a fresh attestation needs a fresh boot
            before = len(self.captured)
            self.reboot()
            if len(self.captured) == before:
                return reject(Reason.DEVICE_UNAVAILABLE)
            return self.verifier.verify_device_initiated(self.captured[-1])
        if self.device.trapped:
            return reject(Reason.DEVICE_UNAVAILABLE)
        return attest_over(self.transport, self.verifier, self.endpoint, LABEL)

    def attack(self) -> AttackReport:
        if self.awdt is not None:
            self.device.feed_awdt(self.awdt.token())
        return run_attack(self.device, self.image, deliver=self.endpoint.deliver)

    def stale_replay(self) -> Verdict:
        """Attacker answers a fresh challenge with the credentials parked in flash."""
        stash = bytes(self.device.flash[mm.PERSIST_PAGE:mm.PERSIST_PAGE + 32 + CERT_LEN])
        nonce = self.verifier.challenge(LABEL)
        try:
            env = _sign(stash[:32], stash[32:], LABEL, nonce, 0)
        except DeviceUnavailable:
            return reject(Reason.BAD_SIGNATURE)
        return self.verifier.verify(env.encode())

    def flash_diff(self) -> list[int]:
        from .exploit import flash_diff_pages

        return flash_diff_pages(self.image, self.device)


# -- running ---------------------------------------------------------------------

@dataclass
class ScenarioResult:
    scenario: Scenario
    lines: list[str] = field(default_factory=list)
    attack: AttackReport | None = None
    final: Verdict | None = None
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def attack_outcome(self) -> str:
        if self.attack is None:
            return "not run"
        if self.attack.succeeded:
            return "succeeds"
        return f"blocked at step {self.attack.blocked_at}"

    def report(self) -> str:
        return "\n".join(self.lines) + "\n"

    def as_dict(self) -> dict:
        return {
            "scenario": self.scenario.name,
            "seed": self.scenario.seed,
            "attack": self.attack_outcome,
            "steps": [s.ok for s in self.attack.steps] if self.attack else [],
            "flash_diff": [f"{p:#07x}" for p in self.attack.flash_diff_pages] if self.attack else [],
            "sizes": dict(sorted(self.attack.sizes.items())) if self.attack else {},
            "attestation": str(self.final) if self.final else None,
            "failures": list(self.failures),
            "result": "PASS" if self.ok else "FAIL",
        }


def run_scenario(scenario: Scenario, trace=None) -> ScenarioResult:
    res = ScenarioResult(scenario)
    out = res.lines.append
    cm = scenario.countermeasure
    out("dicelab scenario report")
    out(f"scenario: {scenario.name}")
    out(f"seed: {scenario.seed}")
    out(f"countermeasure: {cm.kind.value if cm else 'none'}")
    out(f"transport: {scenario.transport}")
    out(f"attack: {'yes' if scenario.attack else 'no'}")
    lab = Lab(scenario, trace)
    try:
        out(f"firmware: version {lab.image.version}, app measurement "
            f"{measure(lab.image.app_layer()).hex()[:16]}")
        out(f"phase boot: {lab.boot()}")
        out(f"phase enroll: device id {lab.enroll().hex()[:16]}")
        out(f"phase attest (before attack): {lab.attest()}")
        if scenario.attack:
            rep = lab.attack()
            res.attack = rep
            for line in rep.lines():
                out(f"  {line}")
            lab.boot()  # settle: feed the watchdog, collect boot envelopes
            verdict = lab.attest()
            out(f"phase attest (after attack): {verdict}")
            if lab.kind is Kind.FIRMWARE_UPDATE:
                verdict = _update_phase(lab, res, out)
            elif lab.kind is Kind.NO_KEY_EXPOSURE and lab.captured:
                replay = lab.verifier.verify_device_initiated(lab.captured[0])
                out(f"check replay of first boot envelope: {replay}")
                if replay.accepted:
                    res.failures.append("captured boot envelope replayed successfully")
            res.final = verdict
        else:
            res.final = lab.attest()
            diff = lab.flash_diff()
            out("flash pages changed: " + (" ".join(f"{p:#07x}" for p in diff) or "none"))
        out(f"final attestation: {res.final}")
    finally:
        lab.close()
    _check_expectations(scenario, res, out)
    out(f"result: {'PASS' if res.ok else 'FAIL'}")
    return res


def _update_phase(lab: Lab, res: ScenarioResult, out) -> Verdict:
    cm = lab.scenario.countermeasure
    fixed = build_firmware(cm.update_config())
    apply_firmware_update(lab.device, fixed)
    lab.image = fixed
    out(f"phase update: version {fixed.version}, bug fixed: {'yes' if cm.fix_bug else 'no'}")
    out(f"phase boot: {lab.boot()}")
    lab.verifier.pin_measurement(LABEL, measure(fixed.app_layer()))
    replay = lab.stale_replay()
    out(f"check stale credential replay: {replay}")
    if replay.accepted:
        res.failures.append("stale credentials accepted after update")
    rep = lab.attack()
    res.attack = rep
    out("phase re-attack:")
    for line in rep.lines():
        out(f"  {line}")
    lab.boot()
    verdict = lab.attest()
    out(f"phase attest (after re-attack): {verdict}")
    return verdict


def _check_expectations(scenario: Scenario, res: ScenarioResult, out) -> None:
    if scenario.expect_attack is not None:
        got = "not run" if res.attack is None else (
            "succeeds" if res.attack.succeeded else "blocked")
        met = got == scenario.expect_attack
        out(f"expect attack {scenario.expect_attack}: {'met' if met else 'VIOLATED (' + got + ')'}")
        if not met:
            res.failures.append(f"attack expected {scenario.expect_attack}, got {got}")
    if scenario.expect_attestation is not None:
        got = "accept" if res.final and res.final.accepted else "reject"
        met = got == scenario.expect_attestation
        out(f"expect attestation {scenario.expect_attestation}: "
            f"{'met' if met else 'VIOLATED (' + got + ')'}")
        if not met:
            res.failures.append(f"attestation expected {scenario.expect_attestation}, got {got}")


# -- matrix --------------------------------------------------------------------

@dataclass
class MatrixRow:
    name: str
    countermeasure: str
    attack: str
    attestation: str
    ok: bool
    failures: list[str]


def run_matrix(scenarios: list[Scenario]) -> list[MatrixRow]:
    rows = []
    for sc in scenarios:
        res = run_scenario(sc)
        rows.append(MatrixRow(sc.name, sc.kind.value if sc.kind else "none",
                              res.attack_outcome, str(res.final), res.ok, res.failures))
    return rows


def format_matrix(rows: list[MatrixRow]) -> str:
    header = ("countermeasure", "attack", "attestation", "expectations")
    table = [header] + [(r.countermeasure, r.attack, r.attestation,
                         "ok" if r.ok else "FAILED: " + "; ".join(r.failures)) for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"

