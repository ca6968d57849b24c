# Walk through the credential-replay attack on one simulated device, cell by cell.
# Run with: python3 demos/toctou_walkthrough.py

from dicelab import memmap as mm
from dicelab.dice import CERT_LEN, AliasCertificate, derive_identity
from dicelab.exploit import emit_utility_malware, run_attack, scan_gadgets
from dicelab.firmware import boot, build_firmware, credentials, provision
from dicelab.protocol import Verifier, respond

#%% Build the vulnerable firmware and provision one device
uds = bytes(range(32))
image = build_firmware()
device = provision(image, uds)
print("boot:", boot(device).name, "after", device.steps, "instructions")

#%% Enrollment: the backend learns the DeviceID public key at the factory
ident = derive_identity(uds, image.riot_layer(), image.app_layer())
verifier = Verifier()
verifier.enroll("dev0", ident.device_id.public)
print("device id:", ident.device_id.public.hex()[:32], "...")

#%% Clean attestation
env = respond(device, verifier.challenge("dev0"))
print("attestation:", verifier.verify(env))

#%% What the attacker has to work with
for g in scan_gadgets(image):
    print(f"gadget {g.kind.name:9} at {g.address:#07x}: {g.text()}")
r2f, f2r = emit_utility_malware(image.credentials, image)
print("utility malware:", len(r2f.data), "+", len(f2r.data), "bytes")

#%% Run all five steps
report = run_attack(device, image)
for line in report.lines():
    print(" ", line)

#%% After a reboot the RAM holds the replayed credentials, not fresh ones
device.reset()
boot(device)
stash = bytes(device.flash[mm.PERSIST_PAGE:mm.PERSIST_PAGE + 32 + CERT_LEN])
print("RAM matches persisted copy:", credentials(device)[:32 + CERT_LEN] == stash)
cert = AliasCertificate.decode(stash[32:])
print("certificate still verifies under DeviceID:", cert.verify(ident.device_id.public))

#%% And the verifier cannot tell
env = respond(device, verifier.challenge("dev0"))
print("attestation of the compromised device:", verifier.verify(env))
