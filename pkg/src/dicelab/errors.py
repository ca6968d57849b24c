class DiceLabError(Exception):
    pass


class InvalidLayer(DiceLabError):
    pass


class CryptoError(DiceLabError):
    pass


class BuildError(DiceLabError):
    pass


class AssemblerError(DiceLabError):
    pass


class FuelExhausted(DiceLabError):
    def __init__(self, steps: int):
        super().__init__(f"fuel exhausted after {steps} instructions")
        self.steps = steps


class Rejected(DiceLabError):
    """Device is not waiting for a datagram."""


class GadgetsMissing(DiceLabError):
    pass


class NeedsSplit(DiceLabError):
    def __init__(self, length: int, mtu: int, parts: int):
        super().__init__(f"chain of {length} bytes exceeds MTU {mtu}; needs {parts} parts")
        self.length = length
        self.mtu = mtu
        self.parts = parts


class PatchUnsafe(DiceLabError):
    pass


class Unenrolled(DiceLabError):
    pass


class DeviceUnavailable(DiceLabError):
    pass


class KeyUnavailable(DeviceUnavailable):
    """The alias key region holds no key (zeroized)."""


class PayloadTooLarge(DiceLabError):
    pass


class CounterExhausted(DiceLabError):
    pass


class ScenarioError(DiceLabError):
    pass
