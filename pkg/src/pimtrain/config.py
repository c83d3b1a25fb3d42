"""Machine configuration and power constants."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace


@dataclass(frozen=True)
class PowerTable:
    """Average power per component instance (W) and DRAM access energy."""
    pe: float = 0.155
    pmag: float = 3.16e-3
    vault_ctrl: float = 4.27e-3
    bus: float = 0.037
    ibuffer: float = 0.0102
    logic_die: float = 2.65
    dram_pj_per_bit: float = 3.7

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be nonnegative")

    def logic_parts(self, pes: int, vaults: int) -> float:
        """Sum of the listed per-instance parts for a machine of this size."""
        return pes * self.pe + vaults * (self.pmag + self.vault_ctrl) + self.bus + self.ibuffer


@dataclass(frozen=True)
class MachineConfig:
    name: str = "hmc1"
    vaults: int = 16
    pes: int = 15
    lanes: int = 32
    clock_hz: float = 2.5e9
    vault_bw: float = 10e9  # bytes/s per vault
    bus_bw: float = 10e9
    bus_stages: int = 4
    handshake: int = 3  # REQ, ACK, SEND
    vault_latency: int = 16
    in_buf: int = 16384  # each of BUF-In1 / BUF-In2
    out_buf: int = 8192
    vault_capacity: int = 256 << 20
    ibuffer: int = 16384
    deadlock_budget: int = 10_000_000
    sr_variant: str = "lo"
    power: PowerTable = field(default_factory=PowerTable)

    def __post_init__(self):
        if self.pes != self.vaults - 1:
            raise ValueError("one vault is the common vault: pes must equal vaults - 1")
        if self.bus_bw != self.vault_bw:
            raise ValueError("bus bandwidth must equal single-vault bandwidth")
        if self.sr_variant not in ("lo", "full"):
            raise ValueError("sr_variant must be lo or full")

    @property
    def common_vault(self) -> int:
        return self.pes

    @property
    def bytes_per_cycle(self) -> int:
        return int(round(self.vault_bw / self.clock_hz))

    def peak_ops(self, bits: int) -> float:
        pairs = 2 if bits == 16 else 1
        return self.clock_hz * self.pes * self.lanes * pairs * 2

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


PRESETS = {
    "hmc1": MachineConfig(),
    "hmc2": MachineConfig(name="hmc2", vaults=32, pes=31),
}


def load_machine(spec: str) -> MachineConfig:
    """A preset name or a JSON file of MachineConfig fields (missing ones default)."""
    if spec in PRESETS:
        return PRESETS[spec]
    with open(spec) as f:
        raw = json.load(f)
    known = {f.name for f in fields(MachineConfig)}
    extra = set(raw) - known
    if extra:
        raise ValueError(f"unknown machine fields: {', '.join(sorted(extra))}")
    power = raw.pop("power", {})
    extra = set(power) - {f.name for f in fields(PowerTable)}
    if extra:
        raise ValueError(f"unknown power fields: {', '.join(sorted(extra))}")
    return replace(MachineConfig(), power=PowerTable(**power), **raw)
