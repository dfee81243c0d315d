"""Deterministic simulation of the two-processor secure boot and its defeat.

The machine models what the attack actually exercises: a physical
address space with the eight documented ARM9 regions plus simulated
boot-ROM and ARM11 work-RAM regions, write-once lock registers that
disable each ROM's protected half (and, by the same write, enable that
processor's FCRAM), a DMA engine programmed through a memory-mapped
register window, a data-abort vector, and two scripted processors.

Processors are not instruction-level emulators.  Handler and hook
payloads are byte blobs carrying an 8-byte tag plus little-endian u32
fields; when a processor dereferences a function-pointer cell (or the
data-abort vector) that points at a tagged blob, the simulator runs the
corresponding built-in script.  "Overwrite a function pointer" therefore
means exactly that: write a blob's address into the cell, by any copy
path the machine allows.

Section loads drive the attack surface: a section whose destination is
the DMA register window is decoded as copy requests and executed
immediately (before the locks engage), a section whose destination is
unmapped (NULL included) raises a data abort through the current vector,
and destination blacklisting is a pluggable policy: the shipped flaw
blacklists only the boot-ROM data region, the hardened variant also
refuses I/O registers, the exception-vector page, and the ROMs.

Everything is a pure function of the construction seed, the image bytes
and the declared inputs; event logs and reports are byte-reproducible.
All multi-byte values in simulated memory are little-endian.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from pathlib import Path
from typing import Optional

from . import firm as firmmod
from .firm import CopyMethod, FirmImage, FirmParseError, NullCipher, SectionHeader
from .modmath import Console, KeyRegistry, SignatureType
from .prng import ByteStream, derive_seed
from .sigparser import ParseOutcome, ParserConfig, ParserMode, StackModel, Verdict

__all__ = [
    "RegionKind",
    "Region",
    "MEMORY_REGIONS",
    "BlacklistPolicy",
    "BootSource",
    "BootOutcome",
    "BootInputs",
    "LockRegister",
    "NdmaRequest",
    "Event",
    "BootReport",
    "Machine",
    "select_boot_source",
    "check_blacklist",
    "load_section",
    "run_boot",
    "run_exploit_chain",
    "run_ntr_install_scenario",
    "build_exploit_image",
    "NTR_BOOT_COMBO",
    "DUMP_COMBO",
]

# --- address-space constants -------------------------------------------

ROM_SIZE = 0x10000
PROTECTED_HALF = 0x8000
BOOT9_ROM_BASE = 0xFFFF0000            # shares the span of the blacklisted data row
BOOT11_ROM_BASE = 0x00010000
ARM11_WRAM_BASE = 0x1FF80000
ARM11_WRAM_SIZE = 0x80000

NDMA_WINDOW_BASE = 0x10002000
NDMA_WINDOW_SIZE = 0x100
NDMA_RECORD_SIZE = 0x10

VECTOR_PAGE_BASE = 0x07FF8000          # ARM9 vector page at the ITCM base
DATA_ABORT_VECTOR9 = VECTOR_PAGE_BASE + 0x10

BOOT9_FPTR_A = 0xFFF00020              # watched function-pointer cells (DTCM)
BOOT9_FPTR_B = 0xFFF00024
BOOT11_FPTR = ARM11_WRAM_BASE + 0x40   # watched cell in ARM11 work RAM
CROSS_FLAG = ARM11_WRAM_BASE + 0x44
SIG_11TO9 = ARM11_WRAM_BASE + 0x48
SIG_9TO11 = ARM11_WRAM_BASE + 0x4C
CHAIN_FLAG = ARM11_WRAM_BASE + 0x50

AXI_STAGING = ARM11_WRAM_BASE + 0x20000
ARM9_SAFE_AREA = 0x08001000
ARM9_SCRATCH = 0x08004000
EXFIL_BOOT11 = 0x08010000
EXFIL_BOOT9 = 0x08018000

NTR_BOOT_COMBO = frozenset({"START", "SELECT", "X"})
DUMP_COMBO = frozenset({"L", "R", "START"})  # simulator convention

WATCHDOG_LIMIT = 10**6

SD_BOOT9_NAME = "boot9_protected.bin"
SD_BOOT11_NAME = "boot11_protected.bin"
SD_CHAIN_NAME = "boot.firm"

# Scripted-blob tags (8 bytes each).
TAG_ABORT_HANDLER = b"DABTHNDL"   # fields: hook_a_addr, hook_b_addr
TAG_HOOK1 = b"B9HOOK1\x00"        # fields: boot11_hook_addr
TAG_HOOK2 = b"B9HOOK2\x00"        # fields: staging, boot11_dst, boot9_dst
TAG_HOOK11 = b"B11HOOK\x00"       # fields: staging
TAG_STAGE2_ARM9 = b"STAGE2A9"     # fields: boot9_copy_addr, boot11_copy_addr
TAG_STAGE2_INSTALL = b"STAGE2IN"  # fields: nand_len, sd_len; then two payloads
TAG_STAGE2_ARM11 = b"STAGE211"    # no fields


class RegionKind(Enum):
    FCRAM = "fcram"
    IO_REGISTERS = "io"
    ARM9_MEM = "arm9mem"
    DTCM = "dtcm"
    ITCM = "itcm"
    BOOT9_DATA = "boot9data"
    AXI_WRAM = "axiwram"
    BOOT_ROM9 = "bootrom9"
    BOOT_ROM11 = "bootrom11"
    ARM11_WRAM = "arm11wram"


@dataclass(frozen=True)
class Region:
    rid: int
    base: int
    size: int
    kind: RegionKind
    store: str
    store_offset: int = 0
    writable: bool = True

    @property
    def end(self) -> int:
        return self.base + self.size

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.end

    def overlaps(self, addr: int, size: int) -> bool:
        return addr < self.end and addr + size > self.base


# The eight documented ARM9 rows (ids 0-7) plus the simulator-defined
# ROM and work-RAM rows.  Row 6 shares the boot-ROM span and backing.
MEMORY_REGIONS: tuple[Region, ...] = (
    Region(0, 0x20000000, 0x08000000, RegionKind.FCRAM, "fcram"),
    Region(1, 0x10000000, 0x10000000, RegionKind.IO_REGISTERS, "io"),
    Region(2, 0x08000000, 0x00100000, RegionKind.ARM9_MEM, "arm9"),
    Region(3, 0x08000000, 0x00000400, RegionKind.ARM9_MEM, "arm9"),
    Region(4, 0xFFF00000, 0x00004000, RegionKind.DTCM, "dtcm"),
    Region(5, 0x07FF8000, 0x00008000, RegionKind.ITCM, "itcm"),
    Region(6, 0xFFFF0000, 0x00010000, RegionKind.BOOT9_DATA, "boot9rom", writable=False),
    Region(7, 0x1FFFE000, 0x00000800, RegionKind.AXI_WRAM, "arm11wram", store_offset=0x7E000),
    Region(8, BOOT9_ROM_BASE, ROM_SIZE, RegionKind.BOOT_ROM9, "boot9rom", writable=False),
    Region(9, BOOT11_ROM_BASE, ROM_SIZE, RegionKind.BOOT_ROM11, "boot11rom", writable=False),
    Region(10, ARM11_WRAM_BASE, ARM11_WRAM_SIZE, RegionKind.ARM11_WRAM, "arm11wram"),
)

# Address resolution priority: specific rows shadow the wide I/O and
# FCRAM rows; the ROM row shadows its blacklist alias.
_DISPATCH_ORDER = (3, 2, 5, 4, 8, 9, 7, 10, 6, 1, 0)
_DISPATCH: tuple[Region, ...] = tuple(
    next(r for r in MEMORY_REGIONS if r.rid == rid) for rid in _DISPATCH_ORDER
)


def _resolve(addr: int) -> Optional[Region]:
    for region in _DISPATCH:
        if region.contains(addr):
            return region
    return None


class BlacklistPolicy(Enum):
    BOOT9_DATA_ONLY = "boot9only"
    HARDENED = "hardened"


class BootSource(Enum):
    NAND = "nand"
    WIFI_SPI = "wifispi"
    NTR_CART = "ntrcart"


class BootOutcome(Enum):
    REACHED_ENTRY = "reached_entry"   # stock-success analog
    FAILURE = "failure"               # blue-screen analog (checked error)
    HALT = "halt"                     # black-screen analog (unhandled abort)
    SHUTDOWN = "shutdown"             # deliberate power-off from stage 2


@dataclass(frozen=True)
class BootInputs:
    keys_held: frozenset = frozenset()
    shell_closed: bool = False
    ntr_cart_present: bool = False
    magnet_applied: bool = False


@dataclass
class LockRegister:
    boot9_locked: bool = False
    boot11_locked: bool = False
    fcram9_enabled: bool = False
    fcram11_enabled: bool = False

    def as_dict(self) -> dict:
        return {
            "boot9_locked": self.boot9_locked,
            "boot11_locked": self.boot11_locked,
            "fcram9_enabled": self.fcram9_enabled,
            "fcram11_enabled": self.fcram11_enabled,
        }


@dataclass(frozen=True)
class NdmaRequest:
    src: int
    dst: int
    length: int
    trigger: int = 0  # 0 = immediate, the only modeled trigger

    def pack(self) -> bytes:
        return struct.pack("<IIII", self.src, self.dst, self.length, self.trigger)

    @classmethod
    def unpack(cls, data: bytes) -> "NdmaRequest":
        src, dst, length, trigger = struct.unpack("<IIII", data)
        return cls(src, dst, length, trigger)


@dataclass(frozen=True)
class Event:
    step: int
    proc: int
    kind: str
    addr: int = 0
    length: int = 0

    def line(self) -> str:
        return (
            f"step={self.step} proc={self.proc} event={self.kind} "
            f"addr={self.addr:#x} len={self.length:#x}"
        )


def select_boot_source(
    inputs: BootInputs, override: Optional[BootSource] = None
) -> BootSource:
    """NTR cartridge iff shell closed (or faked by magnet), the boot key
    combination is held, and a cartridge is present; NAND otherwise.
    The SPI-flash source is reachable only through an explicit override."""
    if override is not None:
        return override
    shell_ok = inputs.shell_closed or inputs.magnet_applied
    if shell_ok and NTR_BOOT_COMBO <= inputs.keys_held and inputs.ntr_cart_present:
        return BootSource.NTR_CART
    return BootSource.NAND


def check_blacklist(dst: int, size: int, policy: BlacklistPolicy) -> bool:
    """True if a section load to [dst, dst+size) is allowed."""
    if size <= 0:
        return True
    boot9_data = MEMORY_REGIONS[6]
    if boot9_data.overlaps(dst, size):
        return False
    if policy is BlacklistPolicy.BOOT9_DATA_ONLY:
        return True
    # Hardened additions: vector page, both ROMs, and anything that
    # actually resolves to the I/O register row.
    if dst < VECTOR_PAGE_BASE + 0x1000 and dst + size > VECTOR_PAGE_BASE:
        return False
    for rid in (8, 9):
        if next(r for r in MEMORY_REGIONS if r.rid == rid).overlaps(dst, size):
            return False
    addr = dst
    end = dst + size
    while addr < end:
        region = _resolve(addr)
        if region is None:
            next_base = min((r.base for r in _DISPATCH if r.base > addr), default=end)
            addr = min(end, next_base)
            continue
        if region.kind is RegionKind.IO_REGISTERS:
            return False
        addr = min(end, region.end)
    return True


class _DataAbort(Exception):
    def __init__(self, addr: int):
        super().__init__(f"data abort at {addr:#010x}")
        self.addr = addr


class _BootFailure(Exception):
    """Checked boot error: the blue-screen analog."""


class _BootHalt(Exception):
    """Unrecoverable condition: the black-screen analog."""


class _PagedStore:
    """Sparse zero-initialized RAM."""

    PAGE = 0x1000

    def __init__(self) -> None:
        self._pages: dict[int, bytearray] = {}

    def read(self, offset: int, count: int) -> bytes:
        out = bytearray()
        while count > 0:
            page, within = divmod(offset, self.PAGE)
            chunk = min(count, self.PAGE - within)
            data = self._pages.get(page)
            if data is None:
                out += b"\x00" * chunk
            else:
                out += data[within : within + chunk]
            offset += chunk
            count -= chunk
        return bytes(out)

    def write(self, offset: int, data: bytes) -> None:
        pos = 0
        while pos < len(data):
            page, within = divmod(offset + pos, self.PAGE)
            chunk = min(len(data) - pos, self.PAGE - within)
            buf = self._pages.setdefault(page, bytearray(self.PAGE))
            buf[within : within + chunk] = data[pos : pos + chunk]
            pos += chunk


class _RomStore:
    def __init__(self, content: bytes):
        self._content = content

    def read(self, offset: int, count: int) -> bytes:
        return self._content[offset : offset + count]

    def write(self, offset: int, data: bytes) -> None:
        raise RuntimeError("ROM store is not writable")


class _Cpu:
    def __init__(self, proc: int):
        self.proc = proc
        self.actions: list[tuple] = []
        self.diverted = False
        self.entered = False

    @property
    def done(self) -> bool:
        return not self.actions

    def push_front(self, actions: list[tuple]) -> None:
        self.actions[:0] = actions


@dataclass
class BootReport:
    boot_source: BootSource
    signature_verdict: Optional[ParseOutcome]
    sections_loaded: list[int]
    aborts: list[tuple[int, bool]]
    exfiltrated: dict[str, bytes]
    reached_entry: bool
    outcome: BootOutcome
    locks_final: dict[str, bool]
    events: list[Event]

    def to_json_dict(self) -> dict:
        return {
            "boot_source": self.boot_source.value,
            "signature_verdict": (
                self.signature_verdict.to_json_dict() if self.signature_verdict else None
            ),
            "sections_loaded": list(self.sections_loaded),
            "aborts": [{"addr": f"{a:#x}", "handled": h} for a, h in self.aborts],
            "exfiltrated": {k: v.hex() for k, v in self.exfiltrated.items()},
            "reached_entry": self.reached_entry,
            "outcome": self.outcome.value,
            "locks_final": dict(self.locks_final),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)

    def event_log_text(self) -> str:
        return "\n".join(event.line() for event in self.events) + "\n"


class Machine:
    """One simulated console.

    ROM contents and the verifier's stack junk are pseudorandom bytes
    derived from the construction seed.  Non-volatile stores (NAND, the
    cartridge slot, SPI flash, the SD card) persist across boots;
    everything else is rebuilt by each boot.
    """

    def __init__(
        self,
        seed: bytes | str,
        registry: KeyRegistry,
        console: Console = Console.RETAIL,
        policy: BlacklistPolicy = BlacklistPolicy.BOOT9_DATA_ONLY,
        parser: Optional[ParserConfig] = None,
        force_boot_source: Optional[BootSource] = None,
        workdir: Optional[Path] = None,
    ):
        self.seed = derive_seed(seed, "machine")
        self.registry = registry
        self.console = console
        self.policy = policy
        self.parser = parser
        self.force_boot_source = force_boot_source
        self.workdir = Path(workdir) if workdir else None
        self.cipher = NullCipher()

        self.boot9_rom = ByteStream(derive_seed(self.seed, "boot9-rom")).take(ROM_SIZE)
        self.boot11_rom = ByteStream(derive_seed(self.seed, "boot11-rom")).take(ROM_SIZE)

        self.inputs = BootInputs()
        self.nand_store: bytes = b""
        self.cart_store: bytes = b""
        self.wifi_store: bytes = b""
        self.sd_store: dict[str, bytes] = {}

        self.event_log: list[Event] = []
        self._step = 0
        self._reset_volatile()

    # -- machine lifecycle ------------------------------------------------

    def _reset_volatile(self) -> None:
        self.stores: dict[str, object] = {
            "fcram": _PagedStore(),
            "io": _PagedStore(),
            "arm9": _PagedStore(),
            "dtcm": _PagedStore(),
            "itcm": _PagedStore(),
            "arm11wram": _PagedStore(),
            "boot9rom": _RomStore(self.boot9_rom),
            "boot11rom": _RomStore(self.boot11_rom),
        }
        self.locks = LockRegister()
        self.aborts: list[tuple[int, bool]] = []
        self.exfiltrated: dict[str, bytes] = {}
        self.sections_loaded: list[int] = []
        self._milestones: set[str] = set()
        self._shutdown = False
        self._watchdog_tripped = False

    def boot9_stack(self, block_length: int) -> StackModel:
        return StackModel.boot9(block_length, seed=derive_seed(self.seed, "boot9-stack"))

    @property
    def protected_boot9(self) -> bytes:
        return self.boot9_rom[PROTECTED_HALF:]

    @property
    def protected_boot11(self) -> bytes:
        return self.boot11_rom[PROTECTED_HALF:]

    def insert_cartridge(self, image_bytes: bytes) -> None:
        self.cart_store = bytes(image_bytes)

    def install_nand(self, image_bytes: bytes) -> None:
        self.nand_store = bytes(image_bytes)

    def sync_workdir(self) -> None:
        if self.workdir is None:
            return
        self.workdir.mkdir(parents=True, exist_ok=True)
        if self.nand_store:
            (self.workdir / "nand.firm").write_bytes(self.nand_store)
        sd_dir = self.workdir / "sd"
        sd_dir.mkdir(exist_ok=True)
        for name, content in self.sd_store.items():
            (sd_dir / name).write_bytes(content)

    # -- event log and physical memory ------------------------------------

    def _log(self, proc: int, kind: str, addr: int = 0, length: int = 0) -> None:
        self._step += 1
        self.event_log.append(Event(self._step, proc, kind, addr, length))

    def _rom_locked(self, store: str) -> bool:
        if store == "boot9rom":
            return self.locks.boot9_locked
        if store == "boot11rom":
            return self.locks.boot11_locked
        return False

    def read_phys(self, addr: int, count: int, proc: int = 9) -> bytes:
        """Physical read; locked protected-ROM bytes read as zeros."""
        out = bytearray()
        while count > 0:
            region = _resolve(addr)
            if region is None:
                raise _DataAbort(addr)
            chunk = min(count, region.end - addr)
            offset = region.store_offset + (addr - region.base)
            store = self.stores[region.store]
            data = store.read(offset, chunk)
            if (
                region.store in ("boot9rom", "boot11rom")
                and self._rom_locked(region.store)
                and offset + chunk > PROTECTED_HALF
            ):
                cut = max(0, PROTECTED_HALF - offset)
                data = data[:cut] + b"\x00" * (chunk - cut)
                self._log(proc, "lock_violation", addr, chunk)
            out += data
            addr += chunk
            count -= chunk
        return bytes(out)

    def write_phys(self, addr: int, data: bytes, proc: int = 9) -> None:
        pos = 0
        while pos < len(data):
            region = _resolve(addr + pos)
            if region is None:
                raise _DataAbort(addr + pos)
            chunk = min(len(data) - pos, region.end - (addr + pos))
            if not region.writable:
                self._log(proc, "rom_write_ignored", addr + pos, chunk)
            else:
                offset = region.store_offset + (addr + pos - region.base)
                self.stores[region.store].write(offset, data[pos : pos + chunk])
            pos += chunk

    def read_u32(self, addr: int) -> int:
        return int.from_bytes(self.read_phys(addr, 4), "little")

    def write_u32(self, addr: int, value: int, proc: int = 9) -> None:
        self.write_phys(addr, (value & 0xFFFFFFFF).to_bytes(4, "little"), proc)

    def _track_exfil(self, src: int, length: int, proc: int, data: bytes) -> Optional[str]:
        for key, base, rom_locked in (
            ("boot9_protected", BOOT9_ROM_BASE + PROTECTED_HALF, self.locks.boot9_locked),
            ("boot11_protected", BOOT11_ROM_BASE + PROTECTED_HALF, self.locks.boot11_locked),
        ):
            if rom_locked:
                continue
            lo = max(src, base)
            hi = min(src + length, base + PROTECTED_HALF)
            if lo < hi:
                captured = data[lo - src : hi - src]
                previous = self.exfiltrated.get(key, b"")
                if len(captured) > len(previous):
                    self.exfiltrated[key] = captured
                return "copy_protected9" if key == "boot9_protected" else "copy_protected11"
        return None

    def copy_phys(self, src: int, dst: int, length: int, proc: int = 9) -> None:
        """Unchecked physical copy; touching address 0 aborts."""
        if length <= 0:
            raise _BootFailure("zero-length copy request")
        if src <= 0 < src + length or dst <= 0 < dst + length:
            raise _DataAbort(0)
        data = self.read_phys(src, length, proc)
        kind = self._track_exfil(src, length, proc, data) or "copy"
        self.write_phys(dst, data, proc)
        self._log(proc, kind, dst, length)

    # -- lock registers ----------------------------------------------------

    def engage_lock(self, proc: int) -> None:
        """Write-once: lock the ROM's protected half and enable FCRAM."""
        if proc == 9:
            if self.locks.boot9_locked:
                self._log(9, "lock_write_ignored")
                return
            self.locks.boot9_locked = True
            self.locks.fcram9_enabled = True
            self._log(9, "lock_boot9")
        else:
            if self.locks.boot11_locked:
                self._log(11, "lock_write_ignored")
                return
            self.locks.boot11_locked = True
            self.locks.fcram11_enabled = True
            self._log(11, "lock_boot11")

    # -- section loading and the DMA window ---------------------------------

    def _run_ndma_program(self, dst: int, payload: bytes, proc: int) -> None:
        if dst + len(payload) > NDMA_WINDOW_BASE + NDMA_WINDOW_SIZE:
            self._log(proc, "ndma_malformed", dst, len(payload))
            raise _BootFailure("NDMA program exceeds the register window")
        if len(payload) % NDMA_RECORD_SIZE != 0:
            self._log(proc, "ndma_malformed", dst, len(payload))
            raise _BootFailure("NDMA program is not whole records")
        self._log(proc, "ndma_program", dst, len(payload))
        for pos in range(0, len(payload), NDMA_RECORD_SIZE):
            request = NdmaRequest.unpack(payload[pos : pos + NDMA_RECORD_SIZE])
            if request.trigger != 0 or request.length == 0:
                self._log(proc, "ndma_malformed", dst + pos, NDMA_RECORD_SIZE)
                raise _BootFailure("bad NDMA request record")
            self.copy_phys(request.src, request.dst, request.length, proc)

    def load_section(self, section: SectionHeader, payload: bytes, proc: int = 9) -> None:
        """Copy one firmware section to its physical address.

        Raises _BootFailure on a blacklist refusal and _DataAbort when
        the copy touches NULL or unmapped space; callers route aborts
        through the data-abort vector.
        """
        dst = section.phys_addr
        if not check_blacklist(dst, section.size, self.policy):
            self._log(proc, "blacklist_reject", dst, section.size)
            raise _BootFailure(f"section destination {dst:#x} is blacklisted")
        window = Region(-1, NDMA_WINDOW_BASE, NDMA_WINDOW_SIZE, RegionKind.IO_REGISTERS, "io")
        if window.overlaps(dst, section.size):
            self._run_ndma_program(dst, payload, proc)
            return
        if dst <= 0 < dst + section.size:
            raise _DataAbort(0)
        self.write_phys(dst, payload, proc)
        self._log(proc, "copy", dst, section.size)

    # -- scripted blobs ------------------------------------------------------

    def _read_blob(self, addr: int) -> tuple[bytes, list[int]]:
        try:
            tag = self.read_phys(addr, 8)
            count = {
                TAG_ABORT_HANDLER: 2,
                TAG_HOOK1: 1,
                TAG_HOOK2: 3,
                TAG_HOOK11: 1,
                TAG_STAGE2_ARM9: 2,
                TAG_STAGE2_INSTALL: 2,
                TAG_STAGE2_ARM11: 0,
            }.get(tag)
            if count is None:
                return tag, []
            fields = [self.read_u32(addr + 8 + 4 * i) for i in range(count)]
        except _DataAbort:
            return b"", []
        return tag, fields

    def _dispatch_abort(self, fault_addr: int, proc: int) -> None:
        """Route a data abort through the current vector."""
        self._log(proc, "data_abort", fault_addr)
        vector = self.read_u32(DATA_ABORT_VECTOR9)
        if vector == 0:
            self.aborts.append((fault_addr, False))
            raise _BootHalt(f"unhandled data abort at {fault_addr:#x}")
        tag, fields = self._read_blob(vector)
        if tag != TAG_ABORT_HANDLER:
            self.aborts.append((fault_addr, False))
            raise _BootHalt("data-abort vector points at garbage")
        self.aborts.append((fault_addr, True))
        hook_a, hook_b = fields
        self.write_u32(BOOT9_FPTR_A, hook_a, proc)
        self.write_u32(BOOT9_FPTR_B, hook_b, proc)
        self._log(proc, "hook_install", BOOT9_FPTR_A, 8)
        self._log(proc, "abort_handled_skip_copy", fault_addr)

    # -- the boot sequence ----------------------------------------------------

    def _source_bytes(self, source: BootSource) -> bytes:
        return {
            BootSource.NAND: self.nand_store,
            BootSource.NTR_CART: self.cart_store,
            BootSource.WIFI_SPI: self.wifi_store,
        }[source]

    def _stage_to_source(self, source: BootSource, image_bytes: bytes) -> None:
        if source is BootSource.NAND:
            self.nand_store = bytes(image_bytes)
        elif source is BootSource.NTR_CART:
            self.cart_store = bytes(image_bytes)
        else:
            self.wifi_store = bytes(image_bytes)

    def _expand_stage2_arm9(self, cpu: _Cpu, addr: int) -> bool:
        tag, fields = self._read_blob(addr)
        if tag == TAG_STAGE2_ARM9:
            boot9_copy, boot11_copy = fields
            self._log(cpu.proc, "entry", addr)
            cpu.entered = True
            if DUMP_COMBO <= self.inputs.keys_held:
                cpu.push_front(
                    [
                        ("sd_dump", boot9_copy, boot11_copy),
                        ("power_off",),
                    ]
                )
            else:
                cpu.push_front(
                    [
                        ("chain_load",),
                    ]
                )
            return True
        if tag == TAG_STAGE2_INSTALL:
            nand_len, sd_len = fields
            payload_base = addr + 8 + 8
            self._log(cpu.proc, "entry", addr)
            cpu.entered = True
            cpu.push_front(
                [
                    ("install", payload_base, nand_len, sd_len),
                    ("power_off",),
                ]
            )
            return True
        return False

    def _exec_action(self, cpu: _Cpu, action: tuple) -> bool:
        """Run one scripted step.  Returns False to re-queue (waiting)."""
        kind = action[0]
        proc = cpu.proc

        if kind == "wait_milestone":
            if action[1] not in self._milestones:
                return False
        elif kind == "milestone":
            self._milestones.add(action[1])
        elif kind == "wait_cell":
            if self.read_u32(action[1]) == 0:
                return False
        elif kind == "deref":
            _, cell, milestone = action
            target = self.read_u32(cell)
            expanded = False
            if target:
                tag, fields = self._read_blob(target)
                if tag == TAG_HOOK1:
                    self._log(proc, "hook1_run", target)
                    steps = [
                        ("w32", BOOT11_FPTR, fields[0]),
                        ("log", "hook_install", BOOT11_FPTR, 4),
                        ("log", "mpu_setup", 0, 0),
                        ("w32", CROSS_FLAG, 1),
                        ("log", "flag_set", CROSS_FLAG, 4),
                    ]
                    if milestone:
                        steps.append(("milestone", milestone))
                        expanded = True
                    cpu.push_front(steps)
                elif tag == TAG_HOOK2:
                    staging, boot11_dst, boot9_dst = fields
                    self._log(proc, "hook2_run", target)
                    cpu.push_front(
                        [
                            ("wait_cell", SIG_11TO9),
                            ("copy", staging, boot11_dst, PROTECTED_HALF),
                            ("w32", SIG_9TO11, 1),
                            ("log", "signal", SIG_9TO11, 4),
                            ("copy", BOOT9_ROM_BASE + PROTECTED_HALF, boot9_dst, PROTECTED_HALF),
                            ("divert",),
                        ]
                    )
                elif tag == TAG_HOOK11:
                    staging = fields[0]
                    self._log(proc, "hook11_run", target)
                    cpu.push_front(
                        [
                            ("copy", BOOT11_ROM_BASE + PROTECTED_HALF, staging, PROTECTED_HALF),
                            ("w32", SIG_11TO9, 1),
                            ("log", "signal", SIG_11TO9, 4),
                            ("wait_cell", SIG_9TO11),
                            ("divert",),
                        ]
                    )
                else:
                    self._log(proc, "bad_hook", target)
            if milestone and not expanded:
                self._milestones.add(milestone)
        elif kind == "copy":
            _, src, dst, length = action
            self.copy_phys(src, dst, length, proc)
        elif kind == "w32":
            self.write_u32(action[1], action[2], proc)
        elif kind == "log":
            self._log(proc, action[1], action[2], action[3])
        elif kind == "divert":
            cpu.diverted = True
        elif kind == "lock":
            if not cpu.diverted:
                self.engage_lock(cpu.proc)
        elif kind == "lock_force":
            self.engage_lock(cpu.proc)
        elif kind == "wait_lock11":
            if not self.locks.boot11_locked:
                return False
        elif kind == "jump":
            entry = action[1]
            if cpu.proc == 9:
                if not self._expand_stage2_arm9(cpu, entry):
                    self._log(proc, "entry", entry)
                    cpu.entered = True
            else:
                tag, _ = self._read_blob(entry)
                if tag == TAG_STAGE2_ARM11:
                    cpu.push_front(
                        [
                            ("wait_cell", CHAIN_FLAG),
                            ("lock_force", 11),
                            ("log", "entry", entry, 0),
                        ]
                    )
                else:
                    self._log(proc, "entry", entry)
        elif kind == "sd_dump":
            _, boot9_copy, boot11_copy = action
            for name, src in ((SD_BOOT9_NAME, boot9_copy), (SD_BOOT11_NAME, boot11_copy)):
                content = self.read_phys(src, PROTECTED_HALF, proc)
                self.sd_store[name] = content
                self._log(proc, "sd_write", src, PROTECTED_HALF)
        elif kind == "power_off":
            self._log(proc, "power_off")
            self._shutdown = True
        elif kind == "install":
            _, payload_base, nand_len, sd_len = action
            nand_bytes = self.read_phys(payload_base, nand_len, proc)
            sd_bytes = self.read_phys(payload_base + nand_len, sd_len, proc)
            self.nand_store = nand_bytes
            self.sd_store[SD_CHAIN_NAME] = sd_bytes
            self._log(proc, "nand_install", 0, nand_len)
            self._log(proc, "sd_write", 0, sd_len)
        elif kind == "chain_load":
            content = self.sd_store.get(SD_CHAIN_NAME)
            if content is None:
                self._log(proc, "chain_missing")
                raise _BootFailure("no second-stage image on the SD card")
            try:
                second = firmmod.parse(content)
            except FirmParseError as exc:
                self._log(proc, "chain_parse_error")
                raise _BootFailure(str(exc)) from exc
            self._log(proc, "chain_load", 0, len(content))
            for idx, (sec, payload) in enumerate(zip(second.sections, second.payloads)):
                if sec.used:
                    self.write_phys(sec.phys_addr, payload, proc)
                    self._log(proc, "copy", sec.phys_addr, sec.size)
            cpu.push_front(
                [
                    ("w32", CHAIN_FLAG, 1),
                    ("lock_force", 9),
                    ("wait_lock11",),
                    ("log", "entry", second.arm9_entry, 0),
                    ("mark_entered",),
                ]
            )
        elif kind == "mark_entered":
            cpu.entered = True
        else:
            raise RuntimeError(f"unknown scripted action {kind!r}")
        return True

    def _run_scheduler(self, cpu9: _Cpu, cpu11: _Cpu) -> None:
        turns = 0
        while not self._shutdown and (not cpu9.done or not cpu11.done):
            turns += 1
            if turns > WATCHDOG_LIMIT:
                self._log(9, "watchdog")
                self._watchdog_tripped = True
                raise _BootHalt("scheduler watchdog tripped")
            cpu = cpu9 if turns % 2 == 1 else cpu11
            if cpu.done:
                continue
            action = cpu.actions.pop(0)
            if not self._exec_action(cpu, action):
                cpu.actions.insert(0, action)

    def _execute_boot(self, registry: KeyRegistry, parser: ParserConfig) -> BootReport:
        first_event = len(self.event_log)
        verdict: Optional[ParseOutcome] = None
        outcome = BootOutcome.FAILURE
        reached = False
        source = select_boot_source(self.inputs, self.force_boot_source)

        try:
            self._log(9, "init_keyslots")
            self._log(9, "init_rsa_slots")
            self._log(9, f"boot_source_{source.value}")
            raw = self.cipher.decrypt(self._source_bytes(source))
            if len(raw) < firmmod.HEADER_LENGTH:
                self._log(9, "header_read_failed", 0, len(raw))
                raise _BootFailure("no bootable image on the selected source")
            self._log(9, "header_read", 0, firmmod.HEADER_LENGTH)
            try:
                image = firmmod.parse(raw)
            except FirmParseError as exc:
                self._log(9, "image_parse_error", exc.offset)
                raise _BootFailure(str(exc)) from exc

            sig_type = (
                SignatureType.NAND_BOOT
                if source is BootSource.NAND
                else SignatureType.NON_NAND_BOOT
            )
            pub = registry.get(self.console, sig_type)
            block_length = registry.block_length(self.console, sig_type)
            validation = firmmod.validate_firm(
                image, pub, parser, stack=self.boot9_stack(block_length)
            )
            verdict = validation.signature_outcome
            self._log(9, "sig_verdict", length=0)
            if verdict.verdict is Verdict.OUT_OF_BOUNDS:
                # The parser dereferenced unmodeled stack: an abort inside
                # the verifier itself, before any handler could exist.
                self.aborts.append((verdict.landing_offset or 0, False))
                raise _BootHalt("signature parser walked off the modeled stack")
            if not validation.accepted:
                raise _BootFailure("signature or section digest check failed")

            for idx, (section, payload) in enumerate(zip(image.sections, image.payloads)):
                if not section.used:
                    continue
                try:
                    self.load_section(section, payload)
                except _DataAbort as abort:
                    self._dispatch_abort(abort.addr, 9)
                    continue
                self.sections_loaded.append(idx)

            cpu9 = _Cpu(9)
            cpu9.actions = [
                ("deref", BOOT9_FPTR_A, "fptr_a_done"),
                ("deref", BOOT9_FPTR_B, None),
                ("lock",),
                ("jump", image.arm9_entry),
            ]
            cpu11 = _Cpu(11)
            cpu11.actions = [
                ("wait_milestone", "fptr_a_done"),
                ("deref", BOOT11_FPTR, None),
                ("lock",),
                ("jump", image.arm11_entry),
            ]
            self._run_scheduler(cpu9, cpu11)
            reached = cpu9.entered
            if self._shutdown:
                outcome = BootOutcome.SHUTDOWN
            elif reached:
                outcome = BootOutcome.REACHED_ENTRY
            else:
                outcome = BootOutcome.FAILURE
        except _BootFailure:
            outcome = BootOutcome.FAILURE
        except _DataAbort as abort:
            self.aborts.append((abort.addr, False))
            self._log(9, "data_abort", abort.addr)
            outcome = BootOutcome.HALT
        except _BootHalt:
            outcome = BootOutcome.HALT

        report = BootReport(
            boot_source=source,
            signature_verdict=verdict,
            sections_loaded=list(self.sections_loaded),
            aborts=list(self.aborts),
            exfiltrated=dict(self.exfiltrated),
            reached_entry=reached,
            outcome=outcome,
            locks_final=self.locks.as_dict(),
            events=self.event_log[first_event:],
        )
        self.sync_workdir()
        return report


# --- module-level operations ------------------------------------------


def load_section(machine: Machine, section: SectionHeader, payload: bytes) -> list[Event]:
    """Load one section outside a boot; returns the events it produced."""
    start = len(machine.event_log)
    try:
        machine.load_section(section, payload)
    except _DataAbort as abort:
        try:
            machine._dispatch_abort(abort.addr, 9)
        except _BootHalt:
            pass
    except _BootFailure:
        pass
    return machine.event_log[start:]


def run_boot(
    machine: Machine,
    image_bytes: Optional[bytes] = None,
    registry: Optional[KeyRegistry] = None,
    parser: Optional[ParserConfig] = None,
    policy: Optional[BlacklistPolicy] = None,
) -> BootReport:
    """One full boot: source selection, verification, loads, locks, entry.

    When `image_bytes` is given it is staged onto whichever source the
    held inputs select; otherwise the boot reads what the machine's
    stores already hold.
    """
    machine._reset_volatile()
    registry = registry or machine.registry
    parser = parser or machine.parser or ParserConfig.flawed(
        registry.block_length(machine.console, SignatureType.NAND_BOOT)
    )
    if policy is not None:
        machine.policy = policy
    source = select_boot_source(machine.inputs, machine.force_boot_source)
    if image_bytes is not None:
        machine._stage_to_source(source, image_bytes)
    return machine._execute_boot(registry, parser)


def run_exploit_chain(
    machine: Machine,
    staged_image: FirmImage | bytes,
    second_image: Optional[FirmImage | bytes] = None,
    keys_held: frozenset = frozenset(),
) -> BootReport:
    """Boot the four-section staged image and run its second stage.

    With the dump combination held, stage 2 writes both protected halves
    to the SD store and powers off; otherwise it chain-loads the second
    image from SD, engages the locks (enabling FCRAM), and continues.
    """
    if second_image is not None:
        content = (
            firmmod.serialize(second_image)
            if isinstance(second_image, FirmImage)
            else bytes(second_image)
        )
        machine.sd_store[SD_CHAIN_NAME] = content
    machine.inputs = replace(machine.inputs, keys_held=frozenset(keys_held))
    image_bytes = (
        firmmod.serialize(staged_image)
        if isinstance(staged_image, FirmImage)
        else bytes(staged_image)
    )
    return run_boot(machine, image_bytes)


def run_ntr_install_scenario(
    machine: Machine, flashcart_image: FirmImage | bytes
) -> BootReport:
    """Boot an installer from a DS-mode cartridge, then boot from NAND.

    Returns the follow-up NAND boot's report on success, or the failed
    cartridge boot's report when the cartridge image is rejected.
    """
    cart_bytes = (
        firmmod.serialize(flashcart_image)
        if isinstance(flashcart_image, FirmImage)
        else bytes(flashcart_image)
    )
    machine.insert_cartridge(cart_bytes)
    machine.inputs = BootInputs(
        keys_held=NTR_BOOT_COMBO,
        shell_closed=True,
        ntr_cart_present=True,
    )
    first = run_boot(machine)
    installed = any(e.kind == "nand_install" for e in first.events)
    if not installed:
        return first
    machine.inputs = BootInputs()
    return run_boot(machine)


# --- staged-image construction ------------------------------------------


def _blob(tag: bytes, *fields: int, payload: bytes = b"") -> bytes:
    assert len(tag) == 8
    return tag + b"".join(struct.pack("<I", f) for f in fields) + payload


def build_exploit_image(
    signature: bytes,
    stage2: str = "dump-or-chain",
    install_nand_image: Optional[bytes] = None,
    install_sd_image: Optional[bytes] = None,
) -> FirmImage:
    """Assemble the four-section staged image and fakesign it.

    Section 0: the ARM11 hook and ARM11 stage-2 blobs, to AXI work RAM.
    Section 1: the abort handler, both ARM9 hooks and ARM9 stage 2, to a
    safe spot in ARM9 memory.  Section 2: one DMA request copying the
    handler's address over the data-abort vector, to the DMA window.
    Section 3: junk loaded to NULL to fire the abort.

    `stage2="install"` swaps the ARM9 stage 2 for the installer variant,
    which carries the NAND image and the SD second-stage image inline.
    """
    sec0_base = ARM11_WRAM_BASE + 0x100
    hook11_addr = sec0_base
    stage2_11_addr = sec0_base + 0x40
    section0 = bytearray(0x80)
    section0[0:0x40] = _blob(TAG_HOOK11, AXI_STAGING).ljust(0x40, b"\x00")
    section0[0x40:0x80] = _blob(TAG_STAGE2_ARM11).ljust(0x40, b"\x00")

    sec1_base = ARM9_SAFE_AREA
    handler_addr = sec1_base
    hook_a_addr = sec1_base + 0x40
    hook_b_addr = sec1_base + 0x80
    stage2_addr = sec1_base + 0xC0
    vector_value_addr = sec1_base + 0x30  # the u32 the DMA request installs
    section1 = bytearray(0xC0)
    section1[0x00:0x30] = _blob(TAG_ABORT_HANDLER, hook_a_addr, hook_b_addr).ljust(0x30, b"\x00")
    section1[0x30:0x34] = struct.pack("<I", handler_addr)
    section1[0x40:0x80] = _blob(TAG_HOOK1, hook11_addr).ljust(0x40, b"\x00")
    section1[0x80:0xC0] = _blob(
        TAG_HOOK2, AXI_STAGING, EXFIL_BOOT11, EXFIL_BOOT9
    ).ljust(0x40, b"\x00")
    if stage2 == "install":
        if install_nand_image is None or install_sd_image is None:
            raise ValueError("installer stage 2 needs both images to carry")
        section1 += _blob(
            TAG_STAGE2_INSTALL,
            len(install_nand_image),
            len(install_sd_image),
            payload=install_nand_image + install_sd_image,
        )
    elif stage2 == "dump-or-chain":
        section1 += _blob(TAG_STAGE2_ARM9, EXFIL_BOOT9, EXFIL_BOOT11).ljust(0x40, b"\x00")
    else:
        raise ValueError(f"unknown stage-2 variant {stage2!r}")

    section2 = NdmaRequest(
        src=vector_value_addr, dst=DATA_ABORT_VECTOR9, length=4
    ).pack()
    section3 = b"\xde\xad\xfa\x11" * 4

    image = firmmod.build_firm(
        [
            (sec0_base, CopyMethod.CPU_MEMCPY, bytes(section0)),
            (sec1_base, CopyMethod.CPU_MEMCPY, bytes(section1)),
            (NDMA_WINDOW_BASE, CopyMethod.NDMA, section2),
            (0x00000000, CopyMethod.CPU_MEMCPY, section3),
        ],
        arm9_entry=stage2_addr,
        arm11_entry=stage2_11_addr,
    )
    return firmmod.fakesign_firm(image, signature)
