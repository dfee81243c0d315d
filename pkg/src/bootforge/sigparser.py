"""Models of the two signature-plaintext parsers and the stack they walk.

A decoded signature block (``v = s^e mod n``, encoded big-endian to the
key's block length) is parsed one of two ways:

* `flawed_parse` reproduces the permissive boot-ROM-style walk: block
  type 2 is allowed, padding content is never inspected, and the chained
  one-byte length fields are added to the cursor without bounds checks,
  so the final "embedded hash" read can land beyond the block, out on
  the surrounding stack.
* `strict_parse` is the fixed firmware-style walk: block type 1 only,
  padding must be 0xFF and at least 8 bytes, every length is bounds
  checked before use, the digest encoding must be the fixed SHA-256 one,
  and the hash must sit flush against the end of the block.

The walk shape is: flag bytes ``00 01|02``, padding up to the first
``0x00`` terminator at offset ``t``, an outer header at ``t+1`` (type
and length bytes both ignored by the flawed walk), an inner header at
``t+3`` whose length byte ``L`` advances the cursor past ``L`` content
bytes, a final two-byte header, and then the hash.  The landing offset
is therefore ``t + 7 + L``.  Only the inner length steers the walk; all
lengths are single bytes (no long-form encoding exists in this model).

`StackModel` describes the memory around the block: junk before it, junk
after it, and the offset where the verifier previously stored the hash
it computed itself.  That stored copy overlays whatever else is at that
offset, which is exactly why a landing offset equal to
`calc_hash_offset` compares the calculated hash against itself and can
never fail.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional

from .prng import ByteStream, derive_seed

__all__ = [
    "Verdict",
    "RejectReason",
    "ParseOutcome",
    "StackModel",
    "ParserMode",
    "ParserConfig",
    "flawed_parse",
    "strict_parse",
    "classify_plaintext",
    "make_classifier",
    "pkcs1_digest_block",
    "SHA256_DIGEST_INFO",
    "HASH_LENGTH",
    "annotate_plaintext",
]

HASH_LENGTH = 0x20

# Fixed DER encoding of DigestInfo for SHA-256, up to the hash bytes:
# SEQUENCE(0x31) { SEQUENCE(0x0d) { OID sha256, NULL }, OCTET STRING(0x20)
SHA256_DIGEST_INFO = bytes.fromhex("3031300d060960864801650304020105000420")

# Walk geometry relative to the padding terminator at offset t.
_OUTER_TYPE, _OUTER_LEN = 1, 2
_INNER_TYPE, _INNER_LEN = 3, 4
_INNER_CONTENT = 5
_LANDING_AFTER_INNER = 7  # landing = t + 7 + inner_len


class Verdict(Enum):
    ACCEPT = "accept"
    REJECT = "reject"
    OUT_OF_BOUNDS = "out_of_bounds"


class RejectReason(Enum):
    BAD_BLOCK_TYPE = "BadBlockType"
    NO_PADDING_TERMINATOR = "NoPaddingTerminator"
    BAD_ASN1 = "BadAsn1"
    HASH_MISMATCH = "HashMismatch"
    PADDING_NOT_FF = "PaddingNotFF"
    PADDING_TOO_SHORT = "PaddingTooShort"
    TRAILING_GARBAGE = "TrailingGarbage"


@dataclass(frozen=True)
class ParseOutcome:
    verdict: Verdict
    reason: Optional[RejectReason] = None
    landing_offset: Optional[int] = None

    @property
    def is_accept(self) -> bool:
        return self.verdict is Verdict.ACCEPT

    @classmethod
    def accept(cls, landing: int) -> "ParseOutcome":
        return cls(Verdict.ACCEPT, None, landing)

    @classmethod
    def reject(cls, reason: RejectReason, landing: Optional[int] = None) -> "ParseOutcome":
        return cls(Verdict.REJECT, reason, landing)

    @classmethod
    def out_of_bounds(cls, landing: int) -> "ParseOutcome":
        return cls(Verdict.OUT_OF_BOUNDS, None, landing)

    def to_json_dict(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "reason": self.reason.value if self.reason else None,
            "landing_offset": self.landing_offset,
        }


@dataclass(frozen=True)
class StackModel:
    """Bytes around the signature block, plus the stored calculated hash.

    Offsets are relative to the block start: negative offsets index into
    `pre_gap`, offsets at or past the block length index into
    `post_bytes`.  `calc_hash_offset` is where the verifier's own hash
    copy lives; the boot-ROM layout puts it immediately after the block,
    the factory-firmware layout puts it somewhere else.
    """

    post_bytes: bytes
    calc_hash_offset: int
    pre_gap: bytes = b""

    @classmethod
    def boot9(cls, block_length: int, seed: bytes | str = b"boot9-stack") -> "StackModel":
        """Stack with the calculated hash flush against the block end.

        The modeled junk region past the block is deliberately short
        (0x40 bytes): landings further out dereference unmapped stack
        and surface as out-of-bounds, the simulator's halt condition.
        """
        stream = ByteStream(derive_seed(seed, "stack", block_length))
        return cls(
            post_bytes=stream.take(0x40),
            calc_hash_offset=block_length,
            pre_gap=stream.take(0x20),
        )

    @classmethod
    def factory_firmware(
        cls,
        block_length: int,
        seed: bytes | str = b"factory-stack",
        calc_hash_offset: Optional[int] = None,
    ) -> "StackModel":
        """Stack whose stored hash is NOT at the block end.

        The true offset for that parser is unknown; 0x60 bytes past the
        block is this artifact's stand-in, and it is a free parameter.
        """
        stream = ByteStream(derive_seed(seed, "stack", block_length))
        offset = block_length + 0x60 if calc_hash_offset is None else calc_hash_offset
        if offset == block_length:
            raise ValueError("factory layout must differ from the block-end layout")
        return cls(
            post_bytes=stream.take(0xA0),
            calc_hash_offset=offset,
            pre_gap=stream.take(0x20),
        )

    def read_byte(self, offset: int, block: bytes, calc_hash: bytes) -> Optional[int]:
        """Effective stack byte at `offset`, or None if unmodeled.

        The stored calculated hash overlays every other source: it is a
        real write the verifier performed, so those 32 bytes are always
        present.
        """
        rel = offset - self.calc_hash_offset
        if 0 <= rel < len(calc_hash):
            return calc_hash[rel]
        if 0 <= offset < len(block):
            return block[offset]
        if offset >= len(block):
            post = offset - len(block)
            if post < len(self.post_bytes):
                return self.post_bytes[post]
            return None
        pre = len(self.pre_gap) + offset
        if pre >= 0:
            return self.pre_gap[pre]
        return None


class ParserMode(Enum):
    FLAWED = "flawed"
    STRICT = "strict"


@dataclass(frozen=True)
class ParserConfig:
    """Parser selection plus the predicate knobs used by classification.

    `target_window` is the set of landing offsets the classifier counts
    as hits (ignored by the strict parser).  `block_types`,
    `require_walk` and `check_type_bytes` shape the classification
    predicate for search and probability-estimation runs; `flawed_parse`
    itself always runs the plain walk with types {1, 2} and no type-byte
    checks.
    """

    mode: ParserMode = ParserMode.FLAWED
    target_window: frozenset = frozenset()
    compare_length: int = HASH_LENGTH
    block_types: frozenset = frozenset({0x01, 0x02})
    require_walk: bool = True
    check_type_bytes: bool = False

    def __post_init__(self):
        if self.compare_length != HASH_LENGTH:
            raise ValueError("compare_length is fixed at 0x20")
        object.__setattr__(self, "target_window", frozenset(self.target_window))
        object.__setattr__(self, "block_types", frozenset(self.block_types))

    @classmethod
    def flawed(
        cls,
        block_length: int,
        window: Optional[Iterable[int]] = None,
        check_type_bytes: bool = False,
    ) -> "ParserConfig":
        """Flawed-mode config; default window is the 128 offsets past the block."""
        if window is None:
            window = range(block_length, block_length + 128)
        return cls(
            mode=ParserMode.FLAWED,
            target_window=frozenset(window),
            check_type_bytes=check_type_bytes,
        )

    @classmethod
    def full_structure(cls, block_length: int) -> "ParserConfig":
        """Classification predicate with the structure bytes pinned.

        On top of the plain walk this demands the two 0x30 type bytes
        and the 0x04 final type byte an honestly-encoded digest carries.
        Random blocks pass at roughly the one-in-2^46 scale, so this is
        the config for extrapolating real-key search difficulty; it is
        deliberately stricter than `flawed_parse` itself.
        """
        return cls.flawed(block_length, check_type_bytes=True)

    @classmethod
    def strict(cls) -> "ParserConfig":
        return cls(mode=ParserMode.STRICT)


def _check_flag_bytes(block: bytes, allowed_types: frozenset) -> Optional[ParseOutcome]:
    if len(block) < 8:
        raise ValueError("signature block implausibly short")
    if block[0] != 0x00 or block[1] not in allowed_types:
        return ParseOutcome.reject(RejectReason.BAD_BLOCK_TYPE)
    return None


def flawed_parse(block: bytes, calc_hash: bytes, stack: StackModel) -> ParseOutcome:
    """Run the permissive walk and compare 32 bytes at the landing offset.

    The walk itself only ever reads block bytes; a terminator so late
    that the steering length byte would fall outside the block is a
    structural reject.  The final compare reads through `stack`, which
    is where an out-of-bounds landing turns into the simulator's
    data-abort analog.
    """
    if len(calc_hash) != HASH_LENGTH:
        raise ValueError("calculated hash must be 32 bytes")
    early = _check_flag_bytes(block, frozenset({0x01, 0x02}))
    if early:
        return early
    bl = len(block)
    t = block.find(0, 2)
    if t < 0:
        return ParseOutcome.reject(RejectReason.NO_PADDING_TERMINATOR)
    if t + _INNER_LEN >= bl:
        return ParseOutcome.reject(RejectReason.BAD_ASN1)
    inner_len = block[t + _INNER_LEN]
    landing = t + _LANDING_AFTER_INNER + inner_len
    for i in range(HASH_LENGTH):
        b = stack.read_byte(landing + i, block, calc_hash)
        if b is None:
            return ParseOutcome.out_of_bounds(landing)
        if b != calc_hash[i]:
            return ParseOutcome.reject(RejectReason.HASH_MISMATCH, landing)
    return ParseOutcome.accept(landing)


def strict_parse(block: bytes, calc_hash: bytes) -> ParseOutcome:
    """Run the fixed walk: every check precedes every dereference."""
    if len(calc_hash) != HASH_LENGTH:
        raise ValueError("calculated hash must be 32 bytes")
    early = _check_flag_bytes(block, frozenset({0x01}))
    if early:
        return early
    bl = len(block)
    t = -1
    for i in range(2, bl):
        if block[i] == 0x00:
            t = i
            break
        if block[i] != 0xFF:
            return ParseOutcome.reject(RejectReason.PADDING_NOT_FF)
    if t < 0:
        return ParseOutcome.reject(RejectReason.NO_PADDING_TERMINATOR)
    if t - 2 < 8:
        return ParseOutcome.reject(RejectReason.PADDING_TOO_SHORT)

    if t + _INNER_LEN >= bl:
        return ParseOutcome.reject(RejectReason.BAD_ASN1)
    outer_len = block[t + _OUTER_LEN]
    inner_len = block[t + _INNER_LEN]
    if block[t + _OUTER_TYPE] != 0x30 or block[t + _INNER_TYPE] != 0x30:
        return ParseOutcome.reject(RejectReason.BAD_ASN1)
    if t + _INNER_TYPE + outer_len > bl:
        return ParseOutcome.reject(RejectReason.BAD_ASN1)
    if t + _INNER_CONTENT + inner_len + 2 > bl:
        return ParseOutcome.reject(RejectReason.BAD_ASN1)
    final_type = block[t + _INNER_CONTENT + inner_len]
    final_len = block[t + _INNER_CONTENT + inner_len + 1]
    landing = t + _LANDING_AFTER_INNER + inner_len
    if final_type != 0x04 or final_len != HASH_LENGTH:
        return ParseOutcome.reject(RejectReason.BAD_ASN1)
    if landing + HASH_LENGTH > bl:
        return ParseOutcome.reject(RejectReason.BAD_ASN1)
    if block[t + 1 : t + 1 + len(SHA256_DIGEST_INFO)] != SHA256_DIGEST_INFO:
        return ParseOutcome.reject(RejectReason.BAD_ASN1)
    if landing + HASH_LENGTH != bl:
        return ParseOutcome.reject(RejectReason.TRAILING_GARBAGE, landing)
    if block[landing : landing + HASH_LENGTH] != calc_hash:
        return ParseOutcome.reject(RejectReason.HASH_MISMATCH, landing)
    return ParseOutcome.accept(landing)


def make_classifier(config: ParserConfig) -> Callable[[bytes], Optional[int]]:
    """Compile `config` into a fast block -> landing-offset predicate.

    The returned callable is the stack-independent validity check the
    brute-force search runs millions of times: it succeeds with landing
    offset L exactly when `flawed_parse` would accept the block against
    a stack whose calculated hash sits at L (provided the walk is the
    faithful one, i.e. block_types == {1, 2} and no type-byte checks).
    """
    if config.mode is not ParserMode.FLAWED:
        raise ValueError("classification is defined for the flawed parser only")
    if not config.require_walk:
        raise ValueError("classification requires the structural walk")
    window = config.target_window
    allowed = config.block_types
    check_types = config.check_type_bytes

    def classify(block: bytes) -> Optional[int]:
        bl = len(block)
        if bl < 8 or block[0] != 0x00 or block[1] not in allowed:
            return None
        t = block.find(0, 2)
        if t < 0 or t + _INNER_LEN >= bl:
            return None
        inner_len = block[t + _INNER_LEN]
        landing = t + _LANDING_AFTER_INNER + inner_len
        if landing not in window:
            return None
        if check_types:
            if block[t + _OUTER_TYPE] != 0x30 or block[t + _INNER_TYPE] != 0x30:
                return None
            final_pos = t + _INNER_CONTENT + inner_len
            if final_pos >= bl or block[final_pos] != 0x04:
                return None
        return landing

    return classify


def classify_plaintext(block: bytes, config: ParserConfig) -> Optional[int]:
    """Landing offset if the walk completes into the target window, else None."""
    return make_classifier(config)(block)


def pkcs1_digest_block(digest: bytes, block_length: int) -> bytes:
    """Honest EMSA-PKCS1-v1_5 encoding: 00 01 FF..FF 00 DigestInfo digest."""
    if len(digest) != HASH_LENGTH:
        raise ValueError("digest must be 32 bytes")
    pad_len = block_length - 3 - len(SHA256_DIGEST_INFO) - HASH_LENGTH
    if pad_len < 8:
        raise ValueError(f"block length {block_length} too small for an honest signature")
    return b"\x00\x01" + b"\xff" * pad_len + b"\x00" + SHA256_DIGEST_INFO + digest


# --- annotated hex dump -------------------------------------------------

_LEGEND = (
    ("F", "flag byte"),
    ("P", "padding"),
    ("0", "padding terminator"),
    ("T", "type field"),
    ("L", "length field"),
    ("A", "added length"),
    (".", "other"),
)


def _categorize(block: bytes) -> list[str]:
    tags = ["."] * len(block)
    tags[0] = tags[1] = "F"
    if block[0] != 0x00 or block[1] not in (0x01, 0x02):
        return tags
    t = block.find(0, 2)
    if t < 0:
        for i in range(2, len(block)):
            tags[i] = "P"
        return tags
    for i in range(2, t):
        tags[i] = "P"
    tags[t] = "0"
    for pos, tag in (
        (t + _OUTER_TYPE, "T"),
        (t + _OUTER_LEN, "L"),
        (t + _INNER_TYPE, "T"),
        (t + _INNER_LEN, "L"),
    ):
        if pos < len(block):
            tags[pos] = tag
    if t + _INNER_LEN < len(block):
        inner_len = block[t + _INNER_LEN]
        for i in range(t + _INNER_CONTENT, min(t + _INNER_CONTENT + inner_len, len(block))):
            tags[i] = "A"
        for pos, tag in (
            (t + _INNER_CONTENT + inner_len, "T"),
            (t + _INNER_CONTENT + inner_len + 1, "L"),
        ):
            if pos < len(block):
                tags[pos] = tag
    return tags


def annotate_plaintext(block: bytes) -> str:
    """Hex dump of a plaintext block with per-byte walk categories."""
    tags = _categorize(block)
    lines = []
    for row in range(0, len(block), 16):
        chunk = block[row : row + 16]
        hexes = " ".join(f"{b:02x}" for b in chunk)
        marks = "  ".join(tags[row : row + len(chunk)])
        lines.append(f"{row:#06x}  {hexes}")
        lines.append(f"        {marks}")
    legend = "   ".join(f"{code}={name}" for code, name in _LEGEND)
    lines.append(f"legend: {legend}")
    return "\n".join(lines)
