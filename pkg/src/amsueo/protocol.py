"""Key material, modulus-table generation, and the AM/SUEO/DBLTKM state machine.

The protocol encrypts two-limb blocks with a per-session effective matrix
and a per-session modulus drawn from a small table of divisors of a hidden
composite p.  After each session the three update secrets are reduced into
tiny index spaces (20 / 4 / table size) to select the next effective state.

Two family modes are supported:

* ``single-variant`` -- the effective matrix is one of {A, B, A^T, B^T},
  selected by the 4-way order index.  This is the canonical mode for
  attack experiments.
* ``full-20`` -- the 20-state transpose/block family combined with the
  4-way ordering; pair states act block-diagonally (even block positions
  use the first matrix of the pair, odd positions the second).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from random import Random
from typing import NamedTuple, Optional, Union

from .modmath import (
    Mat2,
    Vec2,
    decode128,
    encode128,
    mat_det,
    mat_inv_mod,
    mat_mul_mod,
    mat_vec_mod,
    transpose,
)

FAMILY_SINGLE = "single-variant"
FAMILY_FULL20 = "full-20"
FAMILY_MODES = (FAMILY_SINGLE, FAMILY_FULL20)

Z_DBLTKM = 20
Z_SUEO = 4

SYSTEM_FORMAT = "am-sueo-dbltkm-system/1"


class GenerationError(RuntimeError):
    """Raised when bounded resampling cannot satisfy a construction constraint."""


class DerivationError(RuntimeError):
    """Raised when an effective state cannot be derived (non-invertible matrix)."""


@dataclass(frozen=True)
class SystemParams:
    """All tunable bit widths, table sizes, and mode switches."""

    modulus_bits: int = 64
    limb_bits: Optional[int] = None
    factor_bound_bits: int = 20
    am_table_size: int = 8
    n_matrices: int = 2
    family_mode: str = FAMILY_SINGLE
    seed: int = 0

    def __post_init__(self):
        if self.limb_bits is None:
            object.__setattr__(self, "limb_bits", self.modulus_bits - 1)
        if self.modulus_bits < 8:
            raise ValueError(f"modulus_bits must be >= 8, got {self.modulus_bits}")
        if not self.limb_bits < self.modulus_bits:
            raise ValueError(
                f"limb_bits must be < modulus_bits ({self.limb_bits} >= {self.modulus_bits})"
            )
        if self.am_table_size < 2:
            raise ValueError(f"am_table_size must be >= 2, got {self.am_table_size}")
        if not self.factor_bound_bits < self.modulus_bits:
            raise ValueError(
                f"factor_bound_bits must be < modulus_bits, got {self.factor_bound_bits}"
            )
        if self.factor_bound_bits < 6:
            raise ValueError(f"factor_bound_bits must be >= 6, got {self.factor_bound_bits}")
        if self.n_matrices != 2:
            raise ValueError("the lightweight construction fixes n_matrices = 2")
        if self.family_mode not in FAMILY_MODES:
            raise ValueError(f"family_mode must be one of {FAMILY_MODES}")

    @property
    def payload_bits(self) -> int:
        return 2 * self.limb_bits


@dataclass(frozen=True)
class ModulusInfo:
    q: int
    factors: tuple[int, ...] = ()  # ground truth; test sidecar only


@dataclass(frozen=True)
class AmSystem:
    """Hidden composite p and its table of session moduli."""

    p: int
    table: tuple[ModulusInfo, ...]

    def moduli(self) -> tuple[int, ...]:
        return tuple(info.q for info in self.table)


@dataclass(frozen=True)
class SecretState:
    """Long-term key material plus the current effective-state indices."""

    A: Mat2
    B: Mat2
    S: int
    ID: int
    dbltkm_idx: int
    sueo_idx: int
    am_idx: int


class UpdateSecrets(NamedTuple):
    sd: int
    sp: int
    sc: int


MatrixOrPair = Union[Mat2, tuple[Mat2, Mat2]]


@dataclass(frozen=True)
class EffectiveState:
    """Concrete (matrix, modulus) pair used to encrypt one session's blocks."""

    matrix: MatrixOrPair
    modulus: int
    decrypt_matrix: MatrixOrPair

    def matrix_for_block(self, i: int) -> Mat2:
        if isinstance(self.matrix, Mat2):
            return self.matrix
        return self.matrix[i & 1]

    def decrypt_for_block(self, i: int) -> Mat2:
        if isinstance(self.decrypt_matrix, Mat2):
            return self.decrypt_matrix
        return self.decrypt_matrix[i & 1]

    def key(self) -> tuple:
        """Hashable identity of the effective transform (matrix content + modulus)."""
        m = self.matrix
        if isinstance(m, Mat2):
            return (m, self.modulus)
        return (m[0], m[1], self.modulus)


# ---------------------------------------------------------------------------
# primes and modulus-table generation
# ---------------------------------------------------------------------------

_SMALL_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def _is_prime(n: int) -> bool:
    if n < 2:
        return False
    for p in _SMALL_PRIMES:
        if n % p == 0:
            return n == p
    f = 41
    while f * f <= n:
        if n % f == 0:
            return False
        f += 2
    return True


def _random_prime(bits: int, rng: Random, tries: int = 4000) -> int:
    for _ in range(tries):
        cand = rng.getrandbits(bits) | (1 << (bits - 1)) | 1
        if _is_prime(cand):
            return cand
    raise GenerationError(f"no {bits}-bit prime found in {tries} draws")


def _sample_prime_pool(params: SystemParams, rng: Random) -> list[int]:
    # Pool entropy targets ~2.2x the modulus width so the table moduli are
    # forced to share factors (the hidden composite stays near double width).
    target_bits = int(2.2 * params.modulus_bits)
    min_bits = max(6, params.factor_bound_bits // 2 + 1)
    pool: list[int] = []
    total = 0
    while total < target_bits:
        bits = rng.randint(min_bits, params.factor_bound_bits)
        p = _random_prime(bits, rng)
        if p in pool:
            continue
        pool.append(p)
        total += p.bit_length()
    if all(p.bit_length() >= params.factor_bound_bits for p in pool):
        pool[0] = _random_prime(params.factor_bound_bits - 1, rng)
    return pool


def _build_modulus(pool: list[int], lo: int, hi: int, rng: Random, tries: int = 64) -> Optional[tuple[int, ...]]:
    """Product of distinct pool primes landing strictly inside (lo, hi)."""
    for _ in range(tries):
        order = rng.sample(pool, len(pool))
        prod = 1
        used: list[int] = []
        for pr in order:
            if prod > lo:
                break
            if prod * pr < hi:
                prod *= pr
                used.append(pr)
        if lo < prod < hi:
            return tuple(sorted(used))
    return None


def gen_am_system(params: SystemParams, rng: Random, max_retries: int = 200) -> AmSystem:
    """Generate the modulus table: distinct smooth divisors of one hidden composite.

    Every prime factor fits in factor_bound_bits; at least one modulus
    carries a strictly smaller factor, and at least two moduli share a
    prime.  p is the lcm of the table.
    """
    lo = 1 << (params.modulus_bits - 1)
    hi = 1 << params.modulus_bits
    last_fail = "no attempt"
    for _ in range(max_retries):
        pool = _sample_prime_pool(params, rng)
        table: list[ModulusInfo] = []
        seen: set[int] = set()
        for _ in range(params.am_table_size):
            for _ in range(64):
                factors = _build_modulus(pool, lo, hi, rng)
                if factors is None:
                    break
                q = math.prod(factors)
                if q not in seen:
                    seen.add(q)
                    table.append(ModulusInfo(q=q, factors=factors))
                    break
            else:
                break
        if len(table) != params.am_table_size:
            last_fail = "could not place enough distinct moduli in range"
            continue
        prime_use: dict[int, int] = {}
        for info in table:
            for pr in info.factors:
                prime_use[pr] = prime_use.get(pr, 0) + 1
        if not any(c >= 2 for c in prime_use.values()):
            last_fail = "no prime shared between two moduli"
            continue
        if not any(pr.bit_length() < params.factor_bound_bits for pr in prime_use):
            last_fail = "no factor strictly below the factor bound"
            continue
        p = math.lcm(*(info.q for info in table))
        if not (1.5 * params.modulus_bits <= p.bit_length() <= 2.8 * params.modulus_bits):
            last_fail = f"hidden composite has {p.bit_length()} bits"
            continue
        return AmSystem(p=p, table=tuple(table))
    raise GenerationError(f"modulus table generation failed: {last_fail}")


# ---------------------------------------------------------------------------
# secret-state generation
# ---------------------------------------------------------------------------


def _sample_matrix(bound: int, p: int, rng: Random, tries: int = 2000) -> Mat2:
    for _ in range(tries):
        m = Mat2(*(rng.randrange(bound) for _ in range(4)))
        if math.gcd(mat_det(m), p) != 1:
            continue
        if math.gcd(m.m21 - m.m12, p) != 1:
            continue
        return m
    raise GenerationError("could not sample an invertible matrix")


def gen_secret_state(params: SystemParams, am: AmSystem, rng: Random) -> SecretState:
    """Sample base matrices, long-term secret, identity, and initial indices.

    Matrix entries stay two bits below the modulus width: below every table
    modulus, so an entry is never silently reduced by a session modulus and
    leaked columns compare as integers, and small enough relative to the
    moduli that nonce-difference leaks survive wraparound at a useful rate.
    Determinants and the off-diagonal difference m21 - m12 are forced
    coprime to p.
    """
    entry_bound = 1 << (params.modulus_bits - 2)
    a = _sample_matrix(entry_bound, am.p, rng)
    b = _sample_matrix(entry_bound, am.p, rng)
    payload = 1 << params.payload_bits
    return SecretState(
        A=a,
        B=b,
        S=rng.randrange(payload),
        ID=rng.randrange(payload),
        dbltkm_idx=rng.randrange(Z_DBLTKM),
        sueo_idx=rng.randrange(Z_SUEO),
        am_idx=rng.randrange(params.am_table_size),
    )


# ---------------------------------------------------------------------------
# effective-state selection
# ---------------------------------------------------------------------------


def single_variants(a: Mat2, b: Mat2) -> tuple[Mat2, Mat2, Mat2, Mat2]:
    """Canonical 4-variant enumeration: A, B, A^T, B^T."""
    return (a, b, transpose(a), transpose(b))


def sueo_select(idx: int, a: Mat2, b: Mat2) -> tuple[Mat2, ...]:
    """Order selector: A, B, A*B, B*A as factor tuples (products taken at use time)."""
    if not 0 <= idx < Z_SUEO:
        raise ValueError(f"order index must be in [0, {Z_SUEO}), got {idx}")
    return ((a,), (b,), (a, b), (b, a))[idx]


def dbltkm_select(idx: int, a: Mat2, b: Mat2) -> tuple[Mat2, ...]:
    """Transpose/block family: 4 single variants then 16 ordered pairs.

    idx 0..3 -> (A,), (B,), (A^T,), (B^T,); idx 4..19 -> ordered pair
    (variants[(idx-4)//4], variants[(idx-4)%4]) applied block-diagonally.
    """
    if not 0 <= idx < Z_DBLTKM:
        raise ValueError(f"family index must be in [0, {Z_DBLTKM}), got {idx}")
    variants = single_variants(a, b)
    if idx < 4:
        return (variants[idx],)
    k = idx - 4
    return (variants[k // 4], variants[k % 4])


def _eval_factors(factors: tuple[Mat2, ...], q: int) -> Mat2:
    out = factors[0]
    for f in factors[1:]:
        out = mat_mul_mod(out, f, q)
    return out


def derive_effective_state(state: SecretState, am: AmSystem, params: SystemParams) -> EffectiveState:
    """Map the current indices to the concrete (matrix, modulus) pair.

    single-variant mode: matrix = {A, B, A^T, B^T}[sueo_idx].
    full-20 mode: the 20-state selection yields a per-block pair (X, Y);
    the order index then fixes the pair's usage: even blocks evaluate the
    ordering over (X, Y), odd blocks the mirrored ordering over (Y, X).
    """
    q = am.table[state.am_idx].q
    if params.family_mode == FAMILY_SINGLE:
        m = single_variants(state.A, state.B)[state.sueo_idx]
        inv = mat_inv_mod(m, q)
        if inv is None:
            raise DerivationError("effective matrix not invertible (generator invariant broken)")
        return EffectiveState(matrix=m, modulus=q, decrypt_matrix=inv)

    sel = dbltkm_select(state.dbltkm_idx, state.A, state.B)
    x, y = sel if len(sel) == 2 else (sel[0], sel[0])
    even = _eval_factors(sueo_select(state.sueo_idx, x, y), q)
    odd = _eval_factors(sueo_select(state.sueo_idx, y, x), q)
    inv_even = mat_inv_mod(even, q)
    inv_odd = mat_inv_mod(odd, q)
    if inv_even is None or inv_odd is None:
        raise DerivationError("effective matrix not invertible (generator invariant broken)")
    return EffectiveState(matrix=(even, odd), modulus=q, decrypt_matrix=(inv_even, inv_odd))


# ---------------------------------------------------------------------------
# message encryption and the per-session update
# ---------------------------------------------------------------------------


def encrypt_message(values: list[int], eff: EffectiveState, limb_bits: int) -> list[Vec2]:
    """Limb-encode each value into one block and transform blocks independently."""
    return [
        mat_vec_mod(eff.matrix_for_block(i), encode128(v, limb_bits), eff.modulus)
        for i, v in enumerate(values)
    ]


def decrypt_message(blocks: list[Vec2], eff: EffectiveState, limb_bits: int) -> list[int]:
    """Invert encrypt_message; raises ValueError when a block is not a valid payload."""
    return [
        decode128(mat_vec_mod(eff.decrypt_for_block(i), blk, eff.modulus), limb_bits)
        for i, blk in enumerate(blocks)
    ]


def update_state(state: SecretState, upd: UpdateSecrets, params: SystemParams) -> SecretState:
    """Reduce the update secrets into the three index spaces; keys never change."""
    return replace(
        state,
        dbltkm_idx=upd.sd % Z_DBLTKM,
        sueo_idx=upd.sp % Z_SUEO,
        am_idx=upd.sc % params.am_table_size,
    )


# ---------------------------------------------------------------------------
# system export / import (decimal strings throughout)
# ---------------------------------------------------------------------------


def system_to_dict(params: SystemParams, am: AmSystem, state: SecretState,
                   include_factors: bool = False) -> dict:
    table = []
    for info in am.table:
        entry = {"q": str(info.q)}
        if include_factors:
            entry["factors"] = [str(f) for f in info.factors]
        table.append(entry)
    return {
        "format": SYSTEM_FORMAT,
        "params": {
            "modulus_bits": params.modulus_bits,
            "limb_bits": params.limb_bits,
            "factor_bound_bits": params.factor_bound_bits,
            "am_table_size": params.am_table_size,
            "n_matrices": params.n_matrices,
            "family_mode": params.family_mode,
            "seed": params.seed,
        },
        "p": str(am.p),
        "table": table,
        "A": [str(v) for v in state.A],
        "B": [str(v) for v in state.B],
        "S": str(state.S),
        "ID": str(state.ID),
        "indices": {
            "dbltkm": state.dbltkm_idx,
            "sueo": state.sueo_idx,
            "am": state.am_idx,
        },
    }


def system_from_dict(doc: dict) -> tuple[SystemParams, AmSystem, SecretState]:
    if doc.get("format") != SYSTEM_FORMAT:
        raise ValueError(f"unrecognized system format: {doc.get('format')!r}")
    params = SystemParams(**doc["params"])
    table = tuple(
        ModulusInfo(q=int(entry["q"]), factors=tuple(int(f) for f in entry.get("factors", ())))
        for entry in doc["table"]
    )
    am = AmSystem(p=int(doc["p"]), table=table)
    idx = doc["indices"]
    state = SecretState(
        A=Mat2(*(int(v) for v in doc["A"])),
        B=Mat2(*(int(v) for v in doc["B"])),
        S=int(doc["S"]),
        ID=int(doc["ID"]),
        dbltkm_idx=idx["dbltkm"],
        sueo_idx=idx["sueo"],
        am_idx=idx["am"],
    )
    return params, am, state


def save_system(path: Path, params: SystemParams, am: AmSystem, state: SecretState,
                include_factors: bool = False) -> None:
    doc = system_to_dict(params, am, state, include_factors=include_factors)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_system(path: Path) -> tuple[SystemParams, AmSystem, SecretState]:
    return system_from_dict(json.loads(Path(path).read_text()))


def generate_system(params: SystemParams) -> tuple[AmSystem, SecretState]:
    """Seed-deterministic system generation (table + secret state)."""
    rng = Random(f"{params.seed}:system")
    am = gen_am_system(params, rng)
    state = gen_secret_state(params, am, rng)
    return am, state
