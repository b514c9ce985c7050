"""Passive multi-session recovery of the protocol's full secret state.

Three phases, all driven only by eavesdropped transcripts:

1. Column leaks.  When a session's pre- and post-update states coincide,
   the ciphertext differences of (nonce, nonce+1) for both the tag and the
   reader nonce reveal the same column of the effective matrix; the two
   differences agreeing is the built-in consistency check.  Leaked columns
   from a matrix and its transpose share the bottom-right entry, which
   pairs them up and yields three entries of each base matrix.
2. Reduced-modulus scan.  For every small prime, session pairs attributed
   to a variant and its transpose give an overdetermined linear system for
   the long-term secret modulo that prime.  Primes dividing the session
   moduli of both pair members produce repeated identical reduced
   solutions; consistency votes separate them from noise.
3. Candidate reconstruction.  Accepted primes are combined into full-width
   modulus candidates, each checked against the full session equations;
   verified moduli pin down the secret coordinates exactly (they are below
   every modulus by construction), complete the matrices, and open every
   attributed session for decryption, next-state prediction, and forgery.

This module never touches ground-truth sidecars; it imports only the
exact-arithmetic layer.
"""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import Iterable, Optional, Sequence

from .modmath import Mat2, Vec2, decode128, encode128, mat_inv_mod, mat_vec_mod, mod_inv, transpose


class AmbiguityError(RuntimeError):
    """Raised when leaked columns collide in a way clustering cannot resolve."""


@dataclass(frozen=True)
class AttackConfig:
    """Structural protocol parameters (public format) plus attack thresholds."""

    modulus_bits: int = 64
    limb_bits: Optional[int] = None
    factor_bound_bits: int = 20
    am_table_size: int = 8
    accept_threshold: int = 4
    verify_sessions: int = 4
    pairs_per_qx: int = 128
    verify_pair_window: int = 96
    workers: int = 1
    reconstruct_multiplicity_cap: int = 2
    reconstruct_max_candidates: int = 512
    wrap_heuristic: bool = False

    def __post_init__(self):
        if self.limb_bits is None:
            object.__setattr__(self, "limb_bits", self.modulus_bits - 1)
        if not self.limb_bits < self.modulus_bits:
            raise ValueError("limb_bits must be < modulus_bits")
        if self.accept_threshold < 1 or self.verify_sessions < 1:
            raise ValueError("thresholds must be >= 1")


@dataclass(frozen=True)
class ColumnLeak:
    """Second column of a session's effective matrix, or its wrapped shadow."""

    session_id: int
    column: tuple[int, int]
    wrapped: bool


@dataclass
class PartialMatrix:
    """Three recovered entries of one base matrix, orientation still open.

    variant_sessions produced the (m12, m22) column, transpose_sessions the
    (m21, m22) column; which of the two is the untransposed base is settled
    in phase 3.
    """

    m12: int
    m21: int
    m22: int
    variant_label: str
    variant_sessions: tuple[int, ...]
    transpose_sessions: tuple[int, ...]
    m11: Optional[int] = None


@dataclass(frozen=True)
class QxCandidate:
    qx: int
    votes: int
    residues: tuple[int, int]


@dataclass(frozen=True)
class ReconstructResult:
    candidates: tuple[int, ...]
    weights: tuple[int, ...]
    truncated: bool


@dataclass(frozen=True)
class VerifiedModulus:
    q: int
    s1: int
    s2: int
    m11_by_family: dict[int, int]
    support_by_family: dict[int, int]


@dataclass
class CompletedFamily:
    """All four entries of one base-matrix family, plus both orientations."""

    family: int
    matrix: Mat2          # orientation as clustered; the transpose is the flip
    cross_check_ok: bool  # row-equation completion agreed with the verify step


@dataclass(frozen=True)
class SessionRecovery:
    session_id: int
    variant: str          # resolved variant label
    q: int
    nt: int
    nr: int
    sd: int
    sp: int
    sc: int
    idx_dbltkm: int
    idx_sueo: int
    idx_am: int


@dataclass
class FullRecovery:
    matrices: dict[str, Mat2]
    moduli: tuple[int, ...]
    S: int
    ID: Optional[int]
    sessions: list[SessionRecovery]
    sueo_index_map: dict[int, str]
    am_index_map: dict[int, int]
    prediction: Optional[dict]
    prediction_checks: int = 0
    prediction_failures: int = 0
    forgery: Optional[dict] = None
    integrity: dict = field(default_factory=dict)


@dataclass
class AttackResult:
    config: AttackConfig
    n_sessions: int
    leaks: list[ColumnLeak]
    n_wrapped: int
    partials: list[PartialMatrix]
    qx_candidates: list[QxCandidate]
    reconstructed: Optional[ReconstructResult]
    verified: list[VerifiedModulus]
    recovery: Optional[FullRecovery]
    outcome: str
    limiting_phase: Optional[str]
    timings: dict[str, float]
    scan_stats: dict[str, int]
    diagnostics: list[str]


# ---------------------------------------------------------------------------
# phase 1: column leaks and clustering
# ---------------------------------------------------------------------------


def detect_useful_session(t) -> Optional[ColumnLeak]:
    """Signed ciphertext differences of the two nonce blocks; a leak needs both
    differences to agree componentwise."""
    d_t = (t.c5[0][0] - t.c1[0][0], t.c5[0][1] - t.c1[0][1])
    d_r = (t.c6[0][0] - t.c2[0][0], t.c6[0][1] - t.c2[0][1])
    if d_t != d_r:
        return None
    return ColumnLeak(t.session_id, d_t, wrapped=(d_t[0] < 0 or d_t[1] < 0))


def group_leak_columns(leaks: Iterable[ColumnLeak]) -> dict[tuple[int, int], list[int]]:
    """Exact-duplicate merge of unwrapped leak columns -> sorted session ids."""
    cols: dict[tuple[int, int], list[int]] = {}
    for lk in leaks:
        if lk.wrapped:
            continue
        cols.setdefault(lk.column, []).append(lk.session_id)
    return {col: sorted(ids) for col, ids in sorted(cols.items())}


def cluster_leaks(leaks: Sequence[ColumnLeak]) -> list[PartialMatrix]:
    """Pair clusters sharing the bottom-right entry into partial base matrices.

    Unpaired clusters are dropped (no transpose partner yet); three or more
    distinct columns on one shared entry cannot be attributed and raise.
    """
    cols = group_leak_columns(leaks)
    by_m22: dict[int, list[tuple[int, int]]] = {}
    for col in cols:
        by_m22.setdefault(col[1], []).append(col)
    partials: list[PartialMatrix] = []
    fam = 0
    for m22 in sorted(by_m22):
        group = sorted(by_m22[m22])
        if len(group) >= 3:
            raise AmbiguityError(
                f"{len(group)} distinct leaked columns share entry {m22}: {group}"
            )
        if len(group) != 2:
            continue
        a, b = group
        partials.append(
            PartialMatrix(
                m12=a[0],
                m21=b[0],
                m22=m22,
                variant_label=f"fam{fam}",
                variant_sessions=tuple(cols[a]),
                transpose_sessions=tuple(cols[b]),
            )
        )
        fam += 1
    return partials


# ---------------------------------------------------------------------------
# phase 2: reduced-modulus scan
# ---------------------------------------------------------------------------


def sieve_odd_primes(limit: int) -> list[int]:
    """All odd primes <= limit (session moduli are odd, so 2 never divides one)."""
    if limit < 3:
        return []
    comp = bytearray(limit + 1)
    primes: list[int] = []
    for n in range(3, limit + 1, 2):
        if not comp[n]:
            primes.append(n)
            for m in range(n * n, limit + 1, 2 * n):
                comp[m] = 1
    return primes


def _scan_prime_range(primes, families, accept_threshold):
    """Vote accumulation over one contiguous prime range (parallel-safe)."""
    out = []
    counts: Counter = Counter()
    for qx in primes:
        counts.clear()
        for dm, m12, m21, m22, pairs in families:
            dmx = dm % qx
            m21x = m21 % qx
            if dmx == 0 or m21x == 0:
                continue
            dm_inv = pow(dmx, -1, qx)
            m21_inv = pow(m21x, -1, qx)
            m12x = m12 % qx
            m22x = m22 % qx
            for d1, c2u, c2t in pairs:
                s2 = d1 * dm_inv % qx
                s1 = (c2u - m22x * s2) * m21_inv % qx
                if (m12x * s1 + m22x * s2 - c2t) % qx:
                    continue
                counts[(s1, s2)] += 1
        if counts:
            (s1, s2), votes = max(counts.items(), key=lambda kv: (kv[1], kv[0]))
            if votes >= accept_threshold:
                out.append((qx, votes, s1, s2))
    return out


def _family_pair_data(transcripts_by_id, partials, cap):
    families = []
    for fam in partials:
        pairs = []
        for u in fam.variant_sessions:
            if len(pairs) >= cap:
                break
            cu = transcripts_by_id[u].c1[1]
            for v in fam.transpose_sessions:
                if len(pairs) >= cap:
                    break
                ct = transcripts_by_id[v].c1[1]
                pairs.append((ct[0] - cu[0], cu[1], ct[1]))
        families.append((fam.m21 - fam.m12, fam.m12, fam.m21, fam.m22, tuple(pairs)))
    return families


def qx_scan(transcripts: Sequence, partials: Sequence[PartialMatrix], cfg: AttackConfig) -> list[QxCandidate]:
    """Test every odd prime up to the factor bound for repeated consistent
    reduced solutions of the long-term secret across transpose-related
    session pairs; return candidates meeting the vote threshold."""
    index = {t.session_id: t for t in transcripts}
    families = _family_pair_data(index, partials, cfg.pairs_per_qx)
    if not any(f[4] for f in families):
        return []
    primes = sieve_odd_primes(1 << cfg.factor_bound_bits)
    if cfg.workers > 1 and len(primes) > 1024:
        n_chunks = cfg.workers * 4
        step = (len(primes) + n_chunks - 1) // n_chunks
        chunks = [primes[i : i + step] for i in range(0, len(primes), step)]
        with Pool(cfg.workers) as pool:
            rows_nested = pool.starmap(
                _scan_prime_range,
                [(chunk, families, cfg.accept_threshold) for chunk in chunks],
            )
        rows = [row for chunk_rows in rows_nested for row in chunk_rows]
    else:
        rows = _scan_prime_range(primes, families, cfg.accept_threshold)
    rows.sort()
    return [QxCandidate(qx, votes, (s1, s2)) for qx, votes, s1, s2 in rows]


def scan_work(partials: Sequence[PartialMatrix], cfg: AttackConfig) -> dict[str, int]:
    """Analytic accounting of the scan: candidate primes x session pairs."""
    n_pairs = sum(
        min(cfg.pairs_per_qx, len(p.variant_sessions) * len(p.transpose_sessions))
        for p in partials
    )
    n_primes = len(sieve_odd_primes(1 << cfg.factor_bound_bits))
    return {"primes": n_primes, "pairs": n_pairs, "checks": n_primes * n_pairs}


# ---------------------------------------------------------------------------
# phase 3: candidate reconstruction and full verification
# ---------------------------------------------------------------------------


def reconstruct_q_candidates(accepted: Sequence[QxCandidate], cfg: AttackConfig) -> ReconstructResult:
    """Enumerate products of accepted primes (bounded multiplicity) landing in
    the modulus range, ordered by total vote weight."""
    lo = 1 << (cfg.modulus_bits - 1)
    hi = 1 << cfg.modulus_bits
    best_votes: dict[int, int] = {}
    for cand in accepted:
        best_votes[cand.qx] = max(best_votes.get(cand.qx, 0), cand.votes)
    primes = sorted(best_votes)
    found: list[tuple[int, int]] = []

    def walk(i: int, prod: int, weight: int) -> None:
        if prod > lo:
            # In range: any further odd-prime factor at least triples the
            # product past the upper bound, so this node is terminal.
            found.append((prod, weight))
            return
        for j in range(i, len(primes)):
            pr = primes[j]
            votes = best_votes[pr]
            nxt = prod
            w = weight
            for _ in range(cfg.reconstruct_multiplicity_cap):
                nxt *= pr
                w += votes
                if nxt >= hi:
                    break
                walk(j + 1, nxt, w)

    walk(0, 1, 0)
    found.sort(key=lambda t: (-t[1], t[0]))
    truncated = len(found) > cfg.reconstruct_max_candidates
    found = found[: cfg.reconstruct_max_candidates]
    return ReconstructResult(
        candidates=tuple(q for q, _ in found),
        weights=tuple(w for _, w in found),
        truncated=truncated,
    )


def wrap_q_candidates(transcripts: Sequence, cfg: AttackConfig, min_votes: int = 2) -> list[int]:
    """Off-by-default heuristic: when the two nonce differences of a session
    disagree by a repeated constant, that constant is a modulus candidate.
    This exploits single-session wrap anomalies and goes beyond the
    consistency-only pipeline."""
    lo = 1 << (cfg.modulus_bits - 1)
    hi = 1 << cfg.modulus_bits
    votes: Counter = Counter()
    for t in transcripts:
        d_t = (t.c5[0][0] - t.c1[0][0], t.c5[0][1] - t.c1[0][1])
        d_r = (t.c6[0][0] - t.c2[0][0], t.c6[0][1] - t.c2[0][1])
        for a, b in zip(d_t, d_r):
            diff = abs(a - b)
            if lo < diff < hi:
                votes[diff] += 1
    return sorted(q for q, v in votes.items() if v >= min_votes)


def _window_blocks(transcripts: Sequence, window: int) -> list[tuple[int, int]]:
    return [(t.c1[1][0], t.c1[1][1]) for t in transcripts[:window]]


def verify_q(
    q_cand: int,
    transcripts: Sequence,
    partials: Sequence[PartialMatrix],
    cfg: AttackConfig,
) -> Optional[VerifiedModulus]:
    """Full verification of one modulus candidate against session pairs.

    Every ordered pair of sessions in the pair window is treated as a
    hypothetical (variant, transpose) pair; the two bottom-row equations
    determine the secret coordinates, the variant top row determines the
    missing entry, and the transpose top row cross-checks it.  Only a true
    modulus makes many pairs land on one identical solution.
    """
    blocks = _window_blocks(transcripts, cfg.verify_pair_window)
    limb_bound = 1 << cfg.limb_bits
    m11_by_family: dict[int, int] = {}
    support: dict[int, int] = {}
    coords: Optional[tuple[int, int]] = None
    for fi, fam in enumerate(partials):
        dm_inv = mod_inv(fam.m21 - fam.m12, q_cand)
        m22_inv = mod_inv(fam.m22, q_cand)
        if dm_inv is None or m22_inv is None:
            continue
        m12 = fam.m12 % q_cand
        m21 = fam.m21 % q_cand
        m22 = fam.m22 % q_cand
        counts: Counter = Counter()
        for iu, (c1u, c2u) in enumerate(blocks):
            for it, (c1t, c2t) in enumerate(blocks):
                if it == iu:
                    continue
                s1 = (c2u - c2t) * dm_inv % q_cand
                if s1 == 0 or s1 >= limb_bound:
                    continue
                s2 = (c2u - m21 * s1) * m22_inv % q_cand
                if s2 >= limb_bound:
                    continue
                counts[(s1, s2)] += 1
        winners = [key for key, n in counts.items() if n >= cfg.verify_sessions]
        if not winners:
            continue
        # Re-derive the missing entry for qualifying keys only, with the
        # transpose-row cross-check as the decisive filter.
        best: Optional[tuple[int, int, int, int]] = None  # (support, -s1, -s2, m11)
        for key in sorted(winners):
            ks1, ks2 = key
            m11_votes: Counter = Counter()
            for iu, (c1u, c2u) in enumerate(blocks):
                for it, (c1t, c2t) in enumerate(blocks):
                    if it == iu:
                        continue
                    s1 = (c2u - c2t) * dm_inv % q_cand
                    if s1 != ks1:
                        continue
                    s2 = (c2u - m21 * s1) * m22_inv % q_cand
                    if s2 != ks2:
                        continue
                    s1_inv = mod_inv(s1, q_cand)
                    if s1_inv is None:
                        continue
                    m11 = (c1u - m12 * s2) * s1_inv % q_cand
                    if (m11 * s1 + m21 * s2 - c1t) % q_cand:
                        continue
                    m11_votes[m11] += 1
            if not m11_votes:
                continue
            m11, n = max(m11_votes.items(), key=lambda kv: (kv[1], -kv[0]))
            if n < cfg.verify_sessions:
                continue
            cand = (n, key, m11)
            if best is None or cand[0] > best[0]:
                best = cand
        if best is None:
            continue
        n, key, m11 = best
        if coords is None:
            coords = key
        elif coords != key:
            # Families disagreeing on the secret coordinates cannot both be
            # under this modulus; reject the candidate outright.
            return None
        m11_by_family[fi] = m11
        support[fi] = n
    if coords is None or not m11_by_family:
        return None
    return VerifiedModulus(
        q=q_cand,
        s1=coords[0],
        s2=coords[1],
        m11_by_family=m11_by_family,
        support_by_family=support,
    )


def complete_matrices(
    verified: Sequence[VerifiedModulus],
    partials: Sequence[PartialMatrix],
    transcripts: Sequence,
    cfg: AttackConfig,
) -> tuple[list[CompletedFamily], list[str]]:
    """Fill the remaining entry of every family via the ordinary row equation
    d = (C - known*coord) * coord^-1 over attributed secret blocks, and
    cross-check against the entries the verification step produced."""
    diagnostics: list[str] = []
    if not verified:
        return [], ["no verified modulus; cannot complete matrices"]
    s1, s2 = verified[0].s1, verified[0].s2
    moduli = [v.q for v in verified]
    completed: list[CompletedFamily] = []
    for fi, fam in enumerate(partials):
        votes: Counter = Counter()
        for q in moduli:
            s1_inv = mod_inv(s1, q)
            if s1_inv is None:
                continue
            for t in transcripts:
                c1, c2 = t.c1[1]
                # Hypothesis: this session uses the family as clustered.
                if (fam.m21 * s1 + fam.m22 * s2 - c2) % q == 0:
                    votes[(fam.m12 * s2 - c1) * -s1_inv % q] += 1
                # Hypothesis: it uses the transposed form.
                elif (fam.m12 * s1 + fam.m22 * s2 - c2) % q == 0:
                    votes[(fam.m21 * s2 - c1) * -s1_inv % q] += 1
        if not votes:
            diagnostics.append(f"{fam.variant_label}: no session matched the row equation")
            continue
        m11, n = max(votes.items(), key=lambda kv: (kv[1], -kv[0]))
        if n < cfg.verify_sessions:
            diagnostics.append(f"{fam.variant_label}: completion support {n} too small")
            continue
        verify_m11 = {v.m11_by_family[fi] for v in verified if fi in v.m11_by_family}
        cross_ok = not verify_m11 or verify_m11 == {m11}
        if not cross_ok:
            diagnostics.append(
                f"{fam.variant_label}: completed entry disagrees with verification path"
            )
        fam.m11 = m11
        completed.append(
            CompletedFamily(
                family=fi,
                matrix=Mat2(m11, fam.m12, fam.m21, fam.m22),
                cross_check_ok=cross_ok,
            )
        )
    return completed, diagnostics


# ---------------------------------------------------------------------------
# full break: attribution, decryption, state prediction, forgery
# ---------------------------------------------------------------------------


def _attribution_table(
    completed: Sequence[CompletedFamily],
    moduli: Sequence[int],
    s_vec: Vec2,
) -> dict[tuple[int, tuple[int, int]], tuple[int, int, int, Mat2]]:
    """(q, expected secret-block ciphertext) -> (family, form, q, matrix)."""
    table = {}
    for cf in completed:
        for form, m in enumerate((cf.matrix, transpose(cf.matrix))):
            for q in moduli:
                expected = mat_vec_mod(m, s_vec, q)
                table[(q, (expected[0], expected[1]))] = (cf.family, form, q, m)
    return table


def full_break(
    completed: Sequence[CompletedFamily],
    transcripts: Sequence,
    am_view: Sequence[VerifiedModulus],
    cfg: AttackConfig,
) -> tuple[Optional[FullRecovery], list[str]]:
    """Decrypt every attributable session, learn the index->state maps from
    consecutive sessions, resolve variant labels, and emit prediction and
    forgery evidence."""
    diagnostics: list[str] = []
    if not completed or not am_view:
        return None, ["missing completed matrices or verified moduli"]
    s1, s2 = am_view[0].s1, am_view[0].s2
    s_vec = Vec2(s1, s2)
    lb = cfg.limb_bits
    secret = decode128(s_vec, lb)
    moduli = sorted({v.q for v in am_view})
    table = _attribution_table(completed, moduli, s_vec)
    by_id = {t.session_id: t for t in transcripts}

    attributed: dict[int, tuple[int, int, int, Mat2]] = {}
    for t in transcripts:
        s_block = (t.c1[1][0], t.c1[1][1])
        for q in moduli:
            hit = table.get((q, s_block))
            if hit is not None:
                attributed[t.session_id] = hit
                break

    inv_cache: dict[tuple[int, int, int], Optional[Mat2]] = {}

    def inverse_for(fam: int, form: int, q: int, m: Mat2) -> Optional[Mat2]:
        k = (fam, form, q)
        if k not in inv_cache:
            inv_cache[k] = mat_inv_mod(m, q)
        return inv_cache[k]

    integrity = Counter()
    decrypted: dict[int, dict] = {}
    for t in transcripts:
        hit = attributed.get(t.session_id)
        if hit is None:
            continue
        fam, form, q, m = hit
        inv = inverse_for(fam, form, q, m)
        if inv is None:
            integrity["non_invertible_attribution"] += 1
            continue

        def dec(block) -> Optional[int]:
            try:
                return decode128(mat_vec_mod(inv, Vec2(block[0], block[1]), q), lb)
            except ValueError:
                return None

        nt = dec(t.c1[0])
        nr = dec(t.c2[0])
        sd, sp, sc = dec(t.c3[1]), dec(t.c3[2]), dec(t.c3[3])
        if None in (nt, nr, sd, sp, sc):
            integrity["decode_failures"] += 1
            continue
        if dec(t.c3[0]) != nr or dec(t.c4[0]) != nt:
            integrity["cross_block_mismatch"] += 1
            continue
        decrypted[t.session_id] = {
            "fam": fam, "form": form, "q": q,
            "nt": nt, "nr": nr, "sd": sd, "sp": sp, "sc": sc,
        }

    if not decrypted:
        return None, ["no session could be decrypted under the verified moduli"]

    # Learn index -> state maps from consecutive sessions (the post state of
    # session i is the pre state of session i+1).
    sueo_votes: dict[int, Counter] = {}
    am_votes: dict[int, Counter] = {}
    for sid, rec in decrypted.items():
        nxt = attributed.get(sid + 1)
        if nxt is None:
            continue
        fam, form, q, _ = nxt
        sueo_votes.setdefault(rec["sp"] % 4, Counter())[(fam, form)] += 1
        am_votes.setdefault(rec["sc"] % cfg.am_table_size, Counter())[q] += 1

    def settle(votes: dict[int, Counter], kind: str) -> dict:
        out = {}
        for idx, ctr in votes.items():
            winner, n = max(ctr.items(), key=lambda kv: (kv[1], str(kv[0])))
            if len(ctr) > 1:
                integrity[f"{kind}_map_conflicts"] += sum(ctr.values()) - n
            out[idx] = winner
        return out

    sueo_map = settle(sueo_votes, "sueo")
    am_map = settle(am_votes, "am")

    # Resolve variant labels: index semantics are fixed (0 -> first base,
    # 1 -> second base, 2/3 their transposes), so the observed maps pin down
    # which clustered orientation is the stored matrix.
    label_of_pair: dict[tuple[int, int], str] = {}
    matrices: dict[str, Mat2] = {}
    fam_matrix = {cf.family: cf.matrix for cf in completed}
    for base_label, base_idx, trans_label, trans_idx in (("A", 0, "AT", 2), ("B", 1, "BT", 3)):
        pair = sueo_map.get(base_idx)
        if pair is not None:
            fam, form = pair
        else:
            flipped = sueo_map.get(trans_idx)
            if flipped is None:
                continue
            fam, form = flipped[0], 1 - flipped[1]
        if fam not in fam_matrix:
            continue
        m = fam_matrix[fam] if form == 0 else transpose(fam_matrix[fam])
        matrices[base_label] = m
        label_of_pair[(fam, form)] = base_label
        label_of_pair[(fam, 1 - form)] = trans_label
        trans_pair = sueo_map.get(trans_idx)
        if trans_pair is not None and trans_pair != (fam, 1 - form):
            integrity["sueo_label_inconsistency"] += 1

    sueo_index_map = {
        idx: label_of_pair.get(pair, f"fam{pair[0]}/{'T' if pair[1] else 'I'}")
        for idx, pair in sueo_map.items()
    }

    # Identity: sessions whose successor is attributed expose the post-update
    # state, so the identity blocks of C5/C6 decrypt directly.
    id_votes: Counter = Counter()
    pred_checks = 0
    pred_failures = 0
    for sid, rec in decrypted.items():
        nxt = attributed.get(sid + 1)
        if nxt is None:
            continue
        fam, form, q, m = nxt
        inv = inverse_for(fam, form, q, m)
        if inv is None:
            continue

        def dec_post(block, _inv=inv, _q=q) -> Optional[int]:
            try:
                return decode128(mat_vec_mod(_inv, Vec2(block[0], block[1]), _q), lb)
            except ValueError:
                return None

        t = by_id.get(sid)
        if t is None:
            continue
        v5 = dec_post(t.c5[1])
        v6 = dec_post(t.c6[1])
        if v5 is not None and v5 == v6:
            id_votes[v5] += 1
        if dec_post(t.c5[0]) != rec["nt"] + 1 or dec_post(t.c6[0]) != rec["nr"] + 1:
            integrity["post_nonce_mismatch"] += 1
        # Prediction test: the decrypted update values must point at the
        # successor's observed state through the learned maps.
        predicted_pair = sueo_map.get(rec["sp"] % 4)
        predicted_q = am_map.get(rec["sc"] % cfg.am_table_size)
        if predicted_pair is not None and predicted_q is not None:
            pred_checks += 1
            if predicted_pair != (fam, form) or predicted_q != q:
                pred_failures += 1

    ident = None
    if id_votes:
        ident, _ = max(id_votes.items(), key=lambda kv: (kv[1], -kv[0]))
        if len(id_votes) > 1:
            integrity["id_conflicts"] += len(id_votes) - 1

    sessions = [
        SessionRecovery(
            session_id=sid,
            variant=label_of_pair.get((rec["fam"], rec["form"]),
                                      f"fam{rec['fam']}/{'T' if rec['form'] else 'I'}"),
            q=rec["q"],
            nt=rec["nt"],
            nr=rec["nr"],
            sd=rec["sd"],
            sp=rec["sp"],
            sc=rec["sc"],
            idx_dbltkm=rec["sd"] % 20,
            idx_sueo=rec["sp"] % 4,
            idx_am=rec["sc"] % cfg.am_table_size,
        )
        for sid, rec in sorted(decrypted.items())
    ]

    # Forward prediction for the newest recoverable session.
    prediction = None
    for sid in sorted(decrypted, reverse=True):
        rec = decrypted[sid]
        pair = sueo_map.get(rec["sp"] % 4)
        q = am_map.get(rec["sc"] % cfg.am_table_size)
        if pair is None or q is None:
            continue
        prediction = {
            "after_session": sid,
            "variant": label_of_pair.get(pair, str(pair)),
            "pair": pair,
            "q": q,
        }
        break

    # Forgery: re-encrypt (nonce+1, identity) under a session's predicted
    # post-update state and compare with the genuine message.
    forgery = None
    if ident is not None:
        for sid in sorted(decrypted, reverse=True):
            rec = decrypted[sid]
            pair = sueo_map.get(rec["sp"] % 4)
            q = am_map.get(rec["sc"] % cfg.am_table_size)
            if pair is None or q is None:
                continue
            fam, form = pair
            if fam not in fam_matrix:
                continue
            m = fam_matrix[fam] if form == 0 else transpose(fam_matrix[fam])
            try:
                blocks = (
                    mat_vec_mod(m, encode128(rec["nt"] + 1, lb), q),
                    mat_vec_mod(m, encode128(ident, lb), q),
                )
            except ValueError:
                continue
            t = by_id.get(sid)
            matches = t is not None and tuple(t.c5) == blocks
            forgery = {
                "session_id": sid,
                "blocks": blocks,
                "q": q,
                "variant": label_of_pair.get(pair, str(pair)),
                "matches_observed": matches,
            }
            break

    recovery = FullRecovery(
        matrices=matrices,
        moduli=tuple(moduli),
        S=secret,
        ID=ident,
        sessions=sessions,
        sueo_index_map=sueo_index_map,
        am_index_map={idx: q for idx, q in sorted(am_map.items())},
        prediction=prediction,
        prediction_checks=pred_checks,
        prediction_failures=pred_failures,
        forgery=forgery,
        integrity=dict(integrity),
    )
    return recovery, diagnostics


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def run_attack(transcripts: Sequence, cfg: AttackConfig) -> AttackResult:
    """All three phases over one transcript log; deterministic for fixed input."""
    timings: dict[str, float] = {}
    diagnostics: list[str] = []
    transcripts = list(transcripts)

    t0 = time.perf_counter()
    leaks = [lk for lk in (detect_useful_session(t) for t in transcripts) if lk is not None]
    n_wrapped = sum(1 for lk in leaks if lk.wrapped)
    partials = cluster_leaks(leaks)
    timings["phase1_s"] = time.perf_counter() - t0

    stats = scan_work(partials, cfg) if partials else {"primes": 0, "pairs": 0, "checks": 0}

    qx_candidates: list[QxCandidate] = []
    reconstructed: Optional[ReconstructResult] = None
    verified: list[VerifiedModulus] = []
    recovery: Optional[FullRecovery] = None

    if partials:
        t0 = time.perf_counter()
        qx_candidates = qx_scan(transcripts, partials, cfg)
        timings["qx_scan_s"] = time.perf_counter() - t0
        if not qx_candidates:
            diagnostics.append("no reduced-modulus candidate reached the vote threshold")
    else:
        diagnostics.append("no paired leak clusters; phases 2 and 3 skipped")

    if qx_candidates:
        t0 = time.perf_counter()
        reconstructed = reconstruct_q_candidates(qx_candidates, cfg)
        candidates = list(reconstructed.candidates)
        if reconstructed.truncated:
            diagnostics.append("candidate list truncated at the configured cap")
        if not candidates:
            diagnostics.append(
                "no subset product lands in the modulus range "
                "(factor bound too small or too few sessions)"
            )
        if cfg.wrap_heuristic:
            extra = [q for q in wrap_q_candidates(transcripts, cfg) if q not in candidates]
            if extra:
                diagnostics.append(f"wrap heuristic contributed {len(extra)} extra candidates")
                candidates.extend(extra)
        for q_cand in candidates:
            frag = verify_q(q_cand, transcripts, partials, cfg)
            if frag is not None:
                verified.append(frag)
        timings["verify_s"] = time.perf_counter() - t0
        if verified:
            coords = Counter((v.s1, v.s2) for v in verified)
            best_coords, _ = max(coords.items(), key=lambda kv: (kv[1], kv[0]))
            dropped = [v.q for v in verified if (v.s1, v.s2) != best_coords]
            if dropped:
                diagnostics.append(f"dropped moduli disagreeing on the secret: {dropped}")
                verified = [v for v in verified if (v.s1, v.s2) == best_coords]

    if verified:
        t0 = time.perf_counter()
        completed, diag = complete_matrices(verified, partials, transcripts, cfg)
        diagnostics.extend(diag)
        recovery, diag = full_break(completed, transcripts, verified, cfg)
        diagnostics.extend(diag)
        timings["full_break_s"] = time.perf_counter() - t0

    outcome, limiting = _grade(leaks, partials, qx_candidates, verified, recovery)
    return AttackResult(
        config=cfg,
        n_sessions=len(transcripts),
        leaks=leaks,
        n_wrapped=n_wrapped,
        partials=partials,
        qx_candidates=qx_candidates,
        reconstructed=reconstructed,
        verified=verified,
        recovery=recovery,
        outcome=outcome,
        limiting_phase=limiting,
        timings=timings,
        scan_stats=stats,
        diagnostics=diagnostics,
    )


REPORT_FORMAT = "am-sueo-dbltkm-attack-report/1"


def build_report(result: AttackResult, config_hash: str) -> dict:
    """Structured report document; big integers as decimal strings."""
    cfg = result.config
    doc: dict = {
        "format": REPORT_FORMAT,
        "config_hash": config_hash,
        "config": {
            "modulus_bits": cfg.modulus_bits,
            "limb_bits": cfg.limb_bits,
            "factor_bound_bits": cfg.factor_bound_bits,
            "am_table_size": cfg.am_table_size,
            "accept_threshold": cfg.accept_threshold,
            "verify_sessions": cfg.verify_sessions,
            "pairs_per_qx": cfg.pairs_per_qx,
            "verify_pair_window": cfg.verify_pair_window,
            "wrap_heuristic": cfg.wrap_heuristic,
        },
        "n_sessions": result.n_sessions,
        "outcome": result.outcome,
        "limiting_phase": result.limiting_phase,
        "phase1": {
            "leaks": len(result.leaks),
            "wrapped": result.n_wrapped,
            "unwrapped": len(result.leaks) - result.n_wrapped,
            "first_leak_session": result.leaks[0].session_id if result.leaks else None,
            "partials": [
                {
                    "label": p.variant_label,
                    "m11": str(p.m11) if p.m11 is not None else None,
                    "m12": str(p.m12),
                    "m21": str(p.m21),
                    "m22": str(p.m22),
                    "variant_sessions": len(p.variant_sessions),
                    "transpose_sessions": len(p.transpose_sessions),
                }
                for p in result.partials
            ],
        },
        "phase2": {
            "primes_scanned": result.scan_stats.get("primes", 0),
            "pairs": result.scan_stats.get("pairs", 0),
            "checks": result.scan_stats.get("checks", 0),
            "accepted": [
                {
                    "qx": str(c.qx),
                    "votes": c.votes,
                    "residues": [str(c.residues[0]), str(c.residues[1])],
                }
                for c in result.qx_candidates
            ],
        },
        "phase3": {
            "candidates": len(result.reconstructed.candidates) if result.reconstructed else 0,
            "truncated": bool(result.reconstructed and result.reconstructed.truncated),
            "verified": [
                {
                    "q": str(v.q),
                    "support": {str(k): n for k, n in sorted(v.support_by_family.items())},
                }
                for v in result.verified
            ],
        },
        "timings": {k: round(v, 6) for k, v in result.timings.items()},
        "diagnostics": list(result.diagnostics),
        "recovery": None,
    }
    rec = result.recovery
    if rec is not None:
        doc["recovery"] = {
            "matrices": {
                label: [str(v) for v in m] for label, m in sorted(rec.matrices.items())
            },
            "moduli": [str(q) for q in rec.moduli],
            "S": str(rec.S),
            "ID": str(rec.ID) if rec.ID is not None else None,
            "sueo_index_map": {str(k): v for k, v in sorted(rec.sueo_index_map.items())},
            "am_index_map": {str(k): str(q) for k, q in sorted(rec.am_index_map.items())},
            "sessions": [
                {
                    "session_id": s.session_id,
                    "variant": s.variant,
                    "q": str(s.q),
                    "nt": str(s.nt),
                    "nr": str(s.nr),
                    "sd": str(s.sd),
                    "sp": str(s.sp),
                    "sc": str(s.sc),
                    "idx_dbltkm": s.idx_dbltkm,
                    "idx_sueo": s.idx_sueo,
                    "idx_am": s.idx_am,
                }
                for s in rec.sessions
            ],
            "prediction": (
                {
                    "after_session": rec.prediction["after_session"],
                    "variant": rec.prediction["variant"],
                    "q": str(rec.prediction["q"]),
                }
                if rec.prediction
                else None
            ),
            "prediction_checks": rec.prediction_checks,
            "prediction_failures": rec.prediction_failures,
            "forgery": (
                {
                    "session_id": rec.forgery["session_id"],
                    "variant": rec.forgery["variant"],
                    "q": str(rec.forgery["q"]),
                    "blocks": [[str(b[0]), str(b[1])] for b in rec.forgery["blocks"]],
                    "matches_observed": rec.forgery["matches_observed"],
                }
                if rec.forgery
                else None
            ),
            "integrity": dict(rec.integrity),
        }
    return doc


CSV_FIELDS = (
    "config_hash",
    "n_sessions",
    "outcome",
    "limiting_phase",
    "leaks",
    "unwrapped",
    "partials",
    "qx_accepted",
    "verified_moduli",
    "a_recovered",
    "b_recovered",
    "s_recovered",
    "id_recovered",
    "prediction_checks",
    "prediction_failures",
    "forgery_ok",
    "sessions_recovered",
    "scan_checks",
    "scan_seconds",
)


def csv_summary_row(result: AttackResult, config_hash: str) -> dict:
    """One flat row per attack run for experiment aggregation."""
    rec = result.recovery
    return {
        "config_hash": config_hash,
        "n_sessions": result.n_sessions,
        "outcome": result.outcome,
        "limiting_phase": result.limiting_phase or "",
        "leaks": len(result.leaks),
        "unwrapped": len(result.leaks) - result.n_wrapped,
        "partials": len(result.partials),
        "qx_accepted": len(result.qx_candidates),
        "verified_moduli": len(result.verified),
        "a_recovered": int(bool(rec and "A" in rec.matrices)),
        "b_recovered": int(bool(rec and "B" in rec.matrices)),
        "s_recovered": int(rec is not None),
        "id_recovered": int(bool(rec and rec.ID is not None)),
        "prediction_checks": rec.prediction_checks if rec else 0,
        "prediction_failures": rec.prediction_failures if rec else 0,
        "forgery_ok": int(bool(rec and rec.forgery and rec.forgery.get("matches_observed"))),
        "sessions_recovered": len(rec.sessions) if rec else 0,
        "scan_checks": result.scan_stats.get("checks", 0),
        "scan_seconds": round(result.timings.get("qx_scan_s", 0.0), 3),
    }


def _grade(leaks, partials, qx_candidates, verified, recovery) -> tuple[str, Optional[str]]:
    if not leaks:
        return "none", "leak-detection"
    if not partials:
        return "partial", "clustering"
    if not qx_candidates:
        return "partial", "qx-scan"
    if not verified:
        return "partial", "verification"
    if recovery is None:
        return "partial", "completion"
    full = (
        "A" in recovery.matrices
        and "B" in recovery.matrices
        and recovery.moduli
        and recovery.ID is not None
        and recovery.prediction is not None
        and recovery.prediction_checks > 0
        and recovery.prediction_failures == 0
        and recovery.forgery is not None
        and recovery.forgery.get("matches_observed")
    )
    if full:
        return "full", None
    return "partial", "completion"
