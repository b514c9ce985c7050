"""Honest protocol sessions, eavesdropped transcripts, and their persistence.

A session emits six ciphertexts: C1/C2 carry (nonce, long-term secret),
C3/C4 carry (nonce, three update secrets) under the pre-update state;
C5/C6 carry (nonce+1, identity) under the post-update state.  A campaign
chains sessions (the post-update state of session i is the pre-update
state of session i+1) and streams line-delimited records, optionally with
a parallel ground-truth sidecar that attack code never reads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from random import Random
from typing import Iterator, Optional

from .modmath import Vec2, decode128, mat_vec_mod
from .protocol import (
    AmSystem,
    EffectiveState,
    SecretState,
    SystemParams,
    UpdateSecrets,
    derive_effective_state,
    encrypt_message,
    update_state,
)


class CampaignError(RuntimeError):
    """Raised when a campaign aborts mid-stream; carries the progress count."""

    def __init__(self, message: str, completed: int):
        super().__init__(message)
        self.completed = completed


@dataclass(frozen=True)
class Transcript:
    """One session as seen by a passive eavesdropper."""

    session_id: int
    c1: tuple[Vec2, Vec2]
    c2: tuple[Vec2, Vec2]
    c3: tuple[Vec2, Vec2, Vec2, Vec2]
    c4: tuple[Vec2, Vec2, Vec2, Vec2]
    c5: tuple[Vec2, Vec2]
    c6: tuple[Vec2, Vec2]


@dataclass(frozen=True)
class GroundTruth:
    """Hidden per-session state; test oracle only, forbidden to attack code."""

    session_id: int
    nt: int
    nr: int
    upd: UpdateSecrets
    pre_indices: tuple[int, int, int]   # (dbltkm, sueo, am)
    post_indices: tuple[int, int, int]


def _sample_payload(rng: Random, top: int) -> int:
    # Exclude the absolute top value so value+1 still fits the limb format.
    while True:
        v = rng.randrange(top)
        if v + 1 < top:
            return v


class _EffCache:
    """Index-triple -> EffectiveState memo; derivation is pure so this is safe."""

    def __init__(self, am: AmSystem, params: SystemParams):
        self.am = am
        self.params = params
        self._memo: dict[tuple[int, int, int], EffectiveState] = {}

    def get(self, state: SecretState) -> EffectiveState:
        key = (state.dbltkm_idx, state.sueo_idx, state.am_idx)
        eff = self._memo.get(key)
        if eff is None:
            eff = derive_effective_state(state, self.am, self.params)
            self._memo[key] = eff
        return eff


def run_session(
    state: SecretState,
    am: AmSystem,
    params: SystemParams,
    rng: Random,
    session_id: int = 0,
    eff_cache: Optional[_EffCache] = None,
) -> tuple[Transcript, GroundTruth, SecretState]:
    """Run one honest session and return the advanced state."""
    cache = eff_cache or _EffCache(am, params)
    pre = cache.get(state)
    lb = params.limb_bits
    top = 1 << params.payload_bits

    nt = _sample_payload(rng, top)
    nr = _sample_payload(rng, top)
    upd = UpdateSecrets(rng.randrange(top), rng.randrange(top), rng.randrange(top))

    c1 = tuple(encrypt_message([nt, state.S], pre, lb))
    c2 = tuple(encrypt_message([nr, state.S], pre, lb))
    c3 = tuple(encrypt_message([nr, upd.sd, upd.sp, upd.sc], pre, lb))
    c4 = tuple(encrypt_message([nt, upd.sd, upd.sp, upd.sc], pre, lb))

    nxt = update_state(state, upd, params)
    post = cache.get(nxt)
    c5 = tuple(encrypt_message([nt + 1, state.ID], post, lb))
    c6 = tuple(encrypt_message([nr + 1, state.ID], post, lb))

    transcript = Transcript(session_id, c1, c2, c3, c4, c5, c6)
    truth = GroundTruth(
        session_id=session_id,
        nt=nt,
        nr=nr,
        upd=upd,
        pre_indices=(state.dbltkm_idx, state.sueo_idx, state.am_idx),
        post_indices=(nxt.dbltkm_idx, nxt.sueo_idx, nxt.am_idx),
    )
    return transcript, truth, nxt


def run_campaign(
    params: SystemParams,
    am: AmSystem,
    state: SecretState,
    n_sessions: int,
    rng: Random,
    transcript_writer: Optional["TranscriptWriter"] = None,
    sidecar_writer: Optional["SidecarWriter"] = None,
    collect: bool = False,
) -> tuple[SecretState, list[Transcript], list[GroundTruth]]:
    """Run n_sessions chained sessions, streaming records to the writers.

    With collect=True the transcripts/ground truths are also returned
    in memory (used by in-process experiments and tests).
    """
    if n_sessions < 1:
        raise ValueError(f"n_sessions must be >= 1, got {n_sessions}")
    cache = _EffCache(am, params)
    transcripts: list[Transcript] = []
    truths: list[GroundTruth] = []
    for i in range(n_sessions):
        transcript, truth, state = run_session(state, am, params, rng, i, cache)
        try:
            if transcript_writer is not None:
                transcript_writer.write(transcript)
            if sidecar_writer is not None:
                sidecar_writer.write(truth)
        except OSError as exc:
            raise CampaignError(f"storage failure after {i} sessions: {exc}", i) from exc
        if collect:
            transcripts.append(transcript)
            truths.append(truth)
    return state, transcripts, truths


# ---------------------------------------------------------------------------
# line-delimited stores (decimal strings for all protocol values)
# ---------------------------------------------------------------------------


def _blocks_out(blocks) -> list[list[str]]:
    return [[str(b[0]), str(b[1])] for b in blocks]


def _blocks_in(raw) -> tuple[Vec2, ...]:
    return tuple(Vec2(int(a), int(b)) for a, b in raw)


def transcript_to_record(t: Transcript) -> dict:
    return {
        "session_id": t.session_id,
        "c1": _blocks_out(t.c1),
        "c2": _blocks_out(t.c2),
        "c3": _blocks_out(t.c3),
        "c4": _blocks_out(t.c4),
        "c5": _blocks_out(t.c5),
        "c6": _blocks_out(t.c6),
    }


def transcript_from_record(rec: dict) -> Transcript:
    return Transcript(
        session_id=rec["session_id"],
        c1=_blocks_in(rec["c1"]),
        c2=_blocks_in(rec["c2"]),
        c3=_blocks_in(rec["c3"]),
        c4=_blocks_in(rec["c4"]),
        c5=_blocks_in(rec["c5"]),
        c6=_blocks_in(rec["c6"]),
    )


def truth_to_record(g: GroundTruth) -> dict:
    return {
        "session_id": g.session_id,
        "nt": str(g.nt),
        "nr": str(g.nr),
        "sd": str(g.upd.sd),
        "sp": str(g.upd.sp),
        "sc": str(g.upd.sc),
        "pre": {"dbltkm": g.pre_indices[0], "sueo": g.pre_indices[1], "am": g.pre_indices[2]},
        "post": {"dbltkm": g.post_indices[0], "sueo": g.post_indices[1], "am": g.post_indices[2]},
    }


def truth_from_record(rec: dict) -> GroundTruth:
    return GroundTruth(
        session_id=rec["session_id"],
        nt=int(rec["nt"]),
        nr=int(rec["nr"]),
        upd=UpdateSecrets(int(rec["sd"]), int(rec["sp"]), int(rec["sc"])),
        pre_indices=(rec["pre"]["dbltkm"], rec["pre"]["sueo"], rec["pre"]["am"]),
        post_indices=(rec["post"]["dbltkm"], rec["post"]["sueo"], rec["post"]["am"]),
    )


class _JsonlWriter:
    def __init__(self, path: Path):
        self.path = Path(path)
        self._fh = open(self.path, "a", encoding="utf-8")

    def _write_record(self, rec: dict) -> None:
        self._fh.write(json.dumps(rec, separators=(",", ":")) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class TranscriptWriter(_JsonlWriter):
    def write(self, t: Transcript) -> None:
        self._write_record(transcript_to_record(t))


class SidecarWriter(_JsonlWriter):
    def write(self, g: GroundTruth) -> None:
        self._write_record(truth_to_record(g))


def read_transcripts(path: Path) -> Iterator[Transcript]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield transcript_from_record(json.loads(line))


def read_sidecar(path: Path) -> Iterator[GroundTruth]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield truth_from_record(json.loads(line))


# ---------------------------------------------------------------------------
# test / grading oracles
# ---------------------------------------------------------------------------


def reencrypt_from_truth(
    truth: GroundTruth,
    params: SystemParams,
    am: AmSystem,
    state: SecretState,
) -> Transcript:
    """Rebuild a session's six ciphertexts from its ground-truth sidecar."""
    lb = params.limb_bits
    pre_state = SecretState(
        A=state.A, B=state.B, S=state.S, ID=state.ID,
        dbltkm_idx=truth.pre_indices[0],
        sueo_idx=truth.pre_indices[1],
        am_idx=truth.pre_indices[2],
    )
    post_state = SecretState(
        A=state.A, B=state.B, S=state.S, ID=state.ID,
        dbltkm_idx=truth.post_indices[0],
        sueo_idx=truth.post_indices[1],
        am_idx=truth.post_indices[2],
    )
    pre = derive_effective_state(pre_state, am, params)
    post = derive_effective_state(post_state, am, params)
    return Transcript(
        session_id=truth.session_id,
        c1=tuple(encrypt_message([truth.nt, state.S], pre, lb)),
        c2=tuple(encrypt_message([truth.nr, state.S], pre, lb)),
        c3=tuple(encrypt_message([truth.nr, truth.upd.sd, truth.upd.sp, truth.upd.sc], pre, lb)),
        c4=tuple(encrypt_message([truth.nt, truth.upd.sd, truth.upd.sp, truth.upd.sc], pre, lb)),
        c5=tuple(encrypt_message([truth.nt + 1, state.ID], post, lb)),
        c6=tuple(encrypt_message([truth.nr + 1, state.ID], post, lb)),
    )


def server_accepts_c5(
    forged_c5: tuple[Vec2, Vec2],
    truth: GroundTruth,
    params: SystemParams,
    am: AmSystem,
    state: SecretState,
) -> bool:
    """Server-side check: decrypt a claimed C5 with the true post-update state
    and accept only if it carries (nonce+1, identity)."""
    post_state = SecretState(
        A=state.A, B=state.B, S=state.S, ID=state.ID,
        dbltkm_idx=truth.post_indices[0],
        sueo_idx=truth.post_indices[1],
        am_idx=truth.post_indices[2],
    )
    post = derive_effective_state(post_state, am, params)
    try:
        values = [
            decode128(mat_vec_mod(post.decrypt_for_block(i), blk, post.modulus), params.limb_bits)
            for i, blk in enumerate(forged_c5)
        ]
    except ValueError:
        return False
    return values == [truth.nt + 1, state.ID]
