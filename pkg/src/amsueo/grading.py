"""Grade an attack report against the generator's hidden state.

Everything here consumes the system export and the ground-truth sidecar,
which the attack itself never sees; grading is a separate step so the
attack pipeline stays provably blind to them.
"""

from __future__ import annotations

from typing import Optional, Sequence

from .modmath import Mat2, Vec2
from .protocol import AmSystem, SecretState, SystemParams
from .simulator import GroundTruth, server_accepts_c5

VARIANT_LABELS = ("A", "B", "AT", "BT")


def _report_matrix(report_rec) -> Optional[Mat2]:
    if report_rec is None:
        return None
    return Mat2(*(int(v) for v in report_rec))


def grade_report(
    report: dict,
    params: SystemParams,
    am: AmSystem,
    state: SecretState,
    truths: Sequence[GroundTruth],
) -> dict:
    """Field-by-field comparison of a report with the true hidden state."""
    truth_by_id = {g.session_id: g for g in truths}
    table_qs = [info.q for info in am.table]
    recovery = report.get("recovery")

    grading: dict = {
        "a_exact": False,
        "b_exact": False,
        "s_exact": False,
        "id_exact": False,
        "moduli_true": 0,
        "moduli_false": 0,
        "qx_true": 0,
        "qx_spurious": 0,
        "sessions_checked": 0,
        "session_mismatches": 0,
        "am_index_map_ok": True,
        "prediction_ok": False,
        "forgery_server_accepts": False,
    }

    for cand in report.get("phase2", {}).get("accepted", []):
        if am.p % int(cand["qx"]) == 0:
            grading["qx_true"] += 1
        else:
            grading["qx_spurious"] += 1

    if recovery is None:
        grading["full_success"] = False
        return grading

    a_rec = _report_matrix(recovery.get("matrices", {}).get("A"))
    b_rec = _report_matrix(recovery.get("matrices", {}).get("B"))
    grading["a_exact"] = a_rec == state.A
    grading["b_exact"] = b_rec == state.B
    grading["s_exact"] = recovery.get("S") is not None and int(recovery["S"]) == state.S
    grading["id_exact"] = recovery.get("ID") is not None and int(recovery["ID"]) == state.ID

    for q_str in recovery.get("moduli", []):
        if int(q_str) in table_qs:
            grading["moduli_true"] += 1
        else:
            grading["moduli_false"] += 1

    for idx_str, q_str in recovery.get("am_index_map", {}).items():
        if table_qs[int(idx_str)] != int(q_str):
            grading["am_index_map_ok"] = False

    for sess in recovery.get("sessions", []):
        truth = truth_by_id.get(sess["session_id"])
        if truth is None:
            continue
        grading["sessions_checked"] += 1
        ok = (
            int(sess["nt"]) == truth.nt
            and int(sess["nr"]) == truth.nr
            and int(sess["sd"]) == truth.upd.sd
            and int(sess["sp"]) == truth.upd.sp
            and int(sess["sc"]) == truth.upd.sc
            and (sess["idx_dbltkm"], sess["idx_sueo"], sess["idx_am"]) == truth.post_indices
            and sess["variant"] == VARIANT_LABELS[truth.pre_indices[1]]
            and int(sess["q"]) == table_qs[truth.pre_indices[2]]
        )
        if not ok:
            grading["session_mismatches"] += 1

    prediction = recovery.get("prediction")
    if prediction is not None:
        truth = truth_by_id.get(prediction["after_session"])
        if truth is not None:
            grading["prediction_ok"] = (
                prediction["variant"] == VARIANT_LABELS[truth.post_indices[1]]
                and int(prediction["q"]) == table_qs[truth.post_indices[2]]
            )

    forgery = recovery.get("forgery")
    if forgery is not None:
        truth = truth_by_id.get(forgery["session_id"])
        if truth is not None:
            blocks = tuple(Vec2(int(a), int(b)) for a, b in forgery["blocks"])
            grading["forgery_server_accepts"] = server_accepts_c5(
                blocks, truth, params, am, state
            )

    grading["full_success"] = bool(
        grading["a_exact"]
        and grading["b_exact"]
        and grading["s_exact"]
        and grading["id_exact"]
        and grading["moduli_true"] >= 1
        and grading["moduli_false"] == 0
        and grading["qx_spurious"] == 0
        and grading["sessions_checked"] > 0
        and grading["session_mismatches"] == 0
        and grading["am_index_map_ok"]
        and grading["prediction_ok"]
        and grading["forgery_server_accepts"]
    )
    return grading
