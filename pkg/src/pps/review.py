"""Batch workflow state machine, flag ledger, segment rejection, comments,
and the persistent archive.

The state machine itself is pure (WorkflowSnapshot in, WorkflowSnapshot
out) so its safety properties can be model-checked exhaustively; the
Archive class persists snapshots in sqlite plus a content-addressed
artifact directory and serializes transitions with compare-and-set.
"""

from __future__ import annotations

import hashlib
import json
import sqlite3
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path

from .qc import NoSegments, ReplicateResult, replicate_check
from .config import ReplicateThresholds
from .radiometrics import SegmentResult

# states
UPLOADED = "UPLOADED"
PROCESSED = "PROCESSED"
LOCKED = "LOCKED"
APPROVED = "APPROVED"
INVALID = "INVALID"

# roles
ROLE_TECHNICIAN = "technician"
ROLE_ANALYST = "analyst"
ROLE_PM = "program_manager"
ROLES = (ROLE_TECHNICIAN, ROLE_ANALYST, ROLE_PM)

# flag catalog
BATCH_INVALIDATING = ("CONTAMINATION", "REPLICATE_TOTAL", "REPLICATE_MAX",
                      "DETECTOR_RESET")
BATCH_CLEARABLE = ("PRE_QC_FAIL", "POST_QC_FAIL", "FULL_PIPE_SPECTRUM",
                   "LOCALIZATION_CLOSURE")
SEGMENT_CLEARABLE = ("SEG_QC_FWD", "SEG_QC_REV", "SEG_GEOMETRY_DEVIATION",
                     "SEG_LUMP_SELF_ATTENUATION")

SEVERITY_CLEARABLE = "clearable"
SEVERITY_INVALIDATING = "invalidating"

FLAG_OPEN = "open"
FLAG_CLEARED = "cleared"

SEG_REPORTED = "reported"
SEG_REJECTED = "rejected"


def flag_severity(code: str) -> str:
    if code in BATCH_INVALIDATING:
        return SEVERITY_INVALIDATING
    if code in BATCH_CLEARABLE or code in SEGMENT_CLEARABLE:
        return SEVERITY_CLEARABLE
    raise ValueError(f"unknown flag code {code}")


class WorkflowError(Exception):
    pass


class ForbiddenRole(WorkflowError):
    pass


class InvalidTransition(WorkflowError):
    pass


class OpenFlags(WorkflowError):
    pass


class InvalidatingFlag(WorkflowError):
    pass


class EmptyComment(WorkflowError):
    pass


class WrongState(WorkflowError):
    pass


class UnknownSegment(WorkflowError):
    pass


class UnknownFlag(WorkflowError):
    pass


class InvalidatedBatch(WorkflowError):
    pass


class DuplicateBatch(WorkflowError):
    pass


class UnknownBatch(WorkflowError):
    pass


@dataclass(frozen=True)
class User:
    id: str
    display_name: str
    role: str


@dataclass(frozen=True)
class FlagRec:
    id: str
    scope: str                  # batch | segment
    segment: int | None
    code: str
    severity: str
    status: str                 # open | cleared
    message: str = ""
    cleared_by: str | None = None
    cleared_at: float | None = None
    clear_comment: str | None = None


@dataclass(frozen=True)
class SegRec:
    number: int
    mass_fwd_g: float
    sigma_fwd_g: float
    mass_rev_g: float
    sigma_rev_g: float
    status: str = SEG_REPORTED
    rejection_reason: str | None = None

    @property
    def rejected(self) -> bool:
        return self.status == SEG_REJECTED


@dataclass(frozen=True)
class WorkflowSnapshot:
    state: str = UPLOADED
    returned_from_pm: bool = False
    approved_by: str | None = None
    approved_at: float | None = None
    flags: tuple[FlagRec, ...] = ()
    segments: tuple[SegRec, ...] = ()
    replicate_passed: bool | None = None

    def open_flags(self) -> tuple[FlagRec, ...]:
        return tuple(f for f in self.flags if f.status == FLAG_OPEN)

    def has_invalidating(self) -> bool:
        return any(f.severity == SEVERITY_INVALIDATING for f in self.flags)


def _guard_not_terminal(snap: WorkflowSnapshot) -> None:
    if snap.state == INVALID:
        raise InvalidatedBatch("batch is invalid and cannot be modified")
    if snap.state == APPROVED:
        raise InvalidTransition("approved batches are immutable")


def _require_role(user: User, role: str) -> None:
    if user.role != role:
        raise ForbiddenRole(
            f"action requires {role}, user {user.id} is {user.role}")


def evaluate_replicate(segments: tuple[SegRec, ...],
                       thresholds: ReplicateThresholds,
                       ) -> tuple[bool | None, list[ReplicateResult]]:
    """Replicate outcome over the non-rejected segments: True/False, or
    None when there is nothing left to compare."""
    remaining = [s for s in segments if not s.rejected]
    fwd = [SegmentResult(segment_number=s.number, phase="forward",
                         mass_g=s.mass_fwd_g, density_g_per_ft=0.0,
                         sigma_g=s.sigma_fwd_g, tmu_g=0.0, mda_g=0.0,
                         attenuation_factor=1.0, lump_flagged=False,
                         max_position_in=0.0) for s in remaining]
    rev = [SegmentResult(segment_number=s.number, phase="reverse",
                         mass_g=s.mass_rev_g, density_g_per_ft=0.0,
                         sigma_g=s.sigma_rev_g, tmu_g=0.0, mda_g=0.0,
                         attenuation_factor=1.0, lump_flagged=False,
                         max_position_in=0.0) for s in remaining]
    try:
        total, mx = replicate_check(fwd, rev, thresholds)
    except NoSegments:
        return None, []
    return total.passed and mx.passed, [total, mx]


# --- pure state machine ---------------------------------------------------

def apply_process_complete(snap: WorkflowSnapshot, user: User,
                           flags: tuple[FlagRec, ...],
                           segments: tuple[SegRec, ...],
                           replicate_passed: bool | None,
                           ) -> WorkflowSnapshot:
    """Install a finished analysis revision: prior flags, rejections and
    clearances are superseded wholesale."""
    _require_role(user, ROLE_ANALYST)
    _guard_not_terminal(snap)
    if snap.state not in (UPLOADED, PROCESSED):
        raise InvalidTransition(f"cannot process from {snap.state}")
    has_invalidating = any(f.severity == SEVERITY_INVALIDATING for f in flags)
    return WorkflowSnapshot(
        state=INVALID if has_invalidating else PROCESSED,
        returned_from_pm=False, approved_by=None, approved_at=None,
        flags=flags, segments=segments, replicate_passed=replicate_passed)


def apply_lock(snap: WorkflowSnapshot, user: User) -> WorkflowSnapshot:
    _require_role(user, ROLE_ANALYST)
    _guard_not_terminal(snap)
    if snap.state != PROCESSED:
        raise InvalidTransition(f"cannot lock from {snap.state}")
    open_flags = snap.open_flags()
    if open_flags:
        raise OpenFlags(
            "open flags must be cleared or their segments rejected: "
            + ", ".join(f.id for f in open_flags))
    if snap.has_invalidating():
        raise OpenFlags("invalidating flags present")
    reportable = [s for s in snap.segments if not s.rejected]
    if not reportable:
        raise InvalidTransition("all segments rejected; nothing to report")
    if snap.replicate_passed is not True:
        raise InvalidTransition("replicate check not passing")
    return replace(snap, state=LOCKED)


def apply_approve(snap: WorkflowSnapshot, user: User,
                  now: float) -> WorkflowSnapshot:
    _require_role(user, ROLE_PM)
    _guard_not_terminal(snap)
    if snap.state != LOCKED:
        raise InvalidTransition(f"cannot approve from {snap.state}")
    return replace(snap, state=APPROVED, approved_by=user.id, approved_at=now)


def apply_return(snap: WorkflowSnapshot, user: User) -> WorkflowSnapshot:
    _require_role(user, ROLE_PM)
    _guard_not_terminal(snap)
    if snap.state != LOCKED:
        raise InvalidTransition(f"cannot return from {snap.state}")
    return replace(snap, state=PROCESSED, returned_from_pm=True)


def apply_invalidate(snap: WorkflowSnapshot, user: User,
                     reason_flags: tuple[FlagRec, ...] = ()) -> WorkflowSnapshot:
    _require_role(user, ROLE_ANALYST)
    _guard_not_terminal(snap)
    if snap.state not in (UPLOADED, PROCESSED):
        raise InvalidTransition(f"cannot invalidate from {snap.state}")
    return replace(snap, state=INVALID, flags=snap.flags + reason_flags)


def apply_clear_flag(snap: WorkflowSnapshot, flag_id: str, comment: str,
                     user: User, now: float) -> WorkflowSnapshot:
    _require_role(user, ROLE_ANALYST)
    _guard_not_terminal(snap)
    if snap.state != PROCESSED:
        raise WrongState(f"flags can only be cleared in {PROCESSED}")
    if not comment or not comment.strip():
        raise EmptyComment("a justification comment is required")
    target = next((f for f in snap.flags if f.id == flag_id), None)
    if target is None:
        raise UnknownFlag(flag_id)
    if target.severity == SEVERITY_INVALIDATING:
        raise InvalidatingFlag(f"{target.code} invalidates the batch and "
                               "can never be cleared")
    if target.status != FLAG_OPEN:
        raise WrongState(f"flag {flag_id} is not open")
    cleared = replace(target, status=FLAG_CLEARED, cleared_by=user.id,
                      cleared_at=now, clear_comment=comment)
    flags = tuple(cleared if f.id == flag_id else f for f in snap.flags)
    return replace(snap, flags=flags)


def apply_reject_segment(snap: WorkflowSnapshot, number: int, reason: str,
                         user: User, now: float,
                         thresholds: ReplicateThresholds,
                         ) -> WorkflowSnapshot:
    """Mark a segment rejected: its open flags auto-resolve as superseded,
    and the replicate check is re-evaluated over what remains (which can
    itself invalidate the batch)."""
    _require_role(user, ROLE_ANALYST)
    _guard_not_terminal(snap)
    if snap.state != PROCESSED:
        raise WrongState(f"segments can only be rejected in {PROCESSED}")
    target = next((s for s in snap.segments if s.number == number), None)
    if target is None:
        raise UnknownSegment(f"segment {number} does not exist")
    if target.rejected:
        return snap
    segments = tuple(
        replace(s, status=SEG_REJECTED, rejection_reason=reason)
        if s.number == number else s for s in snap.segments)
    note = f"superseded by rejection of segment {number}: {reason or 'n/a'}"
    flags = tuple(
        replace(f, status=FLAG_CLEARED, cleared_by=user.id, cleared_at=now,
                clear_comment=note)
        if (f.scope == "segment" and f.segment == number
            and f.status == FLAG_OPEN and f.severity == SEVERITY_CLEARABLE)
        else f for f in snap.flags)
    passed, results = evaluate_replicate(segments, thresholds)
    snap2 = replace(snap, segments=segments, flags=flags,
                    replicate_passed=passed)
    if passed is False:
        extra = []
        for r in results:
            if not r.passed:
                code = "REPLICATE_TOTAL" if r.kind == "total" else "REPLICATE_MAX"
                extra.append(FlagRec(
                    id=f"{code}.r", scope="batch", segment=None, code=code,
                    severity=SEVERITY_INVALIDATING, status=FLAG_OPEN,
                    message="replicate check failed after segment rejection"))
        snap2 = replace(snap2, state=INVALID, flags=snap2.flags + tuple(extra))
    return snap2


# --- persistent archive ---------------------------------------------------

_SCHEMA = """
CREATE TABLE IF NOT EXISTS users (
  id TEXT PRIMARY KEY, display_name TEXT NOT NULL, role TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS batches (
  id TEXT PRIMARY KEY, state TEXT NOT NULL, robot_id TEXT NOT NULL,
  start_time TEXT NOT NULL, manifest TEXT NOT NULL, request TEXT NOT NULL,
  ingest_issues TEXT NOT NULL DEFAULT '[]',
  returned_from_pm INTEGER NOT NULL DEFAULT 0,
  approved_by TEXT, approved_at REAL, invalid_reason TEXT,
  current_rev INTEGER NOT NULL DEFAULT 0,
  created_at REAL NOT NULL, created_by TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS revisions (
  batch_id TEXT NOT NULL, rev INTEGER NOT NULL,
  params TEXT NOT NULL, results TEXT NOT NULL DEFAULT '{}',
  created_at REAL NOT NULL, created_by TEXT NOT NULL,
  PRIMARY KEY (batch_id, rev));
CREATE TABLE IF NOT EXISTS segments (
  batch_id TEXT NOT NULL, rev INTEGER NOT NULL, number INTEGER NOT NULL,
  start_in REAL NOT NULL, end_in REAL NOT NULL, kind TEXT NOT NULL,
  status TEXT NOT NULL DEFAULT 'reported', rejection_reason TEXT,
  mass_fwd REAL, sigma_fwd REAL, mass_rev REAL, sigma_rev REAL,
  data TEXT NOT NULL DEFAULT '{}',
  created_at REAL NOT NULL DEFAULT 0, created_by TEXT NOT NULL DEFAULT '',
  PRIMARY KEY (batch_id, rev, number));
CREATE TABLE IF NOT EXISTS flags (
  batch_id TEXT NOT NULL, rev INTEGER NOT NULL, id TEXT NOT NULL,
  scope TEXT NOT NULL, segment INTEGER, code TEXT NOT NULL,
  severity TEXT NOT NULL, status TEXT NOT NULL, message TEXT NOT NULL,
  metrics TEXT NOT NULL DEFAULT '{}',
  cleared_by TEXT, cleared_at REAL, clear_comment TEXT,
  created_at REAL NOT NULL DEFAULT 0, created_by TEXT NOT NULL DEFAULT '',
  PRIMARY KEY (batch_id, rev, id));
CREATE TABLE IF NOT EXISTS comments (
  seq INTEGER PRIMARY KEY AUTOINCREMENT,
  batch_id TEXT NOT NULL, scope TEXT NOT NULL, segment INTEGER,
  text TEXT NOT NULL, author TEXT NOT NULL, author_name TEXT NOT NULL,
  created_at REAL NOT NULL);
CREATE TABLE IF NOT EXISTS qc_trend (
  seq INTEGER PRIMARY KEY AUTOINCREMENT,
  robot_id TEXT NOT NULL, batch_id TEXT NOT NULL, t REAL NOT NULL,
  context TEXT NOT NULL, efficiency REAL, passed INTEGER NOT NULL,
  created_at REAL NOT NULL DEFAULT 0, created_by TEXT NOT NULL DEFAULT '');
CREATE TABLE IF NOT EXISTS artifacts (
  id TEXT PRIMARY KEY, batch_id TEXT NOT NULL, rev INTEGER NOT NULL,
  name TEXT NOT NULL, media_type TEXT NOT NULL, path TEXT NOT NULL,
  size INTEGER NOT NULL,
  created_at REAL NOT NULL DEFAULT 0, created_by TEXT NOT NULL DEFAULT '');
CREATE TABLE IF NOT EXISTS jobs (
  batch_id TEXT PRIMARY KEY, phase TEXT NOT NULL,
  progress REAL NOT NULL DEFAULT 0, error TEXT);
"""

_MEDIA_TYPES = {".png": "image/png", ".csv": "text/csv",
                ".off": "text/plain", ".html": "text/html",
                ".zip": "application/zip", ".json": "application/json"}


class Archive:
    """Relational index plus content-addressed artifact files under one
    root directory. All mutating operations are serialized; state changes
    use compare-and-set on (state, current_rev)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "archive").mkdir(exist_ok=True)
        self._lock = threading.RLock()
        self._db = sqlite3.connect(self.root / "pps.sqlite3",
                                   check_same_thread=False)
        self._db.row_factory = sqlite3.Row
        with self._lock, self._db:
            self._db.executescript(_SCHEMA)

    def close(self) -> None:
        self._db.close()

    # -- users ------------------------------------------------------------
    def ensure_user(self, user: User) -> None:
        with self._lock, self._db:
            self._db.execute(
                "INSERT INTO users (id, display_name, role) VALUES (?,?,?) "
                "ON CONFLICT(id) DO UPDATE SET display_name=excluded.display_name,"
                " role=excluded.role",
                (user.id, user.display_name, user.role))

    def get_user(self, user_id: str) -> User | None:
        row = self._db.execute("SELECT * FROM users WHERE id=?",
                               (user_id,)).fetchone()
        return User(row["id"], row["display_name"], row["role"]) if row else None

    # -- batches ----------------------------------------------------------
    def create_batch(self, batch_id: str, bundle_bytes: bytes,
                     manifest: dict, request: dict, issues: list[dict],
                     user: User, robot_id: str, start_time_iso: str) -> None:
        with self._lock:
            row = self._db.execute("SELECT id FROM batches WHERE id=?",
                                   (batch_id,)).fetchone()
            if row is not None:
                raise DuplicateBatch(batch_id)
            bdir = self.root / "archive" / batch_id
            bdir.mkdir(parents=True, exist_ok=True)
            (bdir / "bundle.zip").write_bytes(bundle_bytes)
            with self._db:
                self._db.execute(
                    "INSERT INTO batches (id, state, robot_id, start_time,"
                    " manifest, request, ingest_issues, created_at, created_by)"
                    " VALUES (?,?,?,?,?,?,?,?,?)",
                    (batch_id, UPLOADED, robot_id, start_time_iso,
                     json.dumps(manifest, sort_keys=True),
                     json.dumps(request, sort_keys=True),
                     json.dumps(issues, sort_keys=True),
                     time.time(), user.id))

    def load_bundle(self, batch_id: str) -> bytes:
        self._batch_row(batch_id)
        return (self.root / "archive" / batch_id / "bundle.zip").read_bytes()

    def _batch_row(self, batch_id: str) -> sqlite3.Row:
        row = self._db.execute("SELECT * FROM batches WHERE id=?",
                               (batch_id,)).fetchone()
        if row is None:
            raise UnknownBatch(batch_id)
        return row

    def list_batches(self) -> list[dict]:
        rows = self._db.execute(
            "SELECT id, state, robot_id, start_time, current_rev,"
            " returned_from_pm FROM batches ORDER BY id").fetchall()
        return [dict(r) for r in rows]

    def batch_state(self, batch_id: str) -> str:
        return self._batch_row(batch_id)["state"]

    # -- snapshot assembly --------------------------------------------------
    def _flag_rows(self, batch_id: str, rev: int) -> list[sqlite3.Row]:
        return self._db.execute(
            "SELECT * FROM flags WHERE batch_id=? AND rev=? ORDER BY id",
            (batch_id, rev)).fetchall()

    def _segment_rows(self, batch_id: str, rev: int) -> list[sqlite3.Row]:
        return self._db.execute(
            "SELECT * FROM segments WHERE batch_id=? AND rev=? ORDER BY number",
            (batch_id, rev)).fetchall()

    def snapshot(self, batch_id: str) -> tuple[WorkflowSnapshot, int]:
        row = self._batch_row(batch_id)
        rev = row["current_rev"]
        flags = tuple(FlagRec(
            id=r["id"], scope=r["scope"], segment=r["segment"], code=r["code"],
            severity=r["severity"], status=r["status"], message=r["message"],
            cleared_by=r["cleared_by"], cleared_at=r["cleared_at"],
            clear_comment=r["clear_comment"])
            for r in self._flag_rows(batch_id, rev))
        segments = tuple(SegRec(
            number=r["number"], mass_fwd_g=r["mass_fwd"] or 0.0,
            sigma_fwd_g=r["sigma_fwd"] or 0.0, mass_rev_g=r["mass_rev"] or 0.0,
            sigma_rev_g=r["sigma_rev"] or 0.0, status=r["status"],
            rejection_reason=r["rejection_reason"])
            for r in self._segment_rows(batch_id, rev))
        replicate_passed: bool | None = None
        if rev > 0:
            results = self.revision_results(batch_id, rev)
            rp = results.get("replicate", {})
            replicate_passed = rp.get("passed")
        return WorkflowSnapshot(
            state=row["state"], returned_from_pm=bool(row["returned_from_pm"]),
            approved_by=row["approved_by"], approved_at=row["approved_at"],
            flags=flags, segments=segments,
            replicate_passed=replicate_passed), rev

    def _write_snapshot(self, batch_id: str, rev: int, old_state: str,
                        snap: WorkflowSnapshot) -> None:
        cur = self._db.execute(
            "UPDATE batches SET state=?, returned_from_pm=?, approved_by=?,"
            " approved_at=? WHERE id=? AND state=?",
            (snap.state, int(snap.returned_from_pm), snap.approved_by,
             snap.approved_at, batch_id, old_state))
        if cur.rowcount != 1:
            raise InvalidTransition("concurrent state change, retry")
        for f in snap.flags:
            self._db.execute(
                "INSERT INTO flags (batch_id, rev, id, scope, segment, code,"
                " severity, status, message, cleared_by, cleared_at,"
                " clear_comment) VALUES (?,?,?,?,?,?,?,?,?,?,?,?)"
                " ON CONFLICT(batch_id, rev, id) DO UPDATE SET"
                " status=excluded.status, cleared_by=excluded.cleared_by,"
                " cleared_at=excluded.cleared_at,"
                " clear_comment=excluded.clear_comment",
                (batch_id, rev, f.id, f.scope, f.segment, f.code, f.severity,
                 f.status, f.message, f.cleared_by, f.cleared_at,
                 f.clear_comment))
        for s in snap.segments:
            self._db.execute(
                "UPDATE segments SET status=?, rejection_reason=?"
                " WHERE batch_id=? AND rev=? AND number=?",
                (s.status, s.rejection_reason, batch_id, rev, s.number))

    # -- revisions ----------------------------------------------------------
    def record_revision(self, batch_id: str, user: User, params_json: str,
                        results: dict, segments: list[dict],
                        flags: list[FlagRec],
                        artifacts: list[tuple[str, bytes, str]],
                        trend: list[tuple[str, float, str, float, bool]],
                        ) -> int:
        """Persist a completed analysis revision and move the batch to
        PROCESSED or INVALID. segments entries carry number/start_in/end_in/
        kind/mass+sigma per phase and a data dict."""
        with self._lock:
            row = self._batch_row(batch_id)
            snap, _ = self.snapshot(batch_id)
            rev = row["current_rev"] + 1
            seg_recs = tuple(SegRec(
                number=s["number"], mass_fwd_g=s.get("mass_fwd", 0.0),
                sigma_fwd_g=s.get("sigma_fwd", 0.0),
                mass_rev_g=s.get("mass_rev", 0.0),
                sigma_rev_g=s.get("sigma_rev", 0.0)) for s in segments)
            new_snap = apply_process_complete(
                snap, user, tuple(flags), seg_recs,
                results.get("replicate", {}).get("passed"))
            with self._db:
                self._db.execute(
                    "INSERT INTO revisions (batch_id, rev, params, results,"
                    " created_at, created_by) VALUES (?,?,?,?,?,?)",
                    (batch_id, rev, params_json,
                     json.dumps(results, sort_keys=True), time.time(), user.id))
                now = time.time()
                for f in flags:
                    self._db.execute(
                        "INSERT INTO flags (batch_id, rev, id, scope, segment,"
                        " code, severity, status, message, created_at,"
                        " created_by) VALUES (?,?,?,?,?,?,?,?,?,?,?)",
                        (batch_id, rev, f.id, f.scope, f.segment, f.code,
                         f.severity, f.status, f.message, now, user.id))
                for s in segments:
                    self._db.execute(
                        "INSERT INTO segments (batch_id, rev, number, start_in,"
                        " end_in, kind, status, mass_fwd, sigma_fwd, mass_rev,"
                        " sigma_rev, data, created_at, created_by)"
                        " VALUES (?,?,?,?,?,?,?,?,?,?,?,?,?,?)",
                        (batch_id, rev, s["number"], s["start_in"], s["end_in"],
                         s["kind"], SEG_REPORTED, s.get("mass_fwd"),
                         s.get("sigma_fwd"), s.get("mass_rev"),
                         s.get("sigma_rev"),
                         json.dumps(s.get("data", {}), sort_keys=True),
                         now, user.id))
                for name, payload, media in artifacts:
                    self._put_artifact_tx(batch_id, rev, name, payload, media,
                                          created_by=user.id)
                for robot_id, t, context, eff, passed in trend:
                    self._db.execute(
                        "INSERT INTO qc_trend (robot_id, batch_id, t, context,"
                        " efficiency, passed, created_at, created_by)"
                        " VALUES (?,?,?,?,?,?,?,?)",
                        (robot_id, batch_id, t, context, eff, int(passed),
                         now, user.id))
                invalid_reason = None
                if new_snap.state == INVALID:
                    invalid_reason = ", ".join(sorted(
                        f.code for f in flags
                        if f.severity == SEVERITY_INVALIDATING))
                cur = self._db.execute(
                    "UPDATE batches SET state=?, current_rev=?,"
                    " returned_from_pm=0, approved_by=NULL, approved_at=NULL,"
                    " invalid_reason=? WHERE id=? AND state=? AND current_rev=?",
                    (new_snap.state, rev, invalid_reason, batch_id,
                     row["state"], row["current_rev"]))
                if cur.rowcount != 1:
                    raise InvalidTransition("concurrent modification")
            return rev

    def revision_results(self, batch_id: str, rev: int) -> dict:
        row = self._db.execute(
            "SELECT results FROM revisions WHERE batch_id=? AND rev=?",
            (batch_id, rev)).fetchone()
        if row is None:
            raise UnknownBatch(f"{batch_id} rev {rev}")
        return json.loads(row["results"])

    def revision_params(self, batch_id: str, rev: int) -> str:
        row = self._db.execute(
            "SELECT params FROM revisions WHERE batch_id=? AND rev=?",
            (batch_id, rev)).fetchone()
        if row is None:
            raise UnknownBatch(f"{batch_id} rev {rev}")
        return row["params"]

    def _update_results(self, batch_id: str, rev: int, results: dict) -> None:
        self._db.execute(
            "UPDATE revisions SET results=? WHERE batch_id=? AND rev=?",
            (json.dumps(results, sort_keys=True), batch_id, rev))

    # -- workflow operations -------------------------------------------------
    def transition(self, batch_id: str, action: str, user: User) -> str:
        """Apply a workflow action and return the new state."""
        with self._lock, self._db:
            snap, rev = self.snapshot(batch_id)
            if action == "lock":
                new = apply_lock(snap, user)
            elif action == "approve":
                new = apply_approve(snap, user, time.time())
            elif action == "return":
                new = apply_return(snap, user)
            elif action == "invalidate":
                new = apply_invalidate(snap, user)
            else:
                raise InvalidTransition(f"unknown action {action!r}")
            self._write_snapshot(batch_id, rev, snap.state, new)
            return new.state

    def clear_flag(self, batch_id: str, flag_id: str, comment: str,
                   user: User) -> None:
        with self._lock, self._db:
            snap, rev = self.snapshot(batch_id)
            new = apply_clear_flag(snap, flag_id, comment, user, time.time())
            self._write_snapshot(batch_id, rev, snap.state, new)

    def reject_segment(self, batch_id: str, number: int, reason: str,
                       user: User,
                       thresholds: ReplicateThresholds | None = None) -> None:
        with self._lock, self._db:
            snap, rev = self.snapshot(batch_id)
            thresholds = thresholds or self._thresholds_for(batch_id, rev)
            new = apply_reject_segment(snap, number, reason, user,
                                       time.time(), thresholds)
            self._write_snapshot(batch_id, rev, snap.state, new)
            # refresh the stored replicate evaluation over what remains
            results = self.revision_results(batch_id, rev)
            passed, rep = evaluate_replicate(new.segments, thresholds)
            results["replicate"] = replicate_block(passed, rep)
            self._update_results(batch_id, rev, results)
            if new.state == INVALID:
                self._db.execute(
                    "UPDATE batches SET invalid_reason=? WHERE id=?",
                    ("replicate check failed after segment rejection",
                     batch_id))

    def _thresholds_for(self, batch_id: str, rev: int) -> ReplicateThresholds:
        from .config import parameters_from_json
        if rev == 0:
            return ReplicateThresholds()
        return parameters_from_json(
            self.revision_params(batch_id, rev)).replicate

    def add_comment(self, batch_id: str, scope: str, segment: int | None,
                    text: str, user: User) -> None:
        if not text or not text.strip():
            raise EmptyComment("comment text must be non-empty")
        if user.role not in (ROLE_ANALYST, ROLE_PM):
            raise ForbiddenRole("comments require analyst or program_manager")
        with self._lock, self._db:
            row = self._batch_row(batch_id)
            if row["state"] == APPROVED:
                raise InvalidTransition("approved batches are immutable")
            if scope == "segment":
                seg = self._db.execute(
                    "SELECT number FROM segments WHERE batch_id=? AND rev=?"
                    " AND number=?",
                    (batch_id, row["current_rev"], segment)).fetchone()
                if seg is None:
                    raise UnknownSegment(f"segment {segment}")
            self._db.execute(
                "INSERT INTO comments (batch_id, scope, segment, text, author,"
                " author_name, created_at) VALUES (?,?,?,?,?,?,?)",
                (batch_id, scope, segment, text, user.id, user.display_name,
                 time.time()))

    def list_comments(self, batch_id: str) -> list[dict]:
        rows = self._db.execute(
            "SELECT * FROM comments WHERE batch_id=? ORDER BY seq",
            (batch_id,)).fetchall()
        return [dict(r) for r in rows]

    # -- qc trend -------------------------------------------------------------
    def qc_trend(self, robot_id: str, limit: int = 30) -> list[dict]:
        rows = self._db.execute(
            "SELECT * FROM qc_trend WHERE robot_id=? ORDER BY seq DESC LIMIT ?",
            (robot_id, limit)).fetchall()
        return [dict(r) for r in reversed(rows)]

    # -- artifacts --------------------------------------------------------------
    def _put_artifact_tx(self, batch_id: str, rev: int, name: str,
                         payload: bytes, media_type: str | None = None,
                         created_by: str = "") -> str:
        digest = hashlib.sha256(payload).hexdigest()
        rel = Path("archive") / batch_id / f"rev{rev}" / name
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
        media = media_type or _MEDIA_TYPES.get(Path(name).suffix,
                                               "application/octet-stream")
        self._db.execute(
            "INSERT INTO artifacts (id, batch_id, rev, name, media_type, path,"
            " size, created_at, created_by) VALUES (?,?,?,?,?,?,?,?,?)"
            " ON CONFLICT(id) DO NOTHING",
            (digest, batch_id, rev, name, media, str(rel), len(payload),
             time.time(), created_by))
        return digest

    def put_artifact(self, batch_id: str, rev: int, name: str, payload: bytes,
                     media_type: str | None = None,
                     created_by: str = "") -> str:
        with self._lock, self._db:
            return self._put_artifact_tx(batch_id, rev, name, payload,
                                         media_type, created_by)

    def write_qc_trend_artifact(self, batch_id: str, rev: int,
                                robot_id: str, created_by: str = "") -> str:
        rows = ["t,context,efficiency,passed,batch_id"]
        for e in self.qc_trend(robot_id, limit=30):
            eff = "" if e["efficiency"] is None else repr(float(e["efficiency"]))
            rows.append(f"{e['t']!r},{e['context']},{eff},"
                        f"{bool(e['passed'])},{e['batch_id']}")
        return self.put_artifact(batch_id, rev, "qc_trend.csv",
                                 ("\n".join(rows) + "\n").encode(),
                                 "text/csv", created_by)

    def get_artifact(self, artifact_id: str) -> tuple[bytes, str, str]:
        row = self._db.execute("SELECT * FROM artifacts WHERE id=?",
                               (artifact_id,)).fetchone()
        if row is None:
            raise UnknownBatch(f"artifact {artifact_id}")
        return ((self.root / row["path"]).read_bytes(), row["media_type"],
                row["name"])

    def artifact_index(self, batch_id: str, rev: int) -> dict[str, str]:
        rows = self._db.execute(
            "SELECT id, name FROM artifacts WHERE batch_id=? AND rev=?"
            " ORDER BY name", (batch_id, rev)).fetchall()
        return {r["name"]: r["id"] for r in rows}

    # -- jobs ----------------------------------------------------------------
    def set_job(self, batch_id: str, phase: str, progress: float,
                error: str | None = None) -> None:
        with self._lock, self._db:
            current = self._db.execute(
                "SELECT phase FROM jobs WHERE batch_id=?",
                (batch_id,)).fetchone()
            if current is not None and current["phase"] in ("done", "failed"):
                if phase not in ("queued", "running"):
                    return
                # a new processing run may restart a terminal job
            self._db.execute(
                "INSERT INTO jobs (batch_id, phase, progress, error)"
                " VALUES (?,?,?,?) ON CONFLICT(batch_id) DO UPDATE SET"
                " phase=excluded.phase, progress=excluded.progress,"
                " error=excluded.error",
                (batch_id, phase, progress, error))

    def get_job(self, batch_id: str) -> dict | None:
        row = self._db.execute("SELECT * FROM jobs WHERE batch_id=?",
                               (batch_id,)).fetchone()
        return dict(row) if row else None

    # -- views ------------------------------------------------------------------
    def batch_view(self, batch_id: str) -> dict:
        """Everything the API and the report builder need about a batch at
        its current revision."""
        row = self._batch_row(batch_id)
        rev = row["current_rev"]
        view = {
            "id": row["id"], "state": row["state"],
            "robot_id": row["robot_id"], "start_time": row["start_time"],
            "returned_from_pm": bool(row["returned_from_pm"]),
            "approved_by": row["approved_by"],
            "approved_at": row["approved_at"],
            "invalid_reason": row["invalid_reason"],
            "revision": rev,
            "manifest": json.loads(row["manifest"]),
            "request": json.loads(row["request"]),
            "ingest_issues": json.loads(row["ingest_issues"]),
            "segments": [], "flags": [], "comments": [],
            "results": {}, "parameters": None, "artifacts": {},
        }
        if rev > 0:
            view["results"] = self.revision_results(batch_id, rev)
            view["parameters"] = json.loads(self.revision_params(batch_id, rev))
            open_by_segment: dict[int, int] = {}
            for f in self._flag_rows(batch_id, rev):
                d = dict(f)
                d.pop("batch_id"), d.pop("rev")
                view["flags"].append(d)
                if f["scope"] == "segment" and f["status"] == FLAG_OPEN:
                    open_by_segment[f["segment"]] = \
                        open_by_segment.get(f["segment"], 0) + 1
            for s in self._segment_rows(batch_id, rev):
                d = dict(s)
                d.pop("batch_id"), d.pop("rev")
                d["data"] = json.loads(s["data"])
                d["open_flag_count"] = open_by_segment.get(s["number"], 0)
                view["segments"].append(d)
            view["artifacts"] = self.artifact_index(batch_id, rev)
        view["comments"] = self.list_comments(batch_id)
        approver = self.get_user(row["approved_by"]) if row["approved_by"] else None
        view["approved_by_name"] = approver.display_name if approver else None
        return view


def replicate_block(passed: bool | None,
                    results: list[ReplicateResult]) -> dict:
    block = {"passed": passed, "total": None, "max": None}
    for r in results:
        block[r.kind] = {
            "forward_g": r.forward_g, "forward_sigma_g": r.forward_sigma_g,
            "reverse_g": r.reverse_g, "reverse_sigma_g": r.reverse_sigma_g,
            "rpd_percent": r.rpd_percent,
            "two_sigma_bound_g": r.two_sigma_bound_g,
            "passed": r.passed, "segment_number": r.segment_number}
    return block
