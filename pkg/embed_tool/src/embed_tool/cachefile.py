"""Writer and verifier for the embedding-cache file format.

The format is owned by the consumer package (header JSON line, then one JSON
record per line); this module reimplements it rather than importing the
consumer, so the file itself is the only shared surface.  Vector components
are serialized with 9 significant digits, which keeps cosine-similarity
round-trip error well below 1e-6.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

CACHE_VERSION = 1
SIG_DIGITS = 9


class SchemaViolation(Exception):
    """Cache file violates the schema; the message names the record."""


def _round_sig(v: float) -> float:
    return float(f"{float(v):.{SIG_DIGITS}g}")


def write_cache(path, dimension: int, encoder_name: str, records: list[dict],
                created: str = "") -> None:
    """Write header + records; `records` are {"id","kind","vector","payload"}."""
    n_image = sum(1 for r in records if r["kind"] == "image")
    n_text = sum(1 for r in records if r["kind"] == "text")
    header = {
        "version": CACHE_VERSION,
        "dimension": int(dimension),
        "encoder": encoder_name,
        "counts": {"image": n_image, "text": n_text},
        "created": created,
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            vec = [_round_sig(v) for v in rec["vector"]]
            f.write(json.dumps({"id": rec["id"], "kind": rec["kind"],
                                "vector": vec, "payload": rec["payload"]},
                               sort_keys=True) + "\n")


@dataclass
class VerifyReport:
    ok: bool
    dimension: int = 0
    n_image: int = 0
    n_text: int = 0
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        lines = [f"[{status}] dimension={self.dimension} "
                 f"image={self.n_image} text={self.n_text}"]
        lines += [f"error: {e}" for e in self.errors]
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines)


def verify_cache(path) -> VerifyReport:
    """Re-validate schema, dimension consistency, and vector sanity.

    Raises SchemaViolation for structural problems (naming the record) and
    returns a report for intact files.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [ln for ln in f.read().splitlines() if ln.strip()]
    except OSError as e:
        raise SchemaViolation(f"cannot read {path}: {e}") from e
    if not lines:
        raise SchemaViolation(f"{path}: empty cache file")
    try:
        header = json.loads(lines[0])
    except ValueError as e:
        raise SchemaViolation(f"{path}: malformed header") from e
    for key in ("version", "dimension", "encoder", "counts"):
        if key not in header:
            raise SchemaViolation(f"{path}: header is missing {key!r}")
    if header["version"] != CACHE_VERSION:
        raise SchemaViolation(f"{path}: unsupported version {header['version']}")
    dim = header["dimension"]

    report = VerifyReport(ok=True, dimension=dim)
    seen: set[str] = set()
    for i, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except ValueError as e:
            raise SchemaViolation(f"{path}:{i}: malformed record") from e
        rid = rec.get("id", f"<line {i}>")
        missing = {"id", "kind", "vector", "payload"} - rec.keys()
        if missing:
            raise SchemaViolation(f"record {rid!r}: missing fields {sorted(missing)}")
        if rid in seen:
            raise SchemaViolation(f"duplicate record id {rid!r}")
        seen.add(rid)
        if rec["kind"] not in ("image", "text"):
            raise SchemaViolation(f"record {rid!r}: unknown kind {rec['kind']!r}")
        vec = np.asarray(rec["vector"], dtype=np.float64)
        if vec.ndim != 1 or vec.size != dim:
            raise SchemaViolation(
                f"record {rid!r}: vector length {vec.size} != dimension {dim}")
        if not np.all(np.isfinite(vec)):
            raise SchemaViolation(f"record {rid!r}: non-finite vector component")
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            raise SchemaViolation(f"record {rid!r}: zero-norm vector")
        self_sim = float(vec @ vec / (norm * norm))
        if abs(self_sim - 1.0) > 1e-12:
            report.errors.append(f"record {rid!r}: self-similarity {self_sim} != 1")
        if abs(norm - 1.0) > 1e-6:
            report.warnings.append(f"record {rid!r}: vector norm {norm:.6f} "
                                   f"(expected unit-normalized)")
        if rec["kind"] == "image":
            report.n_image += 1
        else:
            report.n_text += 1

    counts = header["counts"]
    if counts.get("image") != report.n_image or counts.get("text") != report.n_text:
        raise SchemaViolation(
            f"{path}: header counts {counts} do not match records "
            f"(image={report.n_image}, text={report.n_text})")
    report.ok = not report.errors
    return report
