import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, NamedTuple, Optional

SE_MULTIPLIER = 3.0
EXACT_TOL = 1e-9
SIG_DIGITS = 12


class Estimate(NamedTuple):
    value: float
    se: float


def utc_now_iso_z() -> str:
    return datetime.now(timezone.utc).isoformat().replace("+00:00", "Z")


def round_sig(x: Any, digits: int = SIG_DIGITS) -> Any:
    """Round a float to `digits` significant digits; other values pass through."""
    if isinstance(x, bool) or not isinstance(x, float):
        return x
    if not math.isfinite(x) or x == 0.0:
        return x
    return float(f"{x:.{digits}g}")


@dataclass
class BoundReport:
    """One measured gap against its computed bound.

    `e1` doubles as the mutual-information slot for bounds with a single
    information term; `e2` is 0 there.
    """

    gap_estimate: float
    gap_se: float
    kl_term: float
    e1: float
    e2: float
    bound_value: float
    holds: bool
    extras: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def check(cls, gap: float, se: float, bound: float, kl: float = 0.0, mi: float = 0.0,
              e2: float = 0.0, tolerance: float = EXACT_TOL,
              extras: Optional[Dict[str, Any]] = None) -> "BoundReport":
        holds = gap <= bound + SE_MULTIPLIER * se + tolerance
        return cls(gap, se, kl, mi, e2, bound, bool(holds), dict(extras or {}))

    def as_row(self) -> Dict[str, Any]:
        return {
            "gap": self.gap_estimate,
            "se": self.gap_se,
            "kl": self.kl_term,
            "mi_or_e1": self.e1,
            "e2": self.e2,
            "bound": self.bound_value,
            "holds": self.holds,
        }


def verdict_bullets(rows: List[Dict[str, Any]]) -> List[str]:
    bullets = []
    failed = [r for r in rows if not r.get("holds", False)]
    bullets.append(f"Rows checked: {len(rows)}; holding: {len(rows) - len(failed)}.")
    finite = [r for r in rows if math.isfinite(r.get("bound", math.nan))]
    if finite:
        tightest = min(finite, key=lambda r: r["bound"] + SE_MULTIPLIER * r["se"] - r["gap"])
        bullets.append(
            f"Tightest row: trial {tightest.get('trial')} (gap {tightest['gap']:.4g} vs bound {tightest['bound']:.4g})."
        )
    for r in failed[:5]:
        bullets.append(
            f"Violation: cell {r.get('cell')} trial {r.get('trial')} seed {r.get('seed')} "
            f"gap {r['gap']:.4g} > bound {r['bound']:.4g} + 3*{r['se']:.2g}."
        )
    return bullets


def narrative(campaign: str, rows: List[Dict[str, Any]], suites: Dict[str, bool]) -> str:
    parts = [f"Campaign '{campaign}' produced {len(rows)} row(s)."]
    for name, ok in suites.items():
        parts.append(f"Suite {name}: {'holds' if ok else 'VIOLATED'}.")
    if all(suites.values()):
        parts.append("Every measured gap sits under its bound.")
    else:
        parts.append("At least one inequality failed; see the violation rows in the report.")
    return " ".join(parts)
