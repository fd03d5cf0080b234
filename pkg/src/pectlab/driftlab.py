"""Drift metrics, energy-coupling statistics, the fused consistency bound and
the keep/change decision rule.

Every aggregate here is a plain function of an immutable list of
:class:`DriftRecord`; nothing depends on record order except I/O.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .ecrl import PairedData
from .models import Model, argmax_lowest, margins, spectral_norm

FUSED = "fused"
KEEP_SUB_MARGIN = "KEEP_SUB_MARGIN"
KEEP_VIRTUAL_DRIFT = "KEEP_VIRTUAL_DRIFT"
CHANGE = "CHANGE"
VERDICTS = (KEEP_SUB_MARGIN, KEEP_VIRTUAL_DRIFT, CHANGE)


class ModalityMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class DriftRecord:
    sample_id: int
    drift: dict  # modality -> ||dz_m||
    drift_fused: float
    delta_e: float
    gamma: float
    pred_clean: int
    pred_pert: int
    label: int
    margin: float | None

    @property
    def abs_delta_e(self) -> float:
        return abs(self.delta_e)

    def drift_of(self, m: str) -> float:
        return self.drift_fused if m == FUSED else self.drift[m]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["abs_delta_e"] = self.abs_delta_e
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DriftRecord":
        d = {k: v for k, v in d.items() if k != "abs_delta_e"}
        return cls(**d)


def _require(records: Sequence[DriftRecord], what: str) -> None:
    if len(records) == 0:
        raise ValueError(f"{what}: no records")


# --------------------------------------------------------------------------
# collection


def collect_records(model: Model, data: PairedData, eps: float = 1e-6,
                    ids: Sequence[int] | None = None) -> list[DriftRecord]:
    """One record per clean/perturbed pair, from two no-gradient forward passes."""
    if data.pert is None or data.delta_e is None:
        raise ValueError("collect_records needs perturbed views and energy shifts")
    if len(data) == 0:
        raise ValueError("collect_records: empty paired set")
    for views in (data.clean, data.pert):
        missing = [m for m in model.modalities if m not in views]
        if missing:
            raise ModalityMismatchError(f"paired set lacks modalities {missing} required by the model")
    ids = list(range(len(data))) if ids is None else [int(i) for i in ids]
    if len(ids) != len(data):
        raise ValueError("ids must match the number of pairs")
    zs_c, zf_c, lg_c = model.embed(data.clean)
    zs_p, zf_p, lg_p = model.embed(data.pert)
    d_m = {m: np.linalg.norm(zs_p[m] - zs_c[m], axis=1) for m in model.modalities}
    d_f = np.linalg.norm(zf_p - zf_c, axis=1)
    gam = margins(zf_c, model.params["cls.W"], model.params["cls.b"])
    pc, pp = argmax_lowest(lg_c), argmax_lowest(lg_p)
    out = []
    for i in range(len(data)):
        de = float(data.delta_e[i])
        out.append(DriftRecord(
            sample_id=ids[i],
            drift={m: float(d_m[m][i]) for m in model.modalities},
            drift_fused=float(d_f[i]),
            delta_e=de,
            gamma=float(d_f[i]) / (abs(de) + eps),
            pred_clean=int(pc[i]),
            pred_pert=int(pp[i]),
            label=int(data.labels[i]),
            margin=float(gam[i]),
        ))
    return out


# --------------------------------------------------------------------------
# accuracy and drift


def accuracy_counts(records: Sequence[DriftRecord]) -> tuple[int, int, int]:
    """``(n, correct clean, correct perturbed)``."""
    _require(records, "accuracy")
    n = len(records)
    cc = sum(r.pred_clean == r.label for r in records)
    cp = sum(r.pred_pert == r.label for r in records)
    return n, cc, cp


def robustness_gap(records: Sequence[DriftRecord]) -> float:
    n, cc, cp = accuracy_counts(records)
    return (cc - cp) / n


def mean_fused_drift(records: Sequence[DriftRecord]) -> float:
    _require(records, "mean_fused_drift")
    return float(np.mean([r.drift_fused for r in records]))


def _xy(records: Sequence[DriftRecord]) -> tuple[np.ndarray, np.ndarray]:
    x = np.array([r.abs_delta_e for r in records], dtype=np.float64)
    y = np.array([r.drift_fused for r in records], dtype=np.float64)
    return x, y


def pearson_r(records: Sequence[DriftRecord]) -> float | None:
    """Correlation of fused drift with ``|dE|``; ``None`` when either is constant."""
    if len(records) < 2:
        raise ValueError("pearson_r needs at least 2 records")
    x, y = _xy(records)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    dx, dy = x - x.mean(), y - y.mean()
    r = float(np.dot(dx, dy) / math.sqrt(float(np.dot(dx, dx)) * float(np.dot(dy, dy))))
    return max(-1.0, min(1.0, r))


def energy_drift_regression(records: Sequence[DriftRecord]) -> tuple[float | None, float | None]:
    """Least-squares ``drift = slope * |dE| + intercept``; ``(None, None)`` if ``|dE|`` is constant."""
    if len(records) < 2:
        raise ValueError("energy_drift_regression needs at least 2 records")
    x, y = _xy(records)
    if np.ptp(x) == 0:
        return None, None
    dx = x - x.mean()
    slope = float(np.dot(dx, y - y.mean()) / np.dot(dx, dx))
    return slope, float(y.mean() - slope * x.mean())


# --------------------------------------------------------------------------
# energy coupling


def coupling_coefficient(records: Sequence[DriftRecord], m: str, eps: float = 1e-6) -> float:
    """Mean of ``||dz_m|| / (|dE| + eps)``; ``m`` may be a modality or ``"fused"``."""
    _require(records, "coupling_coefficient")
    return float(np.mean([r.drift_of(m) / (r.abs_delta_e + eps) for r in records]))


def zero_energy_count(records: Sequence[DriftRecord]) -> int:
    return sum(r.delta_e == 0 for r in records)


def empirical_lipschitz(records: Sequence[DriftRecord], m: str) -> float:
    """Largest ``||dz_m|| / |dE|`` over records with ``|dE| > 0``."""
    ratios = [r.drift_of(m) / r.abs_delta_e for r in records if r.delta_e != 0]
    if not ratios:
        raise ValueError("empirical_lipschitz: no record with |dE| > 0")
    return float(max(ratios))


@dataclass
class BoundCheck:
    """Per-record check of ``||dz_fused|| <= kappa * |dE|``."""

    kappa: float
    alpha: dict
    lipschitz: dict
    slack: np.ndarray  # kappa * |dE| - ||dz_fused||, estimation-set order
    violations: int
    n_checked: int
    n_excluded: int  # records with dE == 0

    def to_dict(self) -> dict:
        s = self.slack
        return {
            "kappa": self.kappa,
            "alpha": self.alpha,
            "lipschitz": self.lipschitz,
            "violations": self.violations,
            "n_checked": self.n_checked,
            "n_excluded": self.n_excluded,
            "slack_min": float(s.min()) if s.size else None,
            "slack_median": float(np.median(s)) if s.size else None,
            "slack_max": float(s.max()) if s.size else None,
        }


def fusion_alphas(model: Model) -> dict[str, float]:
    """Spectral norms of the per-modality fusion blocks."""
    if model.cfg.multimodal and "fusion.W" not in model.params:
        raise ValueError("bound check requires a concat-then-affine fusion layer")
    return {m: spectral_norm(W) for m, W in model.fusion_blocks().items()}


def verify_theorem1(model: Model, records: Sequence[DriftRecord], kappa_scale: float = 1.0,
                    rtol: float = 1e-9) -> BoundCheck:
    """Check the fused consistency bound on the records with ``|dE| > 0``.

    The Lipschitz constants are estimated on that same set, so the bound holds
    for every record up to rounding; ``rtol`` absorbs the last few ulps (the
    record attaining the max ratio meets its bound with equality).
    """
    _require(records, "verify_theorem1")
    alpha = fusion_alphas(model)
    used = [r for r in records if r.delta_e != 0]
    if not used:
        raise ValueError("verify_theorem1: no record with |dE| > 0")
    lip = {m: empirical_lipschitz(used, m) for m in model.modalities}
    kappa = kappa_scale * sum(alpha[m] * lip[m] for m in model.modalities)
    bound = np.array([kappa * r.abs_delta_e for r in used])
    drift = np.array([r.drift_fused for r in used])
    slack = bound - drift
    violations = int(np.sum(drift > bound * (1.0 + rtol)))
    return BoundCheck(kappa, alpha, lip, slack, violations, len(used), len(records) - len(used))


# --------------------------------------------------------------------------
# decision rule


def calibrate_kappa_hat(records: Sequence[DriftRecord], q: float = 0.95) -> float:
    """Linear-interpolation ``q``-quantile of the coupling ratio."""
    _require(records, "calibrate_kappa_hat")
    if not 0 < q <= 1:
        raise ValueError(f"quantile must lie in (0, 1], got {q}")
    return float(np.quantile(np.array([r.gamma for r in records]), q))


@dataclass(frozen=True)
class Verdict:
    kind: str
    reason: str

    @property
    def keep(self) -> bool:
        return self.kind != CHANGE


def decision_rule(record: DriftRecord, kappa_hat: float) -> Verdict:
    """Keep the prediction unless the drift both crosses the margin and is
    explained by the energy change.

    1. zero drift, or drift below the margin: keep (the argmax cannot move)
    2. ratio above ``kappa_hat``: keep, the displacement is too large for the
       energy change and is treated as virtual drift
    3. otherwise: change
    """
    if record.margin is None or math.isnan(record.margin):
        raise ValueError(f"record {record.sample_id}: margin missing")
    if not kappa_hat > 0:
        raise ValueError("kappa_hat must be > 0")
    if record.drift_fused == 0:
        return Verdict(KEEP_SUB_MARGIN, "zero drift")
    if record.drift_fused < record.margin:
        return Verdict(KEEP_SUB_MARGIN, f"drift {record.drift_fused:.4g} < margin {record.margin:.4g}")
    if record.gamma > kappa_hat:
        return Verdict(KEEP_VIRTUAL_DRIFT, f"ratio {record.gamma:.4g} > kappa_hat {kappa_hat:.4g}")
    return Verdict(CHANGE, f"drift {record.drift_fused:.4g} >= margin {record.margin:.4g}, "
                           f"ratio {record.gamma:.4g} <= kappa_hat {kappa_hat:.4g}")


def verdict_counts(records: Sequence[DriftRecord], kappa_hat: float) -> dict[str, int]:
    counts = dict.fromkeys(VERDICTS, 0)
    for r in records:
        counts[decision_rule(r, kappa_hat).kind] += 1
    return counts


def change_fraction(records: Sequence[DriftRecord], kappa_hat: float) -> float:
    _require(records, "change_fraction")
    return verdict_counts(records, kappa_hat)[CHANGE] / len(records)


# --------------------------------------------------------------------------
# energy-response curve


@dataclass
class EnergyResponseCurve:
    modality: str
    edges: np.ndarray
    means: list  # float per bin, None where empty
    counts: np.ndarray

    def to_dict(self) -> dict:
        return {"modality": self.modality, "edges": self.edges.tolist(), "means": list(self.means),
                "counts": self.counts.tolist()}


def energy_response_curve(records: Sequence[DriftRecord], m: str, n_bins: int = 10) -> EnergyResponseCurve:
    """Mean ``||dz_m||`` in uniform ``|dE|`` bins over ``[0, max |dE|]``."""
    _require(records, "energy_response_curve")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    x = np.array([r.abs_delta_e for r in records])
    y = np.array([r.drift_of(m) for r in records])
    top = float(x.max())
    edges = np.linspace(0.0, top, n_bins + 1)
    if top == 0:
        idx = np.zeros(x.size, dtype=int)
    else:
        idx = np.minimum((x / top * n_bins).astype(int), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=y, minlength=n_bins)
    means = [float(s / c) if c else None for s, c in zip(sums, counts)]
    return EnergyResponseCurve(m, edges, means, counts)


# --------------------------------------------------------------------------
# report


@dataclass
class DriftReport:
    n: int
    acc_clean: float
    acc_pert: float
    robustness_gap: float
    mean_fused_drift: float
    pearson_r: float | None
    regression_slope: float | None
    regression_intercept: float | None
    coupling: dict
    lipschitz: dict
    alpha: dict
    kappa: float
    kappa_hat: float
    quantile: float
    verdicts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DriftReport":
        return cls(**d)


def build_report(records: Sequence[DriftRecord], model: Model, eps: float = 1e-6, q: float = 0.95,
                 calibration: Sequence[DriftRecord] | None = None) -> DriftReport:
    """Aggregate every metric; the ratio threshold is calibrated on
    ``calibration`` (defaults to ``records``)."""
    _require(records, "build_report")
    n, cc, cp = accuracy_counts(records)
    alpha = fusion_alphas(model)
    mods = model.modalities
    if any(r.delta_e != 0 for r in records):
        lip = {m: empirical_lipschitz(records, m) for m in mods}
    else:
        lip = {m: 0.0 for m in mods}
    slope, intercept = energy_drift_regression(records) if n >= 2 else (None, None)
    kappa_hat = calibrate_kappa_hat(calibration if calibration is not None else records, q)
    return DriftReport(
        n=n,
        acc_clean=cc / n,
        acc_pert=cp / n,
        robustness_gap=(cc - cp) / n,
        mean_fused_drift=mean_fused_drift(records),
        pearson_r=pearson_r(records) if n >= 2 else None,
        regression_slope=slope,
        regression_intercept=intercept,
        coupling={m: coupling_coefficient(records, m, eps) for m in (*mods, FUSED)},
        lipschitz=lip,
        alpha=alpha,
        kappa=float(sum(alpha[m] * lip[m] for m in mods)),
        kappa_hat=kappa_hat,
        quantile=q,
        verdicts=verdict_counts(records, kappa_hat) if kappa_hat > 0 else {},
    )


def improvement_table(before: DriftReport, after: DriftReport) -> dict:
    """Relative clean and perturbed accuracy change and gap reduction, in percent."""
    def rel(a, b):
        return None if a == 0 else 100.0 * (b - a) / a
    red = None if before.robustness_gap == 0 else \
        100.0 * (before.robustness_gap - after.robustness_gap) / before.robustness_gap
    return {"clean_delta_pct": rel(before.acc_clean, after.acc_clean),
            "pert_delta_pct": rel(before.acc_pert, after.acc_pert),
            "robustness_reduction_pct": red}


# --------------------------------------------------------------------------
# I/O


def report_schema() -> dict:
    return json.loads(resources.files("pectlab").joinpath("schemas/drift_report.schema.json").read_text())


def validate_report(d: dict) -> None:
    import jsonschema

    jsonschema.validate(d, report_schema())


def write_records(records: Sequence[DriftRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_records(path: str | Path) -> list[DriftRecord]:
    with open(path) as fh:
        return [DriftRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_report(report: DriftReport, path: str | Path) -> None:
    d = report.to_dict()
    validate_report(d)
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def read_report(path: str | Path) -> DriftReport:
    d = json.loads(Path(path).read_text())
    validate_report(d)
    return DriftReport.from_dict(d)


def write_scatter_csv(records: Sequence[DriftRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["sample_id", "abs_delta_e", "drift_fused"])
        for r in records:
            out.writerow([r.sample_id, repr(r.abs_delta_e), repr(r.drift_fused)])
