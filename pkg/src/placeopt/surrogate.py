"""Bayesian linear surrogate over cluster-expansion features.

Conjugate Normal-Inverse-Gamma prior: weights ~ N(0, sigma^2/alpha I) given
the noise variance, sigma^2 ~ InvGamma(a0, b0).  The posterior, Student-t
predictive scale, and log marginal likelihood are all closed form; evidence
drives expansion selection, subject to a feature guard.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg as sla
from scipy.special import gammaln

from .artifacts import array_from_payload, array_to_payload
from .features import (
    FEATURE_LAYOUT_VERSION,
    ExpansionConfig,
    design_matrix,
    encode,
    feature_count,
)
from .placements import MixerCatalog, Placement


@dataclass(frozen=True)
class NIGPrior:
    """Ridge precision scale and Inverse-Gamma noise hyperparameters."""

    alpha: float = 1.0
    a0: float = 1e-3
    b0: float = 1e-3

    def __post_init__(self) -> None:
        if not (self.alpha > 0 and self.a0 > 0 and self.b0 > 0):
            raise ValueError("alpha, a0 and b0 must all be > 0")


@dataclass(frozen=True)
class ScoreNormalizer:
    """Affine map sending a reference minimum to 0 and maximum to 1."""

    minimum: float
    maximum: float

    def __post_init__(self) -> None:
        if not self.maximum > self.minimum:
            raise ValueError(
                f"degenerate reference: max ({self.maximum}) must exceed min ({self.minimum})"
            )

    @classmethod
    def from_reference(cls, scores) -> "ScoreNormalizer":
        scores = np.asarray(scores, dtype=np.float64)
        if scores.size < 2:
            raise ValueError("need at least two reference scores")
        return cls(minimum=float(scores.min()), maximum=float(scores.max()))

    def apply(self, scores):
        return (np.asarray(scores, dtype=np.float64) - self.minimum) / (self.maximum - self.minimum)

    def invert(self, normalized):
        return np.asarray(normalized, dtype=np.float64) * (self.maximum - self.minimum) + self.minimum


@dataclass(frozen=True)
class EvaluationRecord:
    """One (placement, score) observation, optionally tagged and costed."""

    placement: Placement
    score: float
    checkpoint_tag: str | None = None
    cost: float | None = None

    def __post_init__(self) -> None:
        if not np.isfinite(self.score):
            raise ValueError(f"score must be finite, got {self.score}")


@dataclass(eq=False)
class SurrogatePosterior:
    """Closed-form NIG posterior over cluster-expansion coefficients.

    `chol` is the lower Cholesky factor of A = X'X + alpha*I; the posterior
    covariance factor V_n = A^-1 is never formed densely.  Immutable after
    fit; prediction is pure.
    """

    mu: np.ndarray
    chol: np.ndarray
    a_n: float
    b_n: float
    n_obs: int
    config: ExpansionConfig
    num_layers: int
    num_types: int
    prior: NIGPrior
    normalizer: ScoreNormalizer | None = None
    layout_version: str = FEATURE_LAYOUT_VERSION

    @property
    def noise_scale_squared(self) -> float:
        return self.b_n / self.a_n

    def to_raw(self, value):
        """Map normalized-scale predictions back to raw score units."""
        if self.normalizer is None:
            return value
        return self.normalizer.invert(value)


def _validate_records(records: list[EvaluationRecord]) -> tuple[int, int]:
    if not records:
        raise ValueError("need at least one record")
    L = records[0].placement.num_layers
    M = records[0].placement.num_types
    for r in records:
        if r.placement.num_layers != L or r.placement.num_types != M:
            raise ValueError("records disagree on placement length or type count")
    return L, M


def _posterior_core(
    records: list[EvaluationRecord],
    config: ExpansionConfig,
    prior: NIGPrior,
    normalizer: ScoreNormalizer | None,
):
    L, M = _validate_records(records)
    placements = [r.placement for r in records]
    scores = np.array([r.score for r in records], dtype=np.float64)
    y = normalizer.apply(scores) if normalizer is not None else scores

    X = design_matrix(placements, config)
    d = X.shape[1]
    A = (X.T @ X).toarray() + prior.alpha * np.eye(d)
    try:
        chol = sla.cholesky(A, lower=True)
    except sla.LinAlgError as exc:  # unreachable for alpha > 0 barring numerics
        raise RuntimeError(f"posterior matrix not positive definite: {exc}") from exc

    Xty = X.T @ y
    mu = sla.cho_solve((chol, True), Xty)
    n = len(records)
    a_n = prior.a0 + n / 2.0
    # mu'A mu == mu'X'y, and y'y - mu'X'y >= 0 in exact arithmetic
    residual = max(float(y @ y - mu @ Xty), 0.0)
    b_n = prior.b0 + 0.5 * residual
    return L, M, mu, chol, a_n, b_n, n, d


def fit(
    records: list[EvaluationRecord],
    config: ExpansionConfig,
    prior: NIGPrior = NIGPrior(),
    normalizer: ScoreNormalizer | None = None,
) -> SurrogatePosterior:
    """Closed-form posterior: mu_n = A^-1 X'y with A = X'X + alpha*I."""
    L, M, mu, chol, a_n, b_n, n, _ = _posterior_core(records, config, prior, normalizer)
    return SurrogatePosterior(
        mu=mu,
        chol=chol,
        a_n=a_n,
        b_n=b_n,
        n_obs=n,
        config=config,
        num_layers=L,
        num_types=M,
        prior=prior,
        normalizer=normalizer,
    )


def predict(posterior: SurrogatePosterior, placement: Placement) -> tuple[float, float]:
    """Predictive mean and Student-t scale sqrt(c (1 + phi' V_n phi))."""
    if placement.num_layers != posterior.num_layers:
        raise ValueError(
            f"placement has {placement.num_layers} layers, posterior expects {posterior.num_layers}"
        )
    fv = encode(placement, posterior.config)
    phi = np.zeros(len(posterior.mu))
    phi[fv.indices] = fv.values
    mean = float(posterior.mu @ phi)
    z = sla.solve_triangular(posterior.chol, phi, lower=True)
    scale = math.sqrt(posterior.noise_scale_squared * (1.0 + float(z @ z)))
    return mean, scale


def predict_batch(
    posterior: SurrogatePosterior, placements: list[Placement]
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized predict over many placements."""
    if not placements:
        return np.array([]), np.array([])
    X = design_matrix(placements, posterior.config)
    means = X @ posterior.mu
    Z = sla.solve_triangular(posterior.chol, X.toarray().T, lower=True)
    scales = np.sqrt(posterior.noise_scale_squared * (1.0 + np.sum(Z * Z, axis=0)))
    return means, scales


def log_marginal_likelihood(
    records: list[EvaluationRecord],
    config: ExpansionConfig,
    prior: NIGPrior = NIGPrior(),
    normalizer: ScoreNormalizer | None = None,
) -> float:
    """Model evidence log p(y | alpha, a0, b0), stable via the Cholesky logdet."""
    _, _, _, chol, a_n, b_n, n, d = _posterior_core(records, config, prior, normalizer)
    logdet_A = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return (
        -0.5 * n * math.log(2.0 * math.pi)
        + 0.5 * d * math.log(prior.alpha)
        - 0.5 * logdet_A
        + prior.a0 * math.log(prior.b0)
        - a_n * math.log(b_n)
        + float(gammaln(a_n))
        - float(gammaln(prior.a0))
    )


def guard_allows(n_records: int, dim: int, guard_ratio: float = 2.0) -> bool:
    """Feature guard: a configuration is eligible when dim <= guard_ratio * n.

    With the default ratio 2, pairwise range-1 (948 features) is admitted at
    1000 samples while contiguous triplets (5348) stay blocked until ~2700.
    """
    return dim <= guard_ratio * n_records


def select_expansion(
    records: list[EvaluationRecord],
    candidates: list[ExpansionConfig],
    prior: NIGPrior = NIGPrior(),
    guard_ratio: float = 2.0,
    normalizer: ScoreNormalizer | None = None,
) -> ExpansionConfig:
    """Highest-evidence candidate among those passing the feature guard.

    Falls back to the smallest-feature candidate when the guard rejects all.
    Deterministic: no data splits, no randomness; evidence ties are broken
    toward fewer features.
    """
    if not candidates:
        raise ValueError("no expansion candidates")
    L, M = _validate_records(records)
    sized = sorted(
        ((feature_count(c, L, M), c.order, c.range, c) for c in candidates),
        key=lambda t: t[:3],
    )
    eligible = [(dim, c) for dim, _, _, c in sized if guard_allows(len(records), dim, guard_ratio)]
    if not eligible:
        return sized[0][3]
    scored = [
        (log_marginal_likelihood(records, c, prior, normalizer), -dim, c)
        for dim, c in eligible
    ]
    scored.sort(key=lambda t: (t[0], t[1]), reverse=True)
    return scored[0][2]


def default_expansion_candidates() -> list[ExpansionConfig]:
    """The standard sweep: unary, pairwise at ranges 1-3, contiguous triplets."""
    return [
        ExpansionConfig(order=1),
        ExpansionConfig(order=2, range=1),
        ExpansionConfig(order=2, range=2),
        ExpansionConfig(order=2, range=3),
        ExpansionConfig(order=3, range=3),
    ]


# ---------------------------------------------------------------------------
# record and posterior persistence

def records_to_jsonl(records: list[EvaluationRecord], catalog: MixerCatalog) -> str:
    lines = []
    for r in records:
        row: dict = {"placement": r.placement.to_codes(catalog), "score": r.score}
        if r.checkpoint_tag is not None:
            row["checkpoint"] = r.checkpoint_tag
        if r.cost is not None:
            row["cost"] = r.cost
        lines.append(json.dumps(row, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def records_from_jsonl(text: str, catalog: MixerCatalog) -> list[EvaluationRecord]:
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            placement = Placement.from_codes(row["placement"], catalog)
            records.append(
                EvaluationRecord(
                    placement=placement,
                    score=float(row["score"]),
                    checkpoint_tag=row.get("checkpoint"),
                    cost=float(row["cost"]) if "cost" in row else None,
                )
            )
        except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
            raise ValueError(f"bad record on line {lineno}: {exc}") from exc
    return records


def save_records(path: str | Path, records: list[EvaluationRecord], catalog: MixerCatalog) -> None:
    Path(path).write_text(records_to_jsonl(records, catalog))


def load_records(path: str | Path, catalog: MixerCatalog) -> list[EvaluationRecord]:
    return records_from_jsonl(Path(path).read_text(), catalog)


def posterior_to_dict(posterior: SurrogatePosterior) -> dict:
    out = {
        "layout_version": posterior.layout_version,
        "config": {
            "order": posterior.config.order,
            "range": posterior.config.range,
            "include_allocation_counts": posterior.config.include_allocation_counts,
        },
        "num_layers": posterior.num_layers,
        "num_types": posterior.num_types,
        "prior": {"alpha": posterior.prior.alpha, "a0": posterior.prior.a0, "b0": posterior.prior.b0},
        "a_n": posterior.a_n,
        "b_n": posterior.b_n,
        "n_obs": posterior.n_obs,
        "mu": array_to_payload(posterior.mu),
        "chol": array_to_payload(posterior.chol),
    }
    if posterior.normalizer is not None:
        out["normalizer"] = {
            "min": posterior.normalizer.minimum,
            "max": posterior.normalizer.maximum,
        }
    return out


def posterior_from_dict(payload: dict) -> SurrogatePosterior:
    if payload["layout_version"] != FEATURE_LAYOUT_VERSION:
        raise ValueError(
            f"feature layout {payload['layout_version']!r} does not match "
            f"this build ({FEATURE_LAYOUT_VERSION!r}); refusing to reuse coefficients"
        )
    cfg = payload["config"]
    normalizer = None
    if "normalizer" in payload:
        normalizer = ScoreNormalizer(payload["normalizer"]["min"], payload["normalizer"]["max"])
    return SurrogatePosterior(
        mu=array_from_payload(payload["mu"]),
        chol=array_from_payload(payload["chol"]),
        a_n=payload["a_n"],
        b_n=payload["b_n"],
        n_obs=payload["n_obs"],
        config=ExpansionConfig(
            order=cfg["order"],
            range=cfg["range"],
            include_allocation_counts=cfg["include_allocation_counts"],
        ),
        num_layers=payload["num_layers"],
        num_types=payload["num_types"],
        prior=NIGPrior(**payload["prior"]),
        normalizer=normalizer,
    )
