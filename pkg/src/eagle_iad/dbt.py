"""Distribution-based thresholding.

Training images are scored using only the patches that coreset selection
left out of the memory bank; the mean and spread of those image scores give
the decision threshold ``tau = mu + kappa * sigma``. The band
``[tau, s_max]`` marks verdicts the expert model is unsure about.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .coreset import CoresetTrace, PatchSet
from .neighbors import nearest_neighbors

log = logging.getLogger(__name__)

EULER_GAMMA = 0.5772156649015329


class InsufficientDataError(ValueError):
    pass


class DegenerateFitError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingScoreSet:
    scores: np.ndarray
    argmax_patch: list[int]  # per image, -1 when the image had no unsampled patch
    flagged: np.ndarray  # True where an image had no unsampled patches
    image_ids: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.scores)

    def usable(self, exclude_flagged: bool = True) -> np.ndarray:
        return self.scores[~self.flagged] if exclude_flagged else self.scores


@dataclass(frozen=True)
class EvtFit:
    location: float
    scale: float
    q: float
    gamma: float = 0.0

    @property
    def threshold(self) -> float:
        return self.location - self.scale * math.log(-math.log(self.q))

    def quantile(self, q: float) -> float:
        return self.location - self.scale * math.log(-math.log(q))

    def cdf(self, x):
        return np.exp(-np.exp(-(np.asarray(x, dtype=float) - self.location) / self.scale))

    def to_dict(self) -> dict:
        return {"location": self.location, "scale": self.scale, "q": self.q, "threshold": self.threshold}


@dataclass(frozen=True)
class ThresholdModel:
    mu: float
    sigma: float
    kappa: float
    s_max: float
    n: int = 0
    evt: EvtFit | None = None

    @property
    def tau(self) -> float:
        return self.mu + self.kappa * self.sigma

    def to_dict(self) -> dict:
        return {
            "mu": self.mu,
            "sigma": self.sigma,
            "kappa": self.kappa,
            "tau": self.tau,
            "s_max": self.s_max,
            "n": self.n,
            "evt": None if self.evt is None else self.evt.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdModel":
        evt = d.get("evt")
        model = cls(
            mu=float(d["mu"]),
            sigma=float(d["sigma"]),
            kappa=float(d["kappa"]),
            s_max=float(d["s_max"]),
            n=int(d.get("n", 0)),
            evt=None if evt is None else EvtFit(float(evt["location"]), float(evt["scale"]), float(evt["q"])),
        )
        if "tau" in d and d["tau"] != model.tau:
            raise ValueError(f"stored tau {d['tau']} disagrees with mu + kappa*sigma = {model.tau}")
        return model


@dataclass(frozen=True)
class ConfidenceVerdict:
    decision: str  # "normal" | "abnormal"
    low_confidence: bool
    s_img: float

    @property
    def abnormal(self) -> bool:
        return self.decision == "abnormal"

    def as_dict(self) -> dict:
        return asdict(self)


def training_scores(
    patches: PatchSet,
    trace: CoresetTrace,
    unsampled: dict[int, list[int]],
    image_ids: list[str] | None = None,
) -> TrainingScoreSet:
    """Score every training image from its unsampled patches only."""
    n = patches.n_images
    scores = np.zeros(n)
    argmax = [-1] * n
    flagged = np.zeros(n, dtype=bool)
    for i in range(n):
        rest = unsampled.get(i, [])
        if not rest:
            flagged[i] = True
            log.warning("training image %s has no unsampled patches; score recorded as 0", i)
            continue
        gids = patches.of_image(i)[np.asarray(rest)]
        dist, _ = nearest_neighbors(patches.vectors[gids], trace.memory_bank)
        k = int(np.argmax(dist))
        scores[i] = dist[k]
        argmax[i] = int(rest[k])
    return TrainingScoreSet(scores, argmax, flagged, list(image_ids) if image_ids else [str(i) for i in range(n)])


def fit_threshold(ts: TrainingScoreSet | np.ndarray, kappa: float = 3.0, exclude_flagged: bool = True) -> ThresholdModel:
    """Mean and population standard deviation of the training scores."""
    if isinstance(ts, TrainingScoreSet):
        s = ts.usable(exclude_flagged)
    else:
        s = np.asarray(ts, dtype=float)
    if len(s) < 2:
        raise InsufficientDataError(f"need at least 2 training scores, got {len(s)}")
    if np.all(s == s[0]):
        # rounding in the mean would otherwise leave a spurious nonzero sigma
        mu, sigma = float(s[0]), 0.0
    else:
        mu, sigma = float(np.mean(s)), float(np.std(s))
    model = ThresholdModel(mu=mu, sigma=sigma, kappa=float(kappa), s_max=float(np.max(s)), n=len(s))
    if not math.isfinite(model.tau):
        raise ValueError("threshold is not finite")
    if model.tau > model.s_max:
        log.info("tau %.6g exceeds s_max %.6g: the low-confidence band is empty", model.tau, model.s_max)
    return model


def fit_evt(ts: TrainingScoreSet | np.ndarray, q: float = 0.99, exclude_flagged: bool = True) -> EvtFit:
    """Gumbel fit by the method of moments."""
    s = ts.usable(exclude_flagged) if isinstance(ts, TrainingScoreSet) else np.asarray(ts, dtype=float)
    if len(s) < 20:
        raise InsufficientDataError(f"EVT fit needs at least 20 scores, got {len(s)}")
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    sigma = float(np.std(s))
    if sigma == 0.0:
        raise DegenerateFitError("scores have zero spread")
    scale = sigma * math.sqrt(6.0) / math.pi
    location = float(np.mean(s)) - EULER_GAMMA * scale
    return EvtFit(location=location, scale=scale, q=q)


def classify(s_img: float, model: ThresholdModel) -> ConfidenceVerdict:
    tau = model.tau
    abnormal = s_img >= tau
    return ConfidenceVerdict(
        decision="abnormal" if abnormal else "normal",
        low_confidence=bool(tau <= s_img <= model.s_max),
        s_img=float(s_img),
    )
