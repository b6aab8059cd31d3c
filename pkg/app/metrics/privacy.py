"""
Privacy metric: distance-based membership inference
A logistic attacker guesses training membership from each record's
distance to the closest synthetic record.
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression

from app.config import GeneratorConfig, derive_seed
from app.core.dataset import GeoTable, encode, split_mask, stratified_first_part
from app.core.geometry import RegionGeometry
from app.errors import EvaluationError
from app.generators.generator import GeneratorKind, fit, sample

logger = logging.getLogger(__name__)

MEMBER_FRACTION = 0.95
ATTACK_TRAIN_FRACTION = 0.8
MIN_HOLDOUT_ROWS = 10

Sampler = Callable[[GeoTable, int, int], GeoTable]


@dataclass
class PrivacyResult:
    """Attack outcome plus distance-to-closest-record diagnostics"""
    rho: float
    auc: float
    member_median_dcr: float
    non_member_median_dcr: float
    n_members: int
    n_non_members: int
    n_synth: int

    def to_dict(self):
        return dict(self.__dict__)


def auc_roc(scores, labels) -> float:
    """
    Probability that a random positive outranks a random negative (ties 0.5)

    Raises:
        EvaluationError: Only one class present
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    positives = int(labels.sum())
    negatives = len(labels) - positives
    if positives == 0 or negatives == 0:
        raise EvaluationError("AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - positives * (positives + 1) / 2.0
    return float(u / (positives * negatives))


def distance_to_closest_record(data: GeoTable, synth: GeoTable) -> np.ndarray:
    """Min Euclidean distance from every row of data to synth, in distance-mode encoding fit on data"""
    if synth.N == 0:
        raise EvaluationError("Synthetic table is empty")
    reference = encode(data, "distance")
    synthetic = encode(synth, "distance", reference=reference)
    distances, _ = cKDTree(synthetic.values).query(reference.values, k=1)
    return np.asarray(distances, dtype=np.float64)


def membership_attack_auc(distances: np.ndarray, membership: np.ndarray, seed: int) -> float:
    """
    Fit a one-feature logistic attacker on 80% of the records (stratified on
    membership) and return its AUC on the remaining 20%
    """
    train = np.zeros(len(distances), dtype=bool)
    train[stratified_first_part(membership, ATTACK_TRAIN_FRACTION, np.random.default_rng(seed))] = True
    test = ~train
    if len(set(membership[train].tolist())) < 2 or len(set(membership[test].tolist())) < 2:
        raise EvaluationError("Attack split lacks one of the membership classes")

    features = distances.reshape(-1, 1)
    classifier = LogisticRegression(solver="newton-cholesky", C=1e6, tol=1e-10, max_iter=100)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        classifier.fit(features[train], membership[train])
    if any(issubclass(w.category, ConvergenceWarning) for w in caught):
        logger.warning("Membership classifier did not converge; using the last iterate")
    return auc_roc(classifier.decision_function(features[test]), membership[test])


def privacy_audit(data: GeoTable, generator: Union[str, GeneratorKind, Sampler], geom: RegionGeometry,
                  n_synth: Optional[int] = None, seed: int = 0,
                  config: Optional[GeneratorConfig] = None) -> PrivacyResult:
    """
    Run the membership attack end to end

    Args:
        data: Full real table D
        generator: Generator kind (fit on the 95% part) or a sampler
            callable(train_table, n, seed) -> GeoTable
        geom: Region geometry for fitting kinds
        n_synth: Synthetic sample size, defaults to the 95% part's size
        seed: Seed of splits, fitting and sampling
        config: Generator settings for kinds

    Returns:
        PrivacyResult with rho = AUC - 0.5

    Raises:
        EvaluationError: Fewer than 10 held-out rows or a one-class attack split
    """
    members = split_mask(data.N, MEMBER_FRACTION, derive_seed(seed, "splits"))
    if int((~members).sum()) < MIN_HOLDOUT_ROWS:
        raise EvaluationError(f"Privacy audit needs at least {MIN_HOLDOUT_ROWS} held-out rows")
    train = data.take(np.flatnonzero(members))
    n_synth = train.N if n_synth is None else n_synth

    if callable(generator) and not isinstance(generator, (str, GeneratorKind)):
        synth = generator(train, n_synth, derive_seed(seed, "sample"))
    else:
        fitted = fit(generator, train, geom, config, derive_seed(seed, "fit"))
        synth = sample(fitted, n_synth, derive_seed(seed, "sample"))

    distances = distance_to_closest_record(data, synth)
    auc = membership_attack_auc(distances, members, derive_seed(seed, "metrics"))
    result = PrivacyResult(
        rho=auc - 0.5,
        auc=auc,
        member_median_dcr=float(np.median(distances[members])),
        non_member_median_dcr=float(np.median(distances[~members])),
        n_members=int(members.sum()),
        n_non_members=int((~members).sum()),
        n_synth=synth.N,
    )
    logger.info("Privacy: AUC %.4f, median DCR members %.4g / others %.4g",
                auc, result.member_median_dcr, result.non_member_median_dcr)
    return result


def privacy_score(data: GeoTable, generator: Union[str, GeneratorKind, Sampler], geom: RegionGeometry,
                  n_synth: Optional[int] = None, seed: int = 0,
                  config: Optional[GeneratorConfig] = None) -> float:
    """AUC of the membership attack minus 0.5, in [-0.5, 0.5]"""
    return privacy_audit(data, generator, geom, n_synth, seed, config).rho
