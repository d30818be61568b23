"""Certified backdoor defense with sample-specific smoothing noise."""

from .certstore import Ball, CertStore, CertTriplet, StoreReport, overlaps, verify_store
from .classifiers import Classifier, LinearClassifier, MlpClassifier, TrainConfig, predict, train_classifier
from .datamodel import Dataset, NoiseAssignment, RunConfig, Sample
from .ensemble import SmoothedEnsemble, certify_ensemble, ensemble_votes, train_ensemble
from .errors import (ConfigError, DomainError, ParseError, SampleCertError, SearchFailure, ShapeError,
                     StageError, StoreError, TrainingError)
from .metrics import CertRecord, CurvePoint
from .smoothing import ABSTAIN, CertificationResult, VoteCounts, certified_radius, certify_counts

__version__ = "0.1.0"
