"""Keyword spotting with a CNN trained on DTW scores from untranscribed speech.

A handful of isolated keyword exemplars are swept over an untranscribed
corpus with dynamic time warping; the normalized costs become soft targets
for a CNN that then scores whole utterances quickly.
"""

from .dtw import ExemplarSet, SweepConfig, dtw_cost, keyword_cost, keyword_cost_avg
from .errors import KwsError
from .features import FeatureArchive, FeatureSequence, MfccConfig, extract_mfcc, read_archive, write_archive
from .targets import TargetSet, build_targets, normalize_score

__version__ = "0.1.0"

__all__ = [
    "ExemplarSet",
    "FeatureArchive",
    "FeatureSequence",
    "KwsError",
    "MfccConfig",
    "SweepConfig",
    "TargetSet",
    "build_targets",
    "dtw_cost",
    "extract_mfcc",
    "keyword_cost",
    "keyword_cost_avg",
    "normalize_score",
    "read_archive",
    "write_archive",
]
