"""Cross-institutional transfer lab for clinical time-series models.

Library + CLI implementing CPC pre-training with similarity-guided negative
sampling, a calibrated two-institution synthetic cohort, and a transfer
evaluation grid over fine-tuning regimes, data fractions and seeds.
"""

__version__ = "0.1.0"
