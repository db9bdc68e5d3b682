"""Traffic-stop record normalization and disparity analysis.

Modules: records (ingest/normalize/audit), numerics (incomplete beta,
tail rates), glm (IRLS count and logistic models), disparity (stop, search
and outcome analyses), inference (NUTS sampler, R-hat), threshold (the
threshold test), policy (diff-in-diff and trends), synth (generators),
cli (command-line pipeline).
"""

__version__ = "0.1.0"
