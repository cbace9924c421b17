"""Heart-sound abnormality detection robust to additive noise and stethoscope distortion.

Pipeline: synthetic distortion model -> preprocessing -> filterbank features
(linear, log, cepstral, fused) -> residual CNN -> domain-aware evaluation.
"""

__version__ = "0.1.0"

FS = 1000
CYCLE_SAMPLES = 2500
