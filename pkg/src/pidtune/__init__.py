"""PID gain tuning by probabilistic model-based policy search.

A multivariable PID controller is written as static feedback on an augmented
state, so its gains can be tuned with analytic policy gradients through
moment-matched predictions of a sparse Gaussian-process dynamics model.
"""

__version__ = "0.1.0"
