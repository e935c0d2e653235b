"""Longitudinal cohort attrition and weight-outcome prediction.

Submodules: ``autodiff`` (tensor tape + optimizer), ``kernels`` (compiled
LSTM loops), ``layers`` (network components), ``pipeline`` (cohort
preprocessing and windowing), ``synth`` (synthetic cohort generator),
``training`` (rolling-window transfer trainer), ``metrics`` (evaluation),
``baseline`` (logistic regression), ``shapley`` (feature attribution),
``cli`` (command-line entry points).
"""

__version__ = "0.1.0"
