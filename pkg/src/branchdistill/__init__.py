"""Language-branch training and multi-teacher distillation for span extraction.

The pipeline: generate an aligned multilingual corpus, group it into
language branches, train one teacher per branch, precompute teacher logits,
distill a single multilingual student, and evaluate everything on a
per-language EM/F1 grid. See the README for the CLI walkthrough.
"""

__version__ = "0.1.0"
