"""CNN relation extraction for chemical-induced disease corpora.

Subpackages:
  tensor      float64 tensors with reverse-mode autodiff
  rng         deterministic splitmix64 random streams
  encoders    word / position / character-level input encoding
  model       the convolutional relation classifier
  optim       Nadam, the training loop, grid search
  corpus      PubTator parsing and relation-instance construction
  evaluation  document-level pair aggregation, P/R/F1, bootstrap test
  cli         the `cdrex` command-line entry point
"""

__version__ = "0.1.0"
