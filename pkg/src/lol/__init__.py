"""Desk-scale simulator for learning-order effects of learning-rate schedules.

A library and CLI for training a two-layer ReLU network with noisy full-batch
gradient descent on a synthetic two-pattern distribution, tracking every
diagnostic needed to observe which pattern gets learned first and how that
ordering shapes generalization.
"""

__version__ = "0.1.0"
