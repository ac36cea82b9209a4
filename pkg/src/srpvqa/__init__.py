"""Relationship-aware visual question answering on synthetic scenes.

A numpy reverse-mode autodiff core drives a question encoder, a
relationship parser that turns detections into sentence features, and
mutual plus guided self attention blocks fused into an answer classifier.
"""

__version__ = "0.1.0"
