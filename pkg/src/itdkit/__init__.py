"""Activity-level insider threat detection toolkit.

Trains and evaluates a next-activity / activity-cloze detector over
multi-source user activity logs: recurrent sequence encoding with
attentive pooling, retrieval of related activity vectors from a
system-wide pool, learned activity graphs with smoothness/connectivity
regularization, GNN enhancement, and an imbalance-aware hybrid loss.
Supports real-time (causal) and post-hoc (bidirectional cloze) modes.
"""

__version__ = "0.1.0"
