"""Deterministic simulator of synchronous federated averaging.

The package couples three ideas into one single-process testbed:

* per-client representation matching: every client trains a small decoder
  that reconstructs the round-start model's activations from its own local
  model's activations, layer by layer;
* server-side online hyper-parameter tuning: a REINFORCE rule adapts a
  discrete Gaussian distribution over a grid of (learning rate, SGD
  iteration) choices using relative validation-loss improvement as reward;
* classic baselines: fixed learning-rate schedules and a weight-divergence
  penalty, for comparison under iid and pathological non-iid partitions.

Everything runs on float64 numpy with hand-written layer gradients, and a
fixed seed pins every byte of the output files.
"""

__version__ = "0.1.0"
