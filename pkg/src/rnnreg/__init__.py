"""rnnreg: recurrent-network training with stochastic state regularizers.

The package is organized as:

* :mod:`rnnreg.tensor` -- float64 tensors with reverse-mode autodiff
* :mod:`rnnreg.cells` -- tanh-RNN / GRU / LSTM step functions and init
* :mod:`rnnreg.regularizers` -- Bernoulli masks, zoneout and the comparison
  regularizers (train and expectation/eval modes)
* :mod:`rnnreg.model` -- cell stacks, sequence unrolling, loss assembly
* :mod:`rnnreg.training` -- optimizers, clipping, schedules, metrics
* :mod:`rnnreg.data` -- text/pixel-sequence ingestion and batching
* :mod:`rnnreg.diagnostics` -- per-timestep gradient-flow profiles and the
  finite-difference gradient checker
* :mod:`rnnreg.cli` -- ``rnnreg train|gradflow|gradcheck|eval``
"""

from .backend import BACKEND_NAME, COMPILED
from .tensor import Graph, Tensor, backward, parameter

__version__ = "0.1.0"

__all__ = ["Tensor", "Graph", "backward", "parameter", "BACKEND_NAME", "COMPILED", "__version__"]
