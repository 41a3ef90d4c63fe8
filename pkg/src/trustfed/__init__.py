"""Trusted federated learning simulator.

Paillier-encrypted local models, an encrypted pre-processing layer
(projection + semi-aggregation), a hash-chained ledger with content-addressed
blob storage, and a bipartite message-passing detector that filters poisoned
models before global aggregation.
"""

__version__ = "0.1.0"

from .orchestrator import SimConfig, Simulation, gen_detector_corpus, run_simulation

__all__ = ["SimConfig", "Simulation", "gen_detector_corpus", "run_simulation", "__version__"]
