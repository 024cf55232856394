"""Strategic-bidding toolkit for a price-maker battery energy storage system.

The package formulates the bi-level profit-maximization problem of a BESS
jointly bidding into real-time energy, spinning-reserve, and pay-as-performance
regulation markets, reformulates it into a single exact MILP through KKT
conditions with big-M complementarity and strong-duality linearization, and
solves it with an embedded LP/MILP backend.
"""

__version__ = "0.1.0"
