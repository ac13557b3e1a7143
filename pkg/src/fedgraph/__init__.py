"""FedGraph: topology-aware aggregation for federated learning simulations."""

__version__ = "0.1.0"
