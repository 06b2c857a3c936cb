"""Sequential-to-parallel federated learning simulator."""
