"""Train one network whose top-k subnetworks at any capacity share an embedding space."""

__version__ = "0.1.0"
