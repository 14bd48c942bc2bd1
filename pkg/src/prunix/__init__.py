"""Non-ideality aware training, pruning and crossbar simulation for small CNNs."""
__version__ = "0.1.0"
