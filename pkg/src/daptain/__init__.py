"""Domain-adaptive waveform speech enhancement with a variance-constrained autoencoder."""

__version__ = "0.1.0"
