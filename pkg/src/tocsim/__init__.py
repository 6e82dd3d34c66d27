"""Two-stage (contrastive pre-training, then fine-tuning) training of a
transmitter/receiver split network over a simulated noisy channel."""

__version__ = "0.1.0"
