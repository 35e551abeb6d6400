"""Binary ResNets with bit-packed xnor-popcount convolutions, real-to-binary
attention matching, data-driven channel gating and an operation counter."""

__version__ = "0.1.0"
