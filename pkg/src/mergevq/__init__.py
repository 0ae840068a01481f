"""Token merging, lookup-free quantization, source recovery and
KV-cache-compressed autoregressive decoding at desk scale."""

__version__ = "0.1.0"
