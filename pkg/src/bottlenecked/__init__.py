"""Bottlenecked transformer: KV-cache rewriting at reasoning-step boundaries."""

__version__ = "0.1.0"
