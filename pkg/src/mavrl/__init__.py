"""Meta-adversarial multi-view representation learning for few-shot robustness."""

__version__ = "0.1.0"
