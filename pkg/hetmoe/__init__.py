"""
hetmoe: multi-task heterogeneous training with mixture-of-experts layers.
"""
__version__ = "0.1.0"
