"""Class-balanced and random sampling with auxiliary heads on synthetic long-tailed data.

Modules: ``synthlt`` (datasets), ``sampling`` (batch samplers),
``ndgrad`` (reverse-mode autodiff and SGD), ``model`` (backbone and heads),
``train`` (training strategies), ``evalkit`` (metrics) and ``cli``.
"""

__version__ = "0.1.0"
