"""ESG news to stock volatility forecasting.

Subpackages cover the batch pipeline end to end: news filtering
(``newsflow``), text featurization (``features``), price/volatility data
assembly (``market``), the Bayesian fusion regressor and pSGLD sampler
(``model``), synthetic fixtures (``simgen``), evaluation and backtesting
(``evalkit``), and the command-line surface (``cli``).
"""

__version__ = "0.1.0"
