"""Driver-centered EV charging recommendation.

A regularized actor-critic recommender that balances a driver's learned
charging preference against an external reward built from forecast wait time
and driving distance, plus classic sequential baselines (Markov chain, FPMC,
popularity) and a shared evaluation harness.
"""

__version__ = "0.1.0"
