"""
Services Package
----------------
This package contains the inference engine for DC-SMC including:
- Particle populations, resampling and weight arithmetic
- The divide-and-conquer recursion, mixture merges and tempering
- Ising, Gaussian squared-observation and hierarchical binomial models
- Baselines, exact oracles, and distributed execution over workers
"""

# Empty file to make services a package
