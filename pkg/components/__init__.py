"""
Components Package
------------------
This package contains the command-line verb handlers for DC-SMC including:
- Experiment runner: config parsing, replicated runs, result files
- Worker console: the distributed worker loop
"""

# Empty file to make components a package
