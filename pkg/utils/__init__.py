"""
Utils Package
-------------
This package contains utility modules for DC-SMC including:
- Logging configuration
- Dataset, observation grid and result file handling
- Per-run diagnostic recording
"""

# Empty file to make utils a package
