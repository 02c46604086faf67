# Core package: models, likelihood, estimation, testing and simulation studies
__version__ = "0.1.0"
