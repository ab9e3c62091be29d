"""NHANES-style survey risk-factor analysis: ingest, impute, stepwise logistic models, relative risks, serving."""

__version__ = "0.1.0"
