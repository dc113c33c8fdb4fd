"""LLM-guided EMR preprocessing: cohort/feature selection and clinical code mapping."""

__version__ = "0.1.0"
