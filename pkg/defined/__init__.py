# DEFINED - decision-feedback in-context symbol detection workbench
__version__ = "1.0.0"
