"""Two-phase ensemble-model policy optimization with unified model-shift/model-bias fine-tuning."""

__version__ = "0.1.0"
