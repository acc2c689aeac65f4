"""Desk-scale LLM-based CTR prediction with semantic behavior retrieval,
soft prompts from a conventional recommender and fully interactive LoRA."""

__version__ = "0.1.0"
