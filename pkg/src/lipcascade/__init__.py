"""Cascaded sequence-to-sequence lip reading lab (video -> pinyin -> tone -> characters)."""

__version__ = "0.1.0"
