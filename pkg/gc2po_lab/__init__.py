"""
gc2po-lab: 反実仮想報酬による方策最適化 (GC²PO) と GRPO を比較する卓上ラボ
"""

__version__ = "0.1.0"
