"""
Layer aggregation: the VARAN posterior predictor with per-layer probing heads,
the last-layer and static weighted-sum baselines, and the LoRA linear adapter.
"""
