from randprune.routes import plan, runs

tags_metadata = [plan.metadata, runs.metadata]

description = """Random pruning at initialization.

Compute layer-wise sparsity plans for architecture documents and browse the
metric records of experiments written below the output root.
"""
