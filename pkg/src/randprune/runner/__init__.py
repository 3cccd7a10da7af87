"""randprune.runner

Operational shell around the library: dataset ingestion, experiment and
sweep execution, plot-data emission and the command line.
"""
