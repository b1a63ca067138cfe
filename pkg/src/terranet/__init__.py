"""Per-point terrain (DTM) regression from point clouds with a two-branch
point/neighborhood network."""

__version__ = "0.1.0"
