"""Event-camera localization against a prior point cloud via joint edge and flow learning."""

__version__ = "0.1.0"
