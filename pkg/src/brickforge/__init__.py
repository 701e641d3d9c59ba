"""Sequential brick assembly from multi-view silhouettes."""

__version__ = "0.1.0"
