"""Cross-ray radiance fields with appearance transfer and transient masking, on numpy."""

__version__ = "0.1.0"
