"""Single-step fake image detection and attribution with a soft-prompted toy VLM."""

__version__ = "0.1.0"
