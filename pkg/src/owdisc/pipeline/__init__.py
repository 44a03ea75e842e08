"""File formats, configuration, stages and CLI of the discovery pipeline."""
