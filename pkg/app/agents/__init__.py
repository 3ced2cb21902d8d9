"""Training, few-shot protocol and analysis agents."""
