"""Autonomy stack for cone-marked race tracks."""
