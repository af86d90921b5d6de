"""Imitation learning: behavioural cloning, GAIL and the horizon curriculum."""
