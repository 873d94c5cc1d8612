"""privgym: planar tabletop manipulation with privileged-action curriculum RL."""

__version__ = "0.1.0"
