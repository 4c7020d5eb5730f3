"""m3lab: multi-step transition models, rollouts, planners and the experiments around them."""

__version__ = "0.1.0"
