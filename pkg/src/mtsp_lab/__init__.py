"""Min-max multiple-TSP lab.

A learned allocation policy splits the cities of a min-max multiple
traveling salesman instance among agents, a deterministic heuristic solves
each agent's single TSP, and the policy trains end-to-end through the
non-differentiable solver with a control-variate-reduced score-function
gradient.
"""

__version__ = "0.1.0"
