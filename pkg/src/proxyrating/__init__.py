"""Proxy experience ratings from clickstream journeys.

A recurrent encoder summarizes each customer's click history; a value
function learned by TD(0) on purchase reward turns every state into a
rating, and the rating metrics read only whether it went up or down.

Submodules are imported lazily by the CLI; import them directly, e.g.
``from proxyrating.value import train_values``.
"""

__version__ = "0.1.0"
