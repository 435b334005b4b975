"""All-in-one adverse-weather image restoration.

Residual diffusion toward a shared terminal distribution, guided by
learnable weather prompts in a frozen joint embedding space and a dynamic
Top(P) mixture of restoration experts, with a procedural degradation
generator so the whole stack trains and evaluates end-to-end.
"""

__version__ = "0.1.0"

from .labels import Weather

__all__ = ["Weather", "__version__"]
