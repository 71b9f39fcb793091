"""Toy transformer self-verification analysis.

Thin Python wrapper over the C++ core: tokenization, puzzle generation,
model forward/generation, head ablation, linear probes, activation
steering, and embedding-space maps.
"""

from ._verifscope import *  # noqa: F401,F403
from ._verifscope import __doc__ as _core_doc  # noqa: F401
