"""Weight-sharing supernet for saliency prediction on a small NumPy autograd engine.

Modules: ``tensor``/``ops`` (autograd and operators), ``space``/``store``/
``network`` (search space, shared weights, subnet execution), ``losses``/
``metrics``, ``trainer``, ``cost``/``search``, ``data`` and ``cli``.
"""

__version__ = "0.1.0"
