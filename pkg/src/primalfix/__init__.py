"""Treatment-effect estimation in acyclic directed mixed graphs with a primal-fixable treatment."""

__version__ = "0.1.0"
