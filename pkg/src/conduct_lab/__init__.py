"""Random conductance model toolkit."""
