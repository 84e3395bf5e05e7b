"""Make tests look like a module so actual module will load."""
