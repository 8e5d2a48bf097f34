"""One service class per concern; operations are static methods."""
