# Adapters module initialization
