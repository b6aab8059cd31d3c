# Generators module initialization
