# Neural network module initialization
