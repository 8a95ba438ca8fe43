# Placeholder simulation script shipped on the Desktop.
print("relax a 1D chain of spins")
