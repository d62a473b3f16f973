# Engines package
