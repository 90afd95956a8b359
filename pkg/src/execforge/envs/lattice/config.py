# Tunable settings. Ideas change these values.
X = (0, 0, 0, 0)
