# Frozen scoring code. Diffs touching this file are rejected.
import math

OPTIMUM = (7, 2, 5, 1)
BASE, AMPLITUDE, WIDTH = 0.3, 0.6, 8.0


def score(x):
    if len(x) != len(OPTIMUM) or not all(isinstance(v, int) and 0 <= v <= 9 for v in x):
        raise ValueError(f"invalid setting {x!r}")
    d2 = sum((a - b) ** 2 for a, b in zip(x, OPTIMUM))
    return BASE + AMPLITUDE * math.exp(-d2 / WIDTH)
