"""
How big is the search space?
============================

Every node picks one of O ops and every node pair keeps or drops its
connection, so a stage has O**N * 2**(N(N-1)/2) variants. Python integers
never overflow, so the counts stay exact.
"""

import math

from renas.discretize import search_space_size

for M, N, O in [(1, 3, 6), (2, 8, 6), (3, 10, 6), (3, 32, 6)]:
    n = search_space_size(M, N, O)
    print(f"M={M} N={N} O={O}: {n}  (log10 {math.log10(n):.3f})")
