# Puts the project root on sys.path so `benchmarks.run` is importable from tests.
