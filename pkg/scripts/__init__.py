# Intentionally empty: allows importing scripts in tests.

