import sys


def acceptance_line(criterion: int, passed: bool, detail: str):
    """One visible pass/fail line per acceptance criterion, bypassing capture."""
    status = "PASS" if passed else "FAIL"
    print(f"[acceptance {criterion:>2}] {status}: {detail}", file=sys.__stdout__)
    sys.__stdout__.flush()
