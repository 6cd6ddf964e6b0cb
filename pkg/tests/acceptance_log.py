"""Verdict lines collected by the acceptance tests and echoed in the terminal summary."""

LINES = []


def verdict(number, ok, detail=""):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
    LINES.append(line)
    print(line)
    return ok
