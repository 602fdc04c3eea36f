"""Shared record of acceptance outcomes, printed in the pytest summary."""

RESULTS: list[str] = []


def record(label: str, ok: bool, detail: str) -> str:
    line = f"{label}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS.append(line)
    print(line)
    return line
