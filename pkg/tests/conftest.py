import sys
import warnings

import pytest

warnings.filterwarnings("ignore", message=".*TBB.*")
warnings.filterwarnings("ignore", category=UserWarning, module="numba")


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])
