import sys
from pathlib import Path

from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def pytest_terminal_summary(terminalreporter):
    import registry

    if registry.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(registry.RESULTS):
            terminalreporter.write_line(registry.line(n))
