import numpy as np
import pytest

from fewshot.datasets import GlyphSpec, generate_glyph_dataset, split_classes


@pytest.fixture(scope="session")
def glyphs():
    return generate_glyph_dataset(GlyphSpec())


@pytest.fixture(scope="session")
def glyph_split(glyphs):
    return split_classes(glyphs, (0.625, 0.125, 0.25))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance report ---------------------------------------------------------------------
_criteria: dict[int, dict] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when not in ("setup", "call"):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "ran": False, "detail": []})
    if call.excinfo is not None:
        entry["ok"] = False
        entry["detail"].append(call.excinfo.exconly().splitlines()[0][:160])
    if call.when == "call":
        entry["ran"] = True
        entry["detail"].extend(getattr(item, "criterion_notes", []))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["ok"] and entry["ran"] else "FAIL"
        detail = "; ".join(entry["detail"])
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {entry['title']}" + (f" | {detail}" if detail else ""))


@pytest.fixture
def note(request):
    """Attach a measurement to the acceptance line of the running test."""
    notes = request.node.criterion_notes = []
    return notes.append
