import pytest

from lesionmine.dataset import bundled_fixture, load_deeplesion_index, read_slice_list


@pytest.fixture
def mini_index_path():
    return bundled_fixture("DL_info_mini.csv")


@pytest.fixture
def mini_index(mini_index_path):
    return load_deeplesion_index(mini_index_path)


@pytest.fixture
def mini_test_slices():
    return read_slice_list(bundled_fixture("test_slices_mini.txt"))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
