import pytest

from dimrobust import synthetic


@pytest.fixture(scope="session")
def synthetic_log(tmp_path_factory):
    """Tab-delimited activity log: 12 classes x 400 rows, label-0 gaps, 22 features."""
    X, y = synthetic.activity_series(rows_per_class=400, null_rows=10, seed=0)
    return synthetic.write_series(tmp_path_factory.mktemp("data") / "activity.log", X, y)


def tiny_doc(path, out_dir, **over):
    doc = {
        "name": "tiny",
        "data": {"path": str(path)},
        "windows": {"length": 10, "max_train": 400, "max_test": 200},
        "train": {"epochs": 6, "hidden": 12, "batch_size": 64, "lr": 0.01},
        "attack": {"max_iter": 40, "c_values": [0.1, 1.0, 10.0]},
        "n_attack": 8,
        "out_dir": str(out_dir),
    }
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(doc.get(k), dict):
            doc[k] = {**doc[k], **v}
        else:
            doc[k] = v
    return doc


# acceptance verdicts, echoed live and repeated in the terminal summary

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request, capsys):
    def emit(label, status, detail):
        line = f"[{label}] {status}: {detail}"
        request.config.stash[_VERDICTS].append(line)
        with capsys.disabled():
            print("\n" + line)
        return line

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
