import pytest

from m2d import data, nets, pipeline

BLOB_CENTERS = [[0.0, 0.0], [4.0, 0.0], [2.0, 3.5]]


def blob_setup(seed: int):
    d_in = data.gen_blobs(3, 300, BLOB_CENTERS, 0.7, seed)
    d_out = data.gen_ood_blob([12.0, 12.0], 300, 0.7, seed + 1, in_centers=BLOB_CENTERS)
    splits = data.split(d_in, data.SplitPlan(0.6, 0.2, 0.2, 100), seed)
    names = ["train", "fit", "test", "detector_subset"]
    normed = data.normalize(*[splits[k] for k in names], d_out)
    splits = dict(zip(names + ["ood"], normed))
    clf, _ = pipeline.train_classifier(
        nets.mlp([2, 32, 32, 3]), splits["train"].features, splits["train"].labels, 5, 0.1, 32, seed
    )
    return clf, splits


@pytest.fixture(scope="session")
def blob_classifier():
    return blob_setup(0)


# acceptance criteria register here; the summary prints one line each
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
ACCEPTANCE_TITLES = {
    1: "gradient correctness",
    2: "gaussian head oracle equivalence",
    3: "metric oracles",
    4: "end-to-end synthetic",
    5: "pretrained vs vanilla AE",
    6: "steps x retrain grid",
    7: "baseline reductions",
    8: "serialization",
    9: "full pipeline wall-clock",
}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in ACCEPTANCE_TITLES.items():
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n} ({title}): {'PASS' if ok else 'FAIL'} - {detail}")
        else:
            terminalreporter.write_line(f"criterion {n} ({title}): NOT RUN")
