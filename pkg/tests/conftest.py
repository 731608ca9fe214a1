import logging
import warnings
from pathlib import Path

import pytest
import torch

from binocular_dr.core import load_manifest
from binocular_dr.losses import LossConfig
from binocular_dr.model import BackboneSpec
from binocular_dr.synth import SynthConfig, generate_dataset
from binocular_dr.trainer import TrainConfig, train


def write_csv(path: Path, rows, header="patient_id,side,grade,image_path,split"):
    path.write_text("\n".join([header] + [",".join(map(str, r)) for r in rows]) + "\n")
    return path


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """40 pairs at 32x32 with a balanced test split."""
    out = tmp_path_factory.mktemp("small")
    cfg = SynthConfig(n_pairs=40, image_size=32, seed=3, test_fraction=0.25, marginal=(0.2,) * 5)
    generate_dataset(cfg, out)
    return load_manifest(out / "manifest.csv")


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """Eight training pairs covering every grade, trained until memorized."""
    out = tmp_path_factory.mktemp("overfit")
    cfg = SynthConfig(n_pairs=8, image_size=32, seed=11, test_fraction=0.0, marginal=(0.2,) * 5)
    manifest = generate_dataset(cfg, out / "data")
    train_cfg = TrainConfig(
        epochs=200, batch_size=8, lr=0.01, momentum=0.9, seed=0, eval_split="train",
        augment=False, plateau_patience=1000,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        logging.getLogger("binocular_dr").setLevel(logging.WARNING)
        result = train(manifest, BackboneSpec("tiny-cnn", 32), train_cfg, LossConfig(), out / "run")
    return manifest, result, out / "run"


# -- acceptance summary -----------------------------------------------------

_CRITERIA: dict[int, dict] = {}


@pytest.fixture
def criterion(request):
    """Register a test as acceptance criterion ``n``; ``detail`` is echoed in the summary."""
    info = {"detail": ""}

    def register(n: int, title: str):
        info.update(n=n, title=title)
        _CRITERIA[request.node.nodeid] = info
        return info

    return register


def pytest_runtest_logreport(report):
    info = _CRITERIA.get(report.nodeid)
    if info is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        info["passed"] = report.passed


def pytest_terminal_summary(terminalreporter):
    rows = sorted((v for v in _CRITERIA.values() if "passed" in v), key=lambda v: v["n"])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for v in rows:
        status = "PASS" if v["passed"] else "FAIL"
        detail = f"  ({v['detail']})" if v["detail"] else ""
        terminalreporter.write_line(f"criterion {v['n']:>2} {v['title']}: {status}{detail}")
