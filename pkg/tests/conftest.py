import pytest
import torch

from graspcount.dataset import DatasetManifest
from graspcount.synthgen import ClassDistribution, generate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """60 small scenes with a stratified split, shared by the I/O tests."""
    out = tmp_path_factory.mktemp("tiny")
    generate_dataset("sphere", 60, ClassDistribution.uniform(5), 3, out, image_size=32)
    return DatasetManifest.from_jsonl(out / "manifest.jsonl")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
