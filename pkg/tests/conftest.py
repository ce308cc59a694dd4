import sys
import textwrap

import pytest
import torch

from selective_utility.config import RunConfig


def toy_config(**overrides) -> RunConfig:
    """Small, fast configuration for unit tests (16px images, 8-dim latent)."""
    values = dict(
        lambda_kl=0.01, gamma=0.5, threshold=0.3,
        warm_epochs=1, mask_epochs=2, mask_update_freq=1, mask_mode="dynamic",
        target_model_id="toy-mlp", dataset_id="toy-shapes",
        latent_dim=8, input_resolution=16, decoder_base=4, batch_size=32,
        learning_rate=1e-3, encoder_width=16, encoder_blocks=2, decoder_channels=16,
        score_batch_size=64,
    )
    values.update(overrides)
    return RunConfig(**values)


@pytest.fixture
def cfg_file(tmp_path):
    def write(body: str):
        path = tmp_path / "run.cfg"
        path.write_text(textwrap.dedent(body))
        return path

    return write


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
