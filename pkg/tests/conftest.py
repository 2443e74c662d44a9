import pytest

from repfed.config import RunConfig


def tiny_config(**sections):
    """A few-second federation: small world, six clients, narrow encoders."""
    base = RunConfig().with_updates(
        world={"latent_dim": 4, "img_dim": 6, "txt_dim": 5, "num_classes": 3,
               "n_public": 24, "n_test": 12, "n_private_img": 40, "n_private_txt": 40, "n_private_mm": 40},
        clients={"n_img": 2, "n_txt": 2, "n_mm": 2, "local_epochs": 1, "private_batch": 8,
                 "public_batch": 8, "temperature": 0.5},
        server={"rep_dim": 4, "server_hidden_dims": (8,), "client_hidden_dims": (6,),
                "distill_epochs": 1, "server_lr": 1e-3},
        run={"rounds": 2, "participation_fraction": 0.5, "public_subset": 16},
    )
    return base.with_updates(**sections) if sections else base


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("REPFED_OUTPUT_DIR", str(tmp_path))
    return tmp_path


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
