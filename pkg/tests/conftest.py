import pytest
import torch
import torch.nn as nn

from psstrnet.losses import PerceptualBackbone
from psstrnet.model import PSSTRNet, PSSTRNetConfig


@pytest.fixture
def small_cfg():
    return PSSTRNetConfig(base_channels=8, input_size=(32, 32))


@pytest.fixture
def small_model(small_cfg):
    torch.manual_seed(0)
    return PSSTRNet(small_cfg)


def make_stub_backbone(dtype=torch.float32, seed=0, channels=4):
    """Two conv+softplus layers with positive weights, both tapped.

    Positive weights make features strictly monotone in the input, which keeps
    L1 terms away from their kinks in finite-difference checks.
    """
    g = torch.Generator().manual_seed(seed)
    conv1 = nn.Conv2d(3, channels, 3, padding=1, bias=False)
    conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
    with torch.no_grad():
        for conv in (conv1, conv2):
            conv.weight.copy_(torch.rand(conv.weight.shape, generator=g) * 0.3 + 0.05)
    layers = nn.Sequential(conv1, nn.Softplus(), conv2, nn.Softplus()).to(dtype)
    return PerceptualBackbone(layers, taps=(1, 3), mean=None, std=None)


@pytest.fixture
def stub_backbone():
    return make_stub_backbone()


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture
def record_acceptance(capsys):
    def record(number, passed, detail):
        line = f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
