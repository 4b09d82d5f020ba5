import torch

from lcad.denoiser import Denoiser, DenoiserConfig

SMALL = DenoiserConfig(channels=(16, 24, 32), n_ext=(8, 8, 8), attn_dim=16, text_dim=64, time_dim=32, groups=4)
LUM_CHANNELS = (8, 16, 16)


def randomize(module: torch.nn.Module, seed: int = 0, std: float = 0.2) -> None:
    """Give every parameter (including zero-initialized ones) random values."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)


def small_denoiser(seed: int = 0, extended: bool = False, dtype=torch.float64) -> Denoiser:
    torch.manual_seed(seed)
    den = Denoiser(SMALL).to(dtype)
    randomize(den, seed)
    if extended:
        den.extend_channels(LUM_CHANNELS)
        den.to(dtype)
    return den


def random_pyramid(batch: int, seed: int = 0, dtype=torch.float64) -> list[torch.Tensor]:
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(batch, c, s, s, generator=g, dtype=dtype) for c, s in zip(LUM_CHANNELS, (64, 32, 16))]


def random_text(batch: int, n_tok: int = 16, n_real: int = 6, seed: int = 0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    text = torch.randn(batch, n_tok, 64, generator=g, dtype=dtype)
    pad = torch.zeros(batch, n_tok, dtype=torch.bool)
    pad[:, n_real:] = True
    text[pad] = 0
    return text, pad


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
