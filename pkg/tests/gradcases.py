"""Float64 micro pipeline and the finite-difference cases run on it.

The encoder and generator are small enough that a central difference per
parameter tensor costs milliseconds, yet every module type of the real
pipeline sits on the gradient path.
"""
import time

import torch

from conftest import joint_fd_check
from ifer.alignment import alignment_loss
from ifer.critic import ConvTrunk, SiameseCritic, critic_loss, encoder_adv_loss
from ifer.encoder import ASITEncoder, EncoderConfig
from ifer.fer import FERHead, HeadConfig, IFERModel, fer_loss
from ifer.objectives import ProxyTrunk, consistency_loss, latent_reg, perceptual_distance, pixel_loss
from ifer.synthesis import GeneratorConfig, ToyGenerator

PIPE_ENCODER = EncoderConfig(image_size=32, patch=2, widths=(4, 4, 8, 8), heads=(1, 1, 2, 2), window=2,
                             branch_windows=(2, 2, 2), n_codes=(3, 3, 2), style_dim=4, structure_dim=4)
PIPE_GENERATOR = GeneratorConfig(resolution=32, style_dim=4, structure_dim=4, channels=(4, 4, 4, 4),
                                 mapping_layers=2, feature_resolutions=(4, 8, 16))
CRITIC_WIDTHS = (4, 4, 4, 4)


class MicroPipeline:
    def __init__(self, seed=0):
        prev = torch.get_default_dtype()
        torch.set_default_dtype(torch.float64)
        try:
            torch.manual_seed(seed)
            self.encoder = ASITEncoder(PIPE_ENCODER)
            self.gen = ToyGenerator(PIPE_GENERATOR).eval()
            for p in self.gen.parameters():
                p.requires_grad_(False)
            self.trunk = ProxyTrunk(ConvTrunk(CRITIC_WIDTHS))
            self.critic = SiameseCritic(CRITIC_WIDTHS, embed_dim=4)
            self.head = FERHead(HeadConfig(n_latent=8, style_dim=4, structure_dim=4, fused_dim=4,
                                           out_channels=4, hidden=4))
            g = torch.Generator().manual_seed(seed + 1)
            self.x = torch.rand(4, 3, 32, 32, generator=g)
            self.labels = torch.tensor([0, 3, 5, 6])
            self.w_avg = torch.randn(4, generator=g)
        finally:
            torch.set_default_dtype(prev)

    def invert(self):
        out = self.encoder(self.x)
        return out, self.gen.synthesize(out.structure, out.codes)

    def encoder_params(self):
        return [p for p in self.encoder.parameters() if p.requires_grad]


def _term(pipe, name, g_pyr=None):
    out, trace = pipe.invert()
    y = trace.raw
    if name == "pixel":
        return pixel_loss(pipe.x, y)
    if name == "perceptual":
        return perceptual_distance(pipe.trunk, pipe.x, y)
    if name == "consistency":
        return consistency_loss(pipe.trunk, pipe.x, y)
    if name == "latent_reg":
        return latent_reg(out.codes.codes, pipe.w_avg)
    if name == "alignment":
        # the loss detaches generator features, so the oracle holds them fixed
        return alignment_loss(out.pyramid, g_pyr if g_pyr is not None else list(reversed(trace.features)))
    if name == "encoder_adv":
        return encoder_adv_loss(pipe.critic, pipe.x, y, (11, 12))
    raise KeyError(name)


ENCODER_TERMS = ("pixel", "perceptual", "consistency", "latent_reg", "alignment", "encoder_adv")
ALL_CASES = ENCODER_TERMS + ("critic", "modconv_path", "fer_loss")


def run_case(pipe, name, rtol=1e-4):
    """Worst relative error of the case; raises AssertionError past ``rtol``."""
    if name == "alignment":
        with torch.no_grad():
            g_pyr = list(reversed(pipe.invert()[1].features))
        return joint_fd_check(lambda: _term(pipe, name, g_pyr), pipe.encoder_params(), rtol=rtol)
    if name in ENCODER_TERMS:
        return joint_fd_check(lambda: _term(pipe, name), pipe.encoder_params(), rtol=rtol)
    if name == "critic":
        with torch.no_grad():
            y = pipe.invert()[1].raw
        params = list(pipe.critic.q.parameters())
        return joint_fd_check(lambda: critic_loss(pipe.critic, pipe.x, y, (1, 2, 3, 4)), params, rtol=rtol)
    if name == "modconv_path":
        g = torch.Generator().manual_seed(5)
        sc = torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64, requires_grad=True)
        codes = torch.randn(2, 8, 4, generator=g, dtype=torch.float64, requires_grad=True)
        probe = torch.randn(2, 3, 32, 32, generator=g, dtype=torch.float64)
        loss = lambda: (pipe.gen.synthesize(sc, codes).raw * probe).sum()  # noqa: E731
        return joint_fd_check(loss, [sc, codes], rtol=rtol)
    if name == "fer_loss":
        model = IFERModel(pipe.encoder, pipe.head).train()
        params = [p for p in model.parameters() if p.requires_grad]
        return joint_fd_check(lambda: fer_loss(model.predict_proba(pipe.x), pipe.labels), params, rtol=rtol)
    raise KeyError(name)


def run_suite(rtol=1e-4):
    """``{case: worst relative error}`` for every case plus total wall time."""
    start = time.perf_counter()
    pipe = MicroPipeline()
    errors = {name: run_case(pipe, name, rtol) for name in ALL_CASES}
    return errors, time.perf_counter() - start
