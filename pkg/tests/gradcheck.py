"""End-to-end gradient check of the physics loss through an unrolled model."""
import numpy as np

from pignn_acpf import autodiff as ad
from pignn_acpf import synth
from pignn_acpf.batch import block_diag_batch
from pignn_acpf.model import ModelConfig, ModelParams, unroll
from pignn_acpf.train import physics_loss


def four_bus_scenario():
    rng = np.random.default_rng(0)
    while True:
        s = synth.synthesize_scenario("HV", 4, rng)
        if isinstance(s, synth.Scenario) and s.grid.pv.size:
            return s


def end_to_end_gradient_errors(kind: str, K: int = 3, h: float = 1e-3) -> dict[str, float]:
    """Relative error between backprop and finite differences, one random direction per parameter tensor."""
    s = four_bus_scenario()
    g = block_diag_batch([s])
    rng = np.random.default_rng(3)
    # start near the solution so the loss is small and round-off does not swamp the differences
    v0 = s.reference_state.v + 0.02 * rng.standard_normal(g.n) * g.q_mask
    th0 = s.reference_state.theta + 0.02 * rng.standard_normal(g.n) * g.p_mask
    params = ModelParams.init(ModelConfig(kind=kind, steps=K), seed=1)
    for name, t in params.tensors.items():
        if name.endswith("upd.2.W"):
            t.data *= 0.2  # keeps the caps inactive so the loss is smooth around the point

    def loss_value():
        return physics_loss(unroll(g, params, K, "train", v0=v0, theta0=th0), g, 0.9)

    params.zero_grad()
    loss = loss_value()
    ad.backward(loss)

    def directional(t, direction, step):
        saved = t.data.copy()
        with ad.no_grad():
            t.data[...] = saved + step * direction
            up = loss_value().item()
            t.data[...] = saved - step * direction
            down = loss_value().item()
        t.data[...] = saved
        return (up - down) / (2 * step)

    # directional gradients below a millionth of the loss sit at round-off level
    floor = 1e-6 * loss.item()
    errors = {}
    for name, t in params.tensors.items():
        direction = rng.standard_normal(t.shape)
        direction /= np.linalg.norm(direction)
        # Richardson extrapolation of the central difference: fourth-order accurate
        numeric = (4 * directional(t, direction, h / 2) - directional(t, direction, h)) / 3
        analytic = float(np.sum(t.grad * direction))
        errors[name] = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
    return errors
