"""Small convolutional conditional denoiser, a desk-scale stand-in for a
real material prior.

The network takes the noisy material and the conditioning RGB image
channel-concatenated, plus a sinusoidal timestep embedding injected at
the bottleneck, and predicts the noise. Materials live in [0, 1]; the
model works in the affinely mapped [-1, 1] space internally. torch is
imported lazily so the rest of the package has no hard dependency on it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, ScoreModel
from .tensorio import load_tensors, save_tensors

_EMB_DIM = 64


def _torch():
    import torch

    return torch


def _build_net(torch, base: int = 32):
    nn = torch.nn

    class Net(nn.Module):
        def __init__(self):
            super().__init__()
            self.inc = nn.Conv2d(6, base, 3, padding=1)
            self.down = nn.Conv2d(base, 2 * base, 3, stride=2, padding=1)
            self.mid = nn.Conv2d(2 * base, 2 * base, 3, padding=1)
            self.temb = nn.Sequential(nn.Linear(_EMB_DIM, 2 * base), nn.SiLU(),
                                      nn.Linear(2 * base, 2 * base))
            self.up = nn.ConvTranspose2d(2 * base, base, 4, stride=2, padding=1)
            self.fuse = nn.Conv2d(2 * base, base, 3, padding=1)
            self.out = nn.Conv2d(base, 3, 3, padding=1)
            # zero-init output so the untrained model predicts zero noise
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)
            self.act = nn.SiLU()

        def forward(self, x, temb):
            h1 = self.act(self.inc(x))
            h2 = self.act(self.down(h1))
            h2 = h2 + self.temb(temb)[:, :, None, None]
            h2 = self.act(self.mid(h2))
            h3 = self.act(self.up(h2))
            h = self.act(self.fuse(torch.cat([h1, h3], dim=1)))
            return self.out(h)

    return Net()


def _time_embedding(torch, t, T):
    """Sinusoidal embedding of integer timesteps in [1, T]."""
    half = _EMB_DIM // 2
    freqs = torch.exp(-np.log(4.0 * T) * torch.arange(half, dtype=torch.float32) / half)
    ang = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class ToyDenoiser(ScoreModel):
    """Wraps the torch net behind the numpy ScoreModel interface."""

    def __init__(self, net, schedule: NoiseSchedule):
        self.net = net
        self.schedule = schedule
        self.train_losses: list[float] = []

    def predict_noise(self, x_t, t, condition=None):
        torch = _torch()
        x = np.asarray(x_t, dtype=np.float32)
        cond = np.zeros_like(x) if condition is None else np.asarray(condition, dtype=np.float32)
        cond = 2.0 * cond - 1.0  # conditioning image enters in the same [-1, 1] space
        single = x.ndim == 3
        if single:
            x = x[None]
            cond = cond[None]
        with torch.no_grad():
            xt = torch.from_numpy(np.moveaxis(x, -1, 1).copy())
            ct = torch.from_numpy(np.moveaxis(cond, -1, 1).copy())
            tt = torch.full((len(x),), int(t), dtype=torch.long)
            emb = _time_embedding(torch, tt, self.schedule.T)
            eps = self.net(torch.cat([xt, ct], dim=1), emb)
        out = np.moveaxis(eps.numpy().astype(np.float64), 1, -1)
        return out[0] if single else out

    def save(self, path) -> None:
        tensors = {name: p.detach().numpy() for name, p in self.net.state_dict().items()}
        tensors["__schedule_betas"] = self.schedule.betas
        save_tensors(path, tensors)

    @classmethod
    def load(cls, path) -> "ToyDenoiser":
        torch = _torch()
        tensors = load_tensors(path)
        schedule = NoiseSchedule(tensors.pop("__schedule_betas").astype(np.float64))
        net = _build_net(torch)
        state = {k: torch.from_numpy(np.array(v)) for k, v in tensors.items()}
        net.load_state_dict(state)
        net.eval()
        return cls(net, schedule)


@dataclass
class ToyTrainConfig:
    steps: int = 400
    batch_size: int = 8
    lr: float = 2e-3
    seed: int = 0
    schedule: NoiseSchedule = field(default_factory=lambda: NoiseSchedule.linear(100))


def train_toy_denoiser(dataset, config: ToyTrainConfig) -> ToyDenoiser:
    """Train on (condition image, target material) pairs in [0, 1].

    Standard noise-prediction MSE: draw t, noise the mapped target, ask
    the net for the noise. Returns the wrapped model with its loss
    history attached.
    """
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    torch = _torch()
    torch.manual_seed(config.seed)
    schedule = config.schedule
    net = _build_net(torch)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)

    conds = np.stack([2.0 * np.asarray(c, dtype=np.float32) - 1.0 for c, _ in dataset])
    targets = np.stack([2.0 * np.asarray(m, dtype=np.float32) - 1.0 for _, m in dataset])
    conds_t = torch.from_numpy(np.moveaxis(conds, -1, 1).copy())
    targets_t = torch.from_numpy(np.moveaxis(targets, -1, 1).copy())
    ab = torch.from_numpy(schedule.alpha_bars.astype(np.float32))

    rng = np.random.default_rng(config.seed)
    model = ToyDenoiser(net, schedule)
    n = len(dataset)
    for _ in range(config.steps):
        idx = torch.from_numpy(rng.integers(0, n, size=min(config.batch_size, n)))
        t = torch.from_numpy(rng.integers(1, schedule.T + 1, size=len(idx)))
        x0 = targets_t[idx]
        cond = conds_t[idx]
        noise = torch.randn_like(x0)
        a = ab[t][:, None, None, None]
        x_t = torch.sqrt(a) * x0 + torch.sqrt(1.0 - a) * noise
        emb = _time_embedding(torch, t, schedule.T)
        pred = net(torch.cat([x_t, cond], dim=1), emb)
        loss = torch.mean((pred - noise) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        model.train_losses.append(float(loss.detach()))
    net.eval()
    return model
