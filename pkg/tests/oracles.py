"""Independent reference computations shared by unit and acceptance tests."""

import numpy as np
import torch

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict = {}


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def band_energy_fraction(x, lo, hi):
    """Energy share of positive-frequency bins lo..hi, via a full complex DFT."""
    x = np.asarray(x) - np.mean(x)
    F = np.fft.fft(x)
    n = len(x)
    pos = np.abs(F[1:n // 2 + 1]) ** 2
    total = pos.sum()
    return pos[lo - 1:hi].sum() / total if total > 0 else 1.0


def gradcheck_rel_error(net, inputs, n_params=24, seed=0, h=1e-4):
    """Relative error between autograd and central differences on sampled parameters.

    Runs in float64; the scalar objective is the sum of squared outputs.
    """
    net = net.double()
    gen = torch.Generator().manual_seed(seed)
    params = [p for p in net.parameters() if p.requires_grad]

    def loss():
        out = net(inputs)
        return (out ** 2).sum()

    net.zero_grad()
    loss().backward()
    analytic, numeric = [], []
    for _ in range(n_params):
        p = params[int(torch.randint(len(params), (1,), generator=gen))]
        i = int(torch.randint(p.numel(), (1,), generator=gen))
        flat = p.data.view(-1)
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + h
            lp = loss().item()
            flat[i] = orig - h
            lm = loss().item()
            flat[i] = orig
        analytic.append(p.grad.view(-1)[i].item())
        numeric.append((lp - lm) / (2 * h))
    a, n = np.array(analytic), np.array(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), 1e-12))


def randomize_tail(net, seed=1):
    """The zero-initialised output conv hides every upstream gradient; re-draw it."""
    torch.manual_seed(seed)
    torch.nn.init.normal_(net.tail.weight, std=0.1)
    torch.nn.init.normal_(net.tail.bias, std=0.1)
