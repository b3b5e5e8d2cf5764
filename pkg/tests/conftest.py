import pytest
import torch

torch.set_num_threads(1)


def central_difference(fn, tensors, step=1e-4):
    """Numerical gradients of scalar ``fn()`` w.r.t. each tensor in ``tensors`` (modified in place)."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(fn())
                flat[i] = orig - step
                down = float(fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def relative_error(a, b):
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-30))


@pytest.fixture
def fd():
    return central_difference


@pytest.fixture
def rel_err():
    return relative_error
