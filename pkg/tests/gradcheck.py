"""Central finite-difference gradient check shared by the embedding tests."""
import torch


def _flat_params(m):
    return [p for p in m.parameters()]


def fd_check(toy, loss_fn, eps=1e-6, rtol=1e-4):
    """Compare autograd against central differences for every parameter entry."""
    toy.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in _flat_params(toy)]).clone()
    numeric = torch.zeros_like(analytic)
    k = 0
    with torch.no_grad():
        for p in _flat_params(toy):
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss_fn().item()
                flat[i] = old - eps
                dn = loss_fn().item()
                flat[i] = old
                numeric[k] = (up - dn) / (2 * eps)
                k += 1
    err = torch.linalg.norm(analytic - numeric) / max(torch.linalg.norm(numeric).item(), 1e-12)
    assert sum(p.numel() for p in toy.parameters()) <= 200
    assert err.item() < rtol, err.item()
