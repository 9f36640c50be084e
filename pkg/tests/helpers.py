"""Shared test utilities."""

import torch


def central_fd_check(fn, inputs, h=1e-6):
    """Max relative error between autograd and central differences of scalar ``fn(*inputs)``.

    Inputs must be float64. The error is measured against the largest
    gradient magnitude so entries near zero do not dominate.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    worst = 0.0
    for x, g in zip(inputs, grads):
        g = torch.zeros_like(x) if g is None else g
        num = torch.zeros_like(x)
        flat = x.detach().view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            plus = fn(*[t.detach() for t in inputs]).item()
            flat[i] = orig - h
            minus = fn(*[t.detach() for t in inputs]).item()
            flat[i] = orig
            num.view(-1)[i] = (plus - minus) / (2 * h)
        scale = max(num.abs().max().item(), g.abs().max().item(), 1e-12)
        worst = max(worst, (num - g).abs().max().item() / scale)
    return worst


def module_fd_check(net, loss_fn, h=1e-6):
    """Relative FD error of ``loss_fn()`` with respect to every parameter of ``net`` (float64)."""
    params = [p for p in net.parameters() if p.requires_grad]
    net.zero_grad()
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            num = torch.zeros_like(p)
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                plus = loss_fn().item()
                flat[i] = orig - h
                minus = loss_fn().item()
                flat[i] = orig
                num.view(-1)[i] = (plus - minus) / (2 * h)
            scale = max(num.abs().max().item(), g.abs().max().item(), 1e-12)
            worst = max(worst, (num - g).abs().max().item() / scale)
    return worst
