"""
Gradients from the numpy autodiff engine, checked against finite differences.

Builds a one-block transformer, runs a loss through it, and compares the
reverse-mode gradient with central differences for every parameter entry.
"""
import numpy as np

from ctf_retrieval import tensor as T
from ctf_retrieval.layers import AttentionSpec, TransformerBlock

rng = np.random.default_rng(0)
block = TransformerBlock(AttentionSpec(model_dim=8, num_heads=2), rng, std=0.2)
x = T.Tensor(rng.normal(size=(5, 8)))


def loss():
    y = block(x)
    return (y * y).mean()


grads = T.grad(loss(), block.parameters())
print(f"loss {loss().item():.6f}")
for (name, p), g in zip(block.named_parameters(), grads):
    print(f"  {name:22s} shape {str(p.shape):10s} |grad| {np.abs(g).max():.2e}")

stats = T.finite_diff_stats(loss, block.parameters())
print(f"\n{stats.entries} entries perturbed")
print(f"max relative error {stats.max_rel_error:.2e}  (budget 1e-4)")
print(f"max absolute error {stats.max_abs_error:.2e}")

# Softmax ignores a constant added to every key score, so the key bias
# gets a zero gradient up to rounding. Finite differences see only noise there.
key_bias = [g for (n, _), g in zip(block.named_parameters(), grads) if n == "attn.key.bias"][0]
print(f"\nkey bias gradient (structurally zero): {np.abs(key_bias).max():.1e}")
