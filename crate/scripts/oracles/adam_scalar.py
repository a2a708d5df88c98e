"""Scalar Adam reference: theta=0.5, constant g=0.2, lr=1e-3, default betas."""
import math

theta, g, lr = 0.5, 0.2, 1e-3
b1, b2, eps = 0.9, 0.999, 1e-8
m = v = 0.0
for t in range(1, 6):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    theta -= lr * m_hat / (math.sqrt(v_hat) + eps)
    print(f"{t} {theta!r} {m!r} {v!r}")
