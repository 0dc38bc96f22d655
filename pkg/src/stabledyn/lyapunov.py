"""Learnable candidate Lyapunov functions.

Three constructions, all satisfying V(0) = 0 and V(x) >= eps*||x||^2:

* "lnn"         warped sum of squares phi(x)^T phi(x) with a bias-free net,
                smooth_relu hidden layers, linear output. Positive definite
                but not necessarily convex.
* "icnn"        input-convex network: two smooth_relu z-layers with direct
                input skips; the z-path weights are kept elementwise
                nonnegative, so g is convex in x.
* "convex_lnn"  bias-free stack with smooth_relu at every layer and all
                weights past the first kept nonnegative; g = phi^T phi is
                convex and nonnegative.

The convex variants wrap g(x) - g(0) in smooth_relu before adding the
quadratic floor. Gradients w.r.t. the input are built as expressions from the
same primitives, so they can be recorded on a tape and differentiated again
w.r.t. the weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nets import Mlp, activation_deriv

VARIANTS = ("lnn", "icnn", "convex_lnn")


@dataclass
class LyapunovNet:
    variant: str
    dim: int
    hidden: tuple
    epsilon: float = 0.001
    d: float = 0.1
    prefix: str = "V"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.variant in ("lnn", "convex_lnn"):
            out_act = "identity" if self.variant == "lnn" else "smooth_relu"
            self._mlp = Mlp(
                layer_dims=[self.dim, *self.hidden, self.dim],
                activation="smooth_relu",
                output_activation=out_act,
                prefix=self.prefix,
                use_bias=False,
                d=self.d,
            )
            if self.variant == "convex_lnn":
                self._clamped = [f"{self.prefix}.W{i}" for i in range(1, self._mlp.n_layers)]
            else:
                self._clamped = []
        else:
            self._width = self.hidden[0]
            self._clamped = [f"{self.prefix}.U1", f"{self.prefix}.u2"]

    # -- parameters --------------------------------------------------------

    def param_names(self) -> list[str]:
        if self.variant in ("lnn", "convex_lnn"):
            return self._mlp.param_names()
        p, h, n = self.prefix, self._width, self.dim
        return [f"{p}.W0", f"{p}.b0", f"{p}.U1", f"{p}.W1", f"{p}.b1",
                f"{p}.u2", f"{p}.w2", f"{p}.b2"]

    def init_params(self, store: ad.ParamStore, rng: np.random.Generator) -> None:
        if self.variant in ("lnn", "convex_lnn"):
            self._mlp.init_params(store, rng)
        else:
            p, h, n = self.prefix, self._width, self.dim
            bn, bh = 1.0 / np.sqrt(n), 1.0 / np.sqrt(h)
            store.add(f"{p}.W0", rng.uniform(-bn, bn, size=(h, n)))
            store.add(f"{p}.b0", rng.uniform(-bn, bn, size=h))
            store.add(f"{p}.U1", rng.uniform(0.0, bh, size=(h, h)))
            store.add(f"{p}.W1", rng.uniform(-bn, bn, size=(h, n)))
            store.add(f"{p}.b1", rng.uniform(-bh, bh, size=h))
            store.add(f"{p}.u2", rng.uniform(0.0, bh, size=(1, h)))
            store.add(f"{p}.w2", rng.uniform(-bn, bn, size=(1, n)))
            store.add(f"{p}.b2", rng.uniform(-bh, bh, size=1))
        # nonnegativity holds from the start, not just after the first clamp
        for name in self._clamped:
            np.abs(store.values[name], out=store.values[name])

    def clamp(self, store: ad.ParamStore) -> None:
        """Project constrained weights back to the nonnegative orthant."""
        for name in self._clamped:
            np.maximum(store.values[name], 0.0, out=store.values[name])

    # -- evaluation --------------------------------------------------------

    def value(self, x, store: ad.ParamStore, tape: ad.Tape | None = None):
        return self._eval(x, store, tape, need_grad=False)[0]

    def grad(self, x, store: ad.ParamStore, tape: ad.Tape | None = None):
        return self._eval(x, store, tape, need_grad=True)[1]

    def value_and_grad(self, x, store: ad.ParamStore, tape: ad.Tape | None = None):
        return self._eval(x, store, tape, need_grad=True)

    def _eval(self, x, store, tape, need_grad: bool):
        if self.variant in ("lnn", "convex_lnn"):
            g, g0, seed_fn = self._mlp_body(x, store, tape)
        else:
            g, g0, seed_fn = self._icnn_body(x, store, tape)

        quad = ad.mul(ad.rowdot(x, x), self.epsilon)
        excess = ad.sub(g, g0)
        if self.variant == "lnn":
            V = ad.add(excess, quad)
        else:
            V = ad.add(ad.smooth_relu(excess, self.d), quad)
        if not need_grad:
            return V, None

        if self.variant == "lnn":
            d_x = seed_fn(None)
        else:
            s = ad.smooth_relu_deriv(excess, self.d)
            d_x = seed_fn(s)
        gradV = ad.add(d_x, ad.mul(x, 2.0 * self.epsilon))
        return V, gradV

    def _mlp_body(self, x, store, tape):
        cache = []
        phi = self._mlp.forward(x, store, tape, cache)
        g = ad.rowdot(phi, phi)
        zeros = np.zeros(self.dim)
        phi0 = self._mlp.forward(zeros, store, tape)
        g0 = ad.rowdot(phi0, phi0)

        def seed_fn(s):
            dphi = ad.mul(phi, 2.0)
            if s is not None:
                dphi = ad.mul(ad.expand_last(s), dphi)
            return self._mlp.vjp_input(dphi, cache, store, tape)

        return g, g0, seed_fn

    def _icnn_body(self, x, store, tape):
        p = self.prefix

        def P(name):
            full = f"{p}.{name}"
            return store.values[full] if tape is None else tape.param(store, full)

        W0, b0 = P("W0"), P("b0")
        U1, W1, b1 = P("U1"), P("W1"), P("b1")
        u2, w2, b2 = P("u2"), P("w2"), P("b2")

        def body(inp):
            a1 = ad.linear(inp, W0, b0)
            z1 = ad.smooth_relu(a1, self.d)
            a2 = ad.add(ad.linear(z1, U1, b1), ad.linear(inp, W1))
            z2 = ad.smooth_relu(a2, self.d)
            g = ad.squeeze_last(ad.add(ad.linear(z2, u2, b2), ad.linear(inp, w2)))
            return g, a1, a2

        g, a1, a2 = body(x)
        g0 = body(np.zeros(self.dim))[0]

        def seed_fn(s):
            se = ad.expand_last(s)
            d_z2 = ad.linear_t(se, u2)
            d_a2 = ad.mul(d_z2, activation_deriv("smooth_relu", a2, self.d))
            d_z1 = ad.linear_t(d_a2, U1)
            d_a1 = ad.mul(d_z1, activation_deriv("smooth_relu", a1, self.d))
            return ad.add(
                ad.add(ad.linear_t(d_a1, W0), ad.linear_t(d_a2, W1)),
                ad.linear_t(se, w2),
            )

        return g, g0, seed_fn


def make_lyapunov(variant: str, dim: int, hidden=(25, 25), epsilon: float = 0.001,
                  d: float = 0.1, prefix: str = "V") -> LyapunovNet:
    if isinstance(hidden, int):
        hidden = (hidden, hidden)
    return LyapunovNet(variant=variant, dim=dim, hidden=tuple(hidden),
                       epsilon=epsilon, d=d, prefix=prefix)
