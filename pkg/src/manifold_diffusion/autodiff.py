"""Directional and parameter derivatives on top of JAX.

Forward-mode tangents (``jax.jvp``) are ordinary traced arithmetic, so a
reverse sweep over a loss that contains them yields the mixed second-order
parameter gradients the divergence terms need.
"""

import jax
import jax.numpy as jnp
import numpy as np

# Elementwise arithmetic, affine maps, sine, swish/sigmoid, normalization,
# concatenation and reductions, plus the bookkeeping primitives JAX inserts.
ALLOWED_PRIMITIVES = frozenset(
    {
        "add", "add_any", "sub", "mul", "div", "neg", "max", "min", "abs", "sign", "square",
        "integer_pow", "pow", "sqrt", "rsqrt", "exp", "log", "log1p", "sin", "cos",
        "logistic", "tanh", "dot_general", "reduce_sum", "reduce_max", "concatenate",
        "broadcast_in_dim", "reshape", "squeeze", "expand_dims", "transpose", "slice",
        "dynamic_slice", "gather", "convert_element_type", "select_n", "eq", "ne",
        "lt", "le", "gt", "ge", "stop_gradient", "copy", "copy_p", "pjit", "jit",
        "custom_jvp_call", "iota",
    }
)


class UnsupportedPrimitiveError(TypeError):
    pass


def _primitives(jaxpr, found):
    for eqn in jaxpr.eqns:
        found.add(eqn.primitive.name)
        for sub in jax.core.jaxprs_in_params(eqn.params):
            _primitives(sub, found)
    return found


class Graph:
    """A traced function restricted to the supported primitive set.

    Construction traces ``fn`` on example arguments and raises
    ``UnsupportedPrimitiveError`` if any other primitive appears.
    """

    def __init__(self, fn, *example_args):
        closed = jax.make_jaxpr(fn)(*example_args)
        used = _primitives(closed.jaxpr, set())
        bad = sorted(used - ALLOWED_PRIMITIVES)
        if bad:
            raise UnsupportedPrimitiveError(f"unsupported primitive(s): {', '.join(bad)}")
        self.fn = fn
        self.primitives = frozenset(used)

    def __call__(self, *args):
        return self.fn(*args)


def jvp(f, x, v):
    x = jnp.asarray(x, dtype=jnp.float64)
    v = jnp.asarray(v, dtype=jnp.float64)
    if x.shape != v.shape:
        raise ValueError(f"tangent shape {v.shape} does not match input shape {x.shape}")
    return jax.jvp(f, (x,), (v,))[1]


def vjp(f, x, u):
    x = jnp.asarray(x, dtype=jnp.float64)
    out, pullback = jax.vjp(f, x)
    u = jnp.asarray(u, dtype=jnp.float64)
    if u.shape != jnp.shape(out):
        raise ValueError(f"cotangent shape {u.shape} does not match output shape {jnp.shape(out)}")
    return pullback(u)[0]


def grad_params(loss, params):
    """d loss / d params for a scalar-valued ``loss(params)``."""
    out = jax.eval_shape(loss, params)
    if out.shape != ():
        raise ValueError(f"loss must be scalar, got shape {out.shape}")
    return jax.grad(loss)(params)


def finite_diff_gradient(f, x, step=1e-5):
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = np.empty_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = step
        g[i] = (float(f((flat + e).reshape(x.shape))) - float(f((flat - e).reshape(x.shape)))) / (2 * step)
    return g.reshape(x.shape)


def finite_diff_params(loss, params, step=1e-5):
    """Central differences for every leaf entry of a parameter pytree."""
    leaves, treedef = jax.tree_util.tree_flatten(params)
    grads = []
    for li, leaf in enumerate(leaves):
        leaf = np.asarray(leaf, dtype=np.float64)
        g = np.empty(leaf.size)
        for j in range(leaf.size):
            out = []
            for sign in (1.0, -1.0):
                bumped = leaf.reshape(-1).copy()
                bumped[j] += sign * step
                trial = list(leaves)
                trial[li] = jnp.asarray(bumped.reshape(leaf.shape))
                out.append(float(loss(jax.tree_util.tree_unflatten(treedef, trial))))
            g[j] = (out[0] - out[1]) / (2 * step)
        grads.append(g.reshape(leaf.shape))
    return jax.tree_util.tree_unflatten(treedef, grads)
