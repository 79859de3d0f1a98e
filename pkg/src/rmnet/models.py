"""Scorers f(x, a) and the losses that train them."""

from __future__ import annotations

import numpy as np

from . import nn
from .datagen import ObservationalDataset, action_index, action_matrix

SIGMOID_CLAMP = 30.0
RIDGE_LAMBDA = 1e-3


# -- losses -------------------------------------------------------------------


def sigmoid(t):
    t = np.clip(t, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    return 1.0 / (1.0 + np.exp(-t))


def soft_xe_loss(f, y, g):
    """Per-instance soft cross-entropy and its derivative w.r.t. f.

    The soft label is sigmoid(y - g) and the prediction sigmoid(f - g), so the
    loss is smallest at f = y whatever g is. Arguments are clamped to +-30.
    """
    f = np.asarray(f, dtype=np.float64)
    s = sigmoid(np.asarray(y, dtype=np.float64) - g)
    t = np.clip(f - g, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    # -log v = softplus(-t), -log(1 - v) = softplus(t)
    loss = s * np.logaddexp(0.0, -t) + (1.0 - s) * np.logaddexp(0.0, t)
    return loss, sigmoid(t) - s


def combined_loss_from_scores(f, y, g, beta: float):
    """beta * mean soft-XE + (1 - beta) * mean squared error.

    Returns (loss, dloss/df, mean xe, mean mse); xe is NaN when g is None (only
    allowed for beta = 0).
    """
    f = np.asarray(f, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(f)
    if n == 0:
        raise ValueError("empty batch")
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    resid = f - y
    mse = float(np.mean(resid ** 2))
    grad = (1.0 - beta) * 2.0 * resid / n
    if g is None:
        if beta != 0:
            raise ValueError("the classification term needs g values")
        return (1.0 - beta) * mse, grad, float("nan"), mse
    xe_each, xe_grad = soft_xe_loss(f, y, g)
    xe = float(np.mean(xe_each))
    grad = grad + beta * xe_grad / n
    return beta * xe + (1.0 - beta) * mse, grad, xe, mse


# -- parameter bundles ----------------------------------------------------------


def bind(nets: dict[str, nn.MLP]):
    """Re-home several networks into one contiguous buffer. Returns (flat, nets)."""
    flat = np.concatenate([net.flat for net in nets.values()])
    out, pos = {}, 0
    for key, net in nets.items():
        k = net.flat.size
        out[key] = nn.MLP(net.sizes, net.activations, flat[pos:pos + k])
        pos += k
    return flat, out


class _Bundle:
    """Shared plumbing: one flat parameter vector backing named networks."""

    kind = "bundle"

    def _bind(self, nets):
        self.params, self.nets = bind(nets)
        self.layout = nn.flat_layout(self.nets)

    def copy(self):
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone._bind({k: v.copy() for k, v in self.nets.items()})
        clone._after_bind()
        return clone

    def _after_bind(self):
        pass

    def l2(self, strength: float):
        value = 0.0
        grads = []
        for net in self.nets.values():
            v, g = nn.l2_penalty(net, strength)
            value += v
            grads.append(g.flat)
        return value, np.concatenate(grads)


class RMNetModel(_Bundle):
    """Extractor phi([x; a]) followed by one shared hypothesis head."""

    kind = "rmnet"

    def __init__(self, d, m, extractor: nn.MLP, hypothesis: nn.MLP):
        self.d, self.m = d, m
        if extractor.sizes[0] != d + m:
            raise nn.ShapeError("extractor input width must be d + m")
        if hypothesis.sizes[0] != extractor.sizes[-1]:
            raise nn.ShapeError("hypothesis input width must equal representation width")
        self._bind({"extractor": extractor, "hypothesis": hypothesis})
        self._after_bind()

    def _after_bind(self):
        self.extractor = self.nets["extractor"]
        self.hypothesis = self.nets["hypothesis"]

    @classmethod
    def build(cls, d, m, seed=0, hidden=64, rep=10, activation="elu"):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        ext_sizes = (d + m, hidden, hidden, hidden, rep)
        hyp_sizes = (rep, hidden, hidden, 1)
        ext = nn.init(ext_sizes, nn.default_activations(4, activation), rng)
        hyp = nn.init(hyp_sizes, nn.default_activations(3, activation), rng)
        return cls(d, m, ext, hyp)

    def inputs(self, X, A):
        return np.hstack([np.asarray(X, dtype=np.float64), np.asarray(A, dtype=np.float64)])

    def represent(self, X, A):
        phi, _ = nn.forward(self.extractor, self.inputs(X, A))
        return phi

    def score(self, X, A):
        phi = self.represent(X, A)
        out, _ = nn.forward(self.hypothesis, phi)
        return out[:, 0]

    def score_all(self, X):
        X = np.asarray(X, dtype=np.float64)
        A_all = action_matrix(self.m)
        n, K = len(X), len(A_all)
        f = self.score(np.repeat(X, K, axis=0), np.tile(A_all, (n, 1)))
        return f.reshape(n, K)

    def forward_cached(self, X, A):
        phi, ext_cache = nn.forward(self.extractor, self.inputs(X, A))
        out, hyp_cache = nn.forward(self.hypothesis, phi)
        return out[:, 0], phi, ext_cache, hyp_cache

    def backward(self, ext_cache, hyp_cache, df, dphi_extra=None):
        """Flat gradient given dL/df (and optionally an extra dL/dphi)."""
        g_hyp, dphi = nn.backward(self.hypothesis, hyp_cache, df[:, None])
        if dphi_extra is not None:
            dphi = dphi + dphi_extra
        g_ext, _ = nn.backward(self.extractor, ext_cache, dphi)
        return np.concatenate([g_ext.flat, g_hyp.flat])

    def extractor_backward(self, ext_cache, dphi):
        g_ext, _ = nn.backward(self.extractor, ext_cache, dphi)
        return np.concatenate([g_ext.flat, np.zeros(self.hypothesis.flat.size)])


def rmnet_repr(model: RMNetModel, X, A):
    return model.represent(np.atleast_2d(X), np.atleast_2d(A))


def rmnet_score(model: RMNetModel, X, A):
    return model.score(np.atleast_2d(X), np.atleast_2d(A))


def combined_loss(model: RMNetModel, X, A, y, g_values, beta: float):
    """Batch objective and its flat parameter gradient. Returns (loss, grad, xe, mse)."""
    f, _, ext_cache, hyp_cache = model.forward_cached(X, A)
    loss, df, xe, mse = combined_loss_from_scores(f, y, g_values, beta)
    return loss, model.backward(ext_cache, hyp_cache, df), xe, mse


class MultiHeadModel(_Bundle):
    """Extractor on x only with one hypothesis head per action."""

    kind = "multihead"

    def __init__(self, d, m, extractor: nn.MLP, heads: list[nn.MLP]):
        self.d, self.m = d, m
        if len(heads) != 2 ** m:
            raise nn.ShapeError(f"need {2 ** m} heads, got {len(heads)}")
        if extractor.sizes[0] != d:
            raise nn.ShapeError("extractor input width must be d")
        nets = {"extractor": extractor}
        nets.update({f"head{j}": h for j, h in enumerate(heads)})
        self._bind(nets)
        self._after_bind()

    def _after_bind(self):
        self.extractor = self.nets["extractor"]
        self.heads = [self.nets[f"head{j}"] for j in range(2 ** self.m)]
        sizes = [net.flat.size for net in self.nets.values()]
        starts = np.cumsum([0] + sizes)
        self._slices = [slice(a, b) for a, b in zip(starts[:-1], starts[1:])]

    @classmethod
    def build(cls, d, m, seed=0, hidden=64, rep=10, activation="elu"):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        ext = nn.init((d, hidden, hidden, hidden, rep), nn.default_activations(4, activation), rng)
        heads = [
            nn.init((rep, hidden, hidden, 1), nn.default_activations(3, activation), rng)
            for _ in range(2 ** m)
        ]
        return cls(d, m, ext, heads)

    @property
    def n_heads(self):
        return len(self.heads)

    def represent(self, X):
        phi, _ = nn.forward(self.extractor, np.asarray(X, dtype=np.float64))
        return phi

    def score(self, X, A):
        phi = self.represent(X)
        acts = action_index(np.asarray(A))
        out = np.empty(len(phi))
        for j in np.unique(acts):
            rows = acts == j
            out[rows] = nn.forward(self.heads[j], phi[rows])[0][:, 0]
        return out

    def score_all(self, X):
        phi = self.represent(X)
        return np.column_stack([nn.forward(h, phi)[0][:, 0] for h in self.heads])

    def loss_and_grad(self, X, acts, y, alpha=0.0, ipm=None):
        """Factual MSE (+ alpha * ipm(phi, acts)) and the flat gradient.

        ``ipm`` maps (phi, acts) to (value, dvalue/dphi).
        Returns (total, grad, mse, ipm value).
        """
        phi, ext_cache = nn.forward(self.extractor, np.asarray(X, dtype=np.float64))
        n = len(y)
        grad = np.zeros_like(self.params)
        dphi = np.zeros_like(phi)
        sq = 0.0
        for j in np.unique(acts):
            rows = acts == j
            head = self.heads[j]
            out, cache = nn.forward(head, phi[rows])
            resid = out[:, 0] - y[rows]
            sq += float(np.sum(resid ** 2))
            g_head, dphi_rows = nn.backward(head, cache, (2.0 * resid / n)[:, None])
            grad[self._slices[j + 1]] = g_head.flat
            dphi[rows] = dphi_rows
        mse = sq / n
        ipm_value = 0.0
        if alpha > 0 and ipm is not None:
            ipm_value, dphi_ipm = ipm(phi, acts)
            dphi = dphi + alpha * dphi_ipm
        g_ext, _ = nn.backward(self.extractor, ext_cache, dphi)
        grad[self._slices[0]] = g_ext.flat
        return mse + alpha * ipm_value, grad, mse, ipm_value


class GModel(_Bundle):
    """Observational conditional mean E[y | x]."""

    kind = "g"

    def __init__(self, net: nn.MLP):
        self._bind({"g": net})
        self._after_bind()

    def _after_bind(self):
        self.net = self.nets["g"]

    @classmethod
    def build(cls, d, seed=0, hidden=64, activation="elu"):
        return cls(nn.init((d, hidden, hidden, 1), nn.default_activations(3, activation), seed))

    def predict(self, X):
        return nn.forward(self.net, np.asarray(X, dtype=np.float64))[0][:, 0]


def fit_g(
    train: ObservationalDataset,
    val: ObservationalDataset,
    seed=0,
    lr=1e-3,
    batch_size=64,
    max_epochs=1000,
    patience=100,
    l2=1e-4,
) -> GModel:
    """Squared-error regression of y on x with Adam, early-stopped on validation MSE."""
    rng = np.random.default_rng(seed)
    model = GModel.build(train.d, seed=rng)
    state = nn.AdamState.for_params(model.params.size, lr=lr)
    best = (np.inf, model.params.copy())
    since = 0
    n = train.n
    for _ in range(max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            out, cache = nn.forward(model.net, train.X[idx])
            resid = out[:, 0] - train.y[idx]
            grad, _ = nn.backward(model.net, cache, (2.0 * resid / len(idx))[:, None])
            _, l2_grad = model.l2(l2)
            nn.adam_step(model.params, grad.flat + l2_grad, state, model.layout)
        val_mse = float(np.mean((model.predict(val.X) - val.y) ** 2))
        if val_mse < best[0]:
            best = (val_mse, model.params.copy())
            since = 0
        else:
            since += 1
            if since >= patience:
                break
    model.params[:] = best[1]
    return model


class RidgeModel(_Bundle):
    """Linear model on [x; a] with an unpenalized intercept."""

    kind = "ridge"

    def __init__(self, d, m, net: nn.MLP):
        self.d, self.m = d, m
        self._bind({"ridge": net})
        self._after_bind()

    def _after_bind(self):
        self.net = self.nets["ridge"]

    @property
    def coef(self):
        return self.net.weights[0][0]

    @property
    def intercept(self):
        return float(self.net.biases[0][0])

    def score(self, X, A):
        return np.hstack([X, A]) @ self.coef + self.intercept

    def score_all(self, X):
        A_all = action_matrix(self.m)
        return (
            (np.asarray(X) @ self.coef[: self.d])[:, None]
            + (A_all @ self.coef[self.d:])[None, :]
            + self.intercept
        )


def ridge_fit(train: ObservationalDataset, lam: float = RIDGE_LAMBDA) -> RidgeModel:
    """Solve (Z'Z + lam * I_w) w = Z'y with Z = [x, a, 1]; intercept unpenalized."""
    if not lam > 0:
        raise ValueError("ridge lambda must be positive")
    Z = np.hstack([train.X, train.A, np.ones((train.n, 1))])
    penalty = lam * np.eye(Z.shape[1])
    penalty[-1, -1] = 0.0
    w = np.linalg.solve(Z.T @ Z + penalty, Z.T @ train.y)
    p = Z.shape[1] - 1
    net = nn.MLP((p, 1), ("identity",), np.concatenate([w[:-1], w[-1:]]))
    return RidgeModel(train.d, train.m, net)


def ridge_predict(model: RidgeModel, X, A):
    return model.score(np.atleast_2d(X), np.atleast_2d(A))


# -- checkpoints ----------------------------------------------------------------


def save_model(path, model, meta: dict | None = None) -> None:
    info = {"kind": model.kind}
    if hasattr(model, "d"):
        info.update(d=model.d, m=model.m)
    info.update(meta or {})
    nn.save_checkpoint(path, model.nets, info)


def load_model(path):
    nets, meta = nn.load_checkpoint(path)
    kind = meta.get("kind")
    if kind == "rmnet":
        model = RMNetModel(meta["d"], meta["m"], nets["extractor"], nets["hypothesis"])
    elif kind == "multihead":
        heads = [nets[f"head{j}"] for j in range(2 ** meta["m"])]
        model = MultiHeadModel(meta["d"], meta["m"], nets["extractor"], heads)
    elif kind == "ridge":
        model = RidgeModel(meta["d"], meta["m"], nets["ridge"])
    elif kind == "g":
        model = GModel(nets["g"])
    else:
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    return model, meta
