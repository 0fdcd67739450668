"""Value-function regressors fitted stage by stage.

Two families share one interface: a linear model over engineered state
features, and a small fully connected network trained by full-batch
gradient descent. Both consume the flattened (counts, residuals, window)
state vector, normalize it into the unit box spanned by the sampled state
space, and can be checkpointed to a versioned text file that round-trips
bit-exactly.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, EvschedError, FitError, NonFiniteObjectiveError
from .model import BlockLayout

CHECKPOINT_MAGIC = "EVSCHED-VMCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FitDataset:
    """Sampled states (rows of flattened vectors) and their fitted targets."""

    states: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.states, dtype=float)
        t = np.asarray(self.targets, dtype=float)
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "targets", t)
        if s.ndim != 2 or t.shape != (s.shape[0],):
            raise EvschedError("dataset shapes disagree")
        if not (np.isfinite(s).all() and np.isfinite(t).all()):
            raise EvschedError("non-finite dataset content")


def state_box(layout: BlockLayout, entry_caps: np.ndarray, d_lo, d_hi):
    """Lower/upper corners of the sampled state space, flattened.

    ``entry_caps`` bounds the cohort count per layout entry; residual
    bounds follow as count times item energy. Degenerate coordinates
    (constant within the box) are allowed and normalize to zero.
    """
    entry_caps = np.asarray(entry_caps, dtype=float)
    if entry_caps.shape != (layout.dim,):
        raise EvschedError("entry_caps length does not match layout")
    lo = np.zeros(layout.state_dim)
    hi = np.zeros(layout.state_dim)
    hi[: layout.dim] = entry_caps
    hi[layout.dim : 2 * layout.dim] = layout.entry_m() * entry_caps
    lo[-2], lo[-1] = float(d_lo[0]), float(d_lo[1])
    hi[-2], hi[-1] = float(d_hi[0]), float(d_hi[1])
    return lo, hi


def entry_caps_from_arrivals(layout: BlockLayout, caps_matrix: np.ndarray) -> np.ndarray:
    """Per-entry count bound: the largest arrival cap its item ever sees."""
    caps_matrix = np.asarray(caps_matrix)
    per_item = caps_matrix.max(axis=0) if caps_matrix.size else np.zeros(layout.n_items)
    out = np.tile(per_item, layout.n_blocks).astype(float)
    out[~layout.active] = 0.0
    return out


@dataclass(frozen=True)
class FeatureMap:
    """Engineered features for the linear model.

    The floor set is: constant, normalized count and residual per active
    entry, both aggregate-window coordinates, mean normalized residual,
    and total one-slot charging capacity. Degree-two monomials of the
    normalized primitives are appended in a fixed order until the
    requested feature budget is met.
    """

    state_dim: int
    layout_dim: int
    active_idx: np.ndarray
    slot_cap: float
    norm_lo: np.ndarray
    norm_hi: np.ndarray
    extra_pairs: np.ndarray  # (n_extra, 2) indices into the primitive vector

    def __post_init__(self):
        for name in ("active_idx", "norm_lo", "norm_hi", "extra_pairs"):
            arr = np.asarray(getattr(self, name))
            object.__setattr__(self, name, arr)
            arr.setflags(write=False)

    @property
    def n_active(self) -> int:
        return len(self.active_idx)

    @property
    def n_primitives(self) -> int:
        return 2 * self.n_active + 2

    @property
    def n_features(self) -> int:
        return 1 + self.n_primitives + 2 + len(self.extra_pairs)

    def _scale(self) -> np.ndarray:
        span = self.norm_hi - self.norm_lo
        return np.where(span > 0, span, 1.0)

    def normalize(self, X: np.ndarray) -> np.ndarray:
        return (X - self.norm_lo) / self._scale()

    def primitives(self, X: np.ndarray) -> np.ndarray:
        Xn = self.normalize(X)
        yi = self.active_idx
        zi = self.layout_dim + self.active_idx
        return np.concatenate([Xn[:, yi], Xn[:, zi], Xn[:, -2:]], axis=1)

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        """(rows, n_features) design matrix for flattened states ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        P = self.primitives(X)
        y = X[:, self.active_idx]
        z = X[:, self.layout_dim + self.active_idx]
        na = max(self.n_active, 1)
        sumz = P[:, self.n_active : 2 * self.n_active].sum(axis=1, keepdims=True) / na
        cap_raw = np.minimum(self.slot_cap * y, z).sum(axis=1, keepdims=True)
        cap_hi = float(
            np.minimum(
                self.slot_cap * self.norm_hi[self.active_idx],
                self.norm_hi[self.layout_dim + self.active_idx],
            ).sum()
        )
        cap = cap_raw / (cap_hi if cap_hi > 0 else 1.0)
        cols = [np.ones((X.shape[0], 1)), P, sumz, cap]
        if len(self.extra_pairs):
            cols.append(P[:, self.extra_pairs[:, 0]] * P[:, self.extra_pairs[:, 1]])
        return np.concatenate(cols, axis=1)

    def gradient(self, X: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """d(value)/d(state) rows for the linear model with ``weights``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        rows, sd = X.shape
        scale = self._scale()
        na = self.n_active
        yi = self.active_idx
        zi = self.layout_dim + self.active_idx
        grad = np.zeros((rows, sd))
        # primitive block: w on normalized y, z, d coordinates
        w_p = weights[1 : 1 + self.n_primitives]
        grad[:, yi] += w_p[:na] / scale[yi]
        grad[:, zi] += w_p[na : 2 * na] / scale[zi]
        grad[:, -2] += w_p[-2] / scale[-2]
        grad[:, -1] += w_p[-1] / scale[-1]
        w_sum = weights[1 + self.n_primitives]
        grad[:, zi] += w_sum / (max(na, 1) * scale[zi])
        w_cap = weights[2 + self.n_primitives]
        cap_hi = float(
            np.minimum(self.slot_cap * self.norm_hi[yi], self.norm_hi[zi]).sum()
        )
        denom = cap_hi if cap_hi > 0 else 1.0
        y = X[:, yi]
        z = X[:, zi]
        grad_z_branch = (z < self.slot_cap * y).astype(float)
        grad[:, zi] += w_cap * grad_z_branch / denom
        grad[:, yi] += w_cap * self.slot_cap * (self.slot_cap * y < z) / denom
        if len(self.extra_pairs):
            P = self.primitives(X)
            w_x = weights[3 + self.n_primitives :]
            for k, (a, b) in enumerate(self.extra_pairs):
                ga = self._primitive_grad_cols(int(a), scale)
                gb = self._primitive_grad_cols(int(b), scale)
                grad[:, ga[0]] += w_x[k] * P[:, b] * ga[1]
                grad[:, gb[0]] += w_x[k] * P[:, a] * gb[1]
        return grad

    def _primitive_grad_cols(self, p: int, scale: np.ndarray):
        na = self.n_active
        if p < na:
            col = int(self.active_idx[p])
        elif p < 2 * na:
            col = int(self.layout_dim + self.active_idx[p - na])
        else:
            col = self.state_dim - 2 + (p - 2 * na)
        return col, 1.0 / scale[col]


def feature_map_for(
    layout: BlockLayout,
    entry_caps: np.ndarray,
    d_lo,
    d_hi,
    budget: int = 0,
) -> FeatureMap:
    """Feature map over the state box; ``budget`` asks for extra features.

    The floor set is always present; a budget above the floor appends that
    many degree-two monomials (deterministic order), a smaller budget is
    silently satisfied by the floor alone.
    """
    lo, hi = state_box(layout, entry_caps, d_lo, d_hi)
    active_idx = np.flatnonzero(layout.active)
    n_prim = 2 * len(active_idx) + 2
    floor = 1 + n_prim + 2
    pairs = [(a, b) for a in range(n_prim) for b in range(a, n_prim)]
    n_extra = max(0, min(budget, floor + len(pairs)) - floor)
    extra = np.array(pairs[:n_extra], dtype=np.int64).reshape(n_extra, 2)
    return FeatureMap(
        state_dim=layout.state_dim,
        layout_dim=layout.dim,
        active_idx=active_idx,
        slot_cap=layout.menu.slot_energy_cap,
        norm_lo=lo,
        norm_hi=hi,
        extra_pairs=extra,
    )


class LinearBasisModel:
    """Linear value model over a :class:`FeatureMap`."""

    kind = "linear"

    def __init__(self, features: FeatureMap, weights: np.ndarray):
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (features.n_features,):
            raise EvschedError("weight length does not match feature map")
        self.features = features
        self.weights = weights
        weights.setflags(write=False)

    @property
    def state_dim(self) -> int:
        return self.features.state_dim

    def evaluate(self, x: np.ndarray) -> float:
        return float(self.evaluate_batch(np.atleast_2d(x))[0])

    def evaluate_batch(self, X: np.ndarray) -> np.ndarray:
        return self.features.evaluate(X) @ self.weights

    def grad_state_batch(self, X: np.ndarray) -> np.ndarray:
        return self.features.gradient(X, self.weights)

    @classmethod
    def fit(cls, features: FeatureMap, data: FitDataset, ridge: float = 1e-8) -> "LinearBasisModel":
        """Solve the ridge-stabilized normal equations exactly."""
        Phi = features.evaluate(data.states)
        gram = Phi.T @ Phi + ridge * np.eye(features.n_features)
        rhs = Phi.T @ data.targets
        try:
            w = np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError as e:
            raise FitError(f"normal equations singular beyond ridge floor: {e}") from e
        if not np.isfinite(w).all():
            raise FitError("non-finite weights from normal equations")
        return cls(features, w)

    # -- checkpoint plumbing -------------------------------------------

    def _header_arrays(self):
        return [
            ("norm_lo", self.features.norm_lo),
            ("norm_hi", self.features.norm_hi),
            ("weights", self.weights),
        ]

    def _header_meta(self):
        return {
            "kind": self.kind,
            "state_dim": int(self.features.state_dim),
            "layout_dim": int(self.features.layout_dim),
            "active_idx": [int(i) for i in self.features.active_idx],
            "slot_cap": float(self.features.slot_cap),
            "extra_pairs": [[int(a), int(b)] for a, b in self.features.extra_pairs],
        }

    def save(self, path):
        _write_checkpoint(path, self._header_meta(), self._header_arrays())

    @classmethod
    def _from_checkpoint(cls, meta, arrays):
        fm = FeatureMap(
            state_dim=meta["state_dim"],
            layout_dim=meta["layout_dim"],
            active_idx=np.array(meta["active_idx"], dtype=np.int64),
            slot_cap=meta["slot_cap"],
            norm_lo=arrays["norm_lo"],
            norm_hi=arrays["norm_hi"],
            extra_pairs=np.array(meta["extra_pairs"], dtype=np.int64).reshape(-1, 2),
        )
        return cls(fm, arrays["weights"])


def _softplus(a: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, a)


class MlpModel:
    """Fully connected value network trained by full-batch descent.

    Hidden layers use softplus; inputs are box-normalized; targets are
    standardized internally and the affine transform is stored with the
    weights, so evaluation returns values on the original scale.
    """

    kind = "mlp"

    def __init__(self, norm_lo, norm_hi, layers, target_shift: float, target_scale: float):
        self.norm_lo = np.asarray(norm_lo, dtype=float)
        self.norm_hi = np.asarray(norm_hi, dtype=float)
        self.layers = [(np.asarray(W, dtype=float), np.asarray(b, dtype=float)) for W, b in layers]
        self.target_shift = float(target_shift)
        self.target_scale = float(target_scale)

    @property
    def state_dim(self) -> int:
        return self.norm_lo.shape[0]

    def _normalize(self, X):
        span = self.norm_hi - self.norm_lo
        return (X - self.norm_lo) / np.where(span > 0, span, 1.0)

    def evaluate(self, x: np.ndarray) -> float:
        return float(self.evaluate_batch(np.atleast_2d(x))[0])

    def evaluate_batch(self, X: np.ndarray) -> np.ndarray:
        h = self._normalize(np.atleast_2d(np.asarray(X, dtype=float)))
        for W, b in self.layers[:-1]:
            h = _softplus(h @ W + b)
        W, b = self.layers[-1]
        out = (h @ W + b).ravel()
        if not np.isfinite(out).all():
            raise NonFiniteObjectiveError("network produced non-finite values")
        return out * self.target_scale + self.target_shift

    def grad_state_batch(self, X: np.ndarray):
        return None  # callers fall back to finite differences

    @classmethod
    def fit(
        cls,
        norm_lo,
        norm_hi,
        data: FitDataset,
        width: int,
        depth: int = 8,
        learning_rate: float = 0.005,
        epochs: int = 2000,
        seed: int = 0,
        patience: int = 50,
        improve_tol: float = 1e-8,
    ) -> "MlpModel":
        """Deterministic full-batch training with early stopping.

        Stops once the best MSE has not improved by ``improve_tol`` for
        ``patience`` consecutive epochs. Initialization is symmetric
        uniform scaled by fan-in, drawn from ``seed``.
        """
        rng = np.random.default_rng(seed)
        sd = len(norm_lo)
        sizes = [sd] + [width] * depth + [1]
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            layers.append(
                (rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out))
            )
        shift = float(data.targets.mean())
        scale = float(data.targets.std())
        scale = scale if scale > 1e-12 else 1.0
        t = (data.targets - shift) / scale
        model = cls(norm_lo, norm_hi, layers, shift, scale)
        X = model._normalize(data.states)

        best = np.inf
        stale = 0
        for _ in range(epochs):
            acts = [X]
            pre = []
            h = X
            for W, b in model.layers[:-1]:
                a = h @ W + b
                pre.append(a)
                h = _softplus(a)
                acts.append(h)
            W, b = model.layers[-1]
            out = (h @ W + b).ravel()
            resid = out - t
            mse = float(np.mean(resid**2))
            if best - mse > improve_tol:
                best = mse
                stale = 0
            else:
                stale += 1
                if stale >= patience:
                    break
            grad_out = (2.0 / len(t)) * resid[:, None]
            gW = acts[-1].T @ grad_out
            gb = grad_out.sum(axis=0)
            delta = grad_out @ W.T
            new_layers = [(W - learning_rate * gW, b - learning_rate * gb)]
            for li in range(depth - 1, -1, -1):
                delta = delta * _sigmoid(pre[li])
                Wl, bl = model.layers[li]
                gW = acts[li].T @ delta
                gb = delta.sum(axis=0)
                delta = delta @ Wl.T
                new_layers.append((Wl - learning_rate * gW, bl - learning_rate * gb))
            model.layers = list(reversed(new_layers))
        return model

    # -- checkpoint plumbing -------------------------------------------

    def _header_arrays(self):
        arrays = [("norm_lo", self.norm_lo), ("norm_hi", self.norm_hi)]
        for i, (W, b) in enumerate(self.layers):
            arrays.append((f"W{i}", W))
            arrays.append((f"b{i}", b))
        return arrays

    def _header_meta(self):
        return {
            "kind": self.kind,
            "state_dim": int(self.state_dim),
            "n_layers": len(self.layers),
            "target_shift": self.target_shift,
            "target_scale": self.target_scale,
        }

    def save(self, path):
        _write_checkpoint(path, self._header_meta(), self._header_arrays())

    @classmethod
    def _from_checkpoint(cls, meta, arrays):
        layers = [(arrays[f"W{i}"], arrays[f"b{i}"]) for i in range(meta["n_layers"])]
        return cls(arrays["norm_lo"], arrays["norm_hi"], layers, meta["target_shift"], meta["target_scale"])


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _write_checkpoint(path, meta: dict, arrays):
    parts = []
    shapes = []
    for name, arr in arrays:
        a = np.ascontiguousarray(arr, dtype=np.float64)
        shapes.append({"name": name, "shape": list(a.shape)})
        parts.append(a.ravel())
    payload = np.concatenate(parts) if parts else np.zeros(0)
    raw = payload.tobytes()
    header = dict(meta)
    header["arrays"] = shapes
    header["sha256"] = hashlib.sha256(raw).hexdigest()
    with open(path, "w", encoding="utf8") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n")
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        fh.write(base64.b64encode(raw).decode("ascii") + "\n")


def load_checkpoint(path):
    """Load any saved value model; verifies version and payload hash."""
    try:
        with open(path, "r", encoding="utf8") as fh:
            magic = fh.readline().strip()
            header_line = fh.readline()
            blob = fh.readline().strip()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    want = f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"
    if magic != want:
        raise CheckpointError(f"bad checkpoint magic in {path}: {magic!r}")
    try:
        meta = json.loads(header_line)
        raw = base64.b64decode(blob, validate=True)
    except (json.JSONDecodeError, ValueError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    if hashlib.sha256(raw).hexdigest() != meta.get("sha256"):
        raise CheckpointError(f"checkpoint payload hash mismatch in {path}")
    flat = np.frombuffer(raw, dtype=np.float64)
    arrays = {}
    offset = 0
    for entry in meta["arrays"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arrays[entry["name"]] = flat[offset : offset + size].reshape(entry["shape"]).copy()
        offset += size
    if offset != flat.size:
        raise CheckpointError(f"checkpoint payload length mismatch in {path}")
    kind = meta.get("kind")
    if kind == "linear":
        return LinearBasisModel._from_checkpoint(meta, arrays)
    if kind == "mlp":
        return MlpModel._from_checkpoint(meta, arrays)
    raise CheckpointError(f"unknown model kind {kind!r} in {path}")


def sample_states(
    layout: BlockLayout,
    caps_matrix: np.ndarray,
    d: tuple[float, float],
    l: int,
    rng: np.random.Generator,
    slot: int,
    horizon: int,
) -> np.ndarray:
    """Draw ``l`` flattened states uniformly from the stage-``slot`` box.

    Counts are uniform integers up to the arrival cap of the cohort that
    could occupy each entry at this stage; residuals are uniform between
    zero and the smaller of remaining demand and what the cohort can still
    absorb before departure (forward-reachable residuals).
    """
    caps_matrix = np.asarray(caps_matrix)
    dim = layout.dim
    deltas = layout.entry_deltas()
    n_entry = layout.entry_n()
    valid = layout.stage_valid(slot, horizon)
    ycap = np.zeros(dim, dtype=np.int64)
    for idx in np.flatnonzero(valid):
        t = slot + deltas[idx] - (int(n_entry[idx]) - 1)
        ycap[idx] = caps_matrix[t - 1, idx % layout.n_items]
    y = rng.integers(0, ycap + 1, size=(l, dim))
    m_entry = layout.entry_m()
    cap = layout.menu.slot_energy_cap
    zmax = np.minimum(m_entry * y, cap * y * (deltas + 1))
    z = rng.random((l, dim)) * zmax
    out = np.zeros((l, layout.state_dim))
    out[:, :dim] = y
    out[:, dim : 2 * dim] = z
    out[:, -2] = d[0]
    out[:, -1] = d[1]
    return out


def nonexpansion_diagnostic(fit_fn, target_pairs, fit_states: np.ndarray, eval_states: np.ndarray):
    """Measure how much fitting can expand the sup-distance between targets.

    For each pair of target functions, both are fitted on the shared state
    sample and the fitted sup-distance over ``eval_states`` is compared to
    the raw target sup-distance. Returns the per-pair slacks (positive
    means expansion) and their maximum.
    """
    slacks = []
    for f, g in target_pairs:
        tf = np.asarray([f(x) for x in fit_states], dtype=float)
        tg = np.asarray([g(x) for x in fit_states], dtype=float)
        mf = fit_fn(FitDataset(fit_states, tf))
        mg = fit_fn(FitDataset(fit_states, tg))
        fitted = np.max(np.abs(mf.evaluate_batch(eval_states) - mg.evaluate_batch(eval_states)))
        raw = max(
            np.max(np.abs(np.asarray([f(x) for x in eval_states]) - np.asarray([g(x) for x in eval_states]))),
            np.max(np.abs(tf - tg)),
        )
        slacks.append(float(fitted - raw))
    return slacks, (max(slacks) if slacks else 0.0)
