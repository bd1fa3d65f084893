"""l-infinity FGSM / PGD and the warm-started epsilon sweep.

All attacks are untargeted: they ascend the cross-entropy of the true
label.  Images are processed in fixed chunks of ``AttackConfig.batch_size``;
per-image randomness comes from ``PrngState(seed, image_index, salt)``, so
results do not depend on how chunks are spread over worker processes.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .errors import GradientError
from .tensor import PrngState, Tensor, backward, no_grad

DEFAULT_SCHEDULE = (0.0, 0.00125, 0.0025, 0.005, 0.01, 0.02, 0.04, 0.08, 0.16, 0.32)


@dataclass
class AttackConfig:
    epsilon: float = 0.01
    steps: int = 40
    step_size: float = None  # None -> 2.5 * epsilon / steps
    random_start: bool = True
    bounds: tuple = (0.0, 1.0)
    seed: int = 0
    batch_size: int = 32

    def __post_init__(self):
        self.bounds = tuple(float(b) for b in self.bounds)
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.epsilon > 1:
            raise ValueError(f"epsilon must be <= 1 on the [0, 1] pixel scale, got {self.epsilon}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.step_size is not None and self.steps > 0 and self.step_size <= 0:
            raise ValueError("step_size must be > 0")

    @property
    def alpha(self):
        if self.step_size is not None:
            return float(self.step_size)
        return 2.5 * self.epsilon / self.steps if self.steps else 0.0

    def with_epsilon(self, eps):
        d = asdict(self)
        d["epsilon"] = float(eps)
        return AttackConfig(**d)

    def to_dict(self):
        d = asdict(self)
        d["bounds"] = list(self.bounds)
        d["step_size_rule"] = "2.5*epsilon/steps" if self.step_size is None else "fixed"
        return d


@dataclass
class AttackResult:
    epsilon: float
    x_adv: np.ndarray
    success: np.ndarray  # predict(x_adv) != label
    loss: np.ndarray  # float64 cross-entropy of the true label at x_adv
    linf: np.ndarray  # float64 max |x_adv - x| per image
    predictions: np.ndarray

    def __len__(self):
        return len(self.success)

    @property
    def accuracy(self):
        return float(1.0 - self.success.mean()) if len(self) else float("nan")


class EpsilonSchedule(tuple):
    """Strictly increasing radii whose first entry, 0, is clean evaluation."""

    def __new__(cls, radii=DEFAULT_SCHEDULE):
        radii = tuple(float(r) for r in radii)
        if not radii or radii[0] != 0.0:
            raise ValueError("an epsilon schedule must start at 0 (clean evaluation)")
        if any(b <= a for a, b in zip(radii, radii[1:])):
            raise ValueError(f"epsilon schedule must be strictly increasing: {radii}")
        if radii[-1] > 1:
            raise ValueError("epsilons are on the [0, 1] pixel scale")
        return super().__new__(cls, radii)

    @classmethod
    def parse(cls, text):
        text = text.strip()
        if text == "default":
            return cls()
        return cls(float(v) for v in text.split(",") if v.strip())


def project_linf(candidate, origin, eps, bounds=(0.0, 1.0)):
    """Clamp into the eps-ball around ``origin``, then into ``bounds``."""
    as_t = isinstance(candidate, Tensor)
    c = candidate.data if as_t else np.asarray(candidate)
    o = origin.data if isinstance(origin, Tensor) else np.asarray(origin)
    if c.shape != o.shape:
        raise ValueError(f"candidate shape {c.shape} != origin shape {o.shape}")
    out = np.clip(np.clip(c, o - eps, o + eps), bounds[0], bounds[1])
    return Tensor(out) if as_t else out


# ---------------------------------------------------------------------------
# chunk-level machinery


def _loss_grad(model, x, y, need_grad=True):
    """Per-image loss, predictions and d(sum loss)/dx for one chunk."""
    if not need_grad:
        with no_grad():
            logits = model.forward(Tensor(x)).data
        return None, ops.cross_entropy_per_sample(logits, y), logits.argmax(axis=1)
    xt = Tensor(x, requires_grad=True)
    logits = model.forward(xt)
    loss, _ = ops.softmax_cross_entropy(logits, y, reduction="sum")
    backward(loss)
    g = xt.grad
    if g is None:
        g = np.zeros_like(x)
    if not np.all(np.isfinite(g)):
        raise GradientError("non-finite input gradient during attack")
    return g, ops.cross_entropy_per_sample(logits.data, y), logits.data.argmax(axis=1)


def _better(succ, loss, best_succ, best_loss):
    """Successful candidates first, then higher loss."""
    return (succ & ~best_succ) | ((succ == best_succ) & (loss > best_loss))


def _random_start(x, ids, eps, seed, salt, bounds):
    noise = np.empty_like(x)
    for row, image_id in enumerate(ids):
        noise[row] = PrngState(seed, int(image_id), salt).uniform(-eps, eps, x.shape[1:], dtype=x.dtype)
    return project_linf(x + noise, x, eps, bounds)


def _pgd_chunk(model, x, y, eps, alpha, steps, start, include_start, bounds):
    cur = start
    best_x = cur.copy()
    best_loss = np.full(len(y), -np.inf)
    best_succ = np.zeros(len(y), dtype=bool)
    best_pred = y.copy()
    for t in range(steps + 1):
        g, loss, pred = _loss_grad(model, cur, y, need_grad=t < steps)
        succ = pred != y
        if t > 0 or include_start or steps == 0:
            take = _better(succ, loss, best_succ, best_loss)
            best_x[take] = cur[take]
            best_loss[take] = loss[take]
            best_succ[take] = succ[take]
            best_pred[take] = pred[take]
        if t == steps:
            break
        cur = project_linf(cur + alpha * np.sign(g), x, eps, bounds)
    return best_x, best_succ, best_loss, best_pred


def _result(eps, x, x_adv, y, success, loss, pred):
    linf = np.abs(x_adv.astype(np.float64) - x.astype(np.float64)).reshape(len(x), -1).max(axis=1, initial=0.0)
    return AttackResult(float(eps), x_adv, success, loss, linf, pred)


def _merge(eps, x, y, parts):
    if not parts:
        empty = np.zeros(0)
        return _result(eps, x, x.copy(), y, empty.astype(bool), empty, empty.astype(np.int64))
    cat = [np.concatenate([p[i] for p in parts]) for i in range(4)]
    return _result(eps, x, cat[0], y, cat[1], cat[2], cat[3])


def _chunks(n, size):
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _prepare(model, x, y):
    """Gradient-free view of ``model``; any object with ``forward`` works."""
    if hasattr(model, "frozen"):
        model = model.frozen()
    params = getattr(model, "params", None)
    dtype = next(iter(params.values())).dtype if params else np.float32
    x = np.ascontiguousarray(x.data if isinstance(x, Tensor) else x, dtype=dtype)
    y = np.asarray(y, dtype=np.int64)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} images but {len(y)} labels")
    return model, x, y


# ---------------------------------------------------------------------------
# public attacks


def fgsm(model, x, y, eps, bounds=(0.0, 1.0), batch_size=32):
    """x' = clip(x + eps * sign(grad_x loss), bounds)."""
    if eps < 0:
        raise ValueError("epsilon must be >= 0")
    model, x, y = _prepare(model, x, y)
    x_adv = np.empty_like(x)
    for lo, hi in _chunks(len(y), batch_size):
        g, _, _ = _loss_grad(model, x[lo:hi], y[lo:hi])
        x_adv[lo:hi] = np.clip(x[lo:hi] + eps * np.sign(g), bounds[0], bounds[1])
    loss, pred = _evaluate(model, x_adv, y, batch_size)
    return _result(eps, x, x_adv, y, pred != y, loss, pred)


def _evaluate(model, x, y, batch_size):
    loss = np.empty(len(y))
    pred = np.empty(len(y), dtype=np.int64)
    for lo, hi in _chunks(len(y), batch_size):
        _, loss[lo:hi], pred[lo:hi] = _loss_grad(model, x[lo:hi], y[lo:hi], need_grad=False)
    return loss, pred


def _pgd_job(model, x, y, ids, config, start, include_start, salt):
    eps = config.epsilon
    if start is None:
        if config.random_start and eps > 0:
            start = _random_start(x, ids, eps, config.seed, salt, config.bounds)
        else:
            start = x.copy()
    else:
        start = project_linf(start, x, eps, config.bounds)
    steps = config.steps if eps > 0 else 0
    return _pgd_chunk(model, x, y, eps, config.alpha, steps, start, include_start or steps == 0, config.bounds)


def pgd_linf(model, x, y, config, image_ids=None, start=None, include_start=False, salt=0, workers=1):
    """Projected sign-gradient ascent inside the eps-ball; best of trajectory.

    The returned point per image is the best visited iterate, ranking
    misclassifying iterates first and higher loss second.  The starting
    point only competes when ``include_start`` is set (warm starts) or
    when there are no steps.
    """
    model, x, y = _prepare(model, x, y)
    ids = np.arange(len(y)) if image_ids is None else np.asarray(image_ids)
    jobs = []
    for lo, hi in _chunks(len(y), config.batch_size):
        s = None if start is None else np.asarray(start, dtype=x.dtype)[lo:hi]
        jobs.append((model, x[lo:hi], y[lo:hi], ids[lo:hi], config, s, include_start, salt))
    return _merge(config.epsilon, x, y, _map(_pgd_job, jobs, workers))


def _sweep_job(model, x, y, ids, schedule, config):
    out = []
    _, loss, pred = _loss_grad(model, x, y, need_grad=False)
    prev = x.copy()
    out.append((x.copy(), pred != y, loss, pred))
    for pos, eps in enumerate(schedule[1:], start=1):
        cfg = config.with_epsilon(eps)
        fresh = _pgd_job(model, x, y, ids, cfg, None, False, pos)
        wcfg = config.with_epsilon(eps)
        wcfg.random_start = False
        warm = _pgd_job(model, x, y, ids, wcfg, prev, True, pos)
        take = _better(warm[1], warm[2], fresh[1], fresh[2])
        for f, w in zip(fresh, warm):
            f[take] = w[take]
        out.append(fresh)
        prev = fresh[0]
    return out


def attack_sweep(model, x, y, schedule=None, config=None, image_ids=None, workers=1):
    """Attack every image at every radius of ``schedule``.

    Each radius after the first runs PGD twice, from a fresh random start
    and from the previous radius's adversarial point (which competes as a
    candidate itself), keeping the better outcome.  A witness found at a
    smaller radius therefore survives, making per-image success
    non-decreasing in epsilon.
    """
    schedule = EpsilonSchedule(DEFAULT_SCHEDULE if schedule is None else schedule)
    config = config or AttackConfig()
    model, x, y = _prepare(model, x, y)
    ids = np.arange(len(y)) if image_ids is None else np.asarray(image_ids)
    jobs = [
        (model, x[lo:hi], y[lo:hi], ids[lo:hi], schedule, config)
        for lo, hi in _chunks(len(y), config.batch_size)
    ]
    parts = _map(_sweep_job, jobs, workers)
    return [_merge(eps, x, y, [p[k] for p in parts]) for k, eps in enumerate(schedule)]
