"""Source pretraining, importance probing and main adaptation.

The adaptation strategies:

    adam              probe with KML, then KML on important kernels, fine-tune the rest
    kml_all           KML on every kernel, no probing
    freeze_important  probe with KML, freeze important kernels, fine-tune the rest
    finetune          fine-tune everything
    ewc               fine-tune with an FI-weighted L2 anchor, FI from the source model
    ewc_ip            as ewc, FI taken after a short EWC probing run
    adafm             AdaFM scale/shift on every kernel
    adafm_ip          probe with AdaFM, AdaFM on important kernels, fine-tune the rest
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Mapping

import numpy as np

from . import diffcore as dc
from . import metrics as M
from .data import DomainSpec, FewShotSet, builtin_domain, few_shot, sample
from .diffcore import Tensor
from .errors import InvalidArgumentError, NumericError
from .importance import FisherAccumulator, ImportanceReport, layer_kernel_scores, threshold_mask
from .modulation import AdaptedModel, modes_from_mask, uniform_modes
from .nets import GanPair, build_gan, forward_discriminator, forward_generator, kernel_ids, kernel_layers
from .persist import Checkpoint, checkpoint_from_gan, checkpoint_from_model, source_gan

log = logging.getLogger(__name__)

STRATEGIES = ("adam", "kml_all", "freeze_important", "finetune", "ewc", "ewc_ip", "adafm", "adafm_ip")
NEEDS_KML_REPORT = ("adam", "freeze_important")
BETAS = (0.5, 0.999)
CLIP_NORM = 100.0
POOL = 5000
N_EVAL = 1000
# (iter_probe, iter_adapt); a conv16 probing step costs about 1.1 adaptation steps
DEFAULT_ITERS = {"mlp2d": (200, 2000), "conv16": (150, 2000)}

# independent RNG streams derived from the run seed
_STREAM_LATENT, _STREAM_REAL, _STREAM_MOD, _STREAM_EVAL, _STREAM_POOL, _STREAM_EVAL_POOL = range(6)


@dataclass(frozen=True)
class TrainConfig:
    arch: str = "mlp2d"
    latent_dim: int = 8
    iter_pretrain: int = 3000
    iter_probe: int | None = None  # None: per-architecture default
    iter_adapt: int | None = None
    eval_interval: int = 0
    lr: float = 0.002
    batch_size: int = 16
    t_h: int = 50
    strategy: str = "adam"
    k_shots: int = 10
    seed: int = 1
    ewc_lambda: float = 10.0
    source_domain: str = "ring8_src"
    target_domain: str = "line3_distant"
    out_dir: str = "runs"

    def __post_init__(self):
        if self.arch not in DEFAULT_ITERS:
            raise InvalidArgumentError(f"unknown arch {self.arch!r}")
        probe_default, adapt_default = DEFAULT_ITERS[self.arch]
        if self.iter_probe is None:
            object.__setattr__(self, "iter_probe", probe_default)
        if self.iter_adapt is None:
            object.__setattr__(self, "iter_adapt", adapt_default)
        if self.strategy not in STRATEGIES:
            raise InvalidArgumentError(f"unknown strategy {self.strategy!r}")
        for name in ("latent_dim", "batch_size", "k_shots"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be positive")
        for name in ("iter_pretrain", "iter_probe", "iter_adapt", "eval_interval", "seed"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be non-negative")
        if not 0 <= self.t_h <= 100:
            raise InvalidArgumentError("t_h must be in [0, 100]")
        if self.lr < 0 or self.ewc_lambda < 0:
            raise InvalidArgumentError("lr and ewc_lambda must be non-negative")

    @classmethod
    def from_mapping(cls, cfg: Mapping, **overrides) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        merged = {k: v for k, v in dict(cfg).items() if k in known}
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**merged)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


# ---------------------------------------------------------------- optimisation

class Adam:
    """Adam with in-place updates of the given tensors."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, betas=BETAS, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        if self.lr == 0:
            return
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    if not max_norm or not grads:
        return grads
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if not np.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if norm <= max_norm:
        return grads
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}


class EWCPenalty:
    """lambda * sum F (theta - theta*)^2 over the anchored parameters."""

    def __init__(self, anchors: Mapping[str, np.ndarray], fisher: Mapping[str, np.ndarray], lam: float):
        self.anchors = {k: np.array(v, dtype=np.float64) for k, v in anchors.items()}
        self.fisher = {k: np.array(fisher[k], dtype=np.float64) for k in self.anchors}
        self.lam = lam

    def value(self, params: Mapping[str, Tensor]) -> float:
        return float(self.lam * sum(np.sum(self.fisher[k] * (params[k].data - a) ** 2)
                                    for k, a in self.anchors.items() if k in params))

    def tensor(self, params: Mapping[str, Tensor]) -> Tensor:
        """Autodiff form of the penalty (used to check ``grads``)."""
        total = None
        for k, a in self.anchors.items():
            if k not in params:
                continue
            d = dc.sub(params[k], Tensor(a))
            term = dc.tsum(dc.hadamard(Tensor(self.fisher[k]), dc.hadamard(d, d)))
            total = term if total is None else dc.add(total, term)
        return dc.scale(total, self.lam)

    def grads(self, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        return {k: 2.0 * self.lam * self.fisher[k] * (p.data - self.anchors[k])
                for k, p in params.items() if k in self.anchors}


@dataclass
class StepResult:
    d_loss: float
    g_loss: float
    d_grads: dict[str, np.ndarray]


def _detached(weights: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {k: (Tensor(v.data) if k.startswith(prefix) else v) for k, v in weights.items()}


def gan_step(model: AdaptedModel, real: np.ndarray, z: np.ndarray, opt_d: Adam, opt_g: Adam,
             penalty: EWCPenalty | None = None, need_g_grads: bool = False,
             clip: float | None = CLIP_NORM, noise: tuple | None = None) -> StepResult:
    """One alternating update.

    D minimises bce(D(real), 1) + bce(D(G(z)), 0); G then minimises
    bce(D(G(z)), 1). The returned ``d_grads`` are gradients of the plain
    discriminator loss (no penalty) for D parameters, and for G parameters
    too when ``need_g_grads`` is set. ``noise`` is an optional pair of
    arrays added to the real and fake D inputs (instance noise).
    """
    arch = model.arch
    d_params = model.trainable("D")
    g_params = model.trainable("G")

    w = model.weights()
    if not need_g_grads:
        w = _detached(w, "G.")
    fake = forward_generator(arch, w, z)
    if noise is not None:
        real = real + noise[0]
        fake = dc.add(fake, Tensor(noise[1]))
    d_loss = dc.add(dc.bce_with_logits(forward_discriminator(arch, w, real), 1.0),
                    dc.bce_with_logits(forward_discriminator(arch, w, fake), 0.0))
    targets = {**d_params, **g_params} if need_g_grads else d_params
    d_grads = dc.backward(d_loss, targets)
    if not np.isfinite(d_loss.data):
        raise NumericError("discriminator loss is not finite")
    upd = {k: d_grads[k] for k in d_params}
    if penalty is not None:
        for k, g in penalty.grads(d_params).items():
            upd[k] = upd[k] + g
    opt_d.step(clip_global_norm(upd, clip))

    w = _detached(model.weights(), "D.")
    fake = forward_generator(arch, w, z)
    if noise is not None:
        fake = dc.add(fake, Tensor(noise[1]))
    g_loss = dc.bce_with_logits(forward_discriminator(arch, w, fake), 1.0)
    g_grads = dc.backward(g_loss, g_params)
    if not np.isfinite(g_loss.data):
        raise NumericError("generator loss is not finite")
    if penalty is not None:
        for k, g in penalty.grads(g_params).items():
            g_grads[k] = g_grads[k] + g
    opt_g.step(clip_global_norm(g_grads, clip))
    return StepResult(float(d_loss.data), float(g_loss.data), d_grads)


class _Batcher:
    """Latent and real batches from seeded streams."""

    def __init__(self, reals: np.ndarray, cfg: TrainConfig, latent_dim: int, seed: int):
        self.reals = reals
        self.cfg = cfg
        self.latent_dim = latent_dim
        self.z_rng = _rng(seed, _STREAM_LATENT)
        self.r_rng = _rng(seed, _STREAM_REAL)

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        bs = self.cfg.batch_size
        if len(self.reals) <= bs:
            real = self.reals
        else:
            real = self.reals[self.r_rng.choice(len(self.reals), bs, replace=False)]
        return real, self.z_rng.standard_normal((bs, self.latent_dim))


def _optimizers(model: AdaptedModel, lr: float) -> tuple[Adam, Adam]:
    return Adam(model.trainable("D"), lr), Adam(model.trainable("G"), lr)


# ---------------------------------------------------------------- pretraining

def pretrain(domain: DomainSpec | str, arch_kind: str, config: TrainConfig,
             width: int | None = None, losses: list | None = None) -> Checkpoint:
    """Train a GAN from scratch on ``domain`` for ``config.iter_pretrain`` steps.

    Per-step (d_loss, g_loss) pairs are appended to ``losses`` when given.
    """
    domain = builtin_domain(domain) if isinstance(domain, str) else domain
    gan = build_gan(arch_kind, config.latent_dim, config.seed, width=width)
    if config.iter_pretrain == 0:
        return checkpoint_from_gan(gan, config.seed, 0)
    pool = sample(domain, POOL, seed=config.seed * 1000 + _STREAM_POOL)
    model = AdaptedModel.from_gan(gan, "finetune")
    opt_d, opt_g = _optimizers(model, config.lr)
    batches = _Batcher(pool, config, gan.latent_dim, config.seed)
    for it in range(config.iter_pretrain):
        real, z = batches.next()
        res = gan_step(model, real, z, opt_d, opt_g)
        if losses is not None:
            losses.append((res.d_loss, res.g_loss))
        if it % 500 == 0:
            log.debug("pretrain it=%d d=%.4f g=%.4f", it, res.d_loss, res.g_loss)
    return checkpoint_from_model(model, config.seed, config.iter_pretrain)


# ---------------------------------------------------------------- probing

@dataclass
class ProbeResult:
    report: ImportanceReport
    accumulator: FisherAccumulator
    model: AdaptedModel
    trace: list[dict[str, tuple[np.ndarray, np.ndarray]]] = field(default_factory=list)
    wall_time: float = 0.0
    trainable_count: int = 0


def _as_gan(source: Checkpoint | GanPair) -> GanPair:
    return source.copy() if isinstance(source, GanPair) else source_gan(source)


def _probe_modes(gan: GanPair, mode: str) -> dict[str, list[str]]:
    return uniform_modes(gan.arch, mode, other="freeze")


def kernel_scores(model: AdaptedModel, acc: FisherAccumulator, measure: str = "fisher") -> dict[str, float]:
    """Per-kernel importance from accumulated modulation-parameter gradients."""
    read = acc.fisher if measure == "fisher" else acc.saliency
    out: dict[str, float] = {}
    for spec in kernel_layers(model.arch):
        mk = model.layers[spec.name].modulated
        if mk.mode == "kml":
            scores = layer_kernel_scores(read(f"{spec.name}.m1"), read(f"{spec.name}.m2"))
        else:
            g = read(f"{spec.name}.gamma")
            b = read(f"{spec.name}.beta")
            scores = g.mean(axis=1) + b.mean(axis=1)
        for i, row in enumerate(mk.rows):
            out[f"{spec.name}.weight[{row}]"] = float(scores[i])
    return out


def run_probe(source: Checkpoint | GanPair, target: FewShotSet, config: TrainConfig,
              measure: str = "fisher", mode: str = "kml", record_trace: bool = False,
              init_std: float | None = None) -> ProbeResult:
    """Modulation-only adaptation for ``iter_probe`` steps, accumulating FI of the D loss."""
    if target.k != config.k_shots:
        raise InvalidArgumentError(f"few-shot set has {target.k} samples, config says {config.k_shots}")
    gan = _as_gan(source)
    kw = {} if init_std is None else {"init_std": init_std}
    model = AdaptedModel.from_gan(gan, _probe_modes(gan, mode), rng=_rng(config.seed, _STREAM_MOD),
                                  train_bias=False, **kw)
    params = model.trainable()
    acc = FisherAccumulator({k: p.shape for k, p in params.items()})
    opt_d, opt_g = _optimizers(model, config.lr)
    batches = _Batcher(target.samples, config, gan.latent_dim, config.seed)
    trace = []
    t0 = time.perf_counter()
    for _ in range(config.iter_probe):
        real, z = batches.next()
        before = {k: p.data.copy() for k, p in params.items()} if record_trace else None
        res = gan_step(model, real, z, opt_d, opt_g, need_g_grads=True)
        acc.accumulate(res.d_grads)
        if record_trace:
            trace.append({k: (before[k], res.d_grads[k].copy()) for k in params})
    wall = time.perf_counter() - t0
    report = threshold_mask(kernel_scores(model, acc, measure), config.t_h, measure)
    return ProbeResult(report, acc, model, trace, wall, model.trainable_count())


def probe(source: Checkpoint | GanPair, target_shots: FewShotSet, config: TrainConfig,
          measure: str = "fisher") -> ImportanceReport:
    return run_probe(source, target_shots, config, measure=measure).report


# ---------------------------------------------------------------- EWC

def weight_fisher(model: AdaptedModel, target: FewShotSet, config: TrainConfig, n_steps: int,
                  seed_offset: int = 0) -> dict[str, np.ndarray]:
    """Mean squared D-loss gradient of every trainable weight, normalised to mean 1."""
    params = model.trainable()
    acc = FisherAccumulator({k: p.shape for k, p in params.items()})
    batches = _Batcher(target.samples, config, model.arch.latent_dim, config.seed + 7 + seed_offset)
    arch = model.arch
    for _ in range(max(1, n_steps)):
        real, z = batches.next()
        w = model.weights()
        fake = forward_generator(arch, w, z)
        loss = dc.add(dc.bce_with_logits(forward_discriminator(arch, w, real), 1.0),
                      dc.bce_with_logits(forward_discriminator(arch, w, fake), 0.0))
        acc.accumulate(dc.backward(loss, params))
    fi = {k: acc.fisher(k) for k in params}
    scale = np.mean(np.concatenate([v.ravel() for v in fi.values()]))
    if scale > 0:
        fi = {k: v / scale for k, v in fi.items()}
    return fi


def _ewc_penalty(gan: GanPair, target: FewShotSet, config: TrainConfig, after_probe: bool) -> EWCPenalty:
    model = AdaptedModel.from_gan(gan, uniform_modes(gan.arch, "finetune"))
    anchors = {k: p.data.copy() for k, p in model.trainable().items()}
    fi = weight_fisher(model, target, config, config.iter_probe)
    if not after_probe:
        return EWCPenalty(anchors, fi, config.ewc_lambda)
    pen = EWCPenalty(anchors, fi, config.ewc_lambda)
    opt_d, opt_g = _optimizers(model, config.lr)
    batches = _Batcher(target.samples, config, gan.latent_dim, config.seed + 11)
    for _ in range(config.iter_probe):
        real, z = batches.next()
        gan_step(model, real, z, opt_d, opt_g, penalty=pen)
    return EWCPenalty(anchors, weight_fisher(model, target, config, config.iter_probe, 1), config.ewc_lambda)


# ---------------------------------------------------------------- evaluation

def evaluate(adapted: GanPair, source: GanPair, target: DomainSpec, shots: FewShotSet,
             seed: int, n: int = N_EVAL) -> dict[str, float]:
    """Metrics of an adapted generator against the target domain."""
    ext = M.extractor_for(adapted.arch.kind)
    z = _rng(seed, _STREAM_EVAL).standard_normal((n, adapted.latent_dim))
    gen = forward_generator(adapted.arch, adapted.tensors(), z).data
    ref = sample(target, n, seed=seed * 1000 + _STREAM_EVAL_POOL)
    fg, fr = ext(gen), ext(ref)
    fd = M.frechet(fg, fr)
    q = M.update_ratio(source, adapted)
    out = {
        "fid": fd.total,
        "fid_mean": fd.mean_component,
        "fid_trace": fd.trace_component,
        "kid": M.kid(fg, fr),
        "intra_div": M.intra_diversity(fg, ext(shots.samples)),
        "q_pct_G": q["G"],
        "q_pct_D": q["D"],
        "q_pct": (q["G"] + q["D"]) / 2,
    }
    if target.kind == "gmm2d":
        cov, total, hq = M.mode_coverage(gen, target)
        out.update(coverage=float(cov), total_modes=float(total), high_quality_frac=hq)
    return out


# ---------------------------------------------------------------- main adaptation

HISTORY_COLUMNS = ("iter", "d_loss", "g_loss", "fid", "kid", "coverage", "intra_div", "q_pct")


@dataclass
class AdaptationRun:
    source: Checkpoint
    report: ImportanceReport | None
    adapted: Checkpoint
    history: list[dict] = field(default_factory=list)
    model: AdaptedModel | None = None
    wall_time: float = 0.0
    probe_result: ProbeResult | None = None


def _strategy_modes(strategy: str, gan: GanPair, report: ImportanceReport | None):
    arch = gan.arch
    if strategy in ("finetune", "ewc", "ewc_ip"):
        return uniform_modes(arch, "finetune")
    if strategy == "kml_all":
        return uniform_modes(arch, "kml")
    if strategy == "adafm":
        return uniform_modes(arch, "adafm")
    inside = {"adam": "kml", "freeze_important": "freeze", "adafm_ip": "adafm"}[strategy]
    return modes_from_mask(arch, report.important, inside, "finetune")


def _check_report(report: ImportanceReport, gan: GanPair) -> None:
    known = set(kernel_ids(gan.arch))
    unknown = [k for k in report.kernel_fi if k not in known]
    if unknown:
        raise InvalidArgumentError(f"report names unknown kernels, e.g. {unknown[0]}")


def adapt(source: Checkpoint, report: ImportanceReport | None, target_shots: FewShotSet,
          config: TrainConfig, target_domain: DomainSpec | None = None,
          on_eval: Callable[[dict], None] | None = None) -> AdaptationRun:
    """Main adaptation for ``config.strategy``.

    Strategies that need importance decisions probe on the fly when
    ``report`` is None. ``target_domain`` enables the metrics history.
    """
    gan = source_gan(source)
    strategy = config.strategy
    probe_res = None
    if strategy in NEEDS_KML_REPORT and report is None:
        probe_res = run_probe(source, target_shots, config)
        report = probe_res.report
    if strategy == "adafm_ip" and report is None:
        probe_res = run_probe(source, target_shots, config, mode="adafm")
        report = probe_res.report
    if report is not None:
        _check_report(report, gan)

    penalty = None
    if strategy in ("ewc", "ewc_ip"):
        penalty = _ewc_penalty(gan, target_shots, config, after_probe=strategy == "ewc_ip")

    model = AdaptedModel.from_gan(gan, _strategy_modes(strategy, gan, report),
                                  rng=_rng(config.seed + 1, _STREAM_MOD))
    opt_d, opt_g = _optimizers(model, config.lr)
    batches = _Batcher(target_shots.samples, config, gan.latent_dim, config.seed + 1)
    history = []

    def record(it, res):
        row = {"iter": it, "d_loss": res.d_loss, "g_loss": res.g_loss}
        if target_domain is not None:
            m = evaluate(model.to_gan(), gan, target_domain, target_shots, config.seed)
            row.update(fid=m["fid"], kid=m["kid"], coverage=m.get("coverage", ""),
                       intra_div=m["intra_div"], q_pct=m["q_pct"])
        history.append(row)
        if on_eval:
            on_eval(row)

    t0 = time.perf_counter()
    res = None
    for it in range(1, config.iter_adapt + 1):
        real, z = batches.next()
        res = gan_step(model, real, z, opt_d, opt_g, penalty=penalty)
        if config.eval_interval and it % config.eval_interval == 0 and it != config.iter_adapt:
            record(it, res)
    wall = time.perf_counter() - t0
    if res is not None:
        record(config.iter_adapt, res)
    adapted = checkpoint_from_model(model, config.seed, config.iter_adapt)
    return AdaptationRun(source, report, adapted, history, model, wall, probe_res)


def few_shot_target(config: TrainConfig, k: int | None = None) -> FewShotSet:
    return few_shot(builtin_domain(config.target_domain), k or config.k_shots, config.seed)
