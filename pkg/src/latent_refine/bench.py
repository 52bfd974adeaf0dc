"""Experiment harness: ablations, (alpha, eta) sweeps, token accounting, cost arms.

Every report here is a pure function of its inputs and seeds, except the
wall-time and memory columns of the cost report. CSV files are written with
``repr`` floats so they parse back exactly.
"""

from __future__ import annotations

import csv
import logging
import tempfile
import time
import tracemalloc
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import MODES, Featurizer, RefinementConfig
from .dynamics import CheckpointPair, DynamicsModel, OracleModel, make_oracle_arm
from .engine import Trajectory, evaluate
from .tasks import DEFAULT_TOKENS_PER_STEP, TaskInstance, gen_dag_reach, supervision_view
from .train import TrainConfig, make_checkpoint_pair, train_mlp

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2)
ALPHA_RANGE = (0.01, 1.0)
ETA_DYNAMIC_RANGE = 5000.0


# ---------------------------------------------------------------------------
# accuracy


def batch_accuracy(trajectories: Sequence[Trajectory]) -> float:
    if not trajectories:
        raise ValueError("no trajectories to score")
    probs = np.stack([t.answer.probabilities for t in trajectories])
    gold = np.array([t.answer.labels.index(t.gold) if t.gold in t.answer.labels else -1 for t in trajectories])
    return int(np.count_nonzero(np.argmax(probs, axis=1) == gold)) * 100.0 / len(trajectories)


def streaming_accuracy(trajectories: Sequence[Trajectory]) -> float:
    """Independent tally: compares argmax labels one at a time."""
    hits = total = 0
    for traj in trajectories:
        probs = traj.answer.probabilities
        best = max(range(len(probs)), key=lambda i: (probs[i], -i))
        hits += traj.answer.labels[best] == traj.gold
        total += 1
    if total == 0:
        raise ValueError("no trajectories to score")
    return hits * 100.0 / total


def accuracy_of(testset: Sequence[TaskInstance], model: DynamicsModel, pair: CheckpointPair | None,
                cfg: RefinementConfig, workers: int = 1) -> float:
    trajs = evaluate(testset, model, pair, cfg, workers)
    acc = batch_accuracy(trajs)
    check = streaming_accuracy(trajs)
    if acc != check:
        raise AssertionError(f"accuracy tallies disagree: batch {acc} vs streaming {check}")
    return acc


# ---------------------------------------------------------------------------
# CSV helpers


def _write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


def _read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _seeds_str(seeds: Sequence[int]) -> str:
    return " ".join(str(s) for s in seeds)


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    mode: str
    accuracy: float
    gain_pct: float          # relative to mode=none, in percent of its accuracy
    delta: float             # absolute difference in accuracy points
    per_seed: list[float] = field(default_factory=list)


@dataclass
class AblationReport:
    rows: list[AblationRow]
    seeds: tuple[int, ...]
    n_instances: int

    def __post_init__(self):
        if [r.mode for r in self.rows] != list(MODES):
            raise ValueError(f"ablation rows must be {MODES}")
        for r in self.rows:
            if not 0.0 <= r.accuracy <= 100.0:
                raise ValueError(f"accuracy {r.accuracy} outside [0, 100]")

    def row(self, mode: str) -> AblationRow:
        return next(r for r in self.rows if r.mode == mode)

    def accuracy(self, mode: str) -> float:
        return self.row(mode).accuracy

    @classmethod
    def from_per_seed(cls, per_seed: dict[str, list[float]], seeds: Sequence[int], n_instances: int):
        base = float(np.mean(per_seed["none"]))
        rows = []
        for mode in MODES:
            acc = float(np.mean(per_seed[mode]))
            gain = 0.0 if mode == "none" else ((acc - base) / base * 100.0 if base > 0 else float("nan"))
            rows.append(AblationRow(mode, acc, gain, acc - base if mode != "none" else 0.0,
                                    [float(v) for v in per_seed[mode]]))
        return cls(rows, tuple(int(s) for s in seeds), int(n_instances))

    def to_csv(self, path) -> Path:
        header = ["mode", "accuracy", "gain_pct", "delta", "per_seed", "seeds", "n_instances"]
        rows = [[r.mode, r.accuracy, r.gain_pct, r.delta, " ".join(repr(v) for v in r.per_seed),
                 _seeds_str(self.seeds), self.n_instances] for r in self.rows]
        return _write_csv(path, header, rows)

    @classmethod
    def from_csv(cls, path) -> "AblationReport":
        recs = _read_csv(path)
        rows = [AblationRow(r["mode"], float(r["accuracy"]), float(r["gain_pct"]), float(r["delta"]),
                            [float(v) for v in r["per_seed"].split()]) for r in recs]
        seeds = tuple(int(s) for s in recs[0]["seeds"].split())
        return cls(rows, seeds, int(recs[0]["n_instances"]))

    def format(self) -> str:
        lines = [f"{'mode':<9} {'acc %':>7} {'gain %':>7} {'delta':>6}"]
        for r in self.rows:
            lines.append(f"{r.mode:<9} {r.accuracy:7.2f} {r.gain_pct:7.2f} {r.delta:6.2f}")
        return "\n".join(lines)


def run_ablation(testset: Sequence[TaskInstance], model: DynamicsModel, pair: CheckpointPair | None,
                 base_cfg: RefinementConfig, seeds: Sequence[int] = DEFAULT_SEEDS,
                 workers: int = 1) -> AblationReport:
    """Evaluate all four modes on the same instances for every seed.

    Seeds reach the models through ``reseed``; deterministic backends ignore it.
    """
    if not testset:
        raise ValueError("testset is empty")
    if not seeds:
        raise ValueError("need at least one seed")
    per_seed = {m: [] for m in MODES}
    for seed in seeds:
        m = model.reseed(seed)
        p = pair.reseed(seed) if pair is not None else None
        for mode in MODES:
            per_seed[mode].append(accuracy_of(testset, m, p, base_cfg.replace(mode=mode), workers))
    return AblationReport.from_per_seed(per_seed, seeds, len(testset))


def merge_ablations(reports: Sequence[AblationReport]) -> AblationReport:
    """Pool reports whose seeds index independent training runs."""
    if not reports:
        raise ValueError("nothing to merge")
    per_seed = {m: [v for r in reports for v in r.row(m).per_seed] for m in MODES}
    seeds = [s for r in reports for s in r.seeds]
    return AblationReport.from_per_seed(per_seed, seeds, reports[0].n_instances)


# ---------------------------------------------------------------------------
# sweep


def default_alpha_grid() -> list[float]:
    return [0.01, 0.25, 0.5, 0.75, 1.0]


def eta_range(dim: int) -> tuple[float, float]:
    """Step sizes whose effective coefficient ``2 * eta / d`` spans [2e-4, 1]."""
    hi = dim / 2.0
    return hi / ETA_DYNAMIC_RANGE, hi


def default_eta_grid(dim: int, n: int = 5) -> list[float]:
    lo, hi = eta_range(dim)
    return [float(v) for v in np.geomspace(lo, hi, n)]


@dataclass
class SweepGrid:
    alphas: list[float]
    etas: list[float]
    accuracy: np.ndarray     # (len(alphas), len(etas))
    rounds_R: int = 3

    def __post_init__(self):
        self.accuracy = np.asarray(self.accuracy, dtype=np.float64)
        if self.accuracy.shape != (len(self.alphas), len(self.etas)):
            raise ValueError("accuracy matrix does not match the grid")
        if not np.all(np.isfinite(self.accuracy)):
            raise ValueError("sweep grid has missing cells")

    def to_csv(self, path) -> Path:
        rows = [[float(a), float(e), float(self.accuracy[i, j]), self.rounds_R]
                for i, a in enumerate(self.alphas) for j, e in enumerate(self.etas)]
        return _write_csv(path, ["alpha", "eta", "accuracy", "rounds_R"], rows)

    @classmethod
    def from_csv(cls, path) -> "SweepGrid":
        recs = _read_csv(path)
        alphas = sorted({float(r["alpha"]) for r in recs}, key=lambda a: [float(x["alpha"]) for x in recs].index(a))
        etas = sorted({float(r["eta"]) for r in recs}, key=lambda e: [float(x["eta"]) for x in recs].index(e))
        acc = np.full((len(alphas), len(etas)), np.nan)
        for r in recs:
            acc[alphas.index(float(r["alpha"])), etas.index(float(r["eta"]))] = float(r["accuracy"])
        return cls(alphas, etas, acc, int(recs[0]["rounds_R"]))


def run_sweep(testset: Sequence[TaskInstance], model: DynamicsModel, pair: CheckpointPair,
              alphas: Sequence[float], etas: Sequence[float], rounds_R: int = 3,
              base_cfg: RefinementConfig | None = None, seed: int = 0, workers: int = 1) -> SweepGrid:
    """Accuracy of mode ``both`` over an (alpha, eta) grid.

    ``rounds_R`` refinement rounds are spread over the query (one residual blend
    and one contrastive update per round).
    """
    if not testset:
        raise ValueError("testset is empty")
    if not alphas or not etas:
        raise ValueError("alpha and eta grids must be non-empty")
    bad_a = [a for a in alphas if not ALPHA_RANGE[0] <= a <= ALPHA_RANGE[1]]
    if bad_a:
        raise ValueError(f"alpha values {bad_a} outside {ALPHA_RANGE}")
    lo, hi = eta_range(model.dim)
    bad_e = [e for e in etas if not lo * (1 - 1e-9) <= e <= hi * (1 + 1e-9)]
    if bad_e:
        raise ValueError(f"eta values {bad_e} outside [{lo}, {hi}] for d={model.dim}")
    base = base_cfg or RefinementConfig()
    base = base.replace(mode="both", rounds_R=rounds_R, round_policy="per_query")
    m = model.reseed(seed)
    p = pair.reseed(seed)
    acc = np.empty((len(alphas), len(etas)))
    for i, a in enumerate(alphas):
        for j, e in enumerate(etas):
            acc[i, j] = accuracy_of(testset, m, p, base.replace(alpha=float(a), eta=float(e)), workers)
    return SweepGrid([float(a) for a in alphas], [float(e) for e in etas], acc, rounds_R)


# ---------------------------------------------------------------------------
# tokens


def token_reduction(cot_tokens: float, latent_tokens: float) -> float:
    """Percent fewer emitted tokens; zero when there is no reasoning to save."""
    if cot_tokens <= latent_tokens:
        return 0.0
    return (1.0 - latent_tokens / cot_tokens) * 100.0


@dataclass
class TokenRow:
    family: str
    n_instances: int
    mean_cot: float
    mean_latent: float
    mean_markers: float      # latent steps, non-text, not counted as emitted
    reduction_pct: float


@dataclass
class TokenReport:
    rows: list[TokenRow]
    tokens_per_step: int

    def row(self, family: str) -> TokenRow:
        return next(r for r in self.rows if r.family == family)

    def to_csv(self, path) -> Path:
        header = [f.name for f in fields(TokenRow)] + ["tokens_per_step"]
        return _write_csv(path, header, [list(asdict(r).values()) + [self.tokens_per_step] for r in self.rows])

    @classmethod
    def from_csv(cls, path) -> "TokenReport":
        recs = _read_csv(path)
        rows = [TokenRow(r["family"], int(r["n_instances"]), float(r["mean_cot"]), float(r["mean_latent"]),
                         float(r["mean_markers"]), float(r["reduction_pct"])) for r in recs]
        return cls(rows, int(recs[0]["tokens_per_step"]) if recs else DEFAULT_TOKENS_PER_STEP)


def run_token_report(testset: Sequence[TaskInstance], cfg: RefinementConfig | None = None,
                     tokens_per_step: int = DEFAULT_TOKENS_PER_STEP) -> TokenReport:
    """Compare emitted tokens of step-by-step decoding with latent decoding.

    Step-by-step decoding emits ``k`` tokens per gold step plus the answer;
    latent decoding emits the answer only, with ``T`` latent steps reported
    separately as markers.
    """
    if tokens_per_step < 1:
        raise ValueError("tokens_per_step must be >= 1")
    cfg = cfg or RefinementConfig()
    by_family: dict[str, list[TaskInstance]] = {}
    for x in testset:
        by_family.setdefault(x.family, []).append(x)
    rows = []
    for family in sorted(by_family):
        xs = by_family[family]
        cot = [len(supervision_view(x, "cot", tokens_per_step).output_tokens) for x in xs]
        latent = [len(supervision_view(x, "latent_cot", tokens_per_step).output_tokens) for x in xs]
        mc, ml = float(np.mean(cot)), float(np.mean(latent))
        rows.append(TokenRow(family, len(xs), mc, ml, float(cfg.steps_T), token_reduction(mc, ml)))
    return TokenReport(rows, tokens_per_step)


# ---------------------------------------------------------------------------
# arms


@dataclass(frozen=True)
class OracleArmConfig:
    """Noisy oracle main model with a clean oracle (good) and anti-oracle (bad)."""

    family: str = "dag_reach"
    n_instances: int = 1000
    data_seed: int = 0
    dim: int = 64
    featurizer_seed: int = 0
    pull: float = 1.0
    noise_seed: int = 0
    target_accuracy: tuple[float, float] = (55.0, 75.0)
    refinement: RefinementConfig = RefinementConfig(alpha=0.3, eta=8.0, steps_T=3, rounds_R=1, mode="both")


@dataclass
class OracleArm:
    testset: list[TaskInstance]
    model: OracleModel
    pair: CheckpointPair
    noise: float
    baseline_accuracy: float
    config: OracleArmConfig


def calibrate_noise(testset: Sequence[TaskInstance], build: Callable[[float], tuple[DynamicsModel, CheckpointPair]],
                    cfg: RefinementConfig, band: tuple[float, float], hi: float = 4.0,
                    max_iter: int = 40) -> tuple[float, float]:
    """Bisect the noise level until mode=none accuracy lands inside ``band``."""
    lo_acc, hi_acc = band
    target = 0.5 * (lo_acc + hi_acc)
    none = cfg.replace(mode="none")
    lo = 0.0
    while accuracy_of(testset, *build(hi), none) > target:
        hi *= 2.0
        if hi > 1e6:
            raise RuntimeError("noise cannot push accuracy into the target band")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        acc = accuracy_of(testset, *build(mid), none)
        if lo_acc <= acc <= hi_acc and abs(acc - target) < 2.5:
            return mid, acc
        if acc > target:
            lo = mid
        else:
            hi = mid
    mid = 0.5 * (lo + hi)
    acc = accuracy_of(testset, *build(mid), none)
    if not lo_acc <= acc <= hi_acc:
        raise RuntimeError(f"calibration ended at {acc:.2f}% outside {band}")
    return mid, acc


def build_oracle_arm(cfg: OracleArmConfig = OracleArmConfig(), testset: Sequence[TaskInstance] | None = None) -> OracleArm:
    from .tasks import generate

    xs = list(testset) if testset is not None else generate(cfg.family, cfg.n_instances, seed=cfg.data_seed)
    feat = Featurizer.create(xs[0].width, cfg.dim, cfg.featurizer_seed)
    n_choices = len(xs[0].choices)

    def build(noise):
        return make_oracle_arm(feat, noise, cfg.pull, cfg.noise_seed, n_choices)

    noise, acc = calibrate_noise(xs, build, cfg.refinement, cfg.target_accuracy)
    model, pair = build(noise)
    return OracleArm(xs, model, pair, noise, acc, cfg)


@dataclass(frozen=True)
class MlpArmConfig:
    """Trained-MLP arm on dag_reach: mid-training model refined by early/late snapshots."""

    n_train: int = 2000
    n_test: int = 500
    fmt: str = "latent_cot"
    bad_epoch: int = 5
    main_epoch: int = 15
    good_epoch: int = 30
    train: TrainConfig = TrainConfig(epochs=30, lr=0.01, batch_size=8, latent_weight=3.0,
                                     checkpoint_epochs=(5, 15, 30), dim=64, hidden=256, steps_T=3)
    refinement: RefinementConfig = RefinementConfig(alpha=0.3, eta=8.0, steps_T=3, rounds_R=1, mode="both")


@dataclass
class MlpArm:
    train: list[TaskInstance]
    test: list[TaskInstance]
    model: DynamicsModel
    pair: CheckpointPair
    snapshots: dict
    seed: int


def build_mlp_arm(seed: int, cfg: MlpArmConfig = MlpArmConfig(), out_dir=None) -> MlpArm:
    data = gen_dag_reach(cfg.n_train + cfg.n_test, seed=seed)
    train, test = data[:cfg.n_train], data[cfg.n_train:]
    tcfg = TrainConfig(**{**asdict_shallow(cfg.train), "seed": seed})
    res = train_mlp(train, cfg.fmt, tcfg, out_dir=out_dir)
    pair = make_checkpoint_pair(res.snapshots, cfg.bad_epoch, cfg.good_epoch, test, tcfg.steps_T)
    return MlpArm(train, test, res.snapshots[cfg.main_epoch], pair, res.snapshots, seed)


def asdict_shallow(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def run_mlp_ablation(seeds: Sequence[int], cfg: MlpArmConfig = MlpArmConfig()) -> AblationReport:
    """One training run per seed; each run is scored once and the runs are pooled."""
    reports = []
    for seed in seeds:
        arm = build_mlp_arm(seed, cfg)
        rep = run_ablation(arm.test, arm.model, arm.pair, cfg.refinement, seeds=(seed,))
        log.info("seed %d:\n%s", seed, rep.format())
        reports.append(rep)
    return merge_ablations(reports)


# ---------------------------------------------------------------------------
# cost arms

COST_ARMS = ("baseline", "inference_only", "train_only", "train_and_inference")


@dataclass
class CostRow:
    arm: str
    accuracy: float
    wall_time_s: float
    peak_memory_mb: float
    checkpoints_written: int


@dataclass
class CostReport:
    rows: list[CostRow]
    n_test: int

    def row(self, arm: str) -> CostRow:
        return next(r for r in self.rows if r.arm == arm)

    def to_csv(self, path) -> Path:
        header = [f.name for f in fields(CostRow)] + ["n_test"]
        return _write_csv(path, header, [list(asdict(r).values()) + [self.n_test] for r in self.rows])

    @classmethod
    def from_csv(cls, path) -> "CostReport":
        recs = _read_csv(path)
        rows = [CostRow(r["arm"], float(r["accuracy"]), float(r["wall_time_s"]), float(r["peak_memory_mb"]),
                        int(r["checkpoints_written"])) for r in recs]
        return cls(rows, int(recs[0]["n_test"]))


@dataclass(frozen=True)
class CostConfig:
    arm: MlpArmConfig = MlpArmConfig()
    extra_epochs: int = 5
    seed: int = 0


def _count_files(d: Path) -> int:
    return sum(1 for p in d.rglob("*") if p.is_file())


def _measure(fn):
    tracemalloc.start()
    t0 = time.perf_counter()
    try:
        out = fn()
    finally:
        elapsed = time.perf_counter() - t0
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
    return out, elapsed, peak / 2**20


def run_cost_arms(trainset: Sequence[TaskInstance], testset: Sequence[TaskInstance],
                  cfg: CostConfig = CostConfig(), out_dir=None) -> CostReport:
    """Refinement at inference only, during continued training only, or both.

    The base model and reference pair come from one training run. The two
    training arms continue from the main snapshot for ``extra_epochs`` with
    refinement inside the unrolled recursion and write their snapshots.
    """
    if not trainset or not testset:
        raise ValueError("trainset and testset must be non-empty")
    arm = cfg.arm
    tcfg = TrainConfig(**{**asdict_shallow(arm.train), "seed": cfg.seed})
    base = train_mlp(trainset, arm.fmt, tcfg)
    main = base.snapshots[arm.main_epoch]
    pair = make_checkpoint_pair(base.snapshots, arm.bad_epoch, arm.good_epoch)
    refined = arm.refinement
    plain = refined.replace(mode="none")
    tmp = None
    if out_dir is None:
        tmp = tempfile.TemporaryDirectory()
        out_dir = tmp.name
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    try:
        def infer_arm(name, model, cfg_):
            before = _count_files(out_dir)
            acc, wall, peak = _measure(lambda: accuracy_of(testset, model, pair, cfg_))
            rows.append(CostRow(name, acc, wall, peak, _count_files(out_dir) - before))

        infer_arm("baseline", main, plain)
        infer_arm("inference_only", main, refined)

        ccfg = TrainConfig(**{**asdict_shallow(tcfg), "epochs": cfg.extra_epochs,
                              "checkpoint_epochs": (cfg.extra_epochs,), "train_refinement": refined})
        for name, inf_cfg in (("train_only", plain), ("train_and_inference", refined)):
            sub = out_dir / name
            before = _count_files(out_dir)

            def job():
                res = train_mlp(trainset, arm.fmt, ccfg, init=main, pair=pair, out_dir=sub)
                return accuracy_of(testset, res.model, pair, inf_cfg)

            acc, wall, peak = _measure(job)
            rows.append(CostRow(name, acc, wall, peak, _count_files(out_dir) - before))
    finally:
        if tmp is not None:
            tmp.cleanup()
    return CostReport(rows, len(testset))
