"""Instance generation, dataset and table persistence, and experiment runs."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .baselines import SftConfig, SpinConfig, implicit_reward, sft_train, spin_train
from .evalx import (
    ground_truth_score,
    heldout_preferences,
    kl_to_expert,
    reward_accuracy,
    sample_from_expert,
    win_rate,
)
from .irl import IrlConfig, NonFiniteLoss, irl_align
from .objectives import DemonstrationDataset, PreferenceDataset, optimal_policy, sft_loss
from .seqcore import (
    DEFAULT_CR,
    DEFAULT_FLOOR,
    ENUMERATION_CAP,
    Instance,
    PromptSet,
    RewardModel,
    SequencePolicy,
    completion_array,
    floor_log_probs,
    random_policy_table,
)

log = logging.getLogger(__name__)

METRICS_HEADER = [
    "method", "iteration", "seed", "surrogate", "exact_likelihood", "kl_to_expert",
    "reward_accuracy", "gt_score", "win_rate_vs_ref", "heldout_demo_loglik", "wall_time_s",
]
METHODS = ("sft", "spin", "irl")


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class InstanceSpec:
    V: int = 4
    H: int = 3
    prompt_count: int = 4
    prompt_length: int = 2
    r_star_kind: str = "linear_random"
    r_star_scale: float = 1.0
    feature_dim: int = 8
    beta: float = 1.0
    C_r: float = DEFAULT_CR
    ref_floor: float = DEFAULT_FLOOR
    ref_concentration: float = 1.0
    seed: int = 0

    def __post_init__(self):
        n = self.V**self.H
        if n > ENUMERATION_CAP:
            raise ValueError(f"enumeration too large: {n}")
        if not 0 < self.ref_floor < 1.0 / n:
            raise ValueError("ref_floor must lie in (0, 1/V**H)")
        if self.r_star_kind not in ("tabular_random", "linear_random"):
            raise ValueError(f"unknown r_star_kind {self.r_star_kind!r}")
        if self.V**self.prompt_length < self.prompt_count:
            raise ValueError("not enough distinct prompts of that length")
        if self.beta <= 0 or self.C_r <= 0 or self.r_star_scale < 0:
            raise ValueError("beta and C_r must be positive, r_star_scale nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "InstanceSpec":
        _reject_unknown(cls, d, "instance spec")
        return cls(**d)


def _reject_unknown(cls, d, what):
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise SchemaError(f"unknown {what} fields: {sorted(extra)}")


def make_instance(spec: InstanceSpec) -> Instance:
    rng = np.random.default_rng(spec.seed)
    prompts = []
    while len(prompts) < spec.prompt_count:
        p = tuple(int(t) for t in rng.integers(0, spec.V, spec.prompt_length))
        if p not in prompts:
            prompts.append(p)
    prompt_set = PromptSet(prompts)
    n = spec.V**spec.H
    P = spec.prompt_count
    if spec.r_star_kind == "tabular_random":
        r_star = RewardModel.tabular(prompt_set, spec.V, spec.H, spec.r_star_scale * rng.standard_normal((P, n)), spec.C_r)
    else:
        feats = rng.standard_normal((P, n, spec.feature_dim)) / np.sqrt(spec.feature_dim)
        theta = spec.r_star_scale * rng.standard_normal(spec.feature_dim)
        r_star = RewardModel.linear(prompt_set, spec.V, spec.H, feats, theta, spec.C_r)
    ref_lp = floor_log_probs(random_policy_table(rng, P, n, spec.ref_concentration), spec.ref_floor)
    pi_ref = SequencePolicy(prompt_set, spec.V, spec.H, ref_lp)
    pi_expert = optimal_policy(r_star, pi_ref, spec.beta)
    return Instance(
        V=spec.V, H=spec.H, prompt_set=prompt_set, r_star=r_star, pi_ref=pi_ref, pi_expert=pi_expert,
        beta=spec.beta, C_r=spec.C_r, C_p=float(pi_ref.log_probs.min()), seed=spec.seed,
    )


def sample_demonstrations(instance: Instance, n: int, seed: int) -> DemonstrationDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    p, j = sample_from_expert(instance, n, np.random.default_rng(seed))
    comps = completion_array(instance.V, instance.H)
    prompts = instance.prompt_set.prompts
    return DemonstrationDataset([(prompts[a], tuple(int(t) for t in comps[b])) for a, b in zip(p, j)])


# -- JSONL datasets -------------------------------------------------------------------

DEMO_FIELDS = ("prompt", "completion")
PREF_FIELDS = ("prompt", "chosen", "rejected")


def write_dataset(path, dataset) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    with open(path, "w") as f:
        if isinstance(dataset, DemonstrationDataset):
            if dataset.weights is not None:
                raise ValueError("weighted datasets have no JSONL form")
            for x, y in dataset.items:
                f.write(json.dumps({"prompt": list(x), "completion": list(y)}) + "\n")
        elif isinstance(dataset, PreferenceDataset):
            for x, w, l in dataset.items:
                f.write(json.dumps({"prompt": list(x), "chosen": list(w), "rejected": list(l)}) + "\n")
        else:
            raise TypeError(f"cannot serialize {type(dataset).__name__}")


def _token_list(value, V, lineno, name, H=None):
    if not isinstance(value, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in value):
        raise SchemaError(f"line {lineno}: field {name!r} must be a list of ints")
    if V is not None and any(not 0 <= t < V for t in value):
        raise SchemaError(f"line {lineno}: token out of range in {name!r} (V={V})")
    if H is not None and len(value) != H:
        raise SchemaError(f"line {lineno}: horizon mismatch in {name!r}: expected {H}, got {len(value)}")
    return tuple(value)


def read_dataset(path, kind: str, V: int | None = None, H: int | None = None):
    """Parse a ``demos`` or ``prefs`` JSONL file; unknown or missing fields are errors."""
    names = {"demos": DEMO_FIELDS, "prefs": PREF_FIELDS}[kind]
    items = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise SchemaError(f"line {lineno}: expected an object")
            missing = [k for k in names if k not in rec]
            if missing:
                raise SchemaError(f"line {lineno}: missing field(s) {missing}")
            extra = sorted(set(rec) - set(names))
            if extra:
                raise SchemaError(f"line {lineno}: unknown field(s) {extra}")
            items.append(tuple(
                _token_list(rec[k], V, lineno, k, None if k == "prompt" else H) for k in names
            ))
    if kind == "demos":
        return DemonstrationDataset(items)
    return PreferenceDataset(items)


def dataset_io(path, mode: str, payload=None, V: int | None = None, H: int | None = None):
    """``mode='write'`` stores ``payload``; ``mode='read'`` returns a dataset
    (``payload`` names the kind: ``'demos'`` or ``'prefs'``)."""
    if mode == "write":
        write_dataset(path, payload)
        return None
    if mode == "read":
        return read_dataset(path, payload or "demos", V, H)
    raise ValueError(f"mode must be 'read' or 'write', not {mode!r}")


# -- tables -------------------------------------------------------------------------

def policy_to_dict(policy: SequencePolicy) -> dict:
    return {
        "V": policy.V,
        "H": policy.H,
        "prompts": [list(p) for p in policy.prompts.prompts],
        "prompt_weights": policy.prompts.weights.tolist(),
        "probs": policy.probs.tolist(),
        "log_probs": policy.log_probs.tolist(),
    }


def policy_from_dict(d: dict) -> SequencePolicy:
    prompts = PromptSet(d["prompts"], d.get("prompt_weights"))
    if "log_probs" in d:
        return SequencePolicy(prompts, d["V"], d["H"], np.array(d["log_probs"], dtype=float))
    return SequencePolicy.from_probs(prompts, d["V"], d["H"], d["probs"])


def reward_to_dict(reward: RewardModel) -> dict:
    d = {
        "kind": reward.kind,
        "V": reward.V,
        "H": reward.H,
        "C_r": reward.C_r,
        "prompts": [list(p) for p in reward.prompts.prompts],
        "params": reward.params.tolist(),
    }
    if reward.kind == "linear":
        d["features"] = reward.features.tolist()
    return d


def reward_from_dict(d: dict) -> RewardModel:
    prompts = PromptSet(d["prompts"])
    feats = np.array(d["features"]) if d["kind"] == "linear" else None
    return RewardModel(d["kind"], prompts, d["V"], d["H"], np.array(d["params"], dtype=float), d["C_r"], feats)


def _dump(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f)


def _load(path):
    with open(path) as f:
        return json.load(f)


def save_instance(instance: Instance, spec: InstanceSpec, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump({"spec": asdict(spec), "C_p": instance.C_p}, out / "instance.json")
    _dump(reward_to_dict(instance.r_star), out / "r_star.json")
    _dump(policy_to_dict(instance.pi_ref), out / "pi_ref.json")
    _dump(policy_to_dict(instance.pi_expert), out / "pi_expert.json")


def load_instance(path) -> tuple[Instance, InstanceSpec]:
    d = Path(path)
    meta = _load(d / "instance.json")
    spec = InstanceSpec.from_dict(meta["spec"])
    r_star = reward_from_dict(_load(d / "r_star.json"))
    pi_ref = policy_from_dict(_load(d / "pi_ref.json"))
    pi_expert = policy_from_dict(_load(d / "pi_expert.json"))
    inst = Instance(
        V=spec.V, H=spec.H, prompt_set=pi_ref.prompts, r_star=r_star, pi_ref=pi_ref, pi_expert=pi_expert,
        beta=spec.beta, C_r=spec.C_r, C_p=meta["C_p"], seed=spec.seed,
    )
    return inst, spec


# -- experiments --------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    instance: InstanceSpec = field(default_factory=InstanceSpec)
    methods: tuple = METHODS
    seed: int = 0
    n_demos: int = 200
    n_heldout_demos: int = 1000
    n_heldout_prefs: int = 1000
    n_matches: int = 2000
    reward_kind: str = "linear"  # "linear" needs a linear judge to borrow features from
    sft: SftConfig = field(default_factory=SftConfig)
    spin: SpinConfig = field(default_factory=SpinConfig)
    irl: IrlConfig = field(default_factory=lambda: IrlConfig(beta=1.0, K=3, reward_steps_per_iter=10,
                                                            reward_learning_rate=0.03))
    record_wall_time: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _reject_unknown(cls, d, "experiment config")
        d = dict(d)
        base = cls()
        kw = {}
        for name, sub in (("instance", InstanceSpec), ("sft", SftConfig), ("spin", SpinConfig), ("irl", IrlConfig)):
            if name in d:
                _reject_unknown(sub, d[name], f"{name} config")
                kw[name] = sub(**{**asdict(getattr(base, name)), **d.pop(name)})
        if "methods" in d:
            methods = tuple(d.pop("methods"))
            bad = [m for m in methods if m not in METHODS]
            if bad:
                raise SchemaError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
            kw["methods"] = methods
        kw.update(d)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d


def default_config_dict() -> dict:
    return ExperimentConfig().to_dict()


def _derive(seed, *tags):
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)

    def add(self, **row):
        missing = set(METRICS_HEADER) - set(row)
        if missing:
            raise ValueError(f"metrics row missing {sorted(missing)}")
        self.rows.append(row)

    def rows_for(self, method):
        return [r for r in self.rows if r["method"] == method]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in self.rows:
            w.writerow([_fmt(r[k]) for k in METRICS_HEADER])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


class ExperimentContext:
    """Instance, data and evaluation sets shared by every method in a run."""

    def __init__(self, config: ExperimentConfig, instance: Instance | None = None, demos=None):
        self.config = config
        self.instance = make_instance(config.instance) if instance is None else instance
        s = config.seed
        self.demos = sample_demonstrations(self.instance, config.n_demos, _derive(s, 1)) if demos is None else demos
        self.heldout_demos = sample_demonstrations(self.instance, config.n_heldout_demos, _derive(s, 2))
        self.heldout_prefs = heldout_preferences(self.instance, config.n_heldout_prefs, _derive(s, 3))

    def init_reward(self) -> RewardModel:
        inst = self.instance
        if self.config.reward_kind == "linear":
            if inst.r_star.kind != "linear":
                raise ValueError("reward_kind 'linear' needs a linear judge (r_star_kind='linear_random')")
            return RewardModel.linear(inst.prompt_set, inst.V, inst.H, inst.r_star.features, C_r=inst.C_r)
        return RewardModel.tabular(inst.prompt_set, inst.V, inst.H, C_r=inst.C_r)

    def row(self, method, iteration, policy, scorer, surrogate, wall):
        inst, cfg = self.instance, self.config
        return dict(
            method=method,
            iteration=iteration,
            seed=cfg.seed,
            surrogate=float(surrogate),
            exact_likelihood=float(np.sum(inst.prompt_set.weights[:, None] * inst.pi_expert.probs * policy.log_probs)),
            kl_to_expert=kl_to_expert(policy, inst),
            reward_accuracy=reward_accuracy(scorer, self.heldout_prefs),
            gt_score=ground_truth_score(policy, inst.r_star, inst.prompt_set),
            win_rate_vs_ref=win_rate(policy, inst.pi_ref, inst.r_star, inst.prompt_set, cfg.n_matches,
                                     _derive(cfg.seed, 4, iteration)),
            heldout_demo_loglik=-sft_loss(policy, self.heldout_demos),
            wall_time_s=float(wall) if cfg.record_wall_time else 0.0,
        )

    def run_sft(self):
        t0 = time.perf_counter()
        policy = sft_train(self.instance.pi_ref, self.demos, self.config.sft)
        scorer = implicit_reward(policy, self.instance.pi_ref, self.config.spin.dpo_beta)
        row = self.row("sft", 1, policy, scorer, -sft_loss(policy, self.demos), time.perf_counter() - t0)
        return policy, [row]

    def run_spin(self):
        rows = []
        t0 = [time.perf_counter()]
        ref = self.instance.pi_ref
        beta = self.config.spin.dpo_beta

        def on_iter(it, policy):
            scorer = implicit_reward(policy, ref, beta)
            rows.append(self.row("spin", it + 1, policy, scorer, -sft_loss(policy, self.demos),
                                 time.perf_counter() - t0[0]))
            t0[0] = time.perf_counter()

        policy, _ = spin_train(ref, self.demos, self.config.spin, callback=on_iter)
        return policy, rows

    def run_irl(self):
        rows = []

        def on_iter(rec):
            rows.append(self.row("irl", rec.iteration + 1, rec.policy, rec.reward, rec.surrogate, rec.wall_time))

        reward, policy, records = irl_align(self.demos, self.instance.pi_ref, self.config.irl, self.instance,
                                            init_reward=self.init_reward(), callback=on_iter)
        return (reward, policy), rows


def run_experiment(config_path, out_dir, threads: int | None = None) -> tuple[RunMetrics, int]:
    """Run every configured method on one instance; write ``metrics.csv`` and
    ``summary.txt`` into ``out_dir``. Returns the metrics and an exit code."""
    from threadpoolctl import threadpool_limits

    with open(config_path) as f:
        config = ExperimentConfig.from_dict(json.load(f))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = RunMetrics()
    code = 0
    with threadpool_limits(limits=threads):
        ctx = ExperimentContext(config)
        for method in config.methods:
            try:
                _, rows = getattr(ctx, f"run_{method}")()
            except NonFiniteLoss as exc:
                log.error("%s aborted: %s", method, exc)
                code = 2
                break
            for r in rows:
                if not all(np.isfinite(r[k]) for k in METRICS_HEADER[3:]):
                    log.error("non-finite metric in %s iteration %s", method, r["iteration"])
                    code = 2
                metrics.add(**r)
            if code:
                break
    (out / "metrics.csv").write_text(metrics.to_csv())
    (out / "summary.txt").write_text(summarize(metrics))
    return metrics, code


def summarize(metrics: RunMetrics) -> str:
    lines = []
    for method in METHODS:
        rows = metrics.rows_for(method)
        if not rows:
            continue
        r = rows[-1]
        lines.append(
            f"{method:5s} iter {r['iteration']}: heldout loglik {r['heldout_demo_loglik']:.4f}, "
            f"KL to expert {r['kl_to_expert']:.4f}, reward acc {r['reward_accuracy']:.3f}, "
            f"gt score {r['gt_score']:.4f}, win rate vs ref {r['win_rate_vs_ref']:.3f}"
        )
    return "\n".join(lines) + "\n"
