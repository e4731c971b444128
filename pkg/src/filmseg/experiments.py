"""Experiment drivers: metadata gain, missing-label robustness, few-label sweep.

Every repetition derives its own split/init/batch seeds from the base seed,
and the compared arms inside a repetition share those seeds so the paired
signed-rank test isolates the conditioning effect. Repetitions are
independent and may run in worker processes; results are assembled in
submission order, so reports are deterministic for a fixed base seed
regardless of the worker count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import AMBIGUOUS_CLASSES, MULTIORGAN_CLASSES, Sample, SplitSpec, split_per_subject
from .evaluate import ExperimentReport, label_swap_matrix, per_sample_dice, wilcoxon_one_sided
from .model import ModelConfig, init_params
from .train import TrainConfig, train

OVERALL = "all"

EXPERIMENT_KINDS = ("exp1", "exp2-missing", "exp2-sweep", "label-swap")


@dataclass(frozen=True)
class ExperimentConfig:
    repetitions: int = 10
    base_seed: int = 0
    workers: int = 1
    depth: int = 3
    base_filters: int = 8
    in_channels: int = 1
    n_classes: int = 3
    constant_class: int = 0          # the fixed vector fed to the no-metadata arm
    sweep_sizes: tuple[int, ...] = (2, 4, 6, 8, 12)
    sweep_minority: int = 0
    sweep_majority: int = 1
    sweep_majority_count: int = 12
    sweep_test_subjects: int = 25
    # desk-scale guard: joint-dice training occasionally collapses one class;
    # train up to max_restarts fresh inits and keep the best-validation model
    max_restarts: int = 5
    healthy_valid_dice: float = 0.7
    control_valid_dice: float = 0.25
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError(f"repetitions must be >= 1, got {self.repetitions}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.max_restarts < 1:
            raise ValueError(f"max_restarts must be >= 1, got {self.max_restarts}")

    def model_config(self, film_enabled: bool) -> ModelConfig:
        return ModelConfig(
            depth=self.depth,
            in_channels=self.in_channels,
            base_filters=self.base_filters,
            n_metadata_classes=self.n_classes,
            film_enabled=film_enabled,
        )


def derive_seed(base_seed: int, *parts: int) -> int:
    return int(np.random.SeedSequence([base_seed, *parts]).generate_state(1)[0])


def _subset(samples: list[Sample], ids) -> list[Sample]:
    wanted = set(ids)
    return [s for s in samples if s.subject_id in wanted]


def _map_jobs(fn, jobs: list[dict], workers: int) -> list:
    if workers <= 1:
        return [fn(**job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, **job) for job in jobs]
        return [f.result() for f in futures]


def _group_scores(test_samples: list[Sample], scores: list[float], class_names) -> list[tuple[str, float]]:
    out = [(OVERALL, float(np.mean(scores)))]
    classes = np.asarray([s.class_id for s in test_samples])
    arr = np.asarray(scores)
    for cid, name in enumerate(class_names):
        sel = classes == cid
        if sel.any():
            out.append((name, float(arr[sel].mean())))
    return out


def _min_class_valid_dice(model, valid_samples: list[Sample], input_class: int | None) -> float:
    scores = np.asarray(per_sample_dice(model, valid_samples, input_class=input_class))
    classes = np.asarray([s.class_id for s in valid_samples])
    return min(float(scores[classes == c].mean()) for c in sorted(set(classes.tolist())))


def _train_with_restarts(model_factory, samples, split: SplitSpec, tcfg: TrainConfig,
                         cfg: ExperimentConfig, metadata_mode: str, healthy_min: float):
    """Train candidates from successive init seeds until one looks healthy on
    validation (every class above ``healthy_min`` mean Dice); return the
    candidate with the best worst-class validation Dice.

    The test split plays no part in the selection.
    """
    valid = _subset(samples, split.valid)
    input_class = cfg.constant_class if metadata_mode == "constant" else None
    best_model, best_metric = None, -1.0
    for k in range(cfg.max_restarts):
        model = model_factory(k)
        # restarts draw a fresh batch-order stream too, not just a fresh init
        tcfg_k = tcfg if k == 0 else replace(tcfg, seed=derive_seed(tcfg.seed, k))
        train(model, samples, split, tcfg_k, metadata_mode=metadata_mode, constant_class=cfg.constant_class)
        metric = _min_class_valid_dice(model, valid, input_class)
        if metric > best_metric:
            best_model, best_metric = model, metric
        if best_metric >= healthy_min:
            break
    return best_model


# ---------------------------------------------------------------------------
# Experiment 1: metadata gain on the ambiguous corpus (and label-swap probe)


def _exp1_job(samples, rep, arm, cfg: ExperimentConfig, with_swap: bool):
    split = split_per_subject(samples, seed=derive_seed(cfg.base_seed, 101, rep))
    tcfg = replace(cfg.train, seed=derive_seed(cfg.base_seed, 103, rep))
    mode = "true" if arm == "prior" else "constant"
    healthy = cfg.healthy_valid_dice if arm == "prior" else cfg.control_valid_dice
    model = _train_with_restarts(
        lambda k: init_params(cfg.model_config(film_enabled=True), derive_seed(cfg.base_seed, 102, rep, k)),
        samples, split, tcfg, cfg, metadata_mode=mode, healthy_min=healthy,
    )
    test = _subset(samples, split.test)
    input_class = None if arm == "prior" else cfg.constant_class
    scores = per_sample_dice(model, test, input_class=input_class)
    groups = _group_scores(test, scores, AMBIGUOUS_CLASSES)
    swap = label_swap_matrix(model, test, cfg.n_classes) if (with_swap and arm == "prior") else None
    return groups, swap


def run_exp1(samples: list[Sample], cfg: ExperimentConfig, arms=("prior", "no-prior"),
             name: str = "exp1") -> ExperimentReport:
    """Paired prior vs constant-vector training runs on the ambiguous corpus.

    The prior arm also produces a label-swap matrix per repetition.
    """
    jobs = [
        dict(samples=samples, rep=rep, arm=arm, cfg=cfg, with_swap=True)
        for rep in range(cfg.repetitions)
        for arm in arms
    ]
    results = _map_jobs(_exp1_job, jobs, cfg.workers)
    report = ExperimentReport(name, AMBIGUOUS_CLASSES, reference_arm="no-prior" if "no-prior" in arms else "")
    for job, (groups, swap) in zip(jobs, results):
        for group, dice in groups:
            report.rows.append((job["arm"], group, job["rep"], dice))
        if swap is not None:
            report.swap_matrices.append(swap)
    if "prior" in arms and "no-prior" in arms:
        for group in report.groups():
            report.p_values[("prior", group)] = wilcoxon_one_sided(
                report.scores("prior", group), report.scores("no-prior", group)
            ).p_value
    return report


def run_label_swap(samples: list[Sample], cfg: ExperimentConfig) -> ExperimentReport:
    return run_exp1(samples, cfg, arms=("prior",), name="label-swap")


# ---------------------------------------------------------------------------
# Experiment 2a: multi-class training with one label per sample


def _exp2_missing_job(samples, rep, arm, cfg: ExperimentConfig):
    split = split_per_subject(samples, seed=derive_seed(cfg.base_seed, 201, rep))
    tcfg = replace(cfg.train, seed=derive_seed(cfg.base_seed, 203, rep))
    test = _subset(samples, split.test)
    if arm in ("filmed", "plain"):
        healthy = cfg.healthy_valid_dice if arm == "filmed" else cfg.control_valid_dice
        model = _train_with_restarts(
            lambda k: init_params(cfg.model_config(film_enabled=(arm == "filmed")),
                                  derive_seed(cfg.base_seed, 202, rep, k)),
            samples, split, tcfg, cfg, metadata_mode="true", healthy_min=healthy,
        )
        scores = per_sample_dice(model, test)
        return _group_scores(test, scores, MULTIORGAN_CLASSES)
    # one plain U-Net per class, each trained only on its own class
    scores = np.zeros(len(test))
    classes = np.asarray([s.class_id for s in test])
    for cid in sorted(set(classes.tolist())):
        class_ids = {s.subject_id for s in samples if s.class_id == cid}
        class_split = SplitSpec(
            train=tuple(i for i in split.train if i in class_ids),
            valid=tuple(i for i in split.valid if i in class_ids),
            test=tuple(i for i in split.test if i in class_ids),
            seed=split.seed,
        )
        model = _train_with_restarts(
            lambda k: init_params(cfg.model_config(film_enabled=False),
                                  derive_seed(cfg.base_seed, 204, rep, cid, k)),
            samples, class_split, tcfg, cfg, metadata_mode="true", healthy_min=cfg.healthy_valid_dice,
        )
        scores[classes == cid] = per_sample_dice(model, _subset(test, class_split.test))
    return _group_scores(test, list(scores), MULTIORGAN_CLASSES)


def run_exp2_missing(samples: list[Sample], cfg: ExperimentConfig) -> ExperimentReport:
    """FiLMed multi-class vs plain multi-class vs per-class single-class U-Nets."""
    arms = ("filmed", "plain", "single")
    jobs = [
        dict(samples=samples, rep=rep, arm=arm, cfg=cfg)
        for rep in range(cfg.repetitions)
        for arm in arms
    ]
    results = _map_jobs(_exp2_missing_job, jobs, cfg.workers)
    report = ExperimentReport("exp2-missing", MULTIORGAN_CLASSES, reference_arm="filmed")
    for job, groups in zip(jobs, results):
        for group, dice in groups:
            report.rows.append((job["arm"], group, job["rep"], dice))
    for arm in ("plain", "single"):
        for group in report.groups():
            report.p_values[(arm, group)] = wilcoxon_one_sided(
                report.scores(arm, group), report.scores("filmed", group)
            ).p_value
    return report


# ---------------------------------------------------------------------------
# Experiment 2b: few-label transfer sweep


def _pool_split(ids: list[str]) -> tuple[tuple[str, ...], tuple[str, ...]]:
    n = len(ids)
    n_valid = max(1, int(n * 0.25 + 0.5))
    n_train = n - n_valid
    if n_train < 1:
        raise ValueError(f"pool of {n} subjects cannot fill train and valid")
    return tuple(ids[:n_train]), tuple(ids[n_train:])


def _exp2_sweep_job(samples, rep, size, arm, cfg: ExperimentConfig):
    minority, majority = cfg.sweep_minority, cfg.sweep_majority
    min_ids = sorted(s.subject_id for s in samples if s.class_id == minority)
    maj_ids = sorted(s.subject_id for s in samples if s.class_id == majority)
    need = max(cfg.sweep_sizes) + cfg.sweep_test_subjects
    if len(min_ids) < need:
        raise ValueError(f"need at least {need} subjects of class {minority}, dataset has {len(min_ids)}")
    if len(maj_ids) < cfg.sweep_majority_count:
        raise ValueError(
            f"need at least {cfg.sweep_majority_count} subjects of class {majority}, dataset has {len(maj_ids)}"
        )
    rng = np.random.default_rng(derive_seed(cfg.base_seed, 301, rep))
    perm_min = [min_ids[i] for i in rng.permutation(len(min_ids))]
    perm_maj = [maj_ids[i] for i in rng.permutation(len(maj_ids))]
    test_ids = perm_min[-cfg.sweep_test_subjects:]
    min_train, min_valid = _pool_split(perm_min[:size])
    maj_train, maj_valid = _pool_split(perm_maj[:cfg.sweep_majority_count])

    tcfg = replace(cfg.train, seed=derive_seed(cfg.base_seed, 302, rep, size))
    if arm == "filmed":
        split = SplitSpec(min_train + maj_train, min_valid + maj_valid, tuple(test_ids), rep)
        film = True
    else:
        split = SplitSpec(min_train, min_valid, tuple(test_ids), rep)
        film = False
    model = _train_with_restarts(
        lambda k: init_params(cfg.model_config(film_enabled=film), derive_seed(cfg.base_seed, 303, rep, size, k)),
        samples, split, tcfg, cfg, metadata_mode="true", healthy_min=cfg.healthy_valid_dice,
    )
    return float(np.mean(per_sample_dice(model, _subset(samples, test_ids))))


def run_exp2_sweep(samples: list[Sample], cfg: ExperimentConfig) -> ExperimentReport:
    """FiLMed joint vs single-class training across minority-class sizes.

    Minority pools are nested within a repetition and every size shares the
    repetition's held-out test subjects.
    """
    jobs = [
        dict(samples=samples, rep=rep, size=size, arm=arm, cfg=cfg)
        for rep in range(cfg.repetitions)
        for size in cfg.sweep_sizes
        for arm in ("filmed", "single")
    ]
    results = _map_jobs(_exp2_sweep_job, jobs, cfg.workers)
    report = ExperimentReport("exp2-sweep", MULTIORGAN_CLASSES, reference_arm="single")
    for job, dice in zip(jobs, results):
        report.rows.append((job["arm"], str(job["size"]), job["rep"], dice))
    for size in cfg.sweep_sizes:
        report.p_values[("filmed", str(size))] = wilcoxon_one_sided(
            report.scores("filmed", str(size)), report.scores("single", str(size))
        ).p_value
    return report


def run_experiment(kind: str, samples: list[Sample], cfg: ExperimentConfig) -> ExperimentReport:
    if kind == "exp1":
        return run_exp1(samples, cfg)
    if kind == "exp2-missing":
        return run_exp2_missing(samples, cfg)
    if kind == "exp2-sweep":
        return run_exp2_sweep(samples, cfg)
    if kind == "label-swap":
        return run_label_swap(samples, cfg)
    raise ValueError(f"unknown experiment kind {kind!r}, expected one of {EXPERIMENT_KINDS}")
