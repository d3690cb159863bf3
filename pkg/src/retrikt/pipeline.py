"""Staged pipeline orchestration: flat-key config, deterministic stage seeds,
artifact manifests, experiment reports."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import shutil
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoints
from .data_core import (
    SyntheticTaskConfig,
    TaskSpec,
    build_vocab_for_task,
    load_dataset,
    load_stopwords,
    make_pretraining_corpus,
    make_synthetic_task,
    save_dataset,
    stopwords_digest,
)
from .encoder import EncoderConfig
from .knowledge_store import (
    KnowledgeStore,
    assemble_store,
    generate_sets,
    load_store,
    rebuild_keys,
    save_store,
)
from .prompt_tuning import (
    build_generation_samples,
    mean_nll_per_token,
    pretraining_sequences,
    save_loss_curve,
    tune_prompts,
)
from .reward_model import ClassifierTrainConfig, RewardModel, accuracy_of, train_classifier
from .rl_finetune import PpoConfig, mean_self_bleu3, rl_finetune_prompts, save_rl_log
from .seeding import derive_seed
from .student import (
    Student,
    StudentConfig,
    evaluate,
    predict_retrieval,
    train_finetune_baseline,
    train_kd_baseline,
    train_retrieval_student,
)
from .tiny_lm import LmConfig, freeze_base, load_lm, load_prompt, pretrain_base_lm, save_lm, save_prompt
from .vocab import EOS_ID, Vocab, tokenize

STAGES = (
    "prepare-data",
    "train-reward",
    "tune-prompts",
    "rl-tune",
    "build-store",
    "train-student",
    "train-kd-baseline",
    "evaluate",
    "report",
)

ABLATION_COMPONENTS = ("RL", "R_accuracy", "R_diversity", "BP")

VARIANTS = ("finetune", "kd", "retrieval")

# Which metrics improve downward; everything else improves upward.
LOWER_IS_BETTER = ("self_bleu", "cross_entropy")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    pass


# --------------------------------------------------------------------- config


@dataclass
class TaskSection:
    kind: str = "synthetic"
    rule: str = "order"
    num_classes: int = 2
    train_size: int = 200
    dev_size: int = 100
    test_size: int = 200
    filler_vocab: int = 40
    markers_per_class: int = 4
    min_words: int = 8
    max_words: int = 14
    stopword_rate: float = 0.35
    metric: str = "accuracy"

    def synthetic_config(self) -> SyntheticTaskConfig:
        if self.kind != "synthetic":
            raise ConfigError(f"unsupported task kind {self.kind!r}")
        return SyntheticTaskConfig(
            num_classes=self.num_classes,
            rule=self.rule,
            train_size=self.train_size,
            dev_size=self.dev_size,
            test_size=self.test_size,
            filler_vocab=self.filler_vocab,
            markers_per_class=self.markers_per_class,
            min_words=self.min_words,
            max_words=self.max_words,
            stopword_rate=self.stopword_rate,
            metric=self.metric,
        )


@dataclass
class LmSection:
    num_layers: int = 4
    hidden_dim: int = 128
    num_heads: int = 4
    max_seq_len: int = 128
    pretrain_corpus: int = 2000
    pretrain_steps: int = 600
    pretrain_batch: int = 32
    pretrain_lr: float = 1e-3
    # fraction of corpus labels resampled uniformly: 0 bakes the task law into the
    # base, 1 erases it; in between leaves headroom for prompts and RL
    corpus_label_noise: float = 0.3


@dataclass
class RewardSection:
    num_layers: int = 4
    hidden_dim: int = 256
    num_heads: int = 4
    max_seq_len: int = 64
    steps: int = 500
    batch_size: int = 32
    lr: float = 1e-3
    eval_every: int = 50

    def train_config(self) -> ClassifierTrainConfig:
        return ClassifierTrainConfig(
            num_layers=self.num_layers,
            hidden_dim=self.hidden_dim,
            num_heads=self.num_heads,
            max_seq_len=self.max_seq_len,
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            eval_every=self.eval_every,
        )


@dataclass
class PromptSection:
    length: int = 8
    steps: int = 400
    lr: float = 1e-3
    batch_size: int = 64
    init_std: float = 0.02


@dataclass
class RlSection:
    lr: float = 2e-3
    batch_size: int = 32
    mini_batch_size: int = 8
    epochs: int = 20
    ppo_epochs: int = 4
    samples_per_prompt: int = 4
    init_kl_coeff: float = 0.001
    target_kl: float = 6.0
    vf_coeff: float = 0.5
    clip_ratio: float = 0.2
    discount: float = 0.99
    gae_lambda: float = 0.95
    beta: float = 1.0
    alpha: float = 0.2
    l_min: int = 8
    max_new: int = 32
    top_p: float = 0.9

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            mini_batch_size=self.mini_batch_size,
            epochs=self.epochs,
            ppo_epochs=self.ppo_epochs,
            samples_per_prompt=self.samples_per_prompt,
            init_kl_coeff=self.init_kl_coeff,
            target_kl=self.target_kl,
            vf_coeff=self.vf_coeff,
            clip_ratio=self.clip_ratio,
            discount=self.discount,
            gae_lambda=self.gae_lambda,
            beta=self.beta,
            alpha=self.alpha,
            l_min=self.l_min,
        )


@dataclass
class StoreSection:
    m: int = 8
    n: int = 5
    top_p: float = 0.9
    max_new: int = 64
    max_keywords: int = 5


@dataclass
class StudentSection:
    num_layers: int = 2
    hidden_dim: int = 128
    num_heads: int = 4
    max_seq_len: int = 64
    tau_teacher: float = 0.2
    tau_student: float = 0.1
    batch_size: int = 128
    steps: int = 600
    lr: float = 1e-3
    k: int = 16
    kd_temperature: float = 1.0
    kd_steps: int = 600
    kd_batch_size: int = 64
    kd_lr: float = 1e-3
    ft_steps: int = 400
    ft_batch_size: int = 32
    ft_lr: float = 1e-3

    def student_config(self, with_head: bool) -> StudentConfig:
        return StudentConfig(
            num_layers=self.num_layers,
            hidden_dim=self.hidden_dim,
            num_heads=self.num_heads,
            max_seq_len=self.max_seq_len,
            has_classifier_head=with_head,
        )


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"


@dataclass
class RunConfig:
    task: TaskSection = field(default_factory=TaskSection)
    lm: LmSection = field(default_factory=LmSection)
    reward: RewardSection = field(default_factory=RewardSection)
    prompt: PromptSection = field(default_factory=PromptSection)
    rl: RlSection = field(default_factory=RlSection)
    store: StoreSection = field(default_factory=StoreSection)
    student: StudentSection = field(default_factory=StudentSection)
    run: RunSection = field(default_factory=RunSection)

    def to_text(self) -> str:
        lines = []
        for sec_field in fields(self):
            section = getattr(self, sec_field.name)
            for f in sorted(fields(section), key=lambda f: f.name):
                lines.append(f"{sec_field.name}.{f.name} = {getattr(section, f.name)}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def parse_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if "." not in key:
                raise ConfigError(f"line {lineno}: key {key!r} has no section prefix")
            sec_name, field_name = key.split(".", 1)
            if sec_name not in sections:
                raise ConfigError(f"line {lineno}: unknown section {sec_name!r}")
            section = sections[sec_name]
            names = {f.name: f for f in fields(section)}
            if field_name not in names:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            setattr(section, field_name, _convert(value, names[field_name].type, key, lineno))
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.parse_text(fh.read())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


def _convert(value: str, type_name, key: str, lineno: int):
    type_name = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if type_name == "int":
            return int(value)
        if type_name == "float":
            return float(value)
        if type_name == "bool":
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return value
    except ValueError as err:
        raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}") from err


# --------------------------------------------------------------------- paths and manifests


def seed_dir(cfg: RunConfig) -> Path:
    return Path(cfg.run.out_dir) / f"seed_{cfg.run.seed}"


def stage_dir(cfg: RunConfig, stage: str, variant: str | None = None) -> Path:
    base = seed_dir(cfg)
    if variant:
        base = base / "ablation" / variant
    return base / stage


def require(path: Path, producing_stage: str) -> Path:
    if not Path(path).exists():
        raise StageError(f"missing artifact {path}; run stage '{producing_stage}' first")
    return Path(path)


def write_manifest(cfg: RunConfig, out: Path, stage: str, stage_seed: int, inputs: dict, extras: dict | None = None):
    manifest = {
        "stage": stage,
        "config_hash": cfg.config_hash(),
        "seed": cfg.run.seed,
        "stage_seed": stage_seed,
        "inputs": {name: checkpoints.file_digest(p) for name, p in sorted(inputs.items())},
        "outputs": {},
    }
    if extras:
        manifest.update(extras)
    for p in sorted(Path(out).iterdir()):
        if p.name != "manifest.json" and p.is_file():
            manifest["outputs"][p.name] = checkpoints.file_digest(p)
    with open(Path(out) / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------- task loading helpers


def save_task(spec: TaskSpec, task_cfg: SyntheticTaskConfig, path: Path) -> None:
    _write_json(
        path,
        {
            "name": spec.name,
            "metric": spec.metric,
            "template": list(spec.template),
            "verbalizers": {str(i): v for i, v in spec.label_verbalizers.items()},
            "generator": dataclasses.asdict(task_cfg),
        },
    )


def load_task(prepare_dir: Path) -> tuple[TaskSpec, SyntheticTaskConfig]:
    with open(require(Path(prepare_dir) / "task.json", "prepare-data"), encoding="utf-8") as fh:
        obj = json.load(fh)
    spec = TaskSpec(
        name=obj["name"],
        label_verbalizers={int(k): v for k, v in obj["verbalizers"].items()},
        metric=obj["metric"],
        template=tuple(obj["template"]),
    )
    return spec, SyntheticTaskConfig(**obj["generator"])


def load_prepared(cfg: RunConfig, variant: str | None = None):
    prep = stage_dir(cfg, "prepare-data")
    spec, task_cfg = load_task(prep)
    vocab = Vocab.load(require(prep / "vocab.txt", "prepare-data"))
    stopwords = load_stopwords()
    train = load_dataset(require(prep / "train.tsv", "prepare-data"), spec, stopwords=stopwords)
    dev = load_dataset(require(prep / "dev.tsv", "prepare-data"), spec, stopwords=stopwords)
    test = load_dataset(require(prep / "test.tsv", "prepare-data"), spec, stopwords=stopwords)
    return spec, task_cfg, vocab, stopwords, train, dev, test


# --------------------------------------------------------------------- stages


def corpus_labels(
    corpus: list[str], task_cfg: SyntheticTaskConfig, spec: TaskSpec, noise: float, seed: int
) -> list[str]:
    """Rule labels for the pretraining corpus, with a fraction resampled uniformly."""
    from .data_core import synthetic_rule_oracle

    if not 0.0 <= noise <= 1.0:
        raise ConfigError("lm.corpus_label_noise must be in [0, 1]")
    oracle = synthetic_rule_oracle(task_cfg)
    rng = np.random.default_rng(seed)
    labels = []
    for text in corpus:
        cls = oracle(text)
        if cls is None or rng.random() < noise:
            cls = int(rng.integers(spec.num_classes))
        labels.append(spec.verbalize(cls))
    return labels


def stage_prepare_data(cfg: RunConfig) -> None:
    out = stage_dir(cfg, "prepare-data")
    out.mkdir(parents=True, exist_ok=True)
    stage_seed = derive_seed(cfg.run.seed, "prepare-data")
    task_cfg = cfg.task.synthetic_config()
    stopwords = load_stopwords()
    spec, train, dev, test = make_synthetic_task(cfg.run.seed, task_cfg, stopwords)
    vocab = build_vocab_for_task(task_cfg, spec)

    save_task(spec, task_cfg, out / "task.json")
    vocab.save(out / "vocab.txt")
    save_dataset(train, out / "train.tsv")
    save_dataset(dev, out / "dev.tsv")
    save_dataset(test, out / "test.tsv")

    corpus = make_pretraining_corpus(cfg.run.seed, task_cfg, cfg.lm.pretrain_corpus)
    with open(out / "corpus.txt", "w", encoding="utf-8") as fh:
        fh.writelines(t + "\n" for t in corpus)

    lm_cfg = LmConfig(
        num_layers=cfg.lm.num_layers,
        hidden_dim=cfg.lm.hidden_dim,
        num_heads=cfg.lm.num_heads,
        vocab_size=len(vocab),
        max_seq_len=cfg.lm.max_seq_len,
    )
    labels = corpus_labels(corpus, task_cfg, spec, cfg.lm.corpus_label_noise, derive_seed(cfg.run.seed, "corpus-labels"))
    sequences = pretraining_sequences(corpus, labels, spec, vocab, stopwords, cfg.store.max_keywords)
    model = pretrain_base_lm(
        lm_cfg, sequences, cfg.lm.pretrain_steps, cfg.lm.pretrain_batch, cfg.lm.pretrain_lr, stage_seed
    )
    save_lm(freeze_base(model), out / "base_lm.ckpt")
    write_manifest(cfg, out, "prepare-data", stage_seed, {}, {"stopwords_sha256": stopwords_digest()})


def stage_train_reward(cfg: RunConfig) -> None:
    out = stage_dir(cfg, "train-reward")
    out.mkdir(parents=True, exist_ok=True)
    stage_seed = derive_seed(cfg.run.seed, "train-reward")
    spec, task_cfg, vocab, stopwords, train, dev, test = load_prepared(cfg)
    rm, history = train_classifier(train, dev, vocab, spec.num_classes, cfg.reward.train_config(), stage_seed)
    rm.save(out / "reward.ckpt")
    with open(out / "history.csv", "w", encoding="utf-8") as fh:
        fh.write("step,train_loss,dev_accuracy\n")
        for step, loss, acc in history:
            fh.write(f"{step},{loss:.6f},{acc:.6f}\n")
    train_acc = accuracy_of(rm.encoder, vocab, train)
    dev_acc = accuracy_of(rm.encoder, vocab, dev)
    with open(out / "metrics.txt", "w", encoding="utf-8") as fh:
        fh.write(f"config_hash = {cfg.config_hash()}\n")
        fh.write(f"train_accuracy = {train_acc:.6f}\n")
        fh.write(f"dev_accuracy = {dev_acc:.6f}\n")
    write_manifest(
        cfg, out, "train-reward", stage_seed,
        {"train.tsv": stage_dir(cfg, "prepare-data") / "train.tsv"},
        {"dev_accuracy": dev_acc, "train_accuracy": train_acc},
    )


def stage_tune_prompts(cfg: RunConfig) -> None:
    out = stage_dir(cfg, "tune-prompts")
    out.mkdir(parents=True, exist_ok=True)
    base_path = require(stage_dir(cfg, "prepare-data") / "base_lm.ckpt", "prepare-data")
    spec, task_cfg, vocab, stopwords, train, dev, test = load_prepared(cfg)
    model = load_lm(base_path)
    stage_seed = derive_seed(cfg.run.seed, "tune-prompts")
    for view, name in (("input_view", "input"), ("output_view", "output")):
        prompt, curve = tune_prompts(
            model, train, view, vocab, spec,
            steps=cfg.prompt.steps, lr=cfg.prompt.lr, batch_size=cfg.prompt.batch_size,
            seed=derive_seed(cfg.run.seed, "tune-prompts", view),
            prompt_length=cfg.prompt.length, init_std=cfg.prompt.init_std,
        )
        save_prompt(prompt, out / f"prompt_{name}.ckpt")
        save_loss_curve(curve, out / f"curve_{name}.csv")
    write_manifest(cfg, out, "tune-prompts", stage_seed, {"base_lm.ckpt": base_path})


def reward_flags(disabled: str | None) -> dict:
    return {
        "use_accuracy": disabled != "R_accuracy",
        "use_diversity": disabled != "R_diversity",
        "use_bp": disabled != "BP",
    }


def stage_rl_tune(cfg: RunConfig, variant: str | None = None, disabled: str | None = None) -> None:
    out = stage_dir(cfg, "rl-tune", variant)
    out.mkdir(parents=True, exist_ok=True)
    prompts_dir = stage_dir(cfg, "tune-prompts")
    require(prompts_dir / "prompt_input.ckpt", "tune-prompts")
    base_path = require(stage_dir(cfg, "prepare-data") / "base_lm.ckpt", "prepare-data")
    reward_path = require(stage_dir(cfg, "train-reward") / "reward.ckpt", "train-reward")
    spec, task_cfg, vocab, stopwords, train, dev, test = load_prepared(cfg)
    model = load_lm(base_path)
    rm = RewardModel.load(reward_path, vocab)
    stage_seed = derive_seed(cfg.run.seed, "rl-tune")
    flags = reward_flags(disabled)
    for view, name in (("input_view", "input"), ("output_view", "output")):
        prompt = load_prompt(require(prompts_dir / f"prompt_{name}.ckpt", "tune-prompts"))
        tuned, logs = rl_finetune_prompts(
            model, prompt, train, rm, cfg.rl.ppo_config(),
            seed=derive_seed(cfg.run.seed, "rl-tune", view),
            vocab=vocab, spec=spec, max_new=cfg.rl.max_new, top_p=cfg.rl.top_p, **flags,
        )
        save_prompt(tuned, out / f"prompt_{name}_rl.ckpt")
        save_rl_log(logs, out / f"rl_log_{name}.csv")
    write_manifest(
        cfg, out, "rl-tune", stage_seed,
        {
            "base_lm.ckpt": base_path,
            "reward.ckpt": reward_path,
            "prompt_input.ckpt": prompts_dir / "prompt_input.ckpt",
            "prompt_output.ckpt": prompts_dir / "prompt_output.ckpt",
        },
        {"disabled_component": disabled},
    )


def stage_skip_rl(cfg: RunConfig, variant: str) -> None:
    """The w/o-RL ablation: the RL checkpoints are byte copies of the supervised ones."""
    out = stage_dir(cfg, "rl-tune", variant)
    out.mkdir(parents=True, exist_ok=True)
    prompts_dir = stage_dir(cfg, "tune-prompts")
    for name in ("input", "output"):
        src = require(prompts_dir / f"prompt_{name}.ckpt", "tune-prompts")
        shutil.copyfile(src, out / f"prompt_{name}_rl.ckpt")
    write_manifest(
        cfg, out, "rl-tune", derive_seed(cfg.run.seed, "rl-tune"),
        {
            "prompt_input.ckpt": prompts_dir / "prompt_input.ckpt",
            "prompt_output.ckpt": prompts_dir / "prompt_output.ckpt",
        },
        {"disabled_component": "RL"},
    )


def stage_build_store(cfg: RunConfig, variant: str | None = None) -> None:
    out = stage_dir(cfg, "build-store", variant)
    out.mkdir(parents=True, exist_ok=True)
    rl_dir = stage_dir(cfg, "rl-tune", variant)
    p_in_path = require(rl_dir / "prompt_input_rl.ckpt", "rl-tune")
    p_out_path = require(rl_dir / "prompt_output_rl.ckpt", "rl-tune")
    base_path = require(stage_dir(cfg, "prepare-data") / "base_lm.ckpt", "prepare-data")
    reward_path = require(stage_dir(cfg, "train-reward") / "reward.ckpt", "train-reward")
    spec, task_cfg, vocab, stopwords, train, dev, test = load_prepared(cfg)
    model = load_lm(base_path)
    rm = RewardModel.load(reward_path, vocab)
    prompt_in = load_prompt(p_in_path)
    prompt_out = load_prompt(p_out_path)
    stage_seed = derive_seed(cfg.run.seed, "build-store")

    sets, counts = generate_sets(
        train, model, prompt_in, prompt_out,
        m=cfg.store.m, n=cfg.store.n, p=cfg.store.top_p, seed=stage_seed,
        vocab=vocab, spec=spec, max_new=cfg.store.max_new,
        stopwords=stopwords, max_keywords=cfg.store.max_keywords,
    )
    manifest = {
        "config_hash": cfg.config_hash(),
        "m": cfg.store.m,
        "n": cfg.store.n,
        "top_p": cfg.store.top_p,
        "seed": stage_seed,
        "counts": counts,
        "checkpoints": {
            "base_lm": checkpoints.file_digest(base_path),
            "reward": checkpoints.file_digest(reward_path),
            "prompt_input": checkpoints.file_digest(p_in_path),
            "prompt_output": checkpoints.file_digest(p_out_path),
        },
    }
    store = assemble_store(train, sets, rm, spec, manifest)
    save_store(store, out / "store.rkst")
    _write_json(out / "counts.json", counts)
    write_manifest(
        cfg, out, "build-store", stage_seed,
        {"reward.ckpt": reward_path, "prompt_input_rl.ckpt": p_in_path, "prompt_output_rl.ckpt": p_out_path},
    )


def stage_train_student(cfg: RunConfig, variant: str | None = None) -> None:
    out = stage_dir(cfg, "train-student", variant)
    out.mkdir(parents=True, exist_ok=True)
    store_path = require(stage_dir(cfg, "build-store", variant) / "store.rkst", "build-store")
    reward_path = require(stage_dir(cfg, "train-reward") / "reward.ckpt", "train-reward")
    spec, task_cfg, vocab, stopwords, train, dev, test = load_prepared(cfg)
    store = load_store(store_path)
    rm = RewardModel.load(reward_path, vocab)
    stage_seed = derive_seed(cfg.run.seed, "train-student")

    student = Student.fresh(cfg.student.student_config(with_head=False), vocab, spec.num_classes, stage_seed)
    if student.num_params() >= rm.num_params():
        raise StageError(
            f"student has {student.num_params()} parameters but the teacher only {rm.num_params()};"
            " the student must be strictly smaller"
        )
    texts = [r.text for r in store.records]
    student, curve = train_retrieval_student(
        texts, rm, student,
        tau_teacher=cfg.student.tau_teacher, tau_student=cfg.student.tau_student,
        batch_size=cfg.student.batch_size, steps=cfg.student.steps, lr=cfg.student.lr, seed=stage_seed,
    )
    rebuild_keys(store, student)
    student.save(out / "student_retrieval.ckpt")
    save_store(store, out / "store_keyed.rkst")
    with open(out / "retrieval_curve.csv", "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for step, loss in curve:
            fh.write(f"{step},{loss:.6f}\n")
    write_manifest(cfg, out, "train-student", stage_seed, {"store.rkst": store_path, "reward.ckpt": reward_path})


def stage_train_kd_baseline(cfg: RunConfig, variant: str | None = None) -> None:
    out = stage_dir(cfg, "train-kd-baseline", variant)
    out.mkdir(parents=True, exist_ok=True)
    store_path = require(stage_dir(cfg, "build-store", variant) / "store.rkst", "build-store")
    spec, task_cfg, vocab, stopwords, train, dev, test = load_prepared(cfg)
    store = load_store(store_path)
    stage_seed = derive_seed(cfg.run.seed, "train-kd-baseline")

    texts = [r.text for r in store.records]
    values = np.stack([r.value for r in store.records])
    kd_student = Student.fresh(cfg.student.student_config(with_head=True), vocab, spec.num_classes, stage_seed)
    kd_student, kd_hist = train_kd_baseline(
        texts, values, kd_student,
        temperature=cfg.student.kd_temperature, steps=cfg.student.kd_steps,
        batch_size=cfg.student.kd_batch_size, lr=cfg.student.kd_lr,
        seed=stage_seed, dev=dev,
    )
    kd_student.save(out / "student_kd.ckpt")

    ft_seed = derive_seed(cfg.run.seed, "train-finetune-baseline")
    ft_student = Student.fresh(cfg.student.student_config(with_head=True), vocab, spec.num_classes, ft_seed)
    ft_student, ft_hist = train_finetune_baseline(
        train, ft_student, steps=cfg.student.ft_steps, batch_size=cfg.student.ft_batch_size,
        lr=cfg.student.ft_lr, seed=ft_seed, dev=dev,
    )
    ft_student.save(out / "student_finetune.ckpt")

    for name, hist in (("kd_history.csv", kd_hist), ("ft_history.csv", ft_hist)):
        with open(out / name, "w", encoding="utf-8") as fh:
            fh.write("step,loss,dev_accuracy\n")
            for step, loss, acc in hist:
                fh.write(f"{step},{loss:.6f},{acc:.6f}\n")
    write_manifest(cfg, out, "train-kd-baseline", stage_seed, {"store.rkst": store_path})


def _dump_predictions(path: Path, rows: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id,predicted_class,class_scores,retrieved\n")
        for sample_id, pred, scores, retrieved in rows:
            scores_s = ";".join(f"{s:.6f}" for s in scores)
            retr_s = ";".join(f"{i}:{w:.6f}" for i, _, w in retrieved)
            fh.write(f"{sample_id},{pred},{scores_s},{retr_s}\n")


def stage_evaluate(cfg: RunConfig, variant: str | None = None) -> None:
    out = stage_dir(cfg, "evaluate", variant)
    out.mkdir(parents=True, exist_ok=True)
    student_dir = stage_dir(cfg, "train-student", variant)
    kd_dir = stage_dir(cfg, "train-kd-baseline", variant)
    keyed_path = require(student_dir / "store_keyed.rkst", "train-student")
    require(kd_dir / "student_kd.ckpt", "train-kd-baseline")
    spec, task_cfg, vocab, stopwords, train, dev, test = load_prepared(cfg)
    retrieval_student = Student.load(require(student_dir / "student_retrieval.ckpt", "train-student"), vocab)
    kd_student = Student.load(require(kd_dir / "student_kd.ckpt", "train-kd-baseline"), vocab)
    ft_student = Student.load(require(kd_dir / "student_finetune.ckpt", "train-kd-baseline"), vocab)
    store = load_store(keyed_path)
    stage_seed = derive_seed(cfg.run.seed, "evaluate")

    metrics: dict[str, float] = {}
    preds_rows: dict[str, list] = {v: [] for v in VARIANTS}
    golds = [s.label_id for s in test]

    predictions: dict[str, list[int]] = {v: [] for v in VARIANTS}
    for s in test:
        res = predict_retrieval(s.text, retrieval_student, store, cfg.student.k)
        predictions["retrieval"].append(res.predicted_class)
        preds_rows["retrieval"].append((s.id, res.predicted_class, res.class_scores.tolist(), res.retrieved))
        for name, student in (("kd", kd_student), ("finetune", ft_student)):
            dist = student.predict_dist(s.text)
            pred = int(np.argmax(dist))
            predictions[name].append(pred)
            preds_rows[name].append((s.id, pred, dist.tolist(), ()))

    from .student import accuracy_score, matthews_corrcoef

    scorer = accuracy_score if spec.metric == "accuracy" else matthews_corrcoef
    for name in VARIANTS:
        metrics[name] = float(scorer(golds, predictions[name]))
        _dump_predictions(out / f"predictions_{name}.tsv", preds_rows[name])

    payload = {
        "config_hash": cfg.config_hash(),
        "task": spec.name,
        "metric": spec.metric,
        "seed": cfg.run.seed,
        "variants": metrics,
        "higher_is_better": True,
    }
    _write_json(out / "metrics.json", payload)
    with open(out / "metrics.txt", "w", encoding="utf-8") as fh:
        fh.write(f"config_hash = {cfg.config_hash()}\n")
        fh.write(f"metric = {spec.metric} (higher is better)\n")
        for name in VARIANTS:
            fh.write(f"{name} = {metrics[name]:.6f}\n")
    write_manifest(cfg, out, "evaluate", stage_seed, {"store_keyed.rkst": keyed_path})


def stage_report(cfg: RunConfig) -> None:
    base = Path(cfg.run.out_dir)
    out = base / "report"
    out.mkdir(parents=True, exist_ok=True)
    metric_files = sorted(base.glob("seed_*/evaluate/metrics.json"))
    if not metric_files:
        raise StageError(f"missing artifact {base}/seed_*/evaluate/metrics.json; run stage 'evaluate' first")
    rows = []
    for path in metric_files:
        with open(path, encoding="utf-8") as fh:
            rows.append(json.load(fh))
    metric_name = rows[0]["metric"]

    lines_csv = ["seed," + ",".join(VARIANTS)]
    for row in rows:
        lines_csv.append(str(row["seed"]) + "," + ",".join(f"{row['variants'][v]:.6f}" for v in VARIANTS))
    means = {v: float(np.mean([row["variants"][v] for row in rows])) for v in VARIANTS}
    lines_csv.append("mean," + ",".join(f"{means[v]:.6f}" for v in VARIANTS))
    (out / "report.csv").write_text("\n".join(lines_csv) + "\n", encoding="utf-8")

    width = 12
    header = "seed".ljust(8) + "".join(v.rjust(width) for v in VARIANTS)
    text_lines = [
        f"config_hash = {cfg.config_hash()}",
        f"metric = {metric_name} (higher is better)",
        header,
        "-" * len(header),
    ]
    for row in rows:
        text_lines.append(str(row["seed"]).ljust(8) + "".join(f"{row['variants'][v]:.4f}".rjust(width) for v in VARIANTS))
    text_lines.append("mean".ljust(8) + "".join(f"{means[v]:.4f}".rjust(width) for v in VARIANTS))
    (out / "report.txt").write_text("\n".join(text_lines) + "\n", encoding="utf-8")


def run_stage(cfg: RunConfig, stage: str) -> None:
    dispatch = {
        "prepare-data": stage_prepare_data,
        "train-reward": stage_train_reward,
        "tune-prompts": stage_tune_prompts,
        "rl-tune": stage_rl_tune,
        "build-store": stage_build_store,
        "train-student": stage_train_student,
        "train-kd-baseline": stage_train_kd_baseline,
        "evaluate": stage_evaluate,
        "report": stage_report,
    }
    if stage not in dispatch:
        raise StageError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    dispatch[stage](cfg)


def run_full_pipeline(cfg: RunConfig) -> dict:
    """All stages through evaluate for the configured seed; returns the metrics."""
    for stage in STAGES[:-1]:
        run_stage(cfg, stage)
    with open(stage_dir(cfg, "evaluate") / "metrics.json", encoding="utf-8") as fh:
        return json.load(fh)


# --------------------------------------------------------------------- experiments


def diversity_accuracy_report(
    store: KnowledgeStore, rm: RewardModel, spec: TaskSpec, cap: int = 1000, seed: int = 0
) -> tuple[float, float]:
    """(mean self-BLEU, mean label cross-entropy) over the store's generated records.

    Record values equal the reward model's distributions by construction, so the
    cross-entropy reads them directly. Both metrics improve downward."""
    generated = store.generated_records()
    if not generated:
        raise StageError("store contains no generated records")
    token_lists = [tokenize(r.text) for r in generated]
    if len(token_lists) < 2:
        raise StageError("need at least two generated records for self-BLEU")
    sb = mean_self_bleu3(token_lists, cap=cap, seed=seed)
    xents = []
    for r in generated:
        cls = spec.class_of(r.label_text)
        xents.append(-float(np.log(max(float(r.value[cls]), 1e-12))))
    return float(sb), float(np.mean(xents))


@dataclass
class ExperimentReport:
    """Per-variant rows with per-seed raw values; means always recomputable."""

    metric: str
    rows: dict[str, dict[str, list[float]]]  # variant -> series name -> per-seed values

    def mean(self, variant: str, series: str) -> float:
        return float(np.mean(self.rows[variant][series]))

    def to_csv_lines(self) -> list[str]:
        lines = ["variant,series,per_seed,mean"]
        for variant in self.rows:
            for series, values in self.rows[variant].items():
                per_seed = ";".join(f"{v:.6f}" for v in values)
                lines.append(f"{variant},{series},{per_seed},{np.mean(values):.6f}")
        return lines


def ablation_variant_name(component: str | None) -> str:
    return "full" if component is None else f"no_{component.lower()}"


def run_ablation_cell(cfg: RunConfig, component: str | None) -> dict:
    """Re-run only the affected stages for one ablation cell and evaluate.

    Requires the base stages (prepare-data, train-reward, tune-prompts) to exist."""
    if component is not None and component not in ABLATION_COMPONENTS:
        raise StageError(f"unknown ablation component {component!r}")
    variant = ablation_variant_name(component)
    if component == "RL":
        stage_skip_rl(cfg, variant)
    else:
        stage_rl_tune(cfg, variant=variant, disabled=component)
    stage_build_store(cfg, variant=variant)
    stage_train_student(cfg, variant=variant)
    stage_train_kd_baseline(cfg, variant=variant)
    stage_evaluate(cfg, variant=variant)
    with open(stage_dir(cfg, "evaluate", variant) / "metrics.json", encoding="utf-8") as fh:
        return json.load(fh)


def ablation_matrix(cfg: RunConfig, components: tuple[str, ...], seeds: tuple[int, ...]) -> ExperimentReport:
    """Full method plus one cell per disabled component, across seeds."""
    for c in components:
        if c not in ABLATION_COMPONENTS:
            raise StageError(f"unknown ablation component {c!r}")
    variants = [None, *components]
    rows: dict[str, dict[str, list[float]]] = {
        ablation_variant_name(c): {"kd": [], "retrieval": [], "self_bleu": [], "cross_entropy": []} for c in variants
    }
    metric = None
    for seed in seeds:
        run_cfg = RunConfig.parse_text(cfg.to_text())
        run_cfg.run.seed = seed
        for stage in ("prepare-data", "train-reward", "tune-prompts"):
            run_stage(run_cfg, stage)
        spec, _, vocab, _, _, _, _ = load_prepared(run_cfg)
        rm = RewardModel.load(stage_dir(run_cfg, "train-reward") / "reward.ckpt", vocab)
        for component in variants:
            name = ablation_variant_name(component)
            metrics = run_ablation_cell(run_cfg, component)
            metric = metrics["metric"]
            rows[name]["kd"].append(metrics["variants"]["kd"])
            rows[name]["retrieval"].append(metrics["variants"]["retrieval"])
            store = load_store(stage_dir(run_cfg, "build-store", name) / "store.rkst")
            sb, xent = diversity_accuracy_report(store, rm, spec)
            rows[name]["self_bleu"].append(sb)
            rows[name]["cross_entropy"].append(xent)
    return ExperimentReport(metric=metric or "accuracy", rows=rows)


def m_sweep(cfg: RunConfig, m_values: tuple[int, ...], seeds: tuple[int, ...]) -> ExperimentReport:
    """Effect of the per-sample generation count m, sharing one generation stream.

    Generation substreams are seeded per repetition, so the sample sets produced at
    m repetitions are exactly the first m repetitions of a longer run. The sweep
    generates once at max(m_values) and assembles each smaller store by slicing."""
    m_values = tuple(sorted(m_values))
    m_max = m_values[-1]
    rows: dict[str, dict[str, list[float]]] = {
        f"m={m}": {"kd": [], "retrieval": [], "advantage": []} for m in m_values
    }
    metric = None
    for seed in seeds:
        run_cfg = RunConfig.parse_text(cfg.to_text())
        run_cfg.run.seed = seed
        run_cfg.store.m = m_max
        for stage in ("prepare-data", "train-reward", "tune-prompts", "rl-tune"):
            run_stage(run_cfg, stage)
        spec, task_cfg, vocab, stopwords, train, dev, test = load_prepared(run_cfg)
        metric = spec.metric
        rm = RewardModel.load(stage_dir(run_cfg, "train-reward") / "reward.ckpt", vocab)
        model = load_lm(stage_dir(run_cfg, "prepare-data") / "base_lm.ckpt")
        prompt_in = load_prompt(stage_dir(run_cfg, "rl-tune") / "prompt_input_rl.ckpt")
        prompt_out = load_prompt(stage_dir(run_cfg, "rl-tune") / "prompt_output_rl.ckpt")
        stage_seed = derive_seed(seed, "build-store")
        sets, counts = generate_sets(
            train, model, prompt_in, prompt_out,
            m=m_max, n=run_cfg.store.n, p=run_cfg.store.top_p, seed=stage_seed,
            vocab=vocab, spec=spec, max_new=run_cfg.store.max_new,
            stopwords=stopwords, max_keywords=run_cfg.store.max_keywords,
        )
        for m in m_values:
            sub = RunConfig.parse_text(run_cfg.to_text())
            sub.run.out_dir = str(Path(run_cfg.run.out_dir) / f"m_{m}")
            sub.run.seed = seed
            sub.store.m = m
            _link_base_stages(run_cfg, sub)
            manifest = {"config_hash": sub.config_hash(), "m": m, "n": sub.store.n, "top_p": sub.store.top_p, "seed": stage_seed}
            store = assemble_store(train, sets, rm, spec, manifest, max_rep=m)
            out_dir = stage_dir(sub, "build-store")
            out_dir.mkdir(parents=True, exist_ok=True)
            save_store(store, out_dir / "store.rkst")
            stage_train_student(sub)
            stage_train_kd_baseline(sub)
            stage_evaluate(sub)
            with open(stage_dir(sub, "evaluate") / "metrics.json", encoding="utf-8") as fh:
                metrics = json.load(fh)["variants"]
            rows[f"m={m}"]["kd"].append(metrics["kd"])
            rows[f"m={m}"]["retrieval"].append(metrics["retrieval"])
            rows[f"m={m}"]["advantage"].append(metrics["retrieval"] - metrics["kd"])
    return ExperimentReport(metric=metric or "accuracy", rows=rows)


def _link_base_stages(src_cfg: RunConfig, dst_cfg: RunConfig) -> None:
    """Copy upstream artifacts so the per-m directory is a self-contained seed dir."""
    for stage in ("prepare-data", "train-reward"):
        src = stage_dir(src_cfg, stage)
        dst = stage_dir(dst_cfg, stage)
        if dst.exists():
            shutil.rmtree(dst)
        shutil.copytree(src, dst)
