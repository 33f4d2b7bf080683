"""Command-line entry point: ``erckit <command> --config FILE --seed N --out DIR``.

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 data error,
5 training/simulation failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from erckit import __version__
from erckit.dialogue import (
    Corpus,
    CorpusError,
    SynthSpec,
    builtin_label_set,
    full_scheme,
    load_corpus,
    synth_corpus,
    write_corpus,
)
from erckit.encoder import EncoderConfig
from erckit.evaluation import emotion_shift_table_csv, stability
from erckit.text import BuildConfig, KnowledgeMap, TextBuildError, build
from erckit.training import (
    PRETRAINED_LEARNING_RATE,
    ModelBundle,
    StageConfig,
    TrainConfig,
    TwoStageConfig,
    evaluate_bundle,
    generate_knowledge,
    knowledge_scheme_for,
    make_bundle,
    train,
    two_stage,
    vocab_for,
    write_log_csv,
)

log = logging.getLogger("erckit")

EXIT_CONFIG, EXIT_MISSING, EXIT_DATA, EXIT_RUN = 2, 3, 4, 5


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


# -- configuration -----------------------------------------------------------

_TEXT_KEYS = {"mode": str, "window": int, "online": bool, "token_budget": int, "use_mask": bool}
_ENCODER_KEYS = {"n_layers": int, "model_dim": int, "n_heads": int, "ff_dim": int, "max_len": int}
_TRAIN_KEYS = {
    "learning_rate": float, "batch_size": int, "epochs": int, "focal_gamma": float,
    "frozen_prefix": int, "freeze_embeddings": bool, "mlp_depth": int, "pooling": str,
    "dropout": float,
}
SCHEMA = {
    "data": {"train": str, "test": str, "label_set": str},
    "synth": {
        "n_conversations": int, "n_test_conversations": int, "min_turns": int, "max_turns": int,
        "n_speakers": int, "persistence": float, "signal": float, "words_per_utterance": int,
        "words_per_label": int, "n_filler": int, "labels": list,
    },
    "text": _TEXT_KEYS,
    "encoder": _ENCODER_KEYS,
    "train": _TRAIN_KEYS,
    "teacher.text": _TEXT_KEYS,
    "teacher.encoder": _ENCODER_KEYS,
    "teacher.train": _TRAIN_KEYS,
    "student.text": _TEXT_KEYS,
    "student.encoder": _ENCODER_KEYS,
    "student.train": _TRAIN_KEYS,
    "two_stage": {"knowledge_scheme": str, "threshold": float},
    "oerc": {"mode": str, "p": float, "window": int},
    "run": {"seeds": list, "out": str},
}


def _convert(raw: str, kind, where: str):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is list:
            return [x.strip() for x in raw.split(",") if x.strip()]
        if kind is float and raw.strip().lower() == "pretrained":
            return PRETRAINED_LEARNING_RATE
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from None


@dataclass
class ExperimentConfig:
    sections: dict[str, dict] = field(default_factory=dict)
    source: str = ""

    @classmethod
    def parse(cls, text: str, source: str = "<string>") -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        cp.optionxform = str
        try:
            cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None
        sections = {}
        for name in cp.sections():
            if name not in SCHEMA:
                raise ConfigError(f"{source}: unknown section [{name}]")
            values = {}
            for key, raw in cp.items(name):
                if key not in SCHEMA[name]:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
                values[key] = _convert(raw, SCHEMA[name][key], f"{source} [{name}] {key}")
            sections[name] = values
        cfg = cls(sections, text)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "ExperimentConfig":
        if path is None:
            return cls.parse("", "<defaults>")
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        return cls.parse(p.read_text(encoding="utf-8"), str(p))

    def get(self, section: str) -> dict:
        return dict(self.sections.get(section, {}))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.sections, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> None:
        # build every typed object once so bad values fail before any work starts
        try:
            self.synth_spec()
            for role in (None, "teacher", "student"):
                self.stage(role)
            self.two_stage_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{self.source or 'config'}: {exc}") from None

    def label_set(self):
        return builtin_label_set(self.get("data").get("label_set", "iemocap"))

    def synth_spec(self) -> SynthSpec:
        s = self.get("synth")
        s.pop("n_test_conversations", None)
        labels = tuple(s.pop("labels", ()))
        return SynthSpec(label_set=self.get("data").get("label_set", "iemocap"),
                         labels=labels, **s)

    def stage(self, role: str | None, seed: int = 0) -> StageConfig:
        def merged(kind):
            base = self.get(kind)
            if role:
                base.update(self.get(f"{role}.{kind}"))
            return base

        train_cfg = TrainConfig(seed=seed, **merged("train"))
        return StageConfig(EncoderConfig(**merged("encoder")), BuildConfig(**merged("text")),
                           train_cfg)

    def two_stage_config(self, seed: int = 0) -> TwoStageConfig:
        ts = self.get("two_stage")
        threshold = ts.get("threshold", 0.7)
        student = self.stage("student", seed)
        student = replace(student, build=replace(student.build, with_knowledge=True,
                                                 knowledge_threshold=threshold))
        return TwoStageConfig(self.stage("teacher", seed), student,
                              ts.get("knowledge_scheme", "task_driven"), threshold)


# -- helpers -------------------------------------------------------------------

def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out or cfg.get("run").get("out", "erckit-out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: str | Path | None, what: str) -> Path:
    if path is None:
        raise MissingArtifact(f"no {what} given")
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{what} not found: {p}")
    return p


def _corpus(cfg: ExperimentConfig, which: str, override: str | None = None,
            required: bool = True) -> Corpus | None:
    path = override or cfg.get("data").get(which)
    if path is None and not required:
        return None
    return load_corpus(_require(path, f"{which} corpus"), cfg.label_set(), which)


def _write_json(path: Path, payload: dict, cfg: ExperimentConfig, seed: int) -> None:
    record = {"erckit_version": __version__, "config_digest": cfg.digest(), "seed": seed, **payload}
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _primary_metric(label_set_name: str) -> str:
    return "micro_f1_excl_neutral" if label_set_name == "dailydialog" else "weighted_f1"


# -- commands ------------------------------------------------------------------

def cmd_synth(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args, cfg)
    spec = cfg.synth_spec()
    n_test = cfg.get("synth").get("n_test_conversations", max(1, spec.n_conversations // 2))
    train_c = synth_corpus(spec, args.seed, "train")
    test_c = synth_corpus(replace(spec, n_conversations=n_test), args.seed + 1000, "test")
    write_corpus(train_c, out / "train.jsonl")
    write_corpus(test_c, out / "test.jsonl")
    _write_json(out / "synth.json", {"train": "train.jsonl", "test": "test.jsonl",
                                     "train_utterances": train_c.n_utterances(),
                                     "test_utterances": test_c.n_utterances()}, cfg, args.seed)
    print(f"wrote {len(train_c)} train and {len(test_c)} test conversations to {out}")
    return 0


def cmd_inspect_text(args, cfg: ExperimentConfig) -> int:
    corpus = _corpus(cfg, "train", args.corpus)
    convs = corpus.by_id()
    if args.conv not in convs:
        raise CorpusError(f"conversation {args.conv!r} not in corpus")
    stage = cfg.stage(args.role)
    bc = stage.build
    km = None
    if args.knowledge:
        km = KnowledgeMap.read(_require(args.knowledge, "knowledge file"))
        bc = replace(bc, with_knowledge=True, knowledge_threshold=args.p if args.p is not None
                     else cfg.get("two_stage").get("threshold", 0.7))
    st = build(convs[args.conv], args.index, bc, km)
    print(st.rendered)
    print(st.span_table())
    return 0


def _train_stage(cfg, args, role, scheme_name, train_c, test_c, out, name, knowledge=None):
    stage = cfg.stage(role, args.seed)
    ls = train_c.label_set
    scheme = knowledge_scheme_for(ls, scheme_name)
    vocab_path = out / "vocab.txt"
    vocab = vocab_for([train_c], ls)
    vocab.write(vocab_path)
    build_cfg = stage.build
    if knowledge is not None:
        build_cfg = replace(build_cfg, with_knowledge=True,
                            knowledge_threshold=cfg.get("two_stage").get("threshold", 0.7))
    bundle = make_bundle(vocab, scheme, build_cfg, stage.encoder, stage.train)
    bundle, epoch_log = train(bundle, train_c, knowledge=knowledge)
    bundle.save(out / f"{name}.npz")
    write_log_csv(epoch_log, out / f"{name}_log.csv")
    payload = {"model": f"{name}.npz", "scheme": scheme.name,
               "trainable_parameters": bundle.n_trainable()}
    return bundle, payload


def cmd_train_teacher(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args, cfg)
    train_c = _corpus(cfg, "train")
    test_c = _corpus(cfg, "test", required=False)
    scheme_name = cfg.get("two_stage").get("knowledge_scheme", "task_driven")
    bundle, payload = _train_stage(cfg, args, "teacher", scheme_name, train_c, test_c, out, "teacher")
    if test_c is not None:
        report, _ = evaluate_bundle(bundle, test_c)
        payload["test"] = report.to_dict()
    _write_json(out / "teacher_report.json", payload, cfg, args.seed)
    print(f"teacher written to {out / 'teacher.npz'}")
    return 0


def cmd_distill(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args, cfg)
    teacher = ModelBundle.load(_require(args.teacher or out / "teacher.npz", "teacher checkpoint"))
    written = {}
    for split in ("train", "test"):
        corpus = _corpus(cfg, split, required=(split == "train"))
        if corpus is None:
            continue
        if args.online:
            from erckit.oerc import online_knowledge
            km = online_knowledge(teacher, corpus)
        else:
            km = generate_knowledge(teacher, corpus, teacher.scheme)
        path = out / f"knowledge_{split}.jsonl"
        km.write(path)
        threshold = cfg.get("two_stage").get("threshold", 0.7)
        written[split] = {"file": path.name, "entries": len(km),
                          "accepted_fraction": km.acceptance_rate(threshold)}
    _write_json(out / "distill.json", written, cfg, args.seed)
    print(json.dumps(written, indent=2))
    return 0


def cmd_train_student(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args, cfg)
    km_path = _require(args.knowledge or out / "knowledge_train.jsonl", "train KnowledgeMap")
    km = KnowledgeMap.read(km_path)
    train_c = _corpus(cfg, "train")
    test_c = _corpus(cfg, "test", required=False)
    bundle, payload = _train_stage(cfg, args, "student", "task_driven", train_c, test_c, out,
                                   "student", knowledge=km)
    test_km_path = Path(args.test_knowledge) if args.test_knowledge else out / "knowledge_test.jsonl"
    if test_c is not None and test_km_path.exists():
        report, _ = evaluate_bundle(bundle, test_c, KnowledgeMap.read(test_km_path))
        payload["test"] = report.to_dict()
    _write_json(out / "student_report.json", payload, cfg, args.seed)
    print(f"student written to {out / 'student.npz'}")
    return 0


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args, cfg)
    bundle = ModelBundle.load(_require(args.model, "model checkpoint"))
    test_c = _corpus(cfg, "test", args.corpus)
    km = None
    if bundle.build_config.with_knowledge:
        km = KnowledgeMap.read(_require(args.knowledge or out / "knowledge_test.jsonl",
                                        "test KnowledgeMap"))
    report, preds = evaluate_bundle(bundle, test_c, km)
    name = Path(args.model).stem
    _write_json(out / f"eval_{name}.json", {"model": str(args.model), "report": report.to_dict()},
                cfg, args.seed)
    ds = test_c.label_set.name
    (out / f"eval_{name}_es.csv").write_text(
        emotion_shift_table_csv({name: {ds: (report.es_accuracy, report.woes_accuracy)}}, [ds]))
    with open(out / f"eval_{name}_predictions.jsonl", "w") as fh:
        for (conv, i), p in zip(test_c.items(), preds):
            fh.write(json.dumps({"conv": conv.id, "idx": i, "label": p.label,
                                 "conf": p.confidence}) + "\n")
    metric = _primary_metric(ds)
    print(f"{name}: {metric}={report.primary(metric):.4f} accuracy={report.accuracy:.4f}")
    return 0


def cmd_oerc_sim(args, cfg: ExperimentConfig) -> int:
    from erckit.oerc import SessionTemplate, simulate, train_online_student, normalize_mode

    out = _out_dir(args, cfg)
    oc = cfg.get("oerc")
    mode = normalize_mode(args.mode or oc.get("mode", "MSA+K+C"))
    p = args.p if args.p is not None else oc.get("p", 0.5)
    window = oc.get("window", cfg.stage("student").build.window)
    teacher = ModelBundle.load(_require(args.teacher or out / "teacher.npz", "teacher checkpoint"))
    test_c = _corpus(cfg, "test")
    if args.student:
        student = ModelBundle.load(_require(args.student, "student checkpoint"))
    else:
        stage = cfg.stage("student", args.seed)
        train_c = _corpus(cfg, "train")
        student, epoch_log = train_online_student(
            teacher, train_c, mode, teacher.vocab, stage.encoder, stage.train, p, window,
            stage.build.token_budget)
        tag = mode.lower().replace("+", "-")
        student.save(out / f"oerc_student_{tag}.npz")
        write_log_csv(epoch_log, out / f"oerc_student_{tag}_log.csv")
    result = simulate(test_c, SessionTemplate(teacher, student, mode, p, window,
                                              student.build_config.token_budget))
    tag = mode.lower().replace("+", "-")
    result.write_timing_csv(out / f"oerc_timing_{tag}.csv")
    _write_json(out / f"oerc_{tag}.json", {
        "mode": mode, "p": p, "summary": result.summary(),
        "report": result.report.to_dict() if result.report else None,
    }, cfg, args.seed)
    s = result.summary()
    acc = result.report.accuracy if result.report else float("nan")
    print(f"{mode}: accuracy={acc:.4f} mean prediction tokens={s['mean_prediction_tokens']:.1f} "
          f"prediction time={s['prediction_seconds']:.3f}s")
    return 0


ABLATION_ROWS = (
    # mask, contexts, fcm, 2-layer MLP, two-stage
    (False, False, False, False, False),
    (True, False, False, False, False),
    (True, True, False, False, False),
    (True, True, True, False, False),
    (True, True, True, True, False),
    (True, True, True, True, True),
)


def run_ablation(cfg: ExperimentConfig, train_c: Corpus, test_c: Corpus, seed: int):
    """Six-row toggle ladder; returns ``(toggles, score)`` per row."""
    base = cfg.stage(None, seed)
    metric = _primary_metric(train_c.label_set.name)
    window = base.build.window or 8
    rows = []
    for mask, contexts, fcm, mlp2, staged in ABLATION_ROWS:
        bc = replace(base.build, use_mask=mask, window=window if contexts else 0,
                     with_knowledge=False, replace_contexts_with_knowledge=False)
        tc = replace(base.train, pooling="fcm" if fcm else "cls", mlp_depth=2 if mlp2 else 1)
        stage = StageConfig(base.encoder, bc, tc)
        if staged:
            ts = cfg.two_stage_config(seed)
            student = replace(stage, build=replace(bc, with_knowledge=True,
                                                   knowledge_threshold=ts.threshold))
            _, _, rep = two_stage(replace(ts, teacher=stage, student=student), train_c, test_c)
            report = rep.student
        else:
            bundle = make_bundle(vocab_for([train_c]), full_scheme(train_c.label_set), bc,
                                 stage.encoder, tc)
            bundle, _ = train(bundle, train_c)
            report, _ = evaluate_bundle(bundle, test_c)
        rows.append(((mask, contexts, fcm, mlp2, staged), report.primary(metric)))
    return rows


def cmd_ablate(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args, cfg)
    train_c = _corpus(cfg, "train")
    test_c = _corpus(cfg, "test")
    rows = run_ablation(cfg, train_c, test_c, args.seed)
    lines = ["mask,contexts,fcm,mlp2,two_stage,score"]
    for toggles, score in rows:
        lines.append(",".join("x" if t else "" for t in toggles) + f",{100 * score:.2f}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def run_pipeline(cfg: ExperimentConfig, train_c: Corpus, test_c: Corpus, seed: int,
                 pipeline: str) -> dict[str, float]:
    """Metrics of one seeded run; ``teacher`` trains a single model, ``two-stage`` both."""
    metric = _primary_metric(train_c.label_set.name)
    if pipeline == "teacher":
        stage = cfg.stage("teacher", seed)
        bundle = make_bundle(vocab_for([train_c]), full_scheme(train_c.label_set), stage.build,
                             stage.encoder, stage.train)
        bundle, _ = train(bundle, train_c)
        report, _ = evaluate_bundle(bundle, test_c)
        return {"teacher": report.primary(metric)}
    _, _, rep = two_stage(cfg.two_stage_config(seed), train_c, test_c)
    return {"teacher": rep.teacher.primary(metric), "student": rep.student.primary(metric)}


def cmd_stability(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args, cfg)
    train_c = _corpus(cfg, "train")
    test_c = _corpus(cfg, "test")
    seeds = [int(s) for s in cfg.get("run").get("seeds", ["0", "1", "2", "3", "4"])]
    results = {s: run_pipeline(cfg, train_c, test_c, s, args.pipeline) for s in seeds}
    lines = ["model,mean,std," + ",".join(f"seed{s}" for s in seeds)]
    summary = {}
    for model in results[seeds[0]]:
        mean, std = stability(lambda s: results[s][model], seeds)
        summary[model] = {"mean": mean, "std": std, "values": [results[s][model] for s in seeds]}
        lines.append(f"{model},{mean!r},{std!r}," + ",".join(repr(results[s][model]) for s in seeds))
    (out / "stability.csv").write_text("\n".join(lines) + "\n")
    _write_json(out / "stability.json", {"pipeline": args.pipeline, "seeds": seeds,
                                         "models": summary}, cfg, args.seed)
    print("\n".join(lines))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "inspect-text": cmd_inspect_text,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "train-student": cmd_train_student,
    "eval": cmd_eval,
    "oerc-sim": cmd_oerc_sim,
    "ablate": cmd_ablate,
    "stability": cmd_stability,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="erckit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="INI experiment config")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="output directory (default: [run] out or ./erckit-out)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    add("synth", "generate synthetic train/test corpora")
    sp = add("inspect-text", "print the suggestive text and span table for one utterance")
    sp.add_argument("--corpus")
    sp.add_argument("--conv", required=True)
    sp.add_argument("--index", type=int, required=True)
    sp.add_argument("--role", choices=("teacher", "student"))
    sp.add_argument("--knowledge")
    sp.add_argument("--p", type=float)
    add("train-teacher", "train the coarse teacher")
    sp = add("distill", "write teacher KnowledgeMaps for the train and test corpora")
    sp.add_argument("--teacher")
    sp.add_argument("--online", action="store_true", help="preceding-context teacher labels")
    sp = add("train-student", "train the knowledge-injected student")
    sp.add_argument("--knowledge")
    sp.add_argument("--test-knowledge")
    sp = add("eval", "evaluate a checkpoint on the test corpus")
    sp.add_argument("--model", required=True)
    sp.add_argument("--corpus")
    sp.add_argument("--knowledge")
    sp = add("oerc-sim", "stream the test corpus through an online session")
    sp.add_argument("--mode", choices=("msa-c", "msa-k-c", "ssa-k-c", "ssa-k"))
    sp.add_argument("--p", type=float)
    sp.add_argument("--teacher")
    sp.add_argument("--student")
    add("ablate", "run the six-row ablation ladder")
    sp = add("stability", "repeat a pipeline over seeds and report mean/std")
    sp.add_argument("--pipeline", choices=("teacher", "two-stage"), default="teacher")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (CorpusError, TextBuildError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, RuntimeError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
