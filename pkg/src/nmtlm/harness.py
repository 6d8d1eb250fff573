"""Plan-driven experiment runner: grid cells, metric rows, fits and plot data.

Plan files are YAML (JSON is accepted too). Keys, all optional except
``name``:

    name, master_seed, seeds, output_dir
    model:  d, d_ff, heads, norm_placement, dropout, label_smoothing,
            tie_lm_parameters, restart_positions, dtype
    grid:   variants (names or {family, top_only, tgt_only}),
            L (EncDec depths; LM variants are aligned to them),
            alignment (subset of deep, wide, none)
    data:   languages, block_size, min_len, max_len,
            directions ([{src, tgt, rule, n}]), held_out ([[src, tgt]]),
            tag_position, temperature, dev_n, test_n
    train:  TrainConfig fields plus batch_tokens, average_last
    eval:   splits, beam, length_penalty, max_sentences
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import io
import json
import logging
import shutil
import statistics
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .architectures import (ConfigError, ModelConfig, ModelVariant, align_configs, flops_estimate,
                            init_model, param_count)
from .data import (RuleBook, SamplerConfig, TranslationRule, generate_corpus, make_batches,
                   make_languages, tag_pairs)
from .evaluation import evaluate_direction
from .scaling import ScalingObservation, compare_families, fit_power_law, predict
from .trainer import TrainConfig, Trainer, checkpoint_average, checkpoint_dirs

log = logging.getLogger("nmtlm.harness")

EXIT_OK, EXIT_CELL_FAILED, EXIT_INVALID = 0, 1, 2
ALIGNMENTS = ("deep", "wide", "none")
N_CURVE = 64

DEFAULTS = {
    "master_seed": 0,
    "seeds": 1,
    "output_dir": None,
    "model": {"d": 64, "d_ff": 256, "heads": 4, "norm_placement": "post", "dropout": 0.1,
              "label_smoothing": 0.1, "tie_lm_parameters": True, "restart_positions": True,
              "dtype": "float32"},
    "grid": {"variants": ["encdec"], "L": [1], "alignment": ["deep"]},
    "data": {"languages": ["src", "tgt"], "block_size": 24, "min_len": 3, "max_len": 8,
             "directions": [{"src": "src", "tgt": "tgt", "rule": "reverse", "n": 2000}],
             "held_out": [], "tag_position": None, "temperature": 5.0, "dev_n": 100, "test_n": 100},
    "train": {"steps": 4000, "warmup_steps": 400, "batch_tokens": 1024, "average_last": 10,
              "checkpoint_interval": 100},
    "eval": {"splits": ["dev"], "beam": 1, "length_penalty": 0.5, "max_sentences": None},
}
TRAIN_EXTRA = ("batch_tokens", "average_last")
MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"variant", "L", "scale_mode", "vocab_size"}
# seed comes from master_seed; dropout and label smoothing from the model section
TRAIN_KEYS = ({f.name for f in dataclasses.fields(TrainConfig)} - {"seed", "dropout", "label_smoothing"}
              | set(TRAIN_EXTRA))

ROW_COLUMNS = ("plan_hash", "cell_hash", "master_seed", "seed", "cell", "family", "variant", "alignment",
               "L_ref", "L", "d", "d_ff", "n_params", "flops", "direction", "split", "supervised",
               "log_ppl", "bleu", "lang_acc", "beam", "length_penalty", "steps")


class PlanError(ValueError):
    """A plan failed validation; the message names the offending field."""


def _canon(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def content_hash(obj):
    return hashlib.sha1(_canon(obj).encode()).hexdigest()[:12]


def _merge(base, over):
    """Top-level keys must be known; sections are shallow-merged and checked in validate()."""
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise PlanError(f"unknown key {k}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise PlanError(f"{k} must be a mapping")
            out[k] = {**base[k], **copy.deepcopy(v)}
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class Cell:
    name: str
    family: str
    variant: ModelVariant
    alignment: str
    L_ref: int
    seed: int
    model: ModelConfig
    train: TrainConfig

    def spec(self):
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "family": self.family,
                "alignment": self.alignment, "L_ref": self.L_ref}

    @property
    def hash(self):
        return content_hash(self.spec())


@dataclass
class ExperimentPlan:
    raw: dict

    @property
    def name(self):
        return self.raw["name"]

    @property
    def hash(self):
        body = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return content_hash(body)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise PlanError("plan must be a mapping")
        if "name" not in d:
            raise PlanError("missing required key name")
        plan = cls(_merge({"name": None, **DEFAULTS}, d))
        plan.validate()
        return plan

    @classmethod
    def load(cls, path):
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as e:
            raise PlanError(f"cannot read plan {path}: {e}") from e
        return cls.from_dict(raw)

    def dump(self, path=None):
        text = yaml.safe_dump(self.raw, sort_keys=False)
        if path is not None:
            Path(path).write_text(text)
        return text

    # ---------------------------------------------------------- validation

    def validate(self):
        r = self.raw
        if not isinstance(r["name"], str) or not r["name"]:
            raise PlanError("name must be a nonempty string")
        if not isinstance(r["seeds"], int) or r["seeds"] < 1:
            raise PlanError("seeds must be a positive integer")
        if not isinstance(r["master_seed"], int):
            raise PlanError("master_seed must be an integer")
        for k in r["model"]:
            if k not in MODEL_KEYS:
                raise PlanError(f"unknown key model.{k}")
        for k in r["train"]:
            if k not in TRAIN_KEYS:
                raise PlanError(f"unknown key train.{k}")
        g = r["grid"]
        for k in g:
            if k not in ("variants", "L", "alignment"):
                raise PlanError(f"unknown key grid.{k}")
        if not g.get("variants"):
            raise PlanError("grid.variants must be a nonempty list")
        for i, v in enumerate(g["variants"]):
            try:
                _variant(v)
            except (ConfigError, TypeError) as e:
                raise PlanError(f"grid.variants[{i}]: {e}") from None
        Ls = g.get("L", [1])
        if not Ls or any(not isinstance(L, int) or L < 1 for L in Ls):
            raise PlanError("grid.L must be a nonempty list of positive integers")
        al = g.get("alignment", ["deep"])
        if not al or any(a not in ALIGNMENTS for a in al):
            raise PlanError(f"grid.alignment entries must be among {ALIGNMENTS}")
        self._validate_data()
        e = r["eval"]
        for k in e:
            if k not in DEFAULTS["eval"]:
                raise PlanError(f"unknown key eval.{k}")
        if any(s not in ("dev", "test") for s in e["splits"]):
            raise PlanError("eval.splits entries must be dev or test")
        if not isinstance(e["beam"], int) or e["beam"] < 1:
            raise PlanError("eval.beam must be a positive integer")
        if r["train"]["average_last"] < 1:
            raise PlanError("train.average_last must be >= 1")
        try:
            cells = self.cells()
        except (ConfigError, ValueError) as e:
            raise PlanError(f"grid cell does not resolve: {e}") from None
        if not cells:
            raise PlanError("grid resolves to no cells")

    def _validate_data(self):
        d = self.raw["data"]
        for k in d:
            if k not in DEFAULTS["data"]:
                raise PlanError(f"unknown key data.{k}")
        langs = d["languages"]
        if len(set(langs)) != len(langs) or len(langs) < 2:
            raise PlanError("data.languages must list at least 2 distinct languages")
        if not d["directions"]:
            raise PlanError("data.directions must be nonempty")
        rules = []
        for i, di in enumerate(d["directions"]):
            for k in ("src", "tgt"):
                if di.get(k) not in langs:
                    raise PlanError(f"data.directions[{i}].{k} names an unknown language")
            if not isinstance(di.get("n"), int) or di["n"] < 1:
                raise PlanError(f"data.directions[{i}].n must be a positive integer")
            try:
                rules.append(TranslationRule.parse(di["src"], di["tgt"], di.get("rule", "identity")))
            except ValueError as e:
                raise PlanError(f"data.directions[{i}].rule: {e}") from None
        book = RuleBook(rules)
        for i, pair in enumerate(d["held_out"]):
            try:
                book.resolve(*pair)
            except (KeyError, TypeError):
                raise PlanError(f"data.held_out[{i}] has no composed reference rule") from None
        if d["tag_position"] not in (None, "source_start", "source_end", "target_start"):
            raise PlanError("data.tag_position must be source_start, source_end, target_start or null")
        tgts = {di["tgt"] for di in d["directions"]} | {p[1] for p in d["held_out"]}
        if len(tgts) > 1 and d["tag_position"] is None:
            raise PlanError("data.tag_position is required when there are several target languages")
        if d["temperature"] <= 0:
            raise PlanError("data.temperature must be positive")

    # ---------------------------------------------------------- grid

    def vocab(self):
        d = self.raw["data"]
        return make_languages(d["languages"], d["block_size"], d["min_len"], d["max_len"],
                              self.raw["master_seed"])

    def cells(self):
        r = self.raw
        g = r["grid"]
        vocab_size = self.vocab().size
        t = {k: v for k, v in r["train"].items() if k not in TRAIN_EXTRA}
        out = []
        for seed_ix in range(r["seeds"]):
            seed = r["master_seed"] + seed_ix
            for v in g["variants"]:
                variant = _variant(v)
                for L in g["L"]:
                    ref = ModelConfig("encdec", L=L, vocab_size=vocab_size, **r["model"])
                    if variant.is_lm:
                        configs = []
                        for a in g["alignment"]:
                            if a == "none":
                                configs.append((a, ref.replace(variant=variant)))
                            else:
                                configs.append((a, align_configs(ref, variant)[a].config))
                    else:
                        configs = [("none", ref)]
                    for a, mc in configs:
                        family = variant.name if a == "none" else f"{variant.name}/{a}"
                        tc = TrainConfig(**{**t, "seed": seed, "dropout": mc.dropout,
                                            "label_smoothing": mc.label_smoothing})
                        name = f"{family.replace('/', '-')}-L{L}-s{seed_ix}"
                        out.append(Cell(name, family, variant, a, L, seed, mc, tc))
        seen = set()
        uniq = []
        for c in out:
            if c.name not in seen:
                seen.add(c.name)
                uniq.append(c)
        return uniq


def _variant(v):
    if isinstance(v, str):
        return ModelVariant.from_name(v)
    if isinstance(v, dict):
        return ModelVariant(**v)
    raise TypeError(f"variant must be a name or mapping, got {v!r}")


# --------------------------------------------------------------- data


@dataclass
class PlanData:
    vocab: object
    train: list
    eval: dict  # (src, tgt, split) -> corpus
    supervised: set


def build_data(plan):
    d = plan.raw["data"]
    seed = plan.raw["master_seed"]
    vocab = plan.vocab()
    rules = [TranslationRule.parse(x["src"], x["tgt"], x.get("rule", "identity")) for x in d["directions"]]
    book = RuleBook(rules)
    tag = d["tag_position"]

    def prep(c):
        return tag_pairs(c, vocab, tag) if tag else c

    train = [prep(generate_corpus(vocab, r, x["n"], seed, "train")) for r, x in zip(rules, d["directions"])]
    ev = {}
    directions = [(r.src, r.tgt) for r in rules] + [tuple(p) for p in d["held_out"]]
    for src, tgt in directions:
        rule = book.resolve(src, tgt)
        for split in plan.raw["eval"]["splits"]:
            n = d["dev_n"] if split == "dev" else d["test_n"]
            ev[(src, tgt, split)] = prep(generate_corpus(vocab, rule, n, seed, split))
    return PlanData(vocab, train, ev, {(r.src, r.tgt) for r in rules})


# --------------------------------------------------------------- running


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def run_cell(plan, cell, data, out_dir):
    tr = plan.raw["train"]
    ev = plan.raw["eval"]
    state = init_model(cell.model, cell.seed)
    stream = make_batches(data.train, SamplerConfig(plan.raw["data"]["temperature"], tr["batch_tokens"],
                                                    cell.seed))
    ck = Path(out_dir) / "checkpoints" / cell.name
    if ck.exists():
        shutil.rmtree(ck)
    cfg = dataclasses.replace(cell.train, keep_checkpoints=tr["average_last"])
    trainer = Trainer(state, stream, cfg)
    trainer.run(checkpoint_dir=ck)
    snaps = checkpoint_dirs(ck)[-tr["average_last"]:]
    final = checkpoint_average(snaps) if snaps else trainer.state
    n_params = param_count(cell.model)
    rows = []
    for (src, tgt, split), corpus in sorted(data.eval.items()):
        lens = [(len(p.src), len(p.tgt)) for p in corpus.pairs]
        flops = flops_estimate(cell.model, *map(lambda v: int(round(statistics.mean(v))), zip(*lens))).total
        m = evaluate_direction(final, corpus, data.vocab, ev["beam"], ev["length_penalty"], n_params,
                               flops, ev["max_sentences"])
        rows.append({
            "plan_hash": plan.hash, "cell_hash": cell.hash, "master_seed": plan.raw["master_seed"],
            "seed": cell.seed, "cell": cell.name, "family": cell.family, "variant": cell.variant.name,
            "alignment": cell.alignment, "L_ref": cell.L_ref, "L": cell.model.L, "d": cell.model.d,
            "d_ff": cell.model.d_ff, "n_params": n_params, "flops": flops, "direction": m.direction,
            "split": split, "supervised": int((src, tgt) in data.supervised), "log_ppl": m.log_ppl,
            "bleu": m.bleu, "lang_acc": m.lang_acc, "beam": m.beam, "length_penalty": m.length_penalty,
            "steps": cell.train.steps,
        })
    return rows


def write_rows(rows, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in ROW_COLUMNS])
    Path(path).write_text(buf.getvalue())


def read_rows(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("n_params", "flops", "L", "L_ref", "seed", "supervised", "d", "d_ff"):
            r[k] = int(r[k])
        for k in ("log_ppl", "bleu", "lang_acc"):
            r[k] = float(r[k])
    return rows


def run_plan(plan, out_dir=None, cells=None):
    """Run every cell, then write rows.csv, fits.txt and plots/. Returns (exit code, rows)."""
    if not isinstance(plan, ExperimentPlan):
        plan = ExperimentPlan.load(plan) if isinstance(plan, (str, Path)) else ExperimentPlan.from_dict(plan)
    out = Path(out_dir or plan.raw["output_dir"] or f"results/{plan.name}")
    out.mkdir(parents=True, exist_ok=True)
    plan.dump(out / "plan.yaml")
    data = build_data(plan)
    rows, failed = [], []
    for cell in cells or plan.cells():
        try:
            rows.extend(run_cell(plan, cell, data, out))
            log.info("cell %s done", cell.name)
        except Exception as e:  # a failed cell is recorded and skipped
            log.error("cell %s failed: %s", cell.name, e)
            failed.append((cell.name, f"{type(e).__name__}: {e}"))
    write_rows(rows, out / "rows.csv")
    fail_text = "".join(f"{n}\t{msg}\n" for n, msg in failed)
    (out / "failures.txt").write_text(fail_text)
    report(out, excluded=[n for n, _ in failed])
    return (EXIT_CELL_FAILED if failed else EXIT_OK), rows


# --------------------------------------------------------------- aggregation


def aggregate(rows, metric):
    """Median of ``metric`` over seeds, keyed by (family, slice, N)."""
    groups = {}
    for r in rows:
        key = (r["family"], f"{r['direction']}/{r['split']}", r["n_params"])
        groups.setdefault(key, []).append(r[metric])
    return {k: statistics.median(v) for k, v in sorted(groups.items())}


def n0_for(rows):
    """Parameter count of the 1-layer EncDec at the width used in ``rows``."""
    r = rows[0]
    return param_count(ModelConfig("encdec", d=r["d"], d_ff=_ref_dff(rows), L=1, heads=1))


def _ref_dff(rows):
    enc = [r["d_ff"] for r in rows if r["variant"] == "encdec"]
    return enc[0] if enc else rows[0]["d_ff"]


def fit_rows(rows):
    loss = aggregate(rows, "log_ppl")
    fams = {}
    for (fam, sl, N), v in loss.items():
        fams.setdefault((fam, sl), []).append(ScalingObservation(N, v, fam, sl))
    N0 = n0_for(rows)
    fits = {}
    for key, obs in sorted(fams.items()):
        if len({o.N for o in obs}) >= 2:
            fits[key] = (fit_power_law(obs, N0), [o.N for o in obs])
        else:
            fits[key] = (None, [o.N for o in obs])
    return fits, N0


def report(results_dir, excluded=()):
    """Recompute fits.txt and plots/*.csv from rows.csv (pure function of the rows)."""
    out = Path(results_dir)
    rows = read_rows(out / "rows.csv")
    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    if not excluded and (out / "failures.txt").exists():
        excluded = [ln.split("\t")[0] for ln in (out / "failures.txt").read_text().splitlines() if ln]
    lines = ["# power-law fits of log-perplexity (natural log) vs non-embedding parameters",
             f"excluded_cells={','.join(excluded) or '-'}"]
    fits = {}
    if rows:
        fits, N0 = fit_rows(rows)
        lines.append(f"N0={N0}")
        for (fam, sl), (fit, Ns) in fits.items():
            if fit is None:
                lines.append(f"family={fam} slice={sl} status=insufficient n={len(Ns)}")
            else:
                lines.append(f"family={fam} slice={sl} {fit.describe()}")
        slices = sorted({sl for _, sl in fits})
        for sl in slices:
            group = {fam: f for (fam, s), f in fits.items() if s == sl and f[0] is not None}
            if len(group) >= 2:
                lines.append(f"# comparison slice={sl}")
                lines.append(compare_families(group)["text"].rstrip("\n"))
    (out / "fits.txt").write_text("\n".join(lines) + "\n")
    emit_plot_data(rows, fits, plots)
    return fits


def emit_plot_data(rows, fits, plots_dir):
    """loss_vs_N.csv (with fitted curves), bleu_vs_N.csv, accuracy_vs_N.csv."""
    plots_dir = Path(plots_dir)
    specs = [("loss_vs_N.csv", "log_ppl", "loss"), ("bleu_vs_N.csv", "bleu", "bleu"),
             ("accuracy_vs_N.csv", "lang_acc", "lang_acc")]
    for fname, metric, col in specs:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["family", "slice", "N", col, "fitted"])
        for (fam, sl, N), v in aggregate(rows, metric).items():
            w.writerow([fam, sl, repr(float(N)), _fmt(float(v)), 0])
        if metric == "log_ppl":
            for (fam, sl), (fit, Ns) in sorted(fits.items()):
                if fit is None:
                    continue
                grid = np.logspace(np.log10(min(Ns)), np.log10(max(Ns)), N_CURVE)
                for N, v in zip(grid, predict(fit, grid)):
                    w.writerow([fam, sl, repr(float(N)), repr(float(v)), 1])
        (plots_dir / fname).write_text(buf.getvalue())


# --------------------------------------------------------------- presets


def preset_plans():
    """Desk-scale versions of the three experiment protocols, as raw plan dicts."""
    bilingual = {
        "name": "bilingual_scaling",
        "seeds": 3,
        "grid": {"variants": ["encdec", "prefixlm", "prefixlm_toponly", "causallm", "causallm_tgtonly"],
                 "L": [2, 4, 6, 8], "alignment": ["deep", "wide"]},
        "data": {"languages": ["src", "tgt"], "block_size": 24,
                 "directions": [{"src": "src", "tgt": "tgt", "rule": "reverse+rotate:1", "n": 4000}]},
        "train": {"steps": 4000, "warmup_steps": 400, "batch_tokens": 1024},
        "eval": {"splits": ["dev", "test"]},
    }
    multilingual = {
        "name": "multilingual_transfer",
        "seeds": 3,
        "grid": {"variants": ["encdec", "prefixlm", "causallm"], "L": [2, 3],
                 "alignment": ["deep"]},
        "data": {"languages": ["l0", "l1", "l2"], "block_size": 24, "tag_position": "source_start",
                 "directions": [
                     {"src": "l0", "tgt": "l1", "rule": "reverse", "n": 3000},
                     {"src": "l1", "tgt": "l0", "rule": "reverse", "n": 3000},
                     {"src": "l0", "tgt": "l2", "rule": "rotate:1", "n": 3000},
                     {"src": "l2", "tgt": "l0", "rule": "rotate:-1", "n": 3000},
                     {"src": "l1", "tgt": "l2", "rule": "reverse+rotate:1", "n": 300},
                     {"src": "l2", "tgt": "l1", "rule": "rotate:-1+reverse", "n": 300}]},
        "train": {"steps": 4000, "warmup_steps": 400, "batch_tokens": 1024},
    }
    zero_shot = {
        "name": "zero_shot",
        "seeds": 3,
        "grid": {"variants": ["encdec", "prefixlm", "causallm"], "L": [2], "alignment": ["deep"]},
        "data": {"languages": ["pv", "xa", "xb"], "block_size": 24, "tag_position": "source_start",
                 "directions": [
                     {"src": "pv", "tgt": "xa", "rule": "reverse", "n": 3000},
                     {"src": "xa", "tgt": "pv", "rule": "reverse", "n": 3000},
                     {"src": "pv", "tgt": "xb", "rule": "rotate:1", "n": 3000},
                     {"src": "xb", "tgt": "pv", "rule": "rotate:-1", "n": 3000}],
                 "held_out": [["xa", "xb"], ["xb", "xa"]]},
        "train": {"steps": 4000, "warmup_steps": 400, "batch_tokens": 1024},
    }
    return {p["name"]: p for p in (bilingual, multilingual, zero_shot)}
