"""Experiment grid: languages x prompts x alpha x runs, with resumable records and report tables."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .environment import SCHEMA, TransitionConfig, generate_cohort
from .fairness import DEFAULT_THRESHOLDS, FairnessReport, GoalPrompt, fairness_report
from .llm_gateway import (Gateway, HttpProvider, ProviderUnavailable, RateLimiter, ScriptedProvider,
                          Transcript)
from .search import SearchConfig, SearchFailed, _goal_from_entry, load_catalog, run_search
from .whittle import SimConfig

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class MissingConfigFile(ConfigError):
    pass


class SchemaViolation(ConfigError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class DanglingPromptFile(ConfigError):
    def __init__(self, path):
        super().__init__(f"prompt file missing or empty: {path}")
        self.path = str(path)


class ReportError(RuntimeError):
    pass


class ExperimentAborted(RuntimeError):
    def __init__(self, message, records):
        super().__init__(message)
        self.records = records


# -- config ------------------------------------------------------------------

@dataclass(frozen=True)
class CohortConfig:
    n: int = 100
    alphas: tuple[float, ...] = (0.2, 0.8)
    seed_base: int = 0
    transitions: TransitionConfig = TransitionConfig()


@dataclass(frozen=True)
class GatewayConfig:
    provider: str = "scripted"
    script: str | None = None
    endpoint: str | None = None
    model: str | None = None
    credential_env: str | None = None
    max_attempts: int = 5
    base_delay: float = 1.0
    max_concurrency: int = 1
    min_interval: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    cohort: CohortConfig
    sim: SimConfig
    search: SearchConfig
    gateway: GatewayConfig
    prompts: dict  # language -> {prompt_id: GoalPrompt}
    runs_per_cell: int = 20
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    output_dir: str = "runs"
    source: str | None = None

    @property
    def languages(self) -> list[str]:
        return list(self.prompts)

    @property
    def prompt_ids(self) -> list[int]:
        ids = set()
        for goals in self.prompts.values():
            ids.update(goals)
        return sorted(ids)

    def to_dict(self) -> dict:
        """Fully resolved snapshot (prompt texts inlined); round-trips through :func:`config_from_dict`."""
        return {
            "cohort": {
                "n": self.cohort.n,
                "alphas": list(self.cohort.alphas),
                "seed_base": self.cohort.seed_base,
                "transitions": {
                    "delta_max": self.cohort.transitions.delta_max,
                    "epsilon": self.cohort.transitions.epsilon,
                    "bad_range": list(self.cohort.transitions.bad_range),
                    "good_range": list(self.cohort.transitions.good_range),
                },
            },
            "sim": asdict(self.sim),
            "search": {k: v for k, v in asdict(self.search).items() if k != "sim"},
            "gateway": asdict(self.gateway),
            "prompts": {
                "ids": self.prompt_ids,
                "languages": {
                    lang: {str(pid): {"text": g.text,
                                      "intended": {k: sorted(v) for k, v in g.intended_buckets.items()}}
                           for pid, g in sorted(goals.items())}
                    for lang, goals in self.prompts.items()
                },
            },
            "runs_per_cell": self.runs_per_cell,
            "thresholds": list(self.thresholds),
            "output_dir": self.output_dir,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _section(doc: dict, name: str, allowed: Iterable[str]) -> dict:
    sec = doc.get(name) or {}
    if not isinstance(sec, dict):
        raise SchemaViolation(name, "must be a mapping")
    unknown = set(sec) - set(allowed)
    if unknown:
        raise SchemaViolation(f"{name}.{sorted(unknown)[0]}", "unknown field")
    return sec


def _num(sec, name, key, default, kind=float, lo=None, hi=None, lo_open=False, hi_open=False):
    value = sec.get(key, default)
    path = f"{name}.{key}"
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaViolation(path, f"expected a number, got {value!r}")
    if kind is int:
        if float(value) != int(value):
            raise SchemaViolation(path, f"expected an integer, got {value!r}")
        value = int(value)
    else:
        value = float(value)
    if lo is not None and (value < lo or (lo_open and value == lo)):
        raise SchemaViolation(path, f"must be {'>' if lo_open else '>='} {lo}, got {value}")
    if hi is not None and (value > hi or (hi_open and value == hi)):
        raise SchemaViolation(path, f"must be {'<' if hi_open else '<='} {hi}, got {value}")
    return value


_TOP_LEVEL = {"cohort", "sim", "search", "gateway", "prompts", "runs_per_cell", "thresholds", "output_dir"}


def config_from_dict(doc: dict, base_dir: Path | None = None, source: str | None = None) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise SchemaViolation("<root>", "config must be a mapping")
    unknown = set(doc) - _TOP_LEVEL
    if unknown:
        raise SchemaViolation(sorted(unknown)[0], "unknown field")
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()

    c = _section(doc, "cohort", {"n", "alphas", "seed_base", "transitions"})
    alphas = c.get("alphas", [0.2, 0.8])
    if not isinstance(alphas, list) or not alphas:
        raise SchemaViolation("cohort.alphas", "must be a non-empty list")
    for a in alphas:
        _num({"a": a}, "cohort.alphas", "a", None, lo=0, hi=1)
    t = _section(c, "transitions", {"delta_max", "epsilon", "bad_range", "good_range"})
    tdef = TransitionConfig()
    tc = TransitionConfig(
        delta_max=_num(t, "cohort.transitions", "delta_max", tdef.delta_max, lo=0, hi=1, hi_open=True),
        epsilon=_num(t, "cohort.transitions", "epsilon", tdef.epsilon, lo=0, hi=0.5, hi_open=True),
        bad_range=tuple(t.get("bad_range", tdef.bad_range)),
        good_range=tuple(t.get("good_range", tdef.good_range)),
    )
    try:
        tc.check()
    except ValueError as exc:
        raise SchemaViolation("cohort.transitions", str(exc)) from exc
    cohort = CohortConfig(
        n=_num(c, "cohort", "n", 100, int, lo=1),
        alphas=tuple(float(a) for a in alphas),
        seed_base=_num(c, "cohort", "seed_base", 0, int, lo=0),
        transitions=tc,
    )

    s = _section(doc, "sim", {"budget", "horizon", "episodes", "beta", "vi_tol", "index_tol", "p_init"})
    sim = SimConfig(
        budget=_num(s, "sim", "budget", 20, int, lo=1),
        horizon=_num(s, "sim", "horizon", 12, int, lo=1),
        episodes=_num(s, "sim", "episodes", 10, int, lo=1),
        beta=_num(s, "sim", "beta", 0.9, lo=0, hi=1, hi_open=True),
        vi_tol=_num(s, "sim", "vi_tol", 1e-6, lo=0, lo_open=True),
        index_tol=_num(s, "sim", "index_tol", 1e-4, lo=0, lo_open=True),
        p_init=_num(s, "sim", "p_init", 0.5, lo=0, hi=1),
    )

    q = _section(doc, "search", {"candidates", "generations", "generation_temperature",
                                 "reflection_temperature", "max_output_tokens", "probe_cap"})
    search = SearchConfig(
        candidates=_num(q, "search", "candidates", 3, int, lo=1),
        generations=_num(q, "search", "generations", 5, int, lo=1),
        generation_temperature=_num(q, "search", "generation_temperature", 1.0, lo=0),
        reflection_temperature=_num(q, "search", "reflection_temperature", 0.0, lo=0),
        max_output_tokens=_num(q, "search", "max_output_tokens", 512, int, lo=1),
        probe_cap=_num(q, "search", "probe_cap", 200, int, lo=1),
        sim=sim,
    )

    g = _section(doc, "gateway", {f for f in GatewayConfig.__dataclass_fields__})
    kind = g.get("provider", "scripted")
    if kind not in ("scripted", "http"):
        raise SchemaViolation("gateway.provider", f"expected 'scripted' or 'http', got {kind!r}")
    script = g.get("script")
    if kind == "scripted":
        if not script:
            raise SchemaViolation("gateway.script", "required for the scripted provider")
        script_path = (base_dir / script).resolve()
        if not script_path.is_file():
            raise SchemaViolation("gateway.script", f"file not found: {script_path}")
        script = str(script_path)
    else:
        for key in ("endpoint", "model"):
            if not g.get(key):
                raise SchemaViolation(f"gateway.{key}", "required for the http provider")
    gateway = GatewayConfig(
        provider=kind, script=script, endpoint=g.get("endpoint"), model=g.get("model"),
        credential_env=g.get("credential_env"),
        max_attempts=_num(g, "gateway", "max_attempts", 5, int, lo=1),
        base_delay=_num(g, "gateway", "base_delay", 1.0, lo=0),
        max_concurrency=_num(g, "gateway", "max_concurrency", 1, int, lo=1),
        min_interval=_num(g, "gateway", "min_interval", 0.0, lo=0),
    )

    prompts = _load_prompts(doc.get("prompts") or {}, base_dir)

    thresholds = doc.get("thresholds", list(DEFAULT_THRESHOLDS))
    if not isinstance(thresholds, list) or not thresholds:
        raise SchemaViolation("thresholds", "must be a non-empty list")
    thresholds = tuple(float(x) for x in thresholds)
    if list(thresholds) != sorted(thresholds):
        raise SchemaViolation("thresholds", "must be sorted ascending")

    return ExperimentConfig(
        cohort=cohort, sim=sim, search=search, gateway=gateway, prompts=prompts,
        runs_per_cell=_num(doc, "<root>", "runs_per_cell", 20, int, lo=1),
        thresholds=thresholds,
        output_dir=str(doc.get("output_dir", "runs")),
        source=source,
    )


def _load_prompts(sec: dict, base_dir: Path) -> dict:
    """Build ``{language: {prompt_id: GoalPrompt}}``.

    ``languages`` maps a label to a directory holding ``<id>.txt`` per prompt,
    to ``null`` (use the catalog's English text), or to an inline mapping of
    ``{id: {text, intended}}`` as written in resolved snapshots.
    """
    if not isinstance(sec, dict):
        raise SchemaViolation("prompts", "must be a mapping")
    unknown = set(sec) - {"catalog", "ids", "languages"}
    if unknown:
        raise SchemaViolation(f"prompts.{sorted(unknown)[0]}", "unknown field")
    catalog_path = sec.get("catalog")
    if catalog_path is not None:
        catalog_path = base_dir / catalog_path
        if not catalog_path.is_file():
            raise DanglingPromptFile(catalog_path)
    catalog = load_catalog(catalog_path)
    ids = sec.get("ids", sorted(catalog))
    if not isinstance(ids, list) or not ids:
        raise SchemaViolation("prompts.ids", "must be a non-empty list")
    languages = sec.get("languages", {"en": None})
    if not isinstance(languages, dict) or not languages:
        raise SchemaViolation("prompts.languages", "must be a non-empty mapping")
    out = {}
    for lang, where in languages.items():
        goals = {}
        if isinstance(where, dict):
            for pid, entry in where.items():
                goals[int(pid)] = _goal_from_entry(int(pid), entry, str(lang))
        else:
            for pid in ids:
                pid = int(pid)
                if pid not in catalog:
                    raise SchemaViolation("prompts.ids", f"prompt {pid} is not in the catalog")
                text = None
                if where is not None:
                    path = base_dir / where / f"{pid}.txt"
                    if not path.is_file():
                        raise DanglingPromptFile(path)
                    text = path.read_text(encoding="utf-8").strip()
                    if not text:
                        raise DanglingPromptFile(path)
                goals[pid] = _goal_from_entry(pid, catalog[pid], str(lang), text)
        out[str(lang)] = goals
    return out


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise MissingConfigFile(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise SchemaViolation("<root>", f"not valid YAML/JSON: {exc}") from exc
    return config_from_dict(doc or {}, path.parent, str(path))


# -- grid --------------------------------------------------------------------

@dataclass(frozen=True)
class CellKey:
    language: str
    prompt_id: int
    alpha: float
    run: int

    @property
    def name(self) -> str:
        return f"{self.language}_p{self.prompt_id}_a{self.alpha:g}_r{self.run:03d}"

    @property
    def run_id(self) -> str:
        return self.name


def cell_seed(seed_base: int, key: CellKey) -> int:
    h = hashlib.sha256(key.name.encode()).digest()
    return seed_base ^ (int.from_bytes(h[:8], "big") & (2 ** 63 - 1))


def grid(config: ExperimentConfig) -> list[CellKey]:
    cells = []
    for lang, goals in config.prompts.items():
        for pid in sorted(goals):
            for alpha in config.cohort.alphas:
                for run in range(config.runs_per_cell):
                    cells.append(CellKey(lang, pid, alpha, run))
    return cells


def _provider(config: ExperimentConfig, script_override=None):
    gc = config.gateway
    if script_override is not None:
        return script_override
    if gc.provider == "scripted":
        return ScriptedProvider.from_file(gc.script)
    return HttpProvider(gc.endpoint, gc.model, gc.credential_env, gc.max_attempts, gc.base_delay)


def execute_cell(config: ExperimentConfig, key: CellKey, transcript: Transcript, provider,
                 limiter: RateLimiter | None = None) -> dict:
    """Run one grid cell; returns the JSON-ready RunRecord."""
    goal = config.prompts[key.language][key.prompt_id]
    seed = cell_seed(config.cohort.seed_base, key)
    cohort_seed, sim_seed = (int(x) for x in np.random.SeedSequence(seed).generate_state(2))
    cohort = generate_cohort(config.cohort.n, key.alpha, cohort_seed, config.cohort.transitions)
    gateway = Gateway(provider, transcript, limiter)
    record = {
        "cell": {"language": key.language, "prompt_id": key.prompt_id, "alpha": key.alpha, "run": key.run},
        "seed": seed,
        "cohort_seed": cohort_seed,
        "sim_seed": sim_seed,
        "status": "ok",
        "failure_reason": None,
        "final_expression": None,
        "search": None,
        "fairness": None,
    }
    try:
        outcome = run_search(goal, cohort, gateway, config.search, sim_seed, key.run_id)
    except SearchFailed as exc:
        record["status"] = "failed"
        record["failure_reason"] = "search-failed"
        record["search"] = exc.outcome.as_dict()
        return record
    final = outcome.final_candidate
    report = fairness_report(final.validation.feature_groups_used if final.ast is not None else None,
                             goal, final.simulation, cohort, config.thresholds)
    record["final_expression"] = final.canonical
    record["search"] = outcome.as_dict()
    record["fairness"] = report.as_dict()
    return record


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n"


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def run_directory(config: ExperimentConfig, base: Path | None = None) -> Path:
    base = Path(base) if base is not None else Path(config.output_dir)
    return base / f"run-{config.digest()[:12]}"


def run_experiment(config: ExperimentConfig, out_dir, resume: bool = False, workers: int = 1,
                   provider=None) -> list[dict]:
    """Execute every grid cell, persisting one record per cell as it completes.

    With ``resume`` set, cells whose record file already exists are loaded
    instead of re-run. A provider outage stops the grid after persisting what
    finished and raises :class:`ExperimentAborted`.
    """
    out = Path(out_dir)
    (out / "records").mkdir(parents=True, exist_ok=True)
    (out / "transcripts").mkdir(exist_ok=True)
    _atomic_write(out / "config.json", _dump(config.to_dict()))
    shared = provider if provider is not None else _provider(config)
    limiter = RateLimiter(config.gateway.max_concurrency, config.gateway.min_interval)
    records: dict[str, dict] = {}
    todo = []
    for key in grid(config):
        path = out / "records" / f"{key.name}.json"
        if resume and path.is_file():
            records[key.name] = json.loads(path.read_text(encoding="utf-8"))
        else:
            todo.append(key)
    stop = {"reason": None}

    def work(key: CellKey):
        if stop["reason"] is not None:
            return
        prov = shared.fresh() if isinstance(shared, ScriptedProvider) else shared
        transcript = Transcript(out / "transcripts" / f"{key.name}.jsonl")
        t0 = time.perf_counter()
        try:
            rec = execute_cell(config, key, transcript, prov, limiter)
        except ProviderUnavailable as exc:
            stop["reason"] = f"{key.name}: {exc}"
            return
        elapsed = time.perf_counter() - t0
        _atomic_write(out / "records" / f"{key.name}.json", _dump(rec))
        # wall time lives outside the record so records stay byte-identical across reruns
        with (out / "timings.jsonl").open("a", encoding="utf-8") as fh:
            fh.write(json.dumps({"cell": key.name, "wall_time_s": round(elapsed, 3)}) + "\n")
        records[key.name] = rec

    if workers <= 1:
        for key in todo:
            work(key)
    else:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(work, todo))
    ordered = [records[k.name] for k in grid(config) if k.name in records]
    if stop["reason"] is not None:
        raise ExperimentAborted(f"provider unavailable ({stop['reason']}); "
                                f"{len(ordered)} of {len(grid(config))} cells persisted", ordered)
    return ordered


def load_records(path) -> list[dict]:
    path = Path(path)
    if (path / "records").is_dir():
        path = path / "records"
    files = sorted(path.glob("*.json"))
    return [json.loads(f.read_text(encoding="utf-8")) for f in files]


def replay_record(record_path, provider=None) -> tuple[dict, dict]:
    """Re-execute one cell from its run directory, answering LLM calls from the stored transcript.

    Returns (stored record, recomputed record).
    """
    record_path = Path(record_path)
    run_dir = record_path.parent.parent
    snapshot = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    config = config_from_dict(snapshot, run_dir)
    stored = json.loads(record_path.read_text(encoding="utf-8"))
    c = stored["cell"]
    key = CellKey(c["language"], c["prompt_id"], c["alpha"], c["run"])
    if provider is None:
        entries = []
        tpath = run_dir / "transcripts" / f"{key.name}.jsonl"
        for line in tpath.read_text(encoding="utf-8").splitlines():
            e = json.loads(line)
            if e.get("event") == "completion":
                entries.append((re.escape(e["tag"]) + "$", e["response"]))
        provider = ScriptedProvider(entries)
    fresh = execute_cell(config, key, Transcript(), provider)
    return stored, fresh


# -- reports -----------------------------------------------------------------

def mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    """Sample mean and sample standard deviation over sqrt(n); stderr is NaN below two values."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        return math.nan, math.nan
    if x.size < 2:
        return float(x.mean()), math.nan
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def _f(x: float, digits: int = 6) -> str:
    return "NA" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.{digits}f}"


def _csv(rows: list[list], header: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


REPORT_COLUMNS = {
    "acceptable_rates.csv": ["language", "prompt_id", "runs", "failed", "acceptable", "mean", "stderr"],
    "success_rates_alpha_{alpha}.csv": ["language", "prompt_id", "runs", "failed", "successes", "mean", "stderr"],
    "allocation_shares.csv": ["language", "prompt_id", "alpha", "feature", "bucket", "label", "runs",
                              "mean_share", "stderr"],
    "unfairness_absolute.csv": ["language", "alpha", "threshold", "runs", "mean_prompt_count", "stderr"],
    "unfairness_relative_by_language.csv": ["language", "alpha", "runs", "mean_prompt_count", "stderr"],
    "unfairness_relative_by_prompt.csv": ["prompt_id", "alpha", "runs", "mean_language_count", "stderr"],
    "runs.csv": ["language", "prompt_id", "alpha", "run", "seed", "status", "final_expression", "acceptable",
                 "overall_success", "relative_flag", *[f"dp_{g}" for g in SCHEMA.names]],
}


def _cell(r):
    c = r["cell"]
    return c["language"], c["prompt_id"], c["alpha"], c["run"]


def aggregate(records: Sequence[dict]) -> dict[str, list[list]]:
    """Rows of every report table, computed from raw records."""
    ok = [r for r in records if r["status"] == "ok"]
    langs = sorted({_cell(r)[0] for r in records})
    pids = sorted({_cell(r)[1] for r in records})
    alphas = sorted({_cell(r)[2] for r in records})
    tables: dict[str, list[list]] = {}

    rows = []
    for lang in langs:
        for pid in pids:
            cell = [r for r in records if _cell(r)[:2] == (lang, pid)]
            if not cell:
                continue
            good = [r for r in cell if r["status"] == "ok"]
            vals = [1.0 if r["fairness"]["acceptable"] else 0.0 for r in good]
            m, se = mean_stderr(vals)
            rows.append([lang, pid, len(good), len(cell) - len(good), int(sum(vals)), _f(m), _f(se)])
    tables["acceptable_rates.csv"] = rows

    for alpha in alphas:
        rows = []
        for lang in langs:
            for pid in pids:
                cell = [r for r in records if _cell(r)[:3] == (lang, pid, alpha)]
                if not cell:
                    continue
                good = [r for r in cell if r["status"] == "ok"]
                vals = [1.0 if r["fairness"]["overall_success"] else 0.0 for r in good]
                m, se = mean_stderr(vals)
                rows.append([lang, pid, len(good), len(cell) - len(good), int(sum(vals)), _f(m), _f(se)])
        tables[f"success_rates_alpha_{alpha:g}.csv"] = rows

    rows = []
    for lang in langs:
        for pid in pids:
            for alpha in alphas:
                good = [r for r in ok if _cell(r)[:3] == (lang, pid, alpha)]
                if not good:
                    continue
                for g in SCHEMA:
                    for b, label in enumerate(g.labels):
                        m, se = mean_stderr([r["fairness"]["shares"][g.name][b] for r in good])
                        rows.append([lang, pid, alpha, g.name, b, label, len(good), _f(m), _f(se)])
    tables["allocation_shares.csv"] = rows

    # unfairness: per run index, count prompts (or languages) flagged, then average over run indices
    runs = sorted({_cell(r)[3] for r in ok})
    rows = []
    rel_lang = []
    for lang in langs:
        for alpha in alphas:
            by_run = {run: [r for r in ok if _cell(r)[0] == lang and _cell(r)[2] == alpha and _cell(r)[3] == run]
                      for run in runs}
            by_run = {k: v for k, v in by_run.items() if v}
            if not by_run:
                continue
            thresholds = next(iter(by_run.values()))[0]["fairness"]["thresholds"]
            for ti, t in enumerate(thresholds):
                counts = [sum(r["fairness"]["absolute_counts"][ti] > 0 for r in rs) for rs in by_run.values()]
                m, se = mean_stderr(counts)
                rows.append([lang, alpha, t, len(counts), _f(m), _f(se)])
            counts = [sum(bool(r["fairness"]["relative_flag"]) for r in rs) for rs in by_run.values()]
            m, se = mean_stderr(counts)
            rel_lang.append([lang, alpha, len(counts), _f(m), _f(se)])
    tables["unfairness_absolute.csv"] = rows
    tables["unfairness_relative_by_language.csv"] = rel_lang

    rows = []
    for pid in pids:
        for alpha in alphas:
            by_run = {run: [r for r in ok if _cell(r)[1] == pid and _cell(r)[2] == alpha and _cell(r)[3] == run]
                      for run in runs}
            by_run = {k: v for k, v in by_run.items() if v}
            if not by_run:
                continue
            counts = [sum(bool(r["fairness"]["relative_flag"]) for r in rs) for rs in by_run.values()]
            m, se = mean_stderr(counts)
            rows.append([pid, alpha, len(counts), _f(m), _f(se)])
    tables["unfairness_relative_by_prompt.csv"] = rows

    rows = []
    for r in sorted(records, key=_cell):
        lang, pid, alpha, run = _cell(r)
        fr = r["fairness"]
        if fr is None:
            rows.append([lang, pid, alpha, run, r["seed"], r["status"], "", "", "", "", *[""] * len(SCHEMA)])
        else:
            rows.append([lang, pid, alpha, run, r["seed"], r["status"], r["final_expression"],
                         int(fr["acceptable"]), int(fr["overall_success"]), int(fr["relative_flag"]),
                         *[_f(fr["dp_variance"][g]) for g in SCHEMA.names]])
    tables["runs.csv"] = rows
    return tables


def acceptable_table_markdown(rows: list[list]) -> str:
    langs = sorted({r[0] for r in rows})
    pids = sorted({r[1] for r in rows})
    lookup = {(r[0], r[1]): r for r in rows}
    lines = ["| Language | " + " | ".join(f"Prompt {p}" for p in pids) + " |",
             "|---|" + "---|" * len(pids)]
    for lang in langs:
        cells = []
        for p in pids:
            r = lookup.get((lang, p))
            if r is None:
                cells.append("")
            elif r[2] == 0:
                cells.append(f"NA ({r[3]} failed)")
            else:
                m = float(r[5])
                se = "NA" if r[6] == "NA" else f"{float(r[6]):.3f}"
                cells.append(f"{m:.3f} ± {se}")
        lines.append(f"| {lang} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def emit_report(records: Sequence[dict], out_dir, svg: bool = False) -> list[Path]:
    if not records:
        raise ReportError("no run records to report on")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables = aggregate(records)
    written = []
    for name, rows in tables.items():
        template = "success_rates_alpha_{alpha}.csv" if name.startswith("success_rates_alpha_") else name
        path = out / name
        path.write_text(_csv(rows, REPORT_COLUMNS[template]), encoding="utf-8")
        written.append(path)
    md = out / "acceptable_rates.md"
    md.write_text(acceptable_table_markdown(tables["acceptable_rates.csv"]), encoding="utf-8")
    written.append(md)
    if svg:
        from .plots import render_svgs
        written.extend(render_svgs(tables, out))
    return written
