//! Test discovery, per-model evaluation, reports and metatheory suites.

use crate::candidate::{enumerate_candidates, relations, Budget, Candidate};
use crate::dot;
use crate::error::{Error, Result};
use crate::litmus::{check_final, parse_test, prepare, ExpectedVerdict, Prepared, Verdict};
use crate::model::{
    check_base, check_strong, check_strong_with, check_weak, detect_bbm, erase, erased_relations, export_smt,
    strong_ob, Check, CycleEdge, Model, ModelOptions,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use walkdir::WalkDir;

pub const TEST_EXTENSION: &str = "vmtest";

/// All `.vmtest` files under `paths`, in lexicographic order.
pub fn discover(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_file() {
            out.push(p.clone());
            continue;
        }
        if !p.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{}: no such file or directory", p.display()),
            )));
        }
        for entry in WalkDir::new(p).sort_by_file_name() {
            let entry = entry.map_err(|e| Error::Io(e.into()))?;
            if entry.file_type().is_file() && entry.path().extension().is_some_and(|x| x == TEST_EXTENSION) {
                out.push(entry.into_path());
            }
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

pub fn load(path: &Path) -> Result<Prepared> {
    let text = std::fs::read_to_string(path)?;
    prepare(&parse_test(&text)?)
}

/// A model variant as run and reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub model: Model,
    pub ets: bool,
}

impl Variant {
    pub const STRONG: Variant = Variant { model: Model::Strong, ets: false };
    pub const ETS: Variant = Variant { model: Model::Strong, ets: true };
    pub const WEAK: Variant = Variant { model: Model::Weak, ets: false };
    pub const BASE: Variant = Variant { model: Model::Base, ets: false };
    pub const ALL: [Variant; 4] = [Variant::STRONG, Variant::ETS, Variant::WEAK, Variant::BASE];

    pub fn name(self) -> &'static str {
        match (self.model, self.ets) {
            (Model::Strong, false) => "strong",
            (Model::Strong, true) => "strong+ets",
            (Model::Weak, _) => "weak",
            (Model::Base, _) => "base",
        }
    }

    fn expected(self, prep: &Prepared) -> Option<Verdict> {
        let e = &prep.spec.expected;
        let key = match (self.model, self.ets) {
            (Model::Strong, false) => e.strong,
            (Model::Strong, true) => e.ets.or(e.strong),
            (Model::Weak, _) => e.weak,
            (Model::Base, _) => e.base,
        };
        match key {
            Some(ExpectedVerdict::Is(v)) => Some(v),
            _ => None,
        }
    }
}

/// Result of one model over all candidates of one test.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub candidates: usize,
    pub consistent: usize,
    pub allowed: usize,
    pub bbm: bool,
    /// Per candidate: the model check, and whether the final state holds.
    pub checks: Vec<(Check, bool)>,
}

impl Evaluation {
    pub fn verdict(&self) -> Verdict {
        Verdict::from_allowed(self.allowed > 0)
    }

    pub fn first_allowed(&self) -> Option<usize> {
        self.checks.iter().position(|(c, f)| c.consistent && *f)
    }

    /// First candidate matching the final state that the model rejects.
    pub fn first_forbidden(&self) -> Option<usize> {
        self.checks.iter().position(|(c, f)| !c.consistent && *f)
    }
}

pub fn check_candidate(prep: &Prepared, c: &Candidate, variant: Variant, mutate: bool) -> Result<(Check, bool)> {
    let env = relations(prep, c);
    let opts = ModelOptions { ets: variant.ets, mutate };
    match variant.model {
        Model::Strong => {
            let check = check_strong(c, &env, opts);
            let bbm = match (&check.consistent, &check.wco) {
                (true, Some(order)) => {
                    detect_bbm(c, &env, &strong_ob(&env, opts, order).union(env.n).plus(), &prep.image)
                }
                _ => false,
            };
            Ok((check, bbm))
        }
        Model::Weak => Ok((check_weak(&env), false)),
        Model::Base => {
            let erased = erase(c, &env)?;
            Ok((check_base(&erased, &erased_relations(&erased))?, false))
        }
    }
}

pub fn evaluate(prep: &Prepared, candidates: &[Candidate], variant: Variant, mutate: bool) -> Result<Evaluation> {
    let results: Vec<(Check, bool, bool)> = candidates
        .par_iter()
        .map(|c| {
            let (check, bbm) = check_candidate(prep, c, variant, mutate)?;
            Ok((check, bbm, check_final(&prep.final_state, &c.outcome)))
        })
        .collect::<Result<_>>()?;
    let consistent = results.iter().filter(|r| r.0.consistent).count();
    let allowed = results.iter().filter(|r| r.0.consistent && r.2).count();
    let bbm = results.iter().any(|r| r.1);
    Ok(Evaluation {
        candidates: candidates.len(),
        consistent,
        allowed,
        bbm,
        checks: results.into_iter().map(|(c, _, f)| (c, f)).collect(),
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    /// Variants to evaluate; empty means all four.
    pub variants: Vec<Variant>,
    pub budget: Budget,
    pub jobs: Option<usize>,
    pub emit_dot: Option<PathBuf>,
    pub emit_smt: Option<PathBuf>,
    pub dump_cycle: bool,
    pub mutate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestResult {
    pub name: String,
    pub file: String,
    pub model: String,
    pub expected: Option<Verdict>,
    pub verdict: Option<Verdict>,
    pub matches: bool,
    pub candidates: usize,
    pub consistent: usize,
    pub allowed: usize,
    pub bbm: bool,
    pub time_ms: u64,
    pub error: Option<String>,
    pub warnings: Vec<String>,
    pub cycle: Vec<CycleEdge>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub tests: usize,
    pub runs: usize,
    pub mismatches: Vec<String>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub results: Vec<TestResult>,
    pub summary: Summary,
}

impl RunReport {
    pub fn ok(&self) -> bool {
        self.summary.mismatches.is_empty() && self.summary.errors.is_empty()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "name",
            "model",
            "expected",
            "verdict",
            "matches",
            "candidates",
            "consistent",
            "allowed",
            "bbm",
            "time_ms",
            "error",
        ])?;
        for r in &self.results {
            let show = |v: Option<Verdict>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
            w.write_record([
                r.name.clone(),
                r.model.clone(),
                show(r.expected),
                show(r.verdict),
                r.matches.to_string(),
                r.candidates.to_string(),
                r.consistent.to_string(),
                r.allowed.to_string(),
                r.bbm.to_string(),
                r.time_ms.to_string(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match jobs {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

pub fn file_stem(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().to_string())
}

fn safe_name(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || "+-._".contains(c) { c } else { '_' }).collect()
}

fn run_one(path: &Path, cfg: &RunConfig) -> Vec<TestResult> {
    let file = path.display().to_string();
    let variants = if cfg.variants.is_empty() { Variant::ALL.to_vec() } else { cfg.variants.clone() };
    let failed = |name: String, msg: String| {
        variants
            .iter()
            .map(|v| TestResult {
                name: name.clone(),
                file: file.clone(),
                model: v.name().to_string(),
                expected: None,
                verdict: None,
                matches: false,
                candidates: 0,
                consistent: 0,
                allowed: 0,
                bbm: false,
                time_ms: 0,
                error: Some(msg.clone()),
                warnings: Vec::new(),
                cycle: Vec::new(),
            })
            .collect::<Vec<_>>()
    };
    let prep = match load(path) {
        Ok(p) => p,
        Err(e) => return failed(file_stem(path), e.to_string()),
    };
    let name = prep.spec.name.clone();
    let start = Instant::now();
    let candidates = match enumerate_candidates(&prep, cfg.budget) {
        Ok(c) => c,
        Err(e) => return failed(name, e.to_string()),
    };
    let enum_ms = start.elapsed().as_millis() as u64;
    let mut out = Vec::new();
    for &v in &variants {
        let start = Instant::now();
        let expected = v.expected(&prep);
        let mut result = TestResult {
            name: name.clone(),
            file: file.clone(),
            model: v.name().to_string(),
            expected,
            verdict: None,
            matches: true,
            candidates: candidates.len(),
            consistent: 0,
            allowed: 0,
            bbm: false,
            time_ms: 0,
            error: None,
            warnings: Vec::new(),
            cycle: Vec::new(),
        };
        match evaluate(&prep, &candidates, v, cfg.mutate) {
            Ok(ev) => {
                let verdict = ev.verdict();
                result.verdict = Some(verdict);
                result.matches = expected.is_none_or(|x| x == verdict);
                result.consistent = ev.consistent;
                result.allowed = ev.allowed;
                result.bbm = ev.bbm;
                if v == Variant::STRONG {
                    if let Some(n) = prep.spec.expected.candidates {
                        if n != candidates.len() {
                            result.warnings.push(format!("expected {n} candidates, found {}", candidates.len()));
                        }
                    }
                }
                if let Some(k) = ev.first_forbidden().filter(|_| ev.allowed == 0) {
                    result.cycle = ev.checks[k].0.cycle.clone();
                }
                if let Err(e) = emit_artifacts(&prep, &candidates, &ev, v, cfg) {
                    result.warnings.push(format!("artifact output failed: {e}"));
                }
            }
            Err(Error::Precondition(msg)) if expected.is_none() => {
                result.warnings.push(format!("not applicable: {msg}"));
            }
            Err(e) => {
                result.matches = false;
                result.error = Some(e.to_string());
            }
        }
        result.time_ms = enum_ms + start.elapsed().as_millis() as u64;
        out.push(result);
    }
    out
}

fn emit_artifacts(prep: &Prepared, cands: &[Candidate], ev: &Evaluation, v: Variant, cfg: &RunConfig) -> Result<()> {
    let base = safe_name(&format!("{}.{}", prep.spec.name, v.name()));
    if let Some(dir) = &cfg.emit_dot {
        std::fs::create_dir_all(dir)?;
        if let Some(k) = ev.first_allowed() {
            let env = relations(prep, &cands[k]);
            let text = dot::render(&prep.spec.name, &cands[k], &env, &[]);
            std::fs::write(dir.join(format!("{base}.allowed.dot")), text)?;
        }
        if cfg.dump_cycle && ev.allowed == 0 {
            if let Some(k) = ev.first_forbidden() {
                let env = relations(prep, &cands[k]);
                let text = dot::render(&prep.spec.name, &cands[k], &env, &ev.checks[k].0.cycle);
                std::fs::write(dir.join(format!("{base}.cycle.dot")), text)?;
            }
        }
    }
    if let (Some(dir), Model::Strong) = (&cfg.emit_smt, v.model) {
        std::fs::create_dir_all(dir)?;
        if let Some(k) = ev.checks.iter().position(|(c, _)| c.consistent) {
            let env = relations(prep, &cands[k]);
            let opts = ModelOptions { ets: v.ets, mutate: cfg.mutate };
            let ob = strong_ob(&env, opts, ev.checks[k].0.wco.as_deref().unwrap_or(&[])).union(env.n).plus();
            std::fs::write(
                dir.join(format!("{base}.smt2")),
                export_smt(&prep.spec.name, &cands[k], &env, &ob, &prep.image),
            )?;
        }
    }
    Ok(())
}

pub fn run(paths: &[PathBuf], cfg: &RunConfig) -> Result<RunReport> {
    let files = discover(paths)?;
    let results: Vec<TestResult> = with_pool(cfg.jobs, || {
        files.par_iter().map(|f| run_one(f, cfg)).collect::<Vec<_>>().into_iter().flatten().collect()
    });
    let mut summary = Summary { tests: files.len(), runs: results.len(), ..Summary::default() };
    for r in &results {
        if let Some(e) = &r.error {
            summary.errors.push(format!("{} [{}]: {e}", r.name, r.model));
        } else if !r.matches {
            summary.mismatches.push(format!(
                "{} [{}]: expected {}, got {}",
                r.name,
                r.model,
                r.expected.map_or("-".into(), |v| v.to_string()),
                r.verdict.map_or("-".into(), |v| v.to_string())
            ));
        }
    }
    Ok(RunReport { results, summary })
}

/// Plain-text summary of a report, one line per test and model.
pub fn render_report(report: &RunReport) -> String {
    let mut s = String::new();
    for r in &report.results {
        let verdict = r.verdict.map_or_else(|| "-".to_string(), |v| v.to_string());
        let mark = if r.error.is_some() {
            "ERROR"
        } else if r.matches {
            "ok"
        } else {
            "MISMATCH"
        };
        let _ = write!(
            s,
            "{:<40} {:<11} {:<7} {:>6} cands {:>6} allowed{} {}",
            r.name,
            r.model,
            verdict,
            r.candidates,
            r.allowed,
            if r.bbm { " bbm" } else { "" },
            mark
        );
        if let Some(e) = &r.error {
            let _ = write!(s, ": {e}");
        }
        s.push('\n');
        for w in &r.warnings {
            let _ = writeln!(s, "    warning: {w}");
        }
        for e in &r.cycle {
            let _ = writeln!(s, "    cycle: e{} -> e{} ({})", e.from, e.to, e.clause);
        }
    }
    let _ = writeln!(
        s,
        "{} tests, {} runs, {} mismatches, {} errors",
        report.summary.tests,
        report.summary.runs,
        report.summary.mismatches.len(),
        report.summary.errors.len()
    );
    s
}

/// One row per test: verdicts per model, candidate count and time.
pub fn results_table(report: &RunReport) -> (String, String) {
    let mut rows: BTreeMap<&str, BTreeMap<&str, &TestResult>> = BTreeMap::new();
    for r in &report.results {
        rows.entry(&r.name).or_default().insert(&r.model, r);
    }
    let models = ["strong", "strong+ets", "weak", "base"];
    let mut text = format!(
        "{:<40} {:<8} {:<11} {:<8} {:<8} {:>10} {:>9}  {}\n",
        "test", "strong", "strong+ets", "weak", "base", "candidates", "time_ms", "flag"
    );
    let mut w = csv::Writer::from_writer(Vec::new());
    let _ =
        w.write_record(["test", "strong", "strong+ets", "weak", "base", "candidates", "time_ms", "mismatch", "bbm"]);
    for (name, by_model) in &rows {
        let cell = |m: &str| {
            by_model.get(m).map_or_else(
                || "-".to_string(),
                |r| {
                    r.verdict.map_or_else(
                        || if r.error.is_some() { "error".into() } else { "n/a".into() },
                        |v| v.to_string(),
                    )
                },
            )
        };
        let cands = by_model.values().map(|r| r.candidates).max().unwrap_or(0);
        let time: u64 = by_model.values().map(|r| r.time_ms).sum();
        let bad = by_model.values().any(|r| !r.matches || r.error.is_some());
        let cells: Vec<String> = models.iter().map(|m| cell(m)).collect();
        let bbm = by_model.values().any(|r| r.bbm);
        let flags: Vec<&str> = [(bad, "MISMATCH"), (bbm, "bbm")].iter().filter(|f| f.0).map(|f| f.1).collect();
        let _ = writeln!(
            text,
            "{:<40} {:<8} {:<11} {:<8} {:<8} {:>10} {:>9}  {}",
            name,
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            cands,
            time,
            flags.join(" ")
        );
        let mut rec = vec![name.to_string()];
        rec.extend(cells);
        rec.extend([cands.to_string(), time.to_string(), bad.to_string(), bbm.to_string()]);
        let _ = w.write_record(rec);
    }
    let mismatched: Vec<&String> = report.summary.mismatches.iter().chain(&report.summary.errors).collect();
    if !mismatched.is_empty() {
        text.push_str("\nmismatches:\n");
        for m in mismatched {
            let _ = writeln!(text, "  {m}");
        }
    }
    let csv = String::from_utf8(w.into_inner().unwrap_or_default()).unwrap_or_default();
    (text, csv)
}

/// A candidate on which a metatheory implication fails.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counterexample {
    pub suite: String,
    pub test: String,
    pub candidate: usize,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaReport {
    pub tests: usize,
    pub soundness_checked: usize,
    pub abstraction_checked: usize,
    pub abstraction_skipped: usize,
    pub counterexamples: Vec<Counterexample>,
    pub errors: Vec<String>,
}

/// Strong-consistent implies weak-consistent for every candidate, and, for
/// candidates that erase cleanly, strong-consistent implies base-consistent.
pub fn meta(paths: &[PathBuf], budget: Budget, mutate: bool, dot_dir: Option<&Path>) -> Result<MetaReport> {
    let files = discover(paths)?;
    let parts: Vec<MetaReport> = files
        .par_iter()
        .map(|f| {
            let mut r = MetaReport { tests: 1, ..MetaReport::default() };
            if let Err(e) = meta_one(f, budget, mutate, dot_dir, &mut r) {
                r.errors.push(format!("{}: {e}", f.display()));
            }
            r
        })
        .collect();
    let mut out = MetaReport::default();
    for p in parts {
        out.tests += p.tests;
        out.soundness_checked += p.soundness_checked;
        out.abstraction_checked += p.abstraction_checked;
        out.abstraction_skipped += p.abstraction_skipped;
        out.counterexamples.extend(p.counterexamples);
        out.errors.extend(p.errors);
    }
    Ok(out)
}

fn meta_one(path: &Path, budget: Budget, mutate: bool, dot_dir: Option<&Path>, r: &mut MetaReport) -> Result<()> {
    let prep = load(path)?;
    let cands = enumerate_candidates(&prep, budget)?;
    let opts = ModelOptions { ets: false, mutate };
    for (k, c) in cands.iter().enumerate() {
        let env = relations(&prep, c);
        let strong = check_strong(c, &env, opts);
        r.soundness_checked += 1;
        let mut fail = |suite: &str, detail: String| -> Result<()> {
            if let Some(dir) = dot_dir {
                std::fs::create_dir_all(dir)?;
                let file = dir.join(safe_name(&format!("{}.{suite}.{k}.dot", prep.spec.name)));
                std::fs::write(file, dot::render(&prep.spec.name, c, &env, &[]))?;
            }
            r.counterexamples.push(Counterexample {
                suite: suite.into(),
                test: prep.spec.name.clone(),
                candidate: k,
                detail,
            });
            Ok(())
        };
        if !strong.consistent {
            continue;
        }
        let weak = check_weak(&env);
        if !weak.consistent {
            fail("soundness", format!("weak model fails {}", weak.failing.unwrap_or_default()))?;
        }
        match erase(c, &env) {
            Ok(erased) => {
                r.abstraction_checked += 1;
                let base = check_base(&erased, &erased_relations(&erased))?;
                if !base.consistent {
                    fail("abstraction", format!("base model fails {}", base.failing.unwrap_or_default()))?;
                }
            }
            Err(Error::Precondition(_)) => r.abstraction_skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Re-check a strong-model witness independently of the search.
pub fn recheck_witness(prep: &Prepared, c: &Candidate, ets: bool) -> Option<bool> {
    let env = relations(prep, c);
    let opts = ModelOptions { ets, mutate: false };
    let check = check_strong(c, &env, opts);
    let order = check.wco?;
    Some(check_strong_with(&env, opts, &order).consistent)
}
