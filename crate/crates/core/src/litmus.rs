//! Whole litmus tests: sectioned file format, state expressions, final
//! assertions and their evaluation.

use crate::descriptor::Stage;
use crate::error::{syntax, Error, Result};
use crate::event::SysReg;
use crate::isa::{self, parse_gpr, CodeBlock, Instr, Program, SourceLines, ThreadContext};
use crate::lex::{tokenize, Cursor, Tok};
use crate::setup::{self, build_images, parse_setup_at, render_setup, NameKind, PageTableImage, SetupSpec};
use crate::walk::FaultKind;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expr {
    Num(u64),
    Name(String),
    Call { name: String, args: Vec<(Option<String>, Expr)> },
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(n) => write!(f, "{n:#x}"),
            Expr::Name(s) => f.write_str(s),
            Expr::Call { name, args } => {
                write!(f, "{name}(")?;
                for (i, (k, v)) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    if let Some(k) = k {
                        write!(f, "{k}=")?;
                    }
                    write!(f, "{v}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// A register a test can initialise or assert on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegPath {
    Gpr(u8),
    Sys(SysReg),
    PstateEl,
    PstateSp,
}

impl RegPath {
    pub fn parse(s: &str) -> Option<RegPath> {
        match s.to_ascii_uppercase().as_str() {
            "PSTATE.EL" => return Some(RegPath::PstateEl),
            "PSTATE.SP" => return Some(RegPath::PstateSp),
            _ => {}
        }
        if let Some(r) = parse_gpr(s).filter(|r| *r != isa::XZR) {
            return Some(RegPath::Gpr(r));
        }
        SysReg::parse(s).map(RegPath::Sys)
    }

    pub fn read(self, ctx: &ThreadContext) -> u64 {
        match self {
            RegPath::Gpr(r) => ctx.gpr[r as usize],
            RegPath::Sys(s) => ctx.sys(s),
            RegPath::PstateEl => ctx.el as u64,
            RegPath::PstateSp => ctx.sp as u64,
        }
    }
}

impl fmt::Display for RegPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegPath::Gpr(r) => write!(f, "X{r}"),
            RegPath::Sys(s) => f.write_str(s.name()),
            RegPath::PstateEl => f.write_str("PSTATE.EL"),
            RegPath::PstateSp => f.write_str("PSTATE.SP"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitEntry {
    pub thread: usize,
    pub reg: RegPath,
    pub value: Expr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSection {
    pub thread: usize,
    /// `Some(addr)` for exception handlers.
    pub at: Option<u64>,
    pub code: SourceLines,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Final {
    Or(Vec<Final>),
    And(Vec<Final>),
    Not(Box<Final>),
    Reg {
        thread: usize,
        reg: RegPath,
        value: Expr,
    },
    /// Coherence-final value of a memory location.
    Mem {
        name: String,
        value: Expr,
    },
    PermissionFault {
        label: String,
        va: Expr,
    },
}

impl Final {
    fn render(&self, out: &mut String, parent: u8) {
        // Binding strength: Or=1, And=2, Not=3, atoms=4.
        let own = match self {
            Final::Or(_) => 1,
            Final::And(_) => 2,
            Final::Not(_) => 3,
            _ => 4,
        };
        let paren = own < parent;
        if paren {
            out.push('(');
        }
        match self {
            Final::Or(xs) | Final::And(xs) => {
                let sep = if own == 1 { " | " } else { " & " };
                for (i, x) in xs.iter().enumerate() {
                    if i > 0 {
                        out.push_str(sep);
                    }
                    x.render(out, own + 1);
                }
            }
            Final::Not(x) => {
                out.push('!');
                x.render(out, 4);
            }
            Final::Reg { thread, reg, value } => {
                let _ = write!(out, "{thread}:{reg}={value}");
            }
            Final::Mem { name, value } => {
                let _ = write!(out, "*{name}={value}");
            }
            Final::PermissionFault { label, va } => {
                let _ = write!(out, "permission_fault({label}, {va})");
            }
        }
        if paren {
            out.push(')');
        }
    }

    /// Physical-address names pinned by `*name` atoms.
    pub fn memory_names(&self) -> Vec<&str> {
        match self {
            Final::Or(xs) | Final::And(xs) => xs.iter().flat_map(|x| x.memory_names()).collect(),
            Final::Not(x) => x.memory_names(),
            Final::Mem { name, .. } => vec![name],
            _ => vec![],
        }
    }

    fn registers(&self) -> Vec<(usize, RegPath)> {
        match self {
            Final::Or(xs) | Final::And(xs) => xs.iter().flat_map(|x| x.registers()).collect(),
            Final::Not(x) => x.registers(),
            Final::Reg { thread, reg, .. } => vec![(*thread, *reg)],
            _ => vec![],
        }
    }
}

impl fmt::Display for Final {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        self.render(&mut s, 0);
        f.write_str(&s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Allow,
    Forbid,
}

impl Verdict {
    pub fn from_allowed(allowed: bool) -> Self {
        if allowed {
            Verdict::Allow
        } else {
            Verdict::Forbid
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Allow => "allow",
            Verdict::Forbid => "forbid",
        })
    }
}

/// Expected result for one model; `Unknown` records an unsettled outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpectedVerdict {
    Is(Verdict),
    Unknown,
}

impl fmt::Display for ExpectedVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpectedVerdict::Is(v) => v.fmt(f),
            ExpectedVerdict::Unknown => f.write_str("unknown"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expected {
    /// Strong model without ETS.
    pub strong: Option<ExpectedVerdict>,
    /// Strong model with ETS.
    pub ets: Option<ExpectedVerdict>,
    pub weak: Option<ExpectedVerdict>,
    /// Translation-free user model.
    pub base: Option<ExpectedVerdict>,
    pub candidates: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSpec {
    pub name: String,
    pub setup: SetupSpec,
    pub init: Vec<InitEntry>,
    pub threads: Vec<CodeSection>,
    pub handlers: Vec<CodeSection>,
    pub final_state: Final,
    pub expected: Expected,
}

impl TestSpec {
    pub fn thread_ids(&self) -> Vec<usize> {
        self.threads.iter().map(|t| t.thread).collect()
    }
}

// ---------------------------------------------------------------------------
// Parsing

const SECTIONS: [&str; 6] = ["name", "page_table_setup", "init", "final", "expected", "thread"];

struct Section {
    header: String,
    first_line: usize,
    body: Vec<String>,
}

fn split_sections(text: &str) -> Result<Vec<Section>> {
    let mut out: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t = raw.trim();
        if t.starts_with('[') && t.ends_with(']') && !t.contains(',') {
            out.push(Section { header: t[1..t.len() - 1].trim().to_string(), first_line: line + 1, body: Vec::new() });
        } else if let Some(s) = out.last_mut() {
            s.body.push(raw.to_string());
        } else if !t.is_empty() && !t.starts_with("//") {
            return Err(syntax(line, 1, "text before the first section header"));
        }
    }
    Ok(out)
}

fn parse_expr(c: &mut Cursor<'_>) -> Result<Expr> {
    match c.next() {
        Some(Tok::Num(n)) => Ok(Expr::Num(*n)),
        Some(Tok::Ident(name)) => {
            if !c.eat_punct('(') {
                return Ok(Expr::Name(name.clone()));
            }
            let mut args = Vec::new();
            if !c.eat_punct(')') {
                loop {
                    let key = match (c.peek(), c.peek_at(1)) {
                        (Some(Tok::Ident(k)), Some(Tok::Punct('='))) => {
                            let k = k.clone();
                            c.next();
                            c.next();
                            Some(k)
                        }
                        _ => None,
                    };
                    args.push((key, parse_expr(c)?));
                    if c.eat_punct(')') {
                        break;
                    }
                    c.expect_punct(',')?;
                }
            }
            Ok(Expr::Call { name: name.clone(), args })
        }
        _ => {
            c.back();
            Err(c.err("expected expression"))
        }
    }
}

/// `[t:]REG` prefix of an init entry or final atom.
fn parse_reg_ref(c: &mut Cursor<'_>) -> Result<(usize, RegPath)> {
    let thread = match (c.peek(), c.peek_at(1)) {
        (Some(Tok::Num(n)), Some(Tok::Punct(':'))) => {
            let n = *n as usize;
            c.next();
            c.next();
            n
        }
        _ => 0,
    };
    let name = c.expect_ident()?;
    let reg = RegPath::parse(&name).ok_or_else(|| {
        c.back();
        c.err(format!("unknown register `{name}`"))
    })?;
    Ok((thread, reg))
}

fn parse_init(text: &str, first_line: usize) -> Result<Vec<InitEntry>> {
    let toks = tokenize(text, first_line)?;
    let mut c = Cursor::new(&toks, first_line + text.lines().count());
    let mut out = Vec::new();
    while !c.at_end() {
        if c.eat_punct(',') || c.eat_punct(';') {
            continue;
        }
        let (thread, reg) = parse_reg_ref(&mut c)?;
        c.expect_punct('=')?;
        let value = parse_expr(&mut c)?;
        out.push(InitEntry { thread, reg, value });
    }
    Ok(out)
}

fn parse_final_or(c: &mut Cursor<'_>) -> Result<Final> {
    let mut xs = vec![parse_final_and(c)?];
    while c.eat_punct('|') {
        xs.push(parse_final_and(c)?);
    }
    Ok(flatten(xs, true))
}

fn parse_final_and(c: &mut Cursor<'_>) -> Result<Final> {
    let mut xs = vec![parse_final_unary(c)?];
    while c.eat_punct('&') {
        xs.push(parse_final_unary(c)?);
    }
    Ok(flatten(xs, false))
}

fn flatten(xs: Vec<Final>, or: bool) -> Final {
    if xs.len() == 1 {
        return xs.into_iter().next().expect("one element");
    }
    let mut out = Vec::new();
    for x in xs {
        match x {
            Final::Or(inner) if or => out.extend(inner),
            Final::And(inner) if !or => out.extend(inner),
            x => out.push(x),
        }
    }
    if or {
        Final::Or(out)
    } else {
        Final::And(out)
    }
}

fn parse_final_unary(c: &mut Cursor<'_>) -> Result<Final> {
    if c.eat_punct('!') {
        return Ok(Final::Not(Box::new(parse_final_unary(c)?)));
    }
    if c.eat_punct('(') {
        let f = parse_final_or(c)?;
        c.expect_punct(')')?;
        return Ok(f);
    }
    if c.eat_punct('*') {
        let name = c.expect_ident()?;
        c.expect_punct('=')?;
        return Ok(Final::Mem { name, value: parse_expr(c)? });
    }
    if c.eat_keyword("permission_fault") {
        c.expect_punct('(')?;
        let label = match c.next() {
            Some(Tok::Ident(s)) => s.clone(),
            Some(Tok::Num(n)) => n.to_string(),
            _ => {
                c.back();
                return Err(c.err("expected label"));
            }
        };
        c.expect_punct(',')?;
        let va = parse_expr(c)?;
        c.expect_punct(')')?;
        return Ok(Final::PermissionFault { label, va });
    }
    let (thread, reg) = parse_reg_ref(c)?;
    c.expect_punct('=')?;
    Ok(Final::Reg { thread, reg, value: parse_expr(c)? })
}

fn parse_final(text: &str, first_line: usize) -> Result<Final> {
    let toks = tokenize(text, first_line)?;
    let mut c = Cursor::new(&toks, first_line + text.lines().count());
    if c.at_end() {
        return Err(syntax(first_line.saturating_sub(1), 1, "empty [final] section"));
    }
    let f = parse_final_or(&mut c)?;
    if !c.at_end() {
        return Err(c.err("trailing input after final assertion"));
    }
    Ok(f)
}

fn parse_expected(body: &[String], first_line: usize) -> Result<Expected> {
    let mut e = Expected::default();
    for (i, raw) in body.iter().enumerate() {
        let line = first_line + i;
        let t = strip_comment(raw).trim();
        if t.is_empty() {
            continue;
        }
        let (k, v) = t.split_once('=').ok_or_else(|| syntax(line, 1, "expected `key = value`"))?;
        let (k, v) = (k.trim(), v.trim());
        if k == "candidates" {
            e.candidates = Some(v.parse().map_err(|_| syntax(line, 1, format!("bad candidate count `{v}`")))?);
            continue;
        }
        let verdict = match v {
            "allow" => ExpectedVerdict::Is(Verdict::Allow),
            "forbid" => ExpectedVerdict::Is(Verdict::Forbid),
            "unknown" => ExpectedVerdict::Unknown,
            _ => return Err(syntax(line, 1, format!("expected allow, forbid or unknown, found `{v}`"))),
        };
        let slot = match k {
            "strong" => &mut e.strong,
            "ets" => &mut e.ets,
            "weak" => &mut e.weak,
            "base" => &mut e.base,
            _ => return Err(syntax(line, 1, format!("unknown expectation `{k}`"))),
        };
        *slot = Some(verdict);
    }
    Ok(e)
}

fn strip_comment(s: &str) -> &str {
    match s.find("//") {
        Some(i) => &s[..i],
        None => s,
    }
}

fn is_label(s: &str) -> bool {
    let mut cs = s.chars();
    match cs.next() {
        Some(c) if c.is_ascii_alphanumeric() || c == '_' || c == '.' => {}
        _ => return false,
    }
    cs.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_code(body: &[String], first_line: usize) -> Result<SourceLines> {
    let mut out = Vec::new();
    let mut pending: Vec<String> = Vec::new();
    for (i, raw) in body.iter().enumerate() {
        for stmt in strip_comment(raw).split(';') {
            let mut rest = stmt.trim();
            while let Some((head, tail)) = rest.split_once(':') {
                if !is_label(head.trim()) {
                    break;
                }
                pending.push(head.trim().to_string());
                rest = tail.trim();
            }
            if rest.is_empty() {
                continue;
            }
            isa::decode(rest).map_err(|e| syntax(first_line + i, 1, e.to_string()))?;
            out.push((std::mem::take(&mut pending), rest.to_string()));
        }
    }
    if !pending.is_empty() {
        return Err(syntax(first_line + body.len(), 1, format!("label `{}` has no instruction", pending[0])));
    }
    Ok(out)
}

fn section_thread(header: &str, line: usize) -> Result<(usize, Option<u64>)> {
    let words: Vec<&str> = header.split_whitespace().collect();
    let bad = || syntax(line.saturating_sub(1), 1, format!("malformed section header `[{header}]`"));
    match words.as_slice() {
        ["thread", n] => Ok((n.parse().map_err(|_| bad())?, None)),
        ["handler", n, "at", a] => {
            let addr = crate::lex::parse_number(a).ok_or_else(bad)?;
            Ok((n.parse().map_err(|_| bad())?, Some(addr)))
        }
        _ => Err(bad()),
    }
}

/// Parse a `.vmtest` file. The setup is built once to validate every
/// expression; expressions stay unevaluated in the result.
pub fn parse_test(text: &str) -> Result<TestSpec> {
    let sections = split_sections(text)?;
    let mut name = None;
    let mut setup = None;
    let mut init = None;
    let mut final_state = None;
    let mut expected = Expected::default();
    let mut threads = Vec::new();
    let mut handlers = Vec::new();
    for s in &sections {
        let key = s.header.split_whitespace().next().unwrap_or("");
        let once = |present: bool| -> Result<()> {
            if present {
                Err(syntax(s.first_line - 1, 1, format!("duplicate section `[{}]`", s.header)))
            } else {
                Ok(())
            }
        };
        let body = s.body.join("\n");
        match key {
            "name" => {
                once(name.is_some())?;
                let n = body.trim().to_string();
                if n.is_empty() || n.contains(char::is_whitespace) {
                    return Err(syntax(s.first_line, 1, "test name must be one non-empty word"));
                }
                name = Some(n);
            }
            "page_table_setup" => {
                once(setup.is_some())?;
                setup = Some(parse_setup_at(&body, s.first_line)?);
            }
            "init" => {
                once(init.is_some())?;
                init = Some(parse_init(&body, s.first_line)?);
            }
            "final" => {
                once(final_state.is_some())?;
                final_state = Some(parse_final(&body, s.first_line)?);
            }
            "expected" => expected = parse_expected(&s.body, s.first_line)?,
            "thread" => {
                let (t, _) = section_thread(&s.header, s.first_line)?;
                if threads.iter().any(|c: &CodeSection| c.thread == t) {
                    once(true)?;
                }
                threads.push(CodeSection { thread: t, at: None, code: parse_code(&s.body, s.first_line)? });
            }
            "handler" => {
                let (t, at) = section_thread(&s.header, s.first_line)?;
                handlers.push(CodeSection { thread: t, at, code: parse_code(&s.body, s.first_line)? });
            }
            _ => {
                return Err(syntax(
                    s.first_line - 1,
                    1,
                    format!("unknown section `[{}]`; expected one of {SECTIONS:?} or handler", s.header),
                ))
            }
        }
    }
    let missing = |what: &str| Error::Format(format!("missing [{what}] section"));
    let spec = TestSpec {
        name: name.ok_or_else(|| missing("name"))?,
        setup: setup.ok_or_else(|| missing("page_table_setup"))?,
        init: init.ok_or_else(|| missing("init"))?,
        threads,
        handlers,
        final_state: final_state.ok_or_else(|| missing("final"))?,
        expected,
    };
    if spec.threads.is_empty() {
        return Err(missing("thread N"));
    }
    prepare(&spec)?;
    Ok(spec)
}

/// Canonical text; `parse_test(&render_test(t)) == t`.
pub fn render_test(t: &TestSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "[name]\n{}\n", t.name);
    let _ = writeln!(out, "[page_table_setup]\n{}", render_setup(&t.setup));
    out.push_str("[init]\n");
    for e in &t.init {
        let _ = writeln!(out, "{}:{}={}", e.thread, e.reg, e.value);
    }
    out.push('\n');
    let code = |out: &mut String, c: &SourceLines| {
        for (labels, ins) in c {
            for l in labels {
                let _ = write!(out, "{l}: ");
            }
            let _ = writeln!(out, "{ins}");
        }
        out.push('\n');
    };
    for th in &t.threads {
        let _ = writeln!(out, "[thread {}]", th.thread);
        code(&mut out, &th.code);
    }
    for h in &t.handlers {
        let _ = writeln!(out, "[handler {} at {:#x}]", h.thread, h.at.unwrap_or(0));
        code(&mut out, &h.code);
    }
    let _ = writeln!(out, "[final]\n{}\n", t.final_state);
    let e = &t.expected;
    let any = e.strong.is_some() || e.ets.is_some() || e.weak.is_some() || e.base.is_some() || e.candidates.is_some();
    if any {
        out.push_str("[expected]\n");
        for (k, v) in [("strong", e.strong), ("ets", e.ets), ("weak", e.weak), ("base", e.base)] {
            if let Some(v) = v {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        if let Some(n) = e.candidates {
            let _ = writeln!(out, "candidates = {n}");
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Preparation: image, program and initial thread states

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResolvedFinal {
    Or(Vec<ResolvedFinal>),
    And(Vec<ResolvedFinal>),
    Not(Box<ResolvedFinal>),
    Reg { thread: usize, reg: RegPath, value: u64 },
    Mem { pa: u64, value: u64 },
    PermissionFault { pc: u64, va: u64 },
}

/// A test ready for enumeration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: TestSpec,
    pub image: PageTableImage,
    pub program: Program,
    /// Initial context per thread, in `spec.threads` order.
    pub contexts: Vec<(usize, ThreadContext)>,
    pub final_state: ResolvedFinal,
    /// PAs named by `*name` atoms of the final assertion.
    pub final_cells: BTreeSet<u64>,
}

struct Evaluator<'a> {
    image: &'a PageTableImage,
    labels: &'a BTreeMap<String, u64>,
}

impl Evaluator<'_> {
    fn eval(&self, e: &Expr) -> Result<u64> {
        match e {
            Expr::Num(n) => Ok(*n),
            Expr::Name(n) => self
                .image
                .env
                .get(n)
                .map(|b| b.value)
                .or_else(|| self.image.roots.get(n).copied())
                .or_else(|| self.labels.get(n).copied())
                .ok_or_else(|| Error::Undeclared(n.clone())),
            Expr::Call { name, args } => {
                let vals = args.iter().map(|(k, v)| Ok((k.clone(), self.eval(v)?))).collect::<Result<Vec<_>>>()?;
                setup::resolve_builtin(name, &vals, self.image)
            }
        }
    }

    fn stage_translate(&self, ia: u64, stage: Stage) -> Option<u64> {
        self.image.tables.iter().filter(|t| t.stage == stage).find_map(|t| self.image.translate_initial(ia, t.base))
    }

    /// PA a named location resolves to under the initial tables.
    fn location(&self, name: &str) -> Result<u64> {
        let b = self.image.env.get(name).ok_or_else(|| Error::Undeclared(name.to_string()))?;
        let unmapped = || Error::Format(format!("`{name}` is not mapped initially"));
        match b.kind {
            NameKind::Physical | NameKind::Table => Ok(b.value),
            NameKind::Intermediate => self.stage_translate(b.value, Stage::S2).ok_or_else(unmapped),
            NameKind::Virtual => {
                let out = self.stage_translate(b.value, Stage::S1).ok_or_else(unmapped)?;
                Ok(self.stage_translate(out, Stage::S2).unwrap_or(out))
            }
        }
    }

    fn resolve(&self, f: &Final) -> Result<ResolvedFinal> {
        Ok(match f {
            Final::Or(xs) => ResolvedFinal::Or(xs.iter().map(|x| self.resolve(x)).collect::<Result<_>>()?),
            Final::And(xs) => ResolvedFinal::And(xs.iter().map(|x| self.resolve(x)).collect::<Result<_>>()?),
            Final::Not(x) => ResolvedFinal::Not(Box::new(self.resolve(x)?)),
            Final::Reg { thread, reg, value } => {
                ResolvedFinal::Reg { thread: *thread, reg: *reg, value: self.eval(value)? }
            }
            Final::Mem { name, value } => ResolvedFinal::Mem { pa: self.location(name)?, value: self.eval(value)? },
            Final::PermissionFault { label, va } => {
                let pc = self
                    .labels
                    .get(label)
                    .copied()
                    .ok_or_else(|| Error::Format(format!("undefined label `{label}` in final assertion")))?;
                ResolvedFinal::PermissionFault { pc, va: self.eval(va)? }
            }
        })
    }
}

fn written_registers(block: &CodeBlock) -> impl Iterator<Item = u8> + '_ {
    block.instrs.iter().filter_map(|i| match i {
        Instr::Ldr { rt, .. } | Instr::Mrs { rt, .. } => Some(*rt),
        Instr::Mov { rd, .. } | Instr::Alu { rd, .. } => Some(*rd),
        _ => None,
    })
}

pub fn prepare(spec: &TestSpec) -> Result<Prepared> {
    let image = build_images(&spec.setup)?;
    let mut blocks = Vec::new();
    for th in &spec.threads {
        blocks.push((th.thread, thread_base(th.thread), false, th.code.clone()));
    }
    for h in &spec.handlers {
        if !spec.threads.iter().any(|t| t.thread == h.thread) {
            return Err(Error::Format(format!("handler for unknown thread {}", h.thread)));
        }
        let at = h.at.unwrap_or(0);
        if !image.code_pages.contains(&(at & !(crate::descriptor::PAGE_SIZE - 1))) {
            return Err(Error::Format(format!("handler at {at:#x} is not in an identity-mapped code page")));
        }
        blocks.push((h.thread, at, true, h.code.clone()));
    }
    let program = Program::build(blocks)?;
    let ev = Evaluator { image: &image, labels: &program.labels };
    let default_root = image.roots.get(setup::DEFAULT_TABLE).copied();
    let mut contexts = Vec::new();
    for th in &spec.threads {
        let mut ctx = ThreadContext::new(thread_base(th.thread));
        if let Some(root) = default_root {
            ctx.sysregs.insert(SysReg::Ttbr0El1, root);
            ctx.sysregs.insert(SysReg::Ttbr0El2, root);
        }
        let mut has_el = false;
        for e in spec.init.iter().filter(|e| e.thread == th.thread) {
            let v = ev.eval(&e.value)?;
            match e.reg {
                RegPath::Gpr(r) => ctx.set_gpr(r, v),
                RegPath::Sys(s) => {
                    ctx.sysregs.insert(s, v);
                }
                RegPath::PstateEl => {
                    if v > 2 {
                        return Err(Error::Format(format!("thread {}: PSTATE.EL={v} out of range", th.thread)));
                    }
                    ctx.el = v as u8;
                    has_el = true;
                }
                RegPath::PstateSp => ctx.sp = v & 1 == 1,
            }
        }
        if !has_el {
            return Err(Error::Format(format!("thread {} has no PSTATE.EL in [init]", th.thread)));
        }
        contexts.push((th.thread, ctx));
    }
    if let Some(e) = spec.init.iter().find(|e| !spec.threads.iter().any(|t| t.thread == e.thread)) {
        return Err(Error::Format(format!("[init] names unknown thread {}", e.thread)));
    }
    for (t, reg) in spec.final_state.registers() {
        if !spec.threads.iter().any(|th| th.thread == t) {
            return Err(Error::Format(format!("final assertion names unknown thread {t}")));
        }
        if let RegPath::Gpr(r) = reg {
            let by_init = spec.init.iter().any(|e| e.thread == t && e.reg == reg);
            let by_code = program.blocks.iter().filter(|b| b.thread == t).any(|b| written_registers(b).any(|w| w == r));
            if !by_init && !by_code {
                return Err(Error::Format(format!("final assertion reads {t}:X{r}, which nothing writes")));
            }
        }
    }
    let final_state = ev.resolve(&spec.final_state)?;
    let final_cells = spec.final_state.memory_names().into_iter().map(|n| ev.location(n)).collect::<Result<_>>()?;
    Ok(Prepared { spec: spec.clone(), image, program, contexts, final_state, final_cells })
}

pub fn thread_base(thread: usize) -> u64 {
    isa::MAIN_CODE_BASE + thread as u64 * isa::THREAD_CODE_STRIDE
}

// ---------------------------------------------------------------------------
// Final-state evaluation

/// What the final assertion can observe about one execution.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Outcome {
    pub threads: BTreeMap<usize, ThreadContext>,
    /// Per thread: `(pc, va, kind)` of each fault taken.
    pub faults: BTreeMap<usize, Vec<(u64, u64, FaultKind)>>,
    /// Coherence-final value per PA.
    pub memory: BTreeMap<u64, u64>,
}

pub fn check_final(f: &ResolvedFinal, o: &Outcome) -> bool {
    match f {
        ResolvedFinal::Or(xs) => xs.iter().any(|x| check_final(x, o)),
        ResolvedFinal::And(xs) => xs.iter().all(|x| check_final(x, o)),
        ResolvedFinal::Not(x) => !check_final(x, o),
        ResolvedFinal::Reg { thread, reg, value } => o.threads.get(thread).is_some_and(|c| reg.read(c) == *value),
        ResolvedFinal::Mem { pa, value } => o.memory.get(pa).copied().unwrap_or(0) == *value,
        ResolvedFinal::PermissionFault { pc, va } => {
            o.faults.values().flatten().any(|(p, v, k)| p == pc && v == va && *k == FaultKind::Permission)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
[name]
T
[page_table_setup]
physical pa1;
x |-> pa1;
[init]
PSTATE.EL=0b01, 0:R1=x
[thread 0]
L0: MOV X2,#0; LDR X0,[X1]
[final]
0:R2=0
";

    #[test]
    fn init_and_final_forms() {
        let t = parse_test(MINIMAL).unwrap();
        assert_eq!(t.init[0], InitEntry { thread: 0, reg: RegPath::PstateEl, value: Expr::Num(1) });
        assert_eq!(t.final_state, Final::Reg { thread: 0, reg: RegPath::Gpr(2), value: Expr::Num(0) });
        assert_eq!(t.threads[0].code.len(), 2);
        let p = prepare(&t).unwrap();
        assert_eq!(p.contexts[0].1.el, 1);
        assert_eq!(p.program.labels["L0"], thread_base(0));
    }

    #[test]
    fn empty_final_is_an_error() {
        let text = MINIMAL.replace("0:R2=0\n", "");
        assert!(matches!(parse_test(&text), Err(Error::Syntax { .. })));
    }

    #[test]
    fn missing_el_is_an_error() {
        let text = MINIMAL.replace("PSTATE.EL=0b01, ", "");
        assert!(parse_test(&text).unwrap_err().to_string().contains("PSTATE.EL"));
    }

    #[test]
    fn render_round_trips() {
        let t = parse_test(MINIMAL).unwrap();
        assert_eq!(parse_test(&render_test(&t)).unwrap(), t);
    }

    #[test]
    fn final_precedence() {
        let toks = "0:R10=2 | 0:R2=1 & !(1:X0=1 | 1:X0=2)";
        let f = parse_final(toks, 1).unwrap();
        assert_eq!(f.to_string(), "0:X10=0x2 | 0:X2=0x1 & !(1:X0=0x1 | 1:X0=0x2)");
        assert_eq!(parse_final(&f.to_string(), 1).unwrap(), f);
    }

    fn outcome(regs: &[(usize, u8, u64)]) -> Outcome {
        let mut o = Outcome::default();
        for &(t, r, v) in regs {
            o.threads.entry(t).or_insert_with(|| ThreadContext::new(0)).gpr[r as usize] = v;
        }
        o
    }

    #[test]
    fn check_final_examples() {
        let reg = |thread, r, value| ResolvedFinal::Reg { thread, reg: RegPath::Gpr(r), value };
        assert!(check_final(&reg(0, 0, 1), &outcome(&[(0, 0, 1)])));
        let f = ResolvedFinal::Or(vec![reg(0, 10, 2), reg(0, 2, 1)]);
        assert!(check_final(&f, &outcome(&[(0, 10, 1), (0, 2, 1)])));
        let f = ResolvedFinal::And(vec![reg(1, 0, 1), ResolvedFinal::PermissionFault { pc: 0x100, va: 0x2000 }]);
        assert!(!check_final(&f, &outcome(&[(1, 0, 1)])));
        let mut o = outcome(&[(1, 0, 1)]);
        o.faults.insert(0, vec![(0x100, 0x2000, FaultKind::Permission)]);
        assert!(check_final(&f, &o));
    }
}
