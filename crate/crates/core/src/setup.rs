//! The page-table setup language: syntax tree, parser, renderer, and the
//! compiler from constraints to concrete translation-table memory.

use crate::descriptor::{self, Attrs, DescKind, Stage, PAGE_SIZE};
use crate::error::{Error, Result};
use crate::lex::{tokenize, Cursor, Tok};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

pub const VA_BASE: u64 = 0x80_0000_0000;
pub const IPA_BASE: u64 = 0x100_0000_0000;
pub const PA_BASE: u64 = 0x180_0000_0000;
/// Each declared name owns its own 1 GiB slot so no two names share a
/// table below level 1.
pub const SLOT_SIZE: u64 = 0x4000_0000;
pub const DEFAULT_TABLE: &str = "default";
pub const DEFAULT_TABLE_BASE: u64 = 0x20_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AddrKind {
    Virtual,
    Intermediate,
    Physical,
}

impl AddrKind {
    fn keyword(self) -> &'static str {
        match self {
            AddrKind::Virtual => "virtual",
            AddrKind::Intermediate => "intermediate",
            AddrKind::Physical => "physical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddressDecl {
    pub name: String,
    pub kind: AddrKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptionValue {
    Bool(bool),
    Num(u64),
    Ident(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapRelation {
    /// `|->`
    Initial,
    /// `?->`
    Alternative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Invalid,
    Name(String),
    Raw(u64),
    Table(u64),
    Addr(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingConstraint {
    pub input: String,
    pub relation: MapRelation,
    pub target: Target,
    pub level: Option<u8>,
    pub attrs: Vec<(String, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableItem {
    Map(MappingConstraint),
    Identity { addr: u64, code: bool },
    Nested(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSpec {
    pub name: String,
    pub stage: Stage,
    pub base: u64,
    pub items: Vec<TableItem>,
    pub nested_tables: Vec<String>,
}

impl TableSpec {
    pub fn constraints(&self) -> impl Iterator<Item = &MappingConstraint> {
        self.items.iter().filter_map(|i| match i {
            TableItem::Map(c) => Some(c),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SetupSpec {
    pub options: BTreeMap<String, OptionValue>,
    pub address_decls: Vec<AddressDecl>,
    pub tables: Vec<TableSpec>,
    /// Constraints written outside any table; they apply to the default table.
    pub top_items: Vec<TableItem>,
    pub memory_inits: Vec<(String, u64)>,
    pub warnings: Vec<String>,
}

impl SetupSpec {
    pub fn default_tables(&self) -> bool {
        !matches!(self.options.get("default_tables"), Some(OptionValue::Bool(false)) | Some(OptionValue::Num(0)))
    }

    pub fn decl(&self, name: &str) -> Option<&AddressDecl> {
        self.address_decls.iter().find(|d| d.name == name)
    }
}

const KNOWN_OPTIONS: &[&str] = &["default_tables"];

pub fn parse_setup(text: &str) -> Result<SetupSpec> {
    parse_setup_at(text, 1)
}

/// Parse setup text whose first line is line `first_line` of some file.
pub fn parse_setup_at(text: &str, first_line: usize) -> Result<SetupSpec> {
    let toks = tokenize(text, first_line)?;
    let end_line = first_line + text.lines().count();
    let mut p = SetupParser {
        cur: Cursor::new(&toks, end_line),
        spec: SetupSpec::default(),
        table_names: BTreeSet::new(),
        pending_ref: None,
    };
    while !p.cur.at_end() {
        p.statement()?;
    }
    let mut spec = p.spec;
    validate(&mut spec)?;
    Ok(spec)
}

struct SetupParser<'a> {
    cur: Cursor<'a>,
    spec: SetupSpec,
    table_names: BTreeSet<String>,
    /// Name from a `sNtable NAME;` reference just consumed by `table_def`.
    pending_ref: Option<String>,
}

impl SetupParser<'_> {
    fn statement(&mut self) -> Result<()> {
        let c = &mut self.cur;
        match c.peek() {
            Some(Tok::Ident(kw)) if kw == "option" => {
                c.next();
                let name = c.expect_ident()?;
                c.expect_punct('=')?;
                let value = match c.next() {
                    Some(Tok::Ident(s)) if s == "true" => OptionValue::Bool(true),
                    Some(Tok::Ident(s)) if s == "false" => OptionValue::Bool(false),
                    Some(Tok::Ident(s)) => OptionValue::Ident(s.clone()),
                    Some(Tok::Num(n)) => OptionValue::Num(*n),
                    _ => return Err(c.err("expected option value")),
                };
                c.expect_punct(';')?;
                self.spec.options.insert(name, value);
                Ok(())
            }
            Some(Tok::Ident(kw)) if kw == "virtual" || kw == "physical" || kw == "intermediate" => {
                let kind = match kw.as_str() {
                    "virtual" => AddrKind::Virtual,
                    "physical" => AddrKind::Physical,
                    _ => AddrKind::Intermediate,
                };
                c.next();
                let mut any = false;
                while let Some(Tok::Ident(_)) = self.cur.peek() {
                    let name = self.cur.expect_ident()?;
                    self.declare(&name, kind)?;
                    any = true;
                }
                if !any {
                    return Err(self.cur.err("expected at least one name"));
                }
                self.cur.expect_punct(';')
            }
            Some(Tok::Ident(kw)) if kw == "s1table" || kw == "s2table" => {
                let t = self.table_def()?;
                if t.is_none() {
                    return Err(self.cur.err("table reference outside a table body"));
                }
                Ok(())
            }
            Some(Tok::Punct('*')) => {
                c.next();
                let name = c.expect_ident()?;
                c.expect_punct('=')?;
                let v = c.expect_num()?;
                c.expect_punct(';')?;
                self.spec.memory_inits.push((name, v));
                Ok(())
            }
            _ => {
                let item = self.item(Stage::S1)?;
                match item {
                    TableItem::Nested(_) => unreachable!("handled by table_def"),
                    other => self.spec.top_items.push(other),
                }
                Ok(())
            }
        }
    }

    fn declare(&mut self, name: &str, kind: AddrKind) -> Result<()> {
        if self.spec.decl(name).is_some() || self.table_names.contains(name) {
            return Err(Error::Duplicate(name.to_string()));
        }
        self.spec.address_decls.push(AddressDecl { name: name.to_string(), kind });
        Ok(())
    }

    /// Parses `sNtable NAME BASE { ... }` (returns its name) or, inside a
    /// body, a reference `sNtable NAME;` (returns `None`).
    fn table_def(&mut self) -> Result<Option<String>> {
        let stage = match self.cur.next() {
            Some(Tok::Ident(s)) if s == "s1table" => Stage::S1,
            Some(Tok::Ident(s)) if s == "s2table" => Stage::S2,
            _ => return Err(self.cur.err("expected s1table or s2table")),
        };
        let name = self.cur.expect_ident()?;
        if self.cur.eat_punct(';') {
            self.pending_ref = Some(name);
            return Ok(None);
        }
        let base = self.cur.expect_num()?;
        if self.table_names.contains(&name) || self.spec.decl(&name).is_some() {
            return Err(Error::Duplicate(name));
        }
        self.table_names.insert(name.clone());
        self.cur.expect_punct('{')?;
        let mut items = Vec::new();
        let mut nested = Vec::new();
        loop {
            if self.cur.eat_punct('}') {
                break;
            }
            if self.cur.at_end() {
                return Err(self.cur.err(format!("unterminated table `{name}`")));
            }
            match self.cur.peek() {
                Some(Tok::Ident(kw)) if kw == "s1table" || kw == "s2table" => match self.table_def()? {
                    Some(child) => {
                        nested.push(child.clone());
                        items.push(TableItem::Nested(child));
                    }
                    None => {
                        let child = self.pending_ref.take().expect("reference recorded");
                        nested.push(child.clone());
                        items.push(TableItem::Nested(child));
                    }
                },
                _ => items.push(self.item(stage)?),
            }
        }
        self.spec.tables.push(TableSpec { name: name.clone(), stage, base, items, nested_tables: nested });
        Ok(Some(name))
    }

    fn item(&mut self, stage: Stage) -> Result<TableItem> {
        if self.cur.eat_keyword("identity") {
            let addr = self.cur.expect_num()?;
            let code = if self.cur.eat_keyword("with") {
                self.cur.expect_keyword("code")?;
                true
            } else {
                false
            };
            self.cur.expect_punct(';')?;
            return Ok(TableItem::Identity { addr, code });
        }
        let input = self.cur.expect_ident()?;
        let relation = match self.cur.next() {
            Some(Tok::MapsTo) => MapRelation::Initial,
            Some(Tok::MayMapTo) => MapRelation::Alternative,
            _ => return Err(self.cur.err("expected `|->` or `?->`")),
        };
        let target = match self.cur.peek() {
            Some(Tok::Ident(s)) if s == "invalid" => {
                self.cur.next();
                Target::Invalid
            }
            Some(Tok::Ident(s)) if (s == "raw" || s == "table") && self.cur.peek_at(1) == Some(&Tok::Punct('(')) => {
                let is_raw = s == "raw";
                self.cur.next();
                self.cur.expect_punct('(')?;
                let v = self.cur.expect_num()?;
                self.cur.expect_punct(')')?;
                if is_raw {
                    Target::Raw(v)
                } else {
                    Target::Table(v)
                }
            }
            Some(Tok::Ident(_)) => Target::Name(self.cur.expect_ident()?),
            Some(Tok::Num(_)) => Target::Addr(self.cur.expect_num()?),
            _ => return Err(self.cur.err("expected mapping target")),
        };
        let mut level = None;
        let mut attrs = Vec::new();
        loop {
            if self.cur.eat_keyword("at") {
                self.cur.expect_keyword("level")?;
                let n = self.cur.expect_num()?;
                if level.is_some() {
                    return Err(self.cur.err("duplicate level clause"));
                }
                if n > 3 {
                    return Err(self.cur.err(format!("level {n} out of range")));
                }
                level = Some(n as u8);
            } else if self.cur.eat_keyword("with") {
                self.cur.expect_punct('[')?;
                loop {
                    let k = self.cur.expect_ident()?;
                    self.cur.expect_punct('=')?;
                    let v = self.cur.expect_num()?;
                    attrs.push((k, v));
                    if !self.cur.eat_punct(',') {
                        break;
                    }
                }
                self.cur.expect_punct(']')?;
            } else {
                break;
            }
        }
        self.cur.expect_punct(';')?;
        let is_leaf = matches!(target, Target::Name(_) | Target::Addr(_));
        if is_leaf && level == Some(0) {
            return Err(Error::Build(format!("`{input}`: level 0 leaf mappings are not allowed")));
        }
        if matches!(target, Target::Table(_)) && level == Some(3) {
            return Err(Error::Build(format!("`{input}`: table target at level 3")));
        }
        if self.spec.decl(&input).is_none() && !self.table_names.contains(&input) {
            let kind = match stage {
                Stage::S1 => AddrKind::Virtual,
                Stage::S2 => AddrKind::Intermediate,
            };
            self.spec.address_decls.push(AddressDecl { name: input.clone(), kind });
        }
        Ok(TableItem::Map(MappingConstraint { input, relation, target, level, attrs }))
    }
}

fn validate(spec: &mut SetupSpec) -> Result<()> {
    let table_names: BTreeSet<&str> = spec.tables.iter().map(|t| t.name.as_str()).collect();
    let mut nested_seen = BTreeSet::new();
    for t in &spec.tables {
        if t.base % PAGE_SIZE != 0 {
            return Err(Error::Build(format!("table `{}` base {:#x} is not 4 KiB aligned", t.name, t.base)));
        }
        for n in &t.nested_tables {
            if !table_names.contains(n.as_str()) {
                return Err(Error::Undeclared(n.clone()));
            }
            if !nested_seen.insert(n.clone()) {
                return Err(Error::Build(format!("table `{n}` nested more than once")));
            }
            if n == &t.name {
                return Err(Error::Build(format!("table `{n}` nests itself")));
            }
        }
    }
    let all_items = spec.tables.iter().flat_map(|t| t.items.iter()).chain(spec.top_items.iter());
    for item in all_items {
        if let TableItem::Map(MappingConstraint { target: Target::Name(n), .. }) = item {
            if spec.decl(n).is_none() {
                return Err(Error::Undeclared(n.clone()));
            }
        }
    }
    for (n, _) in &spec.memory_inits {
        match spec.decl(n) {
            Some(d) if d.kind == AddrKind::Physical => {}
            Some(_) => return Err(Error::Build(format!("memory initialiser `*{n}` must name a physical address"))),
            None => return Err(Error::Undeclared(n.clone())),
        }
    }
    spec.warnings.clear();
    for k in spec.options.keys() {
        if !KNOWN_OPTIONS.contains(&k.as_str()) {
            spec.warnings.push(format!("unknown option `{k}` preserved but ignored"));
        }
    }
    if !spec.default_tables() && !spec.top_items.is_empty() {
        return Err(Error::Build("top-level constraints require default_tables".into()));
    }
    Ok(())
}

fn render_item(out: &mut String, item: &TableItem, indent: &str) {
    match item {
        TableItem::Identity { addr, code } => {
            let _ = writeln!(out, "{indent}identity {addr:#x}{};", if *code { " with code" } else { "" });
        }
        TableItem::Nested(n) => {
            let _ = writeln!(out, "{indent}s1table {n};");
        }
        TableItem::Map(c) => {
            let arrow = match c.relation {
                MapRelation::Initial => "|->",
                MapRelation::Alternative => "?->",
            };
            let target = match &c.target {
                Target::Invalid => "invalid".to_string(),
                Target::Name(n) => n.clone(),
                Target::Raw(v) => format!("raw({v:#x})"),
                Target::Table(v) => format!("table({v:#x})"),
                Target::Addr(v) => format!("{v:#x}"),
            };
            let _ = write!(out, "{indent}{} {arrow} {target}", c.input);
            if !c.attrs.is_empty() {
                let a: Vec<String> = c.attrs.iter().map(|(k, v)| format!("{k}={v:#x}")).collect();
                let _ = write!(out, " with [{}]", a.join(", "));
            }
            if let Some(l) = c.level {
                let _ = write!(out, " at level {l}");
            }
            out.push_str(";\n");
        }
    }
}

/// Canonical text form; `parse_setup(&render_setup(s)) == s`.
pub fn render_setup(spec: &SetupSpec) -> String {
    let mut out = String::new();
    for (k, v) in &spec.options {
        let v = match v {
            OptionValue::Bool(b) => b.to_string(),
            OptionValue::Num(n) => format!("{n:#x}"),
            OptionValue::Ident(s) => s.clone(),
        };
        let _ = writeln!(out, "option {k} = {v};");
    }
    for d in &spec.address_decls {
        let _ = writeln!(out, "{} {};", d.kind.keyword(), d.name);
    }
    for t in &spec.tables {
        let kw = match t.stage {
            Stage::S1 => "s1table",
            Stage::S2 => "s2table",
        };
        let _ = writeln!(out, "{kw} {} {:#x} {{", t.name, t.base);
        for item in &t.items {
            render_item(&mut out, item, "  ");
        }
        out.push_str("}\n");
    }
    for item in &spec.top_items {
        render_item(&mut out, item, "");
    }
    for (n, v) in &spec.memory_inits {
        let _ = writeln!(out, "*{n} = {v:#x};");
    }
    out
}

// ---------------------------------------------------------------------------
// Image construction

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceSet {
    pub initial: u64,
    /// Distinct from each other and from `initial`.
    pub alternatives: Vec<u64>,
}

impl ChoiceSet {
    pub fn single(v: u64) -> Self {
        ChoiceSet { initial: v, alternatives: Vec::new() }
    }

    pub fn members(&self) -> impl Iterator<Item = u64> + '_ {
        std::iter::once(self.initial).chain(self.alternatives.iter().copied())
    }

    pub fn contains(&self, v: u64) -> bool {
        self.members().any(|m| m == v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NameKind {
    Virtual,
    Intermediate,
    Physical,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub kind: NameKind,
    pub value: u64,
}

/// Where a descriptor cell sits: which table, level, and the base of the
/// input-address region it translates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellInfo {
    pub table: String,
    pub stage: Stage,
    pub level: u8,
    pub ia: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableInfo {
    pub name: String,
    pub stage: Stage,
    pub base: u64,
    pub pages: Vec<u64>,
    pub nested: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageTableImage {
    pub memory: BTreeMap<u64, ChoiceSet>,
    pub env: BTreeMap<String, Binding>,
    pub roots: BTreeMap<String, u64>,
    pub tables: Vec<TableInfo>,
    pub cells: BTreeMap<u64, CellInfo>,
    pub code_pages: BTreeSet<u64>,
    pub warnings: Vec<String>,
}

impl PageTableImage {
    pub fn initial(&self, pa: u64) -> u64 {
        self.memory.get(&pa).map_or(0, |c| c.initial)
    }

    pub fn is_table_memory(&self, pa: u64) -> bool {
        let page = pa & !(PAGE_SIZE - 1);
        self.tables.iter().any(|t| t.pages.contains(&page))
    }

    pub fn table(&self, name: &str) -> Option<&TableInfo> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// PA of the level-`level` descriptor used to translate `ia` from the
    /// table rooted at `root`, following initial descriptors.
    /// Root of the default stage-1 table.
    pub fn default_root(&self) -> u64 {
        self.roots.get(DEFAULT_TABLE).copied().unwrap_or(DEFAULT_TABLE_BASE)
    }

    pub fn pte(&self, ia: u64, root: u64, level: u8) -> Result<u64> {
        let mut page = root;
        for l in 0..=level {
            let cell = page + 8 * descriptor::level_index(ia, l);
            if l == level {
                return Ok(cell);
            }
            let d = descriptor::decode(self.initial(cell), l)?;
            match d.kind {
                DescKind::Table => page = d.addr,
                _ => {
                    return Err(Error::Builtin {
                        name: format!("pte{level}"),
                        msg: format!("walk of {ia:#x} from {root:#x} ends at level {l}"),
                    })
                }
            }
        }
        unreachable!()
    }

    /// Translate `ia` through one stage under initial descriptors.
    pub fn translate_initial(&self, ia: u64, root: u64) -> Option<u64> {
        let mut page = root;
        for l in 0..=3u8 {
            let cell = page + 8 * descriptor::level_index(ia, l);
            let d = descriptor::decode(self.initial(cell), l).ok()?;
            match d.kind {
                DescKind::Invalid => return None,
                DescKind::Table => page = d.addr,
                DescKind::Block | DescKind::Page => {
                    return Some(d.addr | (ia & (descriptor::region_size(l) - 1)));
                }
            }
        }
        None
    }

    /// Debug dump, one line per memory cell.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (pa, c) in &self.memory {
            let alts: Vec<String> = c.alternatives.iter().map(|v| format!("{v:#x}")).collect();
            let _ = writeln!(out, "PA={pa:#x} value={:#x} (alternatives: {})", c.initial, alts.join(", "));
        }
        out
    }
}

struct CellBuild {
    initial: Option<u64>,
    alts: Vec<u64>,
    /// Cell holds an allocated next-level table pointer.
    path: bool,
}

struct Builder<'a> {
    spec: &'a SetupSpec,
    env: BTreeMap<String, Binding>,
    cells: BTreeMap<u64, CellBuild>,
    info: BTreeMap<u64, CellInfo>,
    tables: Vec<TableInfo>,
    next_page: Vec<u64>,
    code_pages: BTreeSet<u64>,
    identity_done: Vec<BTreeSet<u64>>,
    warnings: Vec<String>,
}

pub fn build_images(spec: &SetupSpec) -> Result<PageTableImage> {
    let mut env = BTreeMap::new();
    let mut counters = [0u64; 3];
    for d in &spec.address_decls {
        let (slot, base, kind) = match d.kind {
            AddrKind::Virtual => (0, VA_BASE, NameKind::Virtual),
            AddrKind::Intermediate => (1, IPA_BASE, NameKind::Intermediate),
            AddrKind::Physical => (2, PA_BASE, NameKind::Physical),
        };
        env.insert(d.name.clone(), Binding { kind, value: base + counters[slot] * SLOT_SIZE });
        counters[slot] += 1;
    }
    let mut specs: Vec<TableSpec> = Vec::new();
    if spec.default_tables() {
        if spec.tables.iter().any(|t| t.name == DEFAULT_TABLE) {
            return Err(Error::Duplicate(DEFAULT_TABLE.into()));
        }
        specs.push(TableSpec {
            name: DEFAULT_TABLE.into(),
            stage: Stage::S1,
            base: DEFAULT_TABLE_BASE,
            items: spec.top_items.clone(),
            nested_tables: Vec::new(),
        });
    }
    specs.extend(spec.tables.iter().cloned());
    let mut b = Builder {
        spec,
        env,
        cells: BTreeMap::new(),
        info: BTreeMap::new(),
        tables: Vec::new(),
        next_page: Vec::new(),
        code_pages: BTreeSet::new(),
        identity_done: Vec::new(),
        warnings: spec.warnings.clone(),
    };
    for t in &specs {
        if b.env.contains_key(&t.name) {
            return Err(Error::Duplicate(t.name.clone()));
        }
        b.env.insert(t.name.clone(), Binding { kind: NameKind::Table, value: t.base });
        b.tables.push(TableInfo {
            name: t.name.clone(),
            stage: t.stage,
            base: t.base,
            pages: vec![t.base],
            nested: t.nested_tables.clone(),
        });
        b.next_page.push(t.base + PAGE_SIZE);
        b.identity_done.push(BTreeSet::new());
    }
    for (ti, t) in specs.iter().enumerate() {
        for item in &t.items {
            match item {
                TableItem::Map(c) => b.constraint(ti, c)?,
                TableItem::Identity { addr, code } => {
                    let page = addr & !(PAGE_SIZE - 1);
                    b.identity(ti, page)?;
                    if *code {
                        b.code_pages.insert(page);
                    }
                }
                TableItem::Nested(_) => {}
            }
        }
    }
    b.self_identity()?;
    b.finish()
}

impl Builder<'_> {
    fn lookup(&self, name: &str) -> Result<Binding> {
        self.env.get(name).copied().ok_or_else(|| Error::Undeclared(name.to_string()))
    }

    fn alloc(&mut self, ti: usize) -> u64 {
        let p = self.next_page[ti];
        self.next_page[ti] += PAGE_SIZE;
        self.tables[ti].pages.push(p);
        p
    }

    /// Returns the PA of the level-`level` cell for `ia`, allocating
    /// intermediate tables as needed.
    fn ensure_path(&mut self, ti: usize, ia: u64, level: u8) -> Result<u64> {
        let mut page = self.tables[ti].base;
        for l in 0..level {
            let cell = page + 8 * descriptor::level_index(ia, l);
            match self.cells.get(&cell) {
                None => {
                    let next = self.alloc(ti);
                    let desc = descriptor::encode(DescKind::Table, next, l, Attrs::default_for(self.tables[ti].stage))?;
                    self.cells.insert(cell, CellBuild { initial: Some(desc), alts: Vec::new(), path: true });
                    self.note_cell(ti, cell, l, ia);
                    page = next;
                }
                Some(c) if c.path => {
                    page = c.initial.expect("path cells are initialised") & descriptor::ADDR_MASK;
                }
                Some(_) => {
                    return Err(Error::Build(format!(
                        "table `{}`: level-{l} entry for {ia:#x} is already a leaf",
                        self.tables[ti].name
                    )))
                }
            }
        }
        let cell = page + 8 * descriptor::level_index(ia, level);
        Ok(cell)
    }

    fn note_cell(&mut self, ti: usize, cell: u64, level: u8, ia: u64) {
        let region = descriptor::region_size(level);
        self.info.insert(
            cell,
            CellInfo {
                table: self.tables[ti].name.clone(),
                stage: self.tables[ti].stage,
                level,
                ia: ia & !(region - 1) & 0x0000_ffff_ffff_ffff,
            },
        );
    }

    fn constraint(&mut self, ti: usize, c: &MappingConstraint) -> Result<()> {
        let stage = self.tables[ti].stage;
        let name = self.tables[ti].name.clone();
        let input = self.lookup(&c.input)?;
        match (stage, input.kind) {
            (Stage::S1, NameKind::Virtual) | (Stage::S2, NameKind::Intermediate) => {}
            _ => {
                return Err(Error::Build(format!(
                    "table `{name}`: `{}` has the wrong address kind for a stage {} input",
                    c.input,
                    stage.number()
                )))
            }
        }
        let mut attrs = Attrs::default_for(stage);
        for (k, v) in &c.attrs {
            attrs.set(k, *v)?;
        }
        let (level, value) = match &c.target {
            Target::Invalid => (c.level.unwrap_or(3), 0),
            Target::Raw(v) => {
                let l = c.level.unwrap_or(3);
                descriptor::decode(*v, l)?;
                (l, *v)
            }
            Target::Table(p) => {
                let l = c.level.unwrap_or(2);
                (l, descriptor::encode(DescKind::Table, *p, l, attrs)?)
            }
            Target::Name(_) | Target::Addr(_) => {
                let oa = match &c.target {
                    Target::Name(n) => {
                        let b = self.lookup(n)?;
                        let ok = match stage {
                            Stage::S1 => matches!(b.kind, NameKind::Intermediate | NameKind::Physical),
                            Stage::S2 => b.kind == NameKind::Physical,
                        };
                        if !ok {
                            return Err(Error::Build(format!(
                                "table `{name}`: `{n}` is not a valid stage {} output",
                                stage.number()
                            )));
                        }
                        b.value
                    }
                    Target::Addr(a) => *a,
                    _ => unreachable!(),
                };
                let l = c.level.unwrap_or(3);
                let kind = if l == 3 { DescKind::Page } else { DescKind::Block };
                (l, descriptor::encode(kind, oa, l, attrs)?)
            }
        };
        let cell = self.ensure_path(ti, input.value, level)?;
        let entry = self.cells.entry(cell).or_insert(CellBuild { initial: None, alts: Vec::new(), path: false });
        if entry.path {
            return Err(Error::Build(format!(
                "table `{name}`: level-{level} entry for `{}` already holds an allocated table",
                c.input
            )));
        }
        match c.relation {
            MapRelation::Initial => {
                if entry.initial.is_some() {
                    return Err(Error::Build(format!(
                        "table `{name}`: more than one initial mapping for `{}` at level {level}",
                        c.input
                    )));
                }
                entry.initial = Some(value);
            }
            MapRelation::Alternative => {
                if !entry.alts.contains(&value) {
                    entry.alts.push(value);
                }
            }
        }
        self.note_cell(ti, cell, level, input.value);
        Ok(())
    }

    fn identity(&mut self, ti: usize, page: u64) -> Result<()> {
        let stage = self.tables[ti].stage;
        let desc = descriptor::encode(DescKind::Page, page, 3, Attrs::default_for(stage))?;
        let cell = self.ensure_path(ti, page, 3)?;
        match self.cells.get(&cell) {
            Some(c) if c.initial == Some(desc) => {}
            Some(_) => {
                return Err(Error::Build(format!(
                    "table `{}`: identity mapping of {page:#x} collides with another mapping",
                    self.tables[ti].name
                )))
            }
            None => {
                self.cells.insert(cell, CellBuild { initial: Some(desc), alts: Vec::new(), path: false });
                self.note_cell(ti, cell, 3, page);
            }
        }
        self.identity_done[ti].insert(page);
        Ok(())
    }

    fn nested_pages(&self, ti: usize, acc: &mut BTreeSet<u64>, seen: &mut BTreeSet<usize>) {
        if !seen.insert(ti) {
            return;
        }
        acc.extend(self.tables[ti].pages.iter().copied());
        for n in self.tables[ti].nested.clone() {
            if let Some(ni) = self.tables.iter().position(|t| t.name == n) {
                self.nested_pages(ni, acc, seen);
            }
        }
    }

    /// Identity-map every table's own pages and those of its nested tables
    /// so table memory is reachable through the regime that uses it. Mapping
    /// may allocate more pages, hence the fixpoint.
    fn self_identity(&mut self) -> Result<()> {
        loop {
            let mut changed = false;
            for ti in 0..self.tables.len() {
                let mut pages = BTreeSet::new();
                self.nested_pages(ti, &mut pages, &mut BTreeSet::new());
                for p in pages {
                    if !self.identity_done[ti].contains(&p) {
                        self.identity(ti, p)?;
                        changed = true;
                    }
                }
            }
            if !changed {
                return Ok(());
            }
        }
    }

    fn finish(self) -> Result<PageTableImage> {
        let mut memory = BTreeMap::new();
        for (pa, c) in &self.cells {
            let initial = c.initial.unwrap_or(0);
            let mut alternatives = Vec::new();
            for &a in &c.alts {
                if a != initial && !alternatives.contains(&a) {
                    alternatives.push(a);
                }
            }
            let info = &self.info[pa];
            for v in std::iter::once(initial).chain(alternatives.iter().copied()) {
                descriptor::decode(v, info.level)?;
            }
            memory.insert(*pa, ChoiceSet { initial, alternatives });
        }
        for (i, a) in self.tables.iter().enumerate() {
            for b in &self.tables[i + 1..] {
                if let Some(p) = a.pages.iter().find(|p| b.pages.contains(p)) {
                    return Err(Error::Build(format!("tables `{}` and `{}` overlap at page {p:#x}", a.name, b.name)));
                }
            }
        }
        let table_pages: BTreeSet<u64> = self.tables.iter().flat_map(|t| t.pages.iter().copied()).collect();
        for (n, v) in &self.spec.memory_inits {
            let pa = self.env[n].value;
            if table_pages.contains(&(pa & !(PAGE_SIZE - 1))) {
                return Err(Error::Build(format!("data cell `{n}` lies in table memory")));
            }
            memory.insert(pa, ChoiceSet::single(*v));
        }
        for p in &self.code_pages {
            if table_pages.contains(p) {
                return Err(Error::Build(format!("code page {p:#x} lies in table memory")));
            }
        }
        let roots = self.tables.iter().map(|t| (t.name.clone(), t.base)).collect();
        Ok(PageTableImage {
            memory,
            env: self.env,
            roots,
            tables: self.tables,
            cells: self.info,
            code_pages: self.code_pages,
            warnings: self.warnings,
        })
    }
}

// ---------------------------------------------------------------------------
// Built-in functions of the expression language

/// One evaluated argument: optional keyword and its 64-bit value.
pub type Arg = (Option<String>, u64);

fn arg(name: &str, args: &[Arg], pos: usize, keys: &[&str]) -> Result<u64> {
    if let Some((_, v)) = args.iter().find(|(k, _)| k.as_deref().is_some_and(|k| keys.contains(&k))) {
        return Ok(*v);
    }
    let positional: Vec<u64> = args.iter().filter(|(k, _)| k.is_none()).map(|(_, v)| *v).collect();
    positional.get(pos).copied().ok_or_else(|| Error::Builtin {
        name: name.to_string(),
        msg: format!("missing argument {}", keys.first().unwrap_or(&"")),
    })
}

fn has_key(args: &[Arg], key: &str) -> bool {
    args.iter().any(|(k, _)| k.as_deref() == Some(key))
}

pub fn resolve_builtin(name: &str, args: &[Arg], image: &PageTableImage) -> Result<u64> {
    let bad = |msg: String| Error::Builtin { name: name.to_string(), msg };
    let level_suffix = |prefix: &str| -> Option<u8> {
        name.strip_prefix(prefix).and_then(|s| s.parse::<u8>().ok()).filter(|l| *l <= 3)
    };
    if let Some(level) = level_suffix("pte") {
        let ia = arg(name, args, 0, &["ia", "va", "ipa"])?;
        let root = arg(name, args, 1, &["root", "base"]).unwrap_or_else(|_| image.default_root());
        return image.pte(ia, root, level);
    }
    if let Some(level) = level_suffix("desc") {
        let ia = arg(name, args, 0, &["ia", "va", "ipa"])?;
        let root = arg(name, args, 1, &["root", "base"]).unwrap_or_else(|_| image.default_root());
        return Ok(image.initial(image.pte(ia, root, level)?));
    }
    if let Some(level) = level_suffix("mkdesc") {
        let attrs = Attrs::default_for(Stage::S1);
        return if has_key(args, "table") {
            descriptor::encode(DescKind::Table, arg(name, args, 0, &["table"])?, level, attrs)
        } else {
            let oa = arg(name, args, 0, &["oa"])?;
            let kind = if level == 3 { DescKind::Page } else { DescKind::Block };
            descriptor::encode(kind, oa, level, attrs)
        };
    }
    match name {
        "raw" => arg(name, args, 0, &["value"]),
        "page" => Ok(arg(name, args, 0, &["addr"])? >> 12),
        "asid" | "vmid" => Ok(arg(name, args, 0, &["id"])? << 48),
        "ttbr" => {
            let id = arg(name, args, usize::MAX, &["asid", "vmid", "id"]).unwrap_or(0);
            let base = arg(name, args, usize::MAX, &["base"])?;
            if id > 0xffff {
                return Err(bad(format!("identifier {id:#x} wider than 16 bits")));
            }
            Ok((id << 48) | base)
        }
        "extz" => {
            let v = arg(name, args, 0, &["value"])?;
            let w = arg(name, args, 1, &["bits", "width"])?;
            Ok(if w >= 64 { v } else { v & ((1u64 << w) - 1) })
        }
        "offset" => {
            let level = arg(name, args, 0, &["level"])?;
            let va = arg(name, args, 1, &["va", "ia"])?;
            if level > 3 {
                return Err(bad(format!("level {level} out of range")));
            }
            Ok(8 * descriptor::level_index(va, level as u8))
        }
        "bvor" => {
            if args.is_empty() {
                return Err(bad("needs at least one argument".into()));
            }
            Ok(args.iter().fold(0, |acc, (_, v)| acc | v))
        }
        "va_to_pa" | "ipa_to_pa" | "va_to_ipa" => {
            let ia = arg(name, args, 0, &["addr"])?;
            let stage = if name == "ipa_to_pa" { Stage::S2 } else { Stage::S1 };
            image
                .tables
                .iter()
                .filter(|t| t.stage == stage)
                .find_map(|t| image.translate_initial(ia, t.base))
                .ok_or_else(|| bad(format!("{ia:#x} is not mapped by any stage {} table", stage.number())))
        }
        "pa_to_va" | "ipa_to_va" => {
            let target = arg(name, args, 0, &["addr"])?;
            image
                .env
                .values()
                .filter(|b| b.kind == NameKind::Virtual)
                .find(|b| {
                    image
                        .tables
                        .iter()
                        .filter(|t| t.stage == Stage::S1)
                        .any(|t| image.translate_initial(b.value, t.base) == Some(target))
                })
                .map(|b| b.value)
                .ok_or_else(|| bad(format!("no declared virtual address maps to {target:#x}")))
        }
        _ => Err(Error::Builtin { name: name.to_string(), msg: "unknown built-in".into() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_physical_declaration() {
        let s = parse_setup("physical pa1;").unwrap();
        assert_eq!(s.address_decls, vec![AddressDecl { name: "pa1".into(), kind: AddrKind::Physical }]);
    }

    #[test]
    fn table_with_invalid_constraint() {
        let s = parse_setup("s1table hyp 0x200000 { x |-> invalid; }").unwrap();
        assert_eq!(s.tables.len(), 1);
        let t = &s.tables[0];
        assert_eq!((t.stage, t.base), (Stage::S1, 0x200000));
        let c: Vec<_> = t.constraints().collect();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].relation, MapRelation::Initial);
        assert_eq!(c[0].target, Target::Invalid);
    }

    #[test]
    fn duplicate_level_clause_rejected() {
        assert!(parse_setup("physical pa1; x |-> pa1 at level 2 at level 3;").is_err());
    }

    #[test]
    fn duplicate_and_undeclared_names() {
        assert!(matches!(parse_setup("virtual x; physical x;"), Err(Error::Duplicate(_))));
        assert!(matches!(parse_setup("x |-> nowhere;"), Err(Error::Undeclared(_))));
    }

    #[test]
    fn empty_setup_without_default_tables() {
        let s = parse_setup("option default_tables = false;").unwrap();
        let img = build_images(&s).unwrap();
        assert!(img.memory.is_empty());
        assert!(img.roots.is_empty());
    }

    #[test]
    fn unknown_option_warns() {
        let s = parse_setup("option frobnicate = 3;").unwrap();
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn memory_init_lands_at_pa() {
        let s = parse_setup("physical pa1 pa2; *pa2 = 1;").unwrap();
        let img = build_images(&s).unwrap();
        assert_eq!(img.initial(img.env["pa2"].value), 1);
        assert_eq!(img.initial(img.env["pa1"].value), 0);
    }

    #[test]
    fn nested_allocation_order() {
        let text = "option default_tables = false; physical pa1;
            s1table hyp_pgtable_new 0x280000 { x |-> invalid at level 3; x ?-> pa1 at level 3; }
            s1table hyp_pgtable 0x200000 { x |-> invalid at level 2; x ?-> table(0x283000) at level 2;
                identity 0x1000 with code; s1table hyp_pgtable_new; }";
        let img = build_images(&parse_setup(text).unwrap()).unwrap();
        let x = img.env["x"].value;
        assert_eq!(img.pte(x, 0x280000, 3).unwrap() & !0xfff, 0x283000);
        let l2 = img.pte(x, 0x200000, 2).unwrap();
        assert_eq!(img.memory[&l2].alternatives, vec![0x283003]);
        assert!(img.code_pages.contains(&0x1000));
        assert!(img.translate_initial(0x283000, 0x200000) == Some(0x283000));
    }

    #[test]
    fn builtins() {
        let img = build_images(&parse_setup("option default_tables = false;").unwrap()).unwrap();
        assert_eq!(resolve_builtin("asid", &[(None, 1)], &img).unwrap(), 0x0001_0000_0000_0000);
        assert_eq!(resolve_builtin("page", &[(None, 0x241000)], &img).unwrap(), 0x241);
        let t = resolve_builtin("ttbr", &[(Some("asid".into()), 1), (Some("base".into()), 0x240000)], &img).unwrap();
        assert_eq!(t, 0x0001_0000_0024_0000);
        assert!(resolve_builtin("frob", &[], &img).is_err());
    }
}
