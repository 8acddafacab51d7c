//! The AArch64 subset: decoding, program layout, and a sequential executor
//! that emits per-instruction event traces.

use crate::descriptor::{self, Stage};
use crate::error::{Error, Result};
use crate::event::{
    Acquire, Barrier, BarrierClass, Context, Domain, Event, EventKind, SysReg, TlbiKind, TlbiOp, TransRead,
};
use crate::lex::parse_number;
use crate::walk::{self, Access, FaultInfo, FaultKind, Outcome, Regime};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

pub const MAIN_CODE_BASE: u64 = 0x7000_0000;
pub const THREAD_CODE_STRIDE: u64 = 0x1_0000;
pub const INSTR_BUDGET: usize = 256;
pub const XZR: u8 = 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Src {
    Reg(u8),
    Imm(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Offset {
    None,
    Imm(i64),
    Reg(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AddrMode {
    pub base: u8,
    pub offset: Offset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AluOp {
    Add,
    Sub,
    And,
    Orr,
    Eor,
    Lsl,
    Lsr,
    Bic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cond {
    Eq,
    Ne,
    Hs,
    Lo,
    Hi,
    Ls,
    Ge,
    Lt,
    Gt,
    Le,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    Label(String),
    Addr(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instr {
    Ldr { rt: u8, addr: AddrMode, acquire: Option<Acquire> },
    Str { rt: u8, addr: AddrMode, release: bool },
    Mov { rd: u8, src: Src },
    Alu { op: AluOp, rd: u8, rn: u8, src: Src },
    Cmp { rn: u8, src: Src },
    B { target: Target },
    BCond { cond: Cond, target: Target },
    Cbz { rt: u8, nonzero: bool, target: Target },
    Dmb(Barrier),
    Dsb(Barrier),
    Isb,
    Tlbi { kind: TlbiKind, rt: Option<u8> },
    Mrs { rt: u8, reg: SysReg },
    Msr { reg: SysReg, rt: u8 },
    Svc(u64),
    Hvc(u64),
    Eret,
    Nop,
}

fn decode_err(line: &str, msg: impl Into<String>) -> Error {
    Error::Decode { line: line.to_string(), msg: msg.into() }
}

pub fn parse_gpr(s: &str) -> Option<u8> {
    let s = s.trim().to_ascii_lowercase();
    if s == "xzr" {
        return Some(XZR);
    }
    let n = s.strip_prefix('x').or_else(|| s.strip_prefix('r'))?;
    let v: u8 = n.parse().ok()?;
    (v <= 30).then_some(v)
}

fn parse_imm(s: &str) -> Option<u64> {
    let s = s.trim();
    let s = s.strip_prefix('#').unwrap_or(s);
    if let Some(neg) = s.strip_prefix('-') {
        return parse_number(neg).map(|v| v.wrapping_neg());
    }
    parse_number(s)
}

fn parse_src(s: &str) -> Option<Src> {
    parse_gpr(s).map(Src::Reg).or_else(|| parse_imm(s).map(Src::Imm))
}

fn parse_barrier(opt: &str, line: &str) -> Result<Barrier> {
    let (class, domain) = match opt.to_ascii_lowercase().as_str() {
        "" | "sy" => (BarrierClass::Full, Domain::Sy),
        "st" => (BarrierClass::St, Domain::Sy),
        "ld" => (BarrierClass::Ld, Domain::Sy),
        "ish" => (BarrierClass::Full, Domain::Ish),
        "ishst" => (BarrierClass::St, Domain::Ish),
        "ishld" => (BarrierClass::Ld, Domain::Ish),
        "osh" => (BarrierClass::Full, Domain::Osh),
        "oshst" => (BarrierClass::St, Domain::Osh),
        "oshld" => (BarrierClass::Ld, Domain::Osh),
        "nsh" => (BarrierClass::Full, Domain::Nsh),
        "nshst" => (BarrierClass::St, Domain::Nsh),
        "nshld" => (BarrierClass::Ld, Domain::Nsh),
        other => return Err(decode_err(line, format!("unknown barrier option `{other}`"))),
    };
    Ok(Barrier { class, domain })
}

/// Split operands on commas outside brackets.
fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '[' => {
                depth += 1;
                cur.push(c);
            }
            ']' => {
                depth -= 1;
                cur.push(c);
            }
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
            }
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn parse_addr(s: &str, line: &str) -> Result<AddrMode> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| decode_err(line, format!("expected `[base...]`, found `{s}`")))?;
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    let base = parse_gpr(parts[0]).ok_or_else(|| decode_err(line, format!("bad base register `{}`", parts[0])))?;
    if base == XZR {
        return Err(decode_err(line, "xzr cannot be a base register"));
    }
    let offset = match parts.len() {
        1 => Offset::None,
        2 => match parse_gpr(parts[1]) {
            Some(r) => Offset::Reg(r),
            None => {
                let v = parse_imm(parts[1]).ok_or_else(|| decode_err(line, format!("bad offset `{}`", parts[1])))?;
                Offset::Imm(v as i64)
            }
        },
        _ => return Err(decode_err(line, "too many address components")),
    };
    Ok(AddrMode { base, offset })
}

fn parse_target(s: &str) -> Target {
    Target::Label(s.trim().to_string())
}

/// Decode one assembly line (no label prefix). Comments are stripped.
pub fn decode(line: &str) -> Result<Instr> {
    let text = match line.find("//") {
        Some(i) => &line[..i],
        None => line,
    }
    .trim();
    let (mn, rest) = match text.find(char::is_whitespace) {
        Some(i) => (&text[..i], text[i..].trim()),
        None => (text, ""),
    };
    let mn = mn.to_ascii_lowercase();
    let ops = split_operands(rest);
    let want = |n: usize| -> Result<()> {
        if ops.len() == n {
            Ok(())
        } else {
            Err(decode_err(line, format!("`{mn}` takes {n} operand(s), found {}", ops.len())))
        }
    };
    let gpr = |s: &str| parse_gpr(s).ok_or_else(|| decode_err(line, format!("bad register `{s}`")));
    let src = |s: &str| parse_src(s).ok_or_else(|| decode_err(line, format!("bad operand `{s}`")));
    Ok(match mn.as_str() {
        "ldr" | "ldar" | "ldapr" => {
            want(2)?;
            let acquire = match mn.as_str() {
                "ldar" => Some(Acquire::A),
                "ldapr" => Some(Acquire::Q),
                _ => None,
            };
            Instr::Ldr { rt: gpr(&ops[0])?, addr: parse_addr(&ops[1], line)?, acquire }
        }
        "str" | "stlr" => {
            want(2)?;
            Instr::Str { rt: gpr(&ops[0])?, addr: parse_addr(&ops[1], line)?, release: mn == "stlr" }
        }
        "mov" => {
            want(2)?;
            Instr::Mov { rd: gpr(&ops[0])?, src: src(&ops[1])? }
        }
        "add" | "sub" | "and" | "orr" | "eor" | "lsl" | "lsr" | "bic" => {
            want(3)?;
            let op = match mn.as_str() {
                "add" => AluOp::Add,
                "sub" => AluOp::Sub,
                "and" => AluOp::And,
                "orr" => AluOp::Orr,
                "eor" => AluOp::Eor,
                "lsl" => AluOp::Lsl,
                "lsr" => AluOp::Lsr,
                _ => AluOp::Bic,
            };
            Instr::Alu { op, rd: gpr(&ops[0])?, rn: gpr(&ops[1])?, src: src(&ops[2])? }
        }
        "cmp" => {
            want(2)?;
            Instr::Cmp { rn: gpr(&ops[0])?, src: src(&ops[1])? }
        }
        "b" => {
            want(1)?;
            Instr::B { target: parse_target(&ops[0]) }
        }
        "cbz" | "cbnz" => {
            want(2)?;
            Instr::Cbz { rt: gpr(&ops[0])?, nonzero: mn == "cbnz", target: parse_target(&ops[1]) }
        }
        _ if mn.starts_with("b.") => {
            want(1)?;
            let cond = match &mn[2..] {
                "eq" => Cond::Eq,
                "ne" => Cond::Ne,
                "hs" | "cs" => Cond::Hs,
                "lo" | "cc" => Cond::Lo,
                "hi" => Cond::Hi,
                "ls" => Cond::Ls,
                "ge" => Cond::Ge,
                "lt" => Cond::Lt,
                "gt" => Cond::Gt,
                "le" => Cond::Le,
                c => return Err(decode_err(line, format!("unsupported condition `{c}`"))),
            };
            Instr::BCond { cond, target: parse_target(&ops[0]) }
        }
        "dmb" | "dsb" => {
            if ops.len() > 1 {
                return Err(decode_err(line, "barrier takes at most one option"));
            }
            let b = parse_barrier(ops.first().map_or("", String::as_str), line)?;
            if mn == "dmb" {
                Instr::Dmb(b)
            } else {
                Instr::Dsb(b)
            }
        }
        "isb" => Instr::Isb,
        "tlbi" => {
            if ops.is_empty() {
                return Err(decode_err(line, "tlbi needs an operation"));
            }
            let kind = TlbiKind::parse(&ops[0])
                .ok_or_else(|| Error::Unsupported(format!("TLBI operation `{}` in `{line}`", ops[0])))?;
            let rt = if kind.takes_register() {
                want(2)?;
                Some(gpr(&ops[1])?)
            } else {
                want(1)?;
                None
            };
            Instr::Tlbi { kind, rt }
        }
        "mrs" => {
            want(2)?;
            let reg = SysReg::parse(&ops[1])
                .ok_or_else(|| Error::Unsupported(format!("system register `{}` in `{line}`", ops[1])))?;
            Instr::Mrs { rt: gpr(&ops[0])?, reg }
        }
        "msr" => {
            want(2)?;
            let reg = SysReg::parse(&ops[0])
                .ok_or_else(|| Error::Unsupported(format!("system register `{}` in `{line}`", ops[0])))?;
            Instr::Msr { reg, rt: gpr(&ops[1])? }
        }
        "svc" | "hvc" => {
            let imm = match ops.first() {
                Some(o) => parse_imm(o).ok_or_else(|| decode_err(line, format!("bad immediate `{o}`")))?,
                None => 0,
            };
            if mn == "svc" {
                Instr::Svc(imm)
            } else {
                Instr::Hvc(imm)
            }
        }
        "eret" => Instr::Eret,
        "nop" => Instr::Nop,
        "" => return Err(decode_err(line, "empty instruction")),
        other => return Err(Error::Unsupported(format!("instruction `{other}` in `{line}`"))),
    })
}

// ---------------------------------------------------------------------------
// Program layout

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeBlock {
    pub thread: usize,
    pub base: u64,
    pub handler: bool,
    pub instrs: Vec<Instr>,
    pub text: Vec<String>,
}

impl CodeBlock {
    pub fn end(&self) -> u64 {
        self.base + 4 * self.instrs.len() as u64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub blocks: Vec<CodeBlock>,
    pub labels: BTreeMap<String, u64>,
}

/// Source code of one block: `(labels, instruction text)` per line.
pub type SourceLines = Vec<(Vec<String>, String)>;

impl Program {
    /// Lay out blocks and resolve labels. Named labels are global and must
    /// be unique; numeric labels are local and referenced as `1f`/`1b`.
    pub fn build(blocks: Vec<(usize, u64, bool, SourceLines)>) -> Result<Program> {
        let mut labels = BTreeMap::new();
        for (_, base, _, lines) in &blocks {
            for (i, (ls, _)) in lines.iter().enumerate() {
                for l in ls {
                    if l.chars().all(|c| c.is_ascii_digit()) {
                        continue;
                    }
                    if labels.insert(l.clone(), base + 4 * i as u64).is_some() {
                        return Err(Error::Format(format!("label `{l}` defined more than once")));
                    }
                }
            }
        }
        let mut out = Vec::new();
        for (thread, base, handler, lines) in blocks {
            let mut instrs = Vec::new();
            let mut text = Vec::new();
            for (i, (_, src)) in lines.iter().enumerate() {
                let mut ins = decode(src)?;
                let resolve = |t: &mut Target| -> Result<()> {
                    if let Target::Label(name) = t {
                        let addr = resolve_label(name, i, base, &lines, &labels)
                            .ok_or_else(|| Error::Format(format!("undefined label `{name}` in `{src}`")))?;
                        *t = Target::Addr(addr);
                    }
                    Ok(())
                };
                match &mut ins {
                    Instr::B { target } | Instr::BCond { target, .. } | Instr::Cbz { target, .. } => resolve(target)?,
                    _ => {}
                }
                instrs.push(ins);
                text.push(src.clone());
            }
            out.push(CodeBlock { thread, base, handler, instrs, text });
        }
        for (i, a) in out.iter().enumerate() {
            for b in &out[i + 1..] {
                if a.thread == b.thread && a.base < b.end() && b.base < a.end() {
                    return Err(Error::Format(format!("code at {:#x} overlaps code at {:#x}", a.base, b.base)));
                }
            }
        }
        Ok(Program { blocks: out, labels })
    }

    pub fn fetch(&self, thread: usize, pc: u64) -> Option<(&CodeBlock, usize)> {
        self.blocks
            .iter()
            .find(|b| b.thread == thread && pc >= b.base && pc < b.end() && (pc - b.base).is_multiple_of(4))
            .map(|b| (b, ((pc - b.base) / 4) as usize))
    }

    pub fn has_code_at(&self, thread: usize, pc: u64) -> bool {
        self.fetch(thread, pc).is_some()
    }
}

fn resolve_label(name: &str, at: usize, base: u64, lines: &SourceLines, labels: &BTreeMap<String, u64>) -> Option<u64> {
    let local = |dir: char| -> Option<u64> {
        let n = &name[..name.len() - 1];
        let range: Box<dyn Iterator<Item = usize>> =
            if dir == 'f' { Box::new(at + 1..lines.len() + 1) } else { Box::new((0..=at).rev()) };
        for j in range {
            if j < lines.len() && lines[j].0.iter().any(|l| l == n) {
                return Some(base + 4 * j as u64);
            }
        }
        None
    };
    if name.len() > 1 && name[..name.len() - 1].chars().all(|c| c.is_ascii_digit()) {
        if name.ends_with('f') {
            return local('f');
        }
        if name.ends_with('b') {
            return local('b');
        }
    }
    labels.get(name).copied()
}

// ---------------------------------------------------------------------------
// Execution

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadContext {
    pub gpr: [u64; 31],
    /// Trace positions of the reads each register value depends on.
    pub taint: Vec<BTreeSet<usize>>,
    pub written: [bool; 31],
    pub el: u8,
    pub sp: bool,
    pub nzcv: u8,
    pub nzcv_taint: BTreeSet<usize>,
    pub sysregs: BTreeMap<SysReg, u64>,
    pub pc: u64,
    pub ctrl: BTreeSet<usize>,
}

impl ThreadContext {
    pub fn new(pc: u64) -> Self {
        let mut sysregs = BTreeMap::new();
        sysregs.insert(SysReg::SctlrEl1, 1);
        sysregs.insert(SysReg::SctlrEl2, 1);
        ThreadContext {
            gpr: [0; 31],
            taint: vec![BTreeSet::new(); 31],
            written: [false; 31],
            el: 0,
            sp: false,
            nzcv: 0,
            nzcv_taint: BTreeSet::new(),
            sysregs,
            pc,
            ctrl: BTreeSet::new(),
        }
    }

    pub fn sys(&self, r: SysReg) -> u64 {
        self.sysregs.get(&r).copied().unwrap_or(0)
    }

    pub fn set_gpr(&mut self, r: u8, v: u64) {
        if r != XZR {
            self.gpr[r as usize] = v;
            self.written[r as usize] = true;
        }
    }

    fn reg(&self, r: u8) -> (u64, BTreeSet<usize>) {
        if r == XZR {
            (0, BTreeSet::new())
        } else {
            (self.gpr[r as usize], self.taint[r as usize].clone())
        }
    }

    fn write_reg(&mut self, r: u8, v: u64, taint: BTreeSet<usize>) {
        if r != XZR {
            self.gpr[r as usize] = v;
            self.taint[r as usize] = taint;
            self.written[r as usize] = true;
        }
    }

    /// Translation regime for explicit accesses at the current EL.
    pub fn regime(&self) -> Regime {
        if self.el == 2 {
            Regime { el: 2, ttbr: self.sys(SysReg::Ttbr0El2), vttbr: None }
        } else {
            let v = self.sys(SysReg::VttbrEl2);
            let vttbr = (v & descriptor::ADDR_MASK != 0).then_some(v);
            Regime { el: self.el, ttbr: self.sys(SysReg::Ttbr0El1), vttbr }
        }
    }

    pub fn context(&self) -> Context {
        let r = self.regime();
        Context { el: self.el, asid: r.asid(), vmid: if self.el == 2 { 0 } else { r.vmid() }, el2_regime: self.el == 2 }
    }

    fn mmu_on(&self) -> bool {
        let sctlr = if self.el == 2 { SysReg::SctlrEl2 } else { SysReg::SctlrEl1 };
        self.sys(sctlr) & 1 == 1
    }
}

/// Source of values for reads during execution.
pub trait ValueOracle {
    /// Value returned by a read of `pa`; `trans` is set for translation reads.
    fn read(&mut self, pa: u64, trans: Option<(Stage, u8)>) -> Result<u64>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub pc: u64,
    pub fault: FaultInfo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadRun {
    pub events: Vec<Event>,
    pub ctx: ThreadContext,
    pub faults: Vec<FaultRecord>,
    pub instructions: usize,
    /// Hit the instruction budget.
    pub divergent: bool,
}

pub struct Executor<'a> {
    pub program: &'a Program,
    pub thread: usize,
    pub ctx: ThreadContext,
    pub events: Vec<Event>,
    pub faults: Vec<FaultRecord>,
    instr: usize,
    iio: usize,
}

fn ev_with(kind: EventKind) -> Event {
    Event::new(kind)
}

enum Exception {
    Fault(FaultInfo),
    Svc,
    Hvc,
}

impl<'a> Executor<'a> {
    pub fn new(program: &'a Program, thread: usize, ctx: ThreadContext) -> Self {
        Executor { program, thread, ctx, events: Vec::new(), faults: Vec::new(), instr: 0, iio: 0 }
    }

    fn push(&mut self, mut e: Event) -> usize {
        e.thread = Some(self.thread);
        e.instr = self.instr;
        e.iio = self.iio;
        e.pc = self.ctx.pc;
        e.deps.ctrl = self.ctx.ctrl.clone();
        if e.ctx == Context::default() {
            e.ctx = self.ctx.context();
        }
        self.iio += 1;
        self.events.push(e);
        self.events.len() - 1
    }

    /// Run to completion: falling off a code block ends the thread.
    pub fn run(mut self, oracle: &mut dyn ValueOracle) -> Result<ThreadRun> {
        let mut count = 0;
        while let Some((block, idx)) = self.program.fetch(self.thread, self.ctx.pc) {
            if count >= INSTR_BUDGET {
                return Ok(self.finish(count, true));
            }
            let ins = block.instrs[idx].clone();
            self.step(&ins, oracle)?;
            count += 1;
        }
        Ok(self.finish(count, false))
    }

    fn finish(self, instructions: usize, divergent: bool) -> ThreadRun {
        ThreadRun { events: self.events, ctx: self.ctx, faults: self.faults, instructions, divergent }
    }

    fn address(&self, a: &AddrMode) -> (u64, BTreeSet<usize>) {
        let (b, mut t) = self.ctx.reg(a.base);
        let v = match a.offset {
            Offset::None => b,
            Offset::Imm(i) => b.wrapping_add(i as u64),
            Offset::Reg(r) => {
                let (o, ot) = self.ctx.reg(r);
                t.extend(ot);
                b.wrapping_add(o)
            }
        };
        (v, t)
    }

    fn src(&self, s: Src) -> (u64, BTreeSet<usize>) {
        match s {
            Src::Reg(r) => self.ctx.reg(r),
            Src::Imm(v) => (v, BTreeSet::new()),
        }
    }

    /// Execute one instruction, appending its events.
    pub fn step(&mut self, ins: &Instr, oracle: &mut dyn ValueOracle) -> Result<()> {
        self.iio = 0;
        let next = self.ctx.pc + 4;
        let mut new_pc = next;
        match ins {
            Instr::Ldr { rt, addr, acquire } => {
                let (va, taint) = self.address(addr);
                match self.translate(va, Access::Read, &taint, oracle)? {
                    Ok((pa, ipa)) => {
                        let value = oracle.read(pa, None)?;
                        let mut e = ev_with(EventKind::R);
                        e.va = Some(va);
                        e.ipa = ipa;
                        e.pa = Some(pa);
                        e.value = value;
                        e.acquire = *acquire;
                        e.deps.addr = taint;
                        let pos = self.push(e);
                        self.ctx.write_reg(*rt, value, BTreeSet::from([pos]));
                    }
                    Err(f) => {
                        let mut e = ev_with(EventKind::Fault);
                        e.va = Some(va);
                        e.fault = Some(f);
                        e.from_r = true;
                        e.acquire = *acquire;
                        e.deps.addr = taint;
                        self.push(e);
                        new_pc = self.take_exception(Exception::Fault(f))?;
                    }
                }
            }
            Instr::Str { rt, addr, release } => {
                let (va, taint) = self.address(addr);
                let (data, dtaint) = self.ctx.reg(*rt);
                match self.translate(va, Access::Write, &taint, oracle)? {
                    Ok((pa, ipa)) => {
                        let mut e = ev_with(EventKind::W);
                        e.va = Some(va);
                        e.ipa = ipa;
                        e.pa = Some(pa);
                        e.value = data;
                        e.release = *release;
                        e.deps.addr = taint;
                        e.deps.data = dtaint;
                        self.push(e);
                    }
                    Err(f) => {
                        let mut e = ev_with(EventKind::Fault);
                        e.va = Some(va);
                        e.value = data;
                        e.fault = Some(f);
                        e.from_w = true;
                        e.release = *release;
                        e.deps.addr = taint;
                        e.deps.data = dtaint;
                        self.push(e);
                        new_pc = self.take_exception(Exception::Fault(f))?;
                    }
                }
            }
            Instr::Mov { rd, src } => {
                let (v, t) = self.src(*src);
                self.ctx.write_reg(*rd, v, t);
            }
            Instr::Alu { op, rd, rn, src } => {
                let (a, mut t) = self.ctx.reg(*rn);
                let (b, bt) = self.src(*src);
                t.extend(bt);
                let v = match op {
                    AluOp::Add => a.wrapping_add(b),
                    AluOp::Sub => a.wrapping_sub(b),
                    AluOp::And => a & b,
                    AluOp::Orr => a | b,
                    AluOp::Eor => a ^ b,
                    AluOp::Lsl => a.checked_shl(b as u32).unwrap_or(0),
                    AluOp::Lsr => a.checked_shr(b as u32).unwrap_or(0),
                    AluOp::Bic => a & !b,
                };
                self.ctx.write_reg(*rd, v, t);
            }
            Instr::Cmp { rn, src } => {
                let (a, mut t) = self.ctx.reg(*rn);
                let (b, bt) = self.src(*src);
                t.extend(bt);
                let (r, borrow) = a.overflowing_sub(b);
                let n = (r >> 63) as u8;
                let z = (r == 0) as u8;
                let c = (!borrow) as u8;
                let v = ((((a ^ b) & (a ^ r)) >> 63) & 1) as u8;
                self.ctx.nzcv = (n << 3) | (z << 2) | (c << 1) | v;
                self.ctx.nzcv_taint = t;
            }
            Instr::B { target } => new_pc = target_addr(target),
            Instr::BCond { cond, target } => {
                let t = self.ctx.nzcv_taint.clone();
                self.ctx.ctrl.extend(t);
                if cond_holds(*cond, self.ctx.nzcv) {
                    new_pc = target_addr(target);
                }
            }
            Instr::Cbz { rt, nonzero, target } => {
                let (v, t) = self.ctx.reg(*rt);
                self.ctx.ctrl.extend(t);
                if (v == 0) != *nonzero {
                    new_pc = target_addr(target);
                }
            }
            Instr::Dmb(b) => {
                let mut e = ev_with(EventKind::Dmb);
                e.barrier = Some(*b);
                self.push(e);
            }
            Instr::Dsb(b) => {
                let mut e = ev_with(EventKind::Dsb);
                e.barrier = Some(*b);
                self.push(e);
            }
            Instr::Isb => {
                self.push(ev_with(EventKind::Isb));
            }
            Instr::Tlbi { kind, rt } => {
                let (v, t) = match rt {
                    Some(r) => self.ctx.reg(*r),
                    None => (0, BTreeSet::new()),
                };
                let page = (v & 0x0000_0fff_ffff_ffff) << 12;
                let op = TlbiOp {
                    kind: *kind,
                    va_page: kind.by_va().then_some(page & descriptor::ADDR_MASK),
                    asid: (kind.by_asid()).then_some((v >> 48) as u16),
                    ipa_page: kind.by_ipa().then_some(((v & 0xf_ffff_ffff) << 12) & descriptor::ADDR_MASK),
                    vmid: self.ctx.regime().vmid(),
                };
                let mut e = ev_with(EventKind::Tlbi);
                e.tlbi = Some(op);
                e.deps.data = t;
                self.push(e);
            }
            Instr::Mrs { rt, reg } => {
                let v = self.ctx.sys(*reg);
                self.ctx.write_reg(*rt, v, BTreeSet::new());
            }
            Instr::Msr { reg, rt } => {
                let (v, t) = self.ctx.reg(*rt);
                if reg.is_context_changing() {
                    let mut e = ev_with(EventKind::Msr);
                    e.msr = Some(*reg);
                    e.value = v;
                    e.deps.data = t;
                    self.push(e);
                }
                self.ctx.sysregs.insert(*reg, v);
            }
            Instr::Svc(_) => new_pc = self.take_exception(Exception::Svc)?,
            Instr::Hvc(_) => new_pc = self.take_exception(Exception::Hvc)?,
            Instr::Eret => {
                if self.ctx.el == 0 {
                    return Err(Error::Exec(format!("ERET at EL0 (pc {:#x})", self.ctx.pc)));
                }
                let (elr, spsr) = if self.ctx.el == 2 {
                    (SysReg::ElrEl2, SysReg::SpsrEl2)
                } else {
                    (SysReg::ElrEl1, SysReg::SpsrEl1)
                };
                self.push(ev_with(EventKind::Eret));
                let m = self.ctx.sys(spsr);
                let target_el = ((m >> 2) & 0b11) as u8;
                if target_el > self.ctx.el {
                    return Err(Error::Exec(format!("ERET to higher EL{target_el}")));
                }
                self.ctx.el = target_el;
                self.ctx.sp = m & 1 == 1;
                new_pc = self.ctx.sys(elr);
            }
            Instr::Nop => {}
        }
        self.ctx.pc = new_pc;
        self.instr += 1;
        Ok(())
    }

    /// Walk `va`, emitting T events. Returns the PA (and IPA) or the fault.
    #[allow(clippy::type_complexity)]
    fn translate(
        &mut self,
        va: u64,
        access: Access,
        taint: &BTreeSet<usize>,
        oracle: &mut dyn ValueOracle,
    ) -> Result<std::result::Result<(u64, Option<u64>), FaultInfo>> {
        if !self.ctx.mmu_on() {
            return Err(Error::Unsupported("MMU off".into()));
        }
        let regime = self.ctx.regime();
        let res = walk::walk(regime, va, access, &mut |stage, level, pa| oracle.read(pa, Some((stage, level))))?;
        for r in &res.reads {
            let mut e = ev_with(EventKind::T);
            e.va = Some(va);
            e.pa = Some(r.pa);
            e.value = r.value;
            e.trans = Some(TransRead { stage: r.stage, level: r.level, va, ipa: r.ipa });
            e.deps.addr = taint.clone();
            self.push(e);
        }
        Ok(match res.outcome {
            Outcome::Translated { pa, ipa } => Ok((pa, ipa)),
            Outcome::Fault(f) => Err(f),
        })
    }

    /// Exception entry; emits TE and returns the vector address.
    fn take_exception(&mut self, exc: Exception) -> Result<u64> {
        let from = self.ctx.el;
        let (target, preferred) = match &exc {
            Exception::Fault(f) => {
                let to = if (f.stage == Stage::S2 && self.ctx.regime().two_stage()) || from == 2 { 2 } else { 1 };
                self.faults.push(FaultRecord { pc: self.ctx.pc, fault: *f });
                (to, self.ctx.pc)
            }
            Exception::Svc => (from.max(1), self.ctx.pc + 4),
            Exception::Hvc => (2, self.ctx.pc + 4),
        };
        self.push(ev_with(EventKind::Te));
        let (vbar, elr, spsr, far) = if target == 2 {
            (SysReg::VbarEl2, SysReg::ElrEl2, SysReg::SpsrEl2, SysReg::FarEl2)
        } else {
            (SysReg::VbarEl1, SysReg::ElrEl1, SysReg::SpsrEl1, SysReg::FarEl1)
        };
        let offset = if from < target {
            0x400
        } else if self.ctx.sp {
            0x200
        } else {
            0
        };
        let spsr_value = ((from as u64) << 2) | self.ctx.sp as u64;
        self.ctx.sysregs.insert(elr, preferred);
        self.ctx.sysregs.insert(spsr, spsr_value);
        if let Exception::Fault(f) = &exc {
            self.ctx.sysregs.insert(far, f.va);
            let esr = if target == 2 { SysReg::EsrEl2 } else { SysReg::EsrEl1 };
            let class = match (f.kind, f.access) {
                (FaultKind::Translation, _) => 0b0001,
                (FaultKind::Permission, _) => 0b0011,
            };
            self.ctx.sysregs.insert(esr, class << 2 | f.level as u64);
            if f.stage == Stage::S2 {
                let ipa = f.ipa.unwrap_or(0);
                self.ctx.sysregs.insert(SysReg::HpfarEl2, (ipa >> 12) << 4);
            }
        }
        self.ctx.el = target;
        self.ctx.sp = true;
        let vector = self.ctx.sys(vbar) + offset;
        if !self.program.has_code_at(self.thread, vector) {
            return Err(Error::Exec(format!(
                "no handler mapped at vector address {vector:#x} for thread {}",
                self.thread
            )));
        }
        Ok(vector)
    }
}

fn target_addr(t: &Target) -> u64 {
    match t {
        Target::Addr(a) => *a,
        Target::Label(l) => panic!("unresolved label `{l}`"),
    }
}

fn cond_holds(c: Cond, nzcv: u8) -> bool {
    let n = nzcv & 8 != 0;
    let z = nzcv & 4 != 0;
    let cf = nzcv & 2 != 0;
    let v = nzcv & 1 != 0;
    match c {
        Cond::Eq => z,
        Cond::Ne => !z,
        Cond::Hs => cf,
        Cond::Lo => !cf,
        Cond::Hi => cf && !z,
        Cond::Ls => !(cf && !z),
        Cond::Ge => n == v,
        Cond::Lt => n != v,
        Cond::Gt => !z && n == v,
        Cond::Le => !(!z && n == v),
    }
}
