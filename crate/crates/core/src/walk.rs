//! Architected translation-table walk: single stage and nested two-stage,
//! with permission checks. Descriptor values come from a caller-supplied
//! read service so the same walk serves both oracle and enumeration use.

use crate::descriptor::{self, DescKind, DescriptorView, Stage};
use crate::error::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Access {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultKind {
    Translation,
    Permission,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaultInfo {
    pub kind: FaultKind,
    pub stage: Stage,
    pub level: u8,
    pub va: u64,
    /// Faulting IPA for stage-2 faults.
    pub ipa: Option<u64>,
    pub access: Access,
}

/// Which translation regime is in force and its base registers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Regime {
    /// Current exception level (0, 1 or 2).
    pub el: u8,
    /// TTBR0 of the regime: TTBR0_EL2 at EL2, TTBR0_EL1 otherwise.
    pub ttbr: u64,
    /// VTTBR_EL2 when stage 2 is enabled for the EL1&0 regime.
    pub vttbr: Option<u64>,
}

impl Regime {
    pub fn is_el2(&self) -> bool {
        self.el == 2
    }

    pub fn root(&self) -> u64 {
        self.ttbr & descriptor::ADDR_MASK
    }

    pub fn asid(&self) -> u16 {
        (self.ttbr >> 48) as u16
    }

    pub fn vmid(&self) -> u16 {
        self.vttbr.map_or(0, |v| (v >> 48) as u16)
    }

    pub fn two_stage(&self) -> bool {
        !self.is_el2() && self.vttbr.is_some()
    }
}

/// One descriptor fetch performed by the walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkRead {
    pub stage: Stage,
    pub level: u8,
    pub pa: u64,
    pub value: u64,
    /// For stage-2 reads, the IPA being translated.
    pub ipa: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Translated { pa: u64, ipa: Option<u64> },
    Fault(FaultInfo),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkResult {
    pub reads: Vec<WalkRead>,
    pub outcome: Outcome,
}

/// Descriptor read service: `(stage, level, descriptor PA) -> value`.
pub type ReadService<'a> = dyn FnMut(Stage, u8, u64) -> Result<u64> + 'a;

enum StageOutcome {
    Leaf {
        oa: u64,
        view: DescriptorView,
        level: u8,
    },
    Fault {
        level: u8,
    },
    /// Stage-2 fault while fetching a stage-1 descriptor.
    Nested(FaultInfo),
}

struct Walker<'a, 'b> {
    regime: Regime,
    va: u64,
    access: Access,
    read: &'a mut ReadService<'b>,
    reads: Vec<WalkRead>,
}

impl Walker<'_, '_> {
    fn fault(&self, kind: FaultKind, stage: Stage, level: u8, ipa: Option<u64>) -> FaultInfo {
        FaultInfo { kind, stage, level, va: self.va, ipa, access: self.access }
    }

    /// Walk one stage from `root`. For stage 1 under a two-stage regime the
    /// table addresses are IPAs and each fetch is first translated by stage 2.
    fn one_stage(&mut self, stage: Stage, root: u64, ia: u64, nested: bool) -> Result<StageOutcome> {
        let mut table = root;
        for level in 0..=3u8 {
            let entry = table + 8 * descriptor::level_index(ia, level);
            let pa = if nested {
                let s2_root = self.regime.vttbr.expect("two-stage regime") & descriptor::ADDR_MASK;
                match self.one_stage(Stage::S2, s2_root, entry, false)? {
                    StageOutcome::Leaf { oa, .. } => oa,
                    StageOutcome::Fault { level } => {
                        return Ok(StageOutcome::Nested(self.fault(
                            FaultKind::Translation,
                            Stage::S2,
                            level,
                            Some(entry),
                        )))
                    }
                    StageOutcome::Nested(f) => return Ok(StageOutcome::Nested(f)),
                }
            } else {
                entry
            };
            let value = (self.read)(stage, level, pa)?;
            self.reads.push(WalkRead { stage, level, pa, value, ipa: (stage == Stage::S2).then_some(ia) });
            let view = descriptor::decode(value, level)?;
            match view.kind {
                DescKind::Invalid => return Ok(StageOutcome::Fault { level }),
                DescKind::Table => table = view.addr,
                DescKind::Block | DescKind::Page => {
                    let oa = view.addr | (ia & (descriptor::region_size(level) - 1));
                    return Ok(StageOutcome::Leaf { oa, view, level });
                }
            }
        }
        unreachable!("level 3 descriptors are never tables")
    }
}

fn s1_permits(view: &DescriptorView, el: u8, el2_regime: bool, access: Access) -> bool {
    let read_only = view.attrs.ap & 0b10 != 0;
    let el0_ok = view.attrs.ap & 0b01 != 0;
    if !el2_regime && el == 0 && !el0_ok {
        return false;
    }
    !(access == Access::Write && read_only)
}

fn s2_permits(view: &DescriptorView, access: Access) -> bool {
    match access {
        Access::Read => view.attrs.ap & 0b01 != 0,
        Access::Write => view.attrs.ap & 0b10 != 0,
    }
}

pub fn walk(regime: Regime, va: u64, access: Access, read: &mut ReadService<'_>) -> Result<WalkResult> {
    let mut w = Walker { regime, va, access, read, reads: Vec::new() };
    let outcome = walk_inner(&mut w)?;
    Ok(WalkResult { reads: w.reads, outcome })
}

fn walk_inner(w: &mut Walker<'_, '_>) -> Result<Outcome> {
    let regime = w.regime;
    let two = regime.two_stage();
    let (oa, view, level) = match w.one_stage(Stage::S1, regime.root(), w.va, two)? {
        StageOutcome::Fault { level } => {
            return Ok(Outcome::Fault(w.fault(FaultKind::Translation, Stage::S1, level, None)))
        }
        StageOutcome::Nested(f) => return Ok(Outcome::Fault(f)),
        StageOutcome::Leaf { oa, view, level } => (oa, view, level),
    };
    if !s1_permits(&view, regime.el, regime.is_el2(), w.access) {
        return Ok(Outcome::Fault(w.fault(FaultKind::Permission, Stage::S1, level, None)));
    }
    if !two {
        return Ok(Outcome::Translated { pa: oa, ipa: None });
    }
    let root = regime.vttbr.expect("two-stage") & descriptor::ADDR_MASK;
    match w.one_stage(Stage::S2, root, oa, false)? {
        StageOutcome::Fault { level } => {
            Ok(Outcome::Fault(w.fault(FaultKind::Translation, Stage::S2, level, Some(oa))))
        }
        StageOutcome::Nested(f) => Ok(Outcome::Fault(f)),
        StageOutcome::Leaf { oa: pa, view, level } => {
            if s2_permits(&view, w.access) {
                Ok(Outcome::Translated { pa, ipa: Some(oa) })
            } else {
                Ok(Outcome::Fault(w.fault(FaultKind::Permission, Stage::S2, level, Some(oa))))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{encode, Attrs};
    use std::collections::HashMap;

    /// Map `ia` to `leaf` under `root`, allocating tables from `next`.
    fn map(mem: &mut HashMap<u64, u64>, next: &mut u64, root: u64, ia: u64, leaf: u64, stage: Stage, ap: Option<u8>) {
        let mut table = root;
        for level in 0..3u8 {
            let entry = table + 8 * descriptor::level_index(ia, level);
            table = match mem.get(&entry) {
                Some(d) => d & descriptor::ADDR_MASK,
                None => {
                    let t = *next;
                    *next += 0x1000;
                    mem.insert(entry, t | 0b11);
                    t
                }
            };
        }
        let mut attrs = Attrs::default_for(stage);
        if let Some(ap) = ap {
            attrs.ap = ap;
        }
        mem.insert(table + 8 * descriptor::level_index(ia, 3), encode(DescKind::Page, leaf, 3, attrs).unwrap());
    }

    fn chain(mem: &mut HashMap<u64, u64>, root: u64, ia: u64, leaf: u64, stage: Stage, ap: Option<u8>) {
        let mut next = root + 0x1000;
        map(mem, &mut next, root, ia, leaf, stage, ap);
    }

    fn run(mem: &HashMap<u64, u64>, regime: Regime, va: u64, access: Access) -> WalkResult {
        walk(regime, va, access, &mut |_, _, pa| Ok(mem.get(&pa).copied().unwrap_or(0))).unwrap()
    }

    #[test]
    fn single_stage_four_reads() {
        let mut mem = HashMap::new();
        chain(&mut mem, 0x10_0000, 0x201000, 0x5000, Stage::S1, None);
        let r = run(&mem, Regime { el: 1, ttbr: 0x10_0000, vttbr: None }, 0x201008, Access::Read);
        assert_eq!(r.reads.len(), 4);
        assert_eq!(r.outcome, Outcome::Translated { pa: 0x5008, ipa: None });
        assert_eq!(r.reads[2].pa, 0x10_2000 + 8);
        assert_eq!(r.reads[3].pa, 0x10_3000 + 8);
    }

    #[test]
    fn two_stage_twenty_four_reads_in_nesting_order() {
        // Stage-1 tables at IPAs 0x40_0000.., backed by PAs 0x70_0000..;
        // stage-2 tables allocated from 0x100_0000.
        let mut mem = HashMap::new();
        let (s1_root, s2_root, va, data_ipa) = (0x40_0000u64, 0x100_0000u64, 0x8000_1000u64, 0x90_0000u64);
        let backing = |ipa: u64| 0x70_0000 + (ipa - s1_root);
        let mut s2_next = s2_root + 0x1000;
        for i in 0..4u64 {
            map(&mut mem, &mut s2_next, s2_root, s1_root + 0x1000 * i, backing(s1_root + 0x1000 * i), Stage::S2, None);
        }
        map(&mut mem, &mut s2_next, s2_root, data_ipa, 0x3000, Stage::S2, None);
        for level in 0..3u8 {
            let entry = s1_root + 0x1000 * level as u64 + 8 * descriptor::level_index(va, level);
            mem.insert(backing(entry), (s1_root + 0x1000 * (level as u64 + 1)) | 0b11);
        }
        let entry = s1_root + 0x3000 + 8 * descriptor::level_index(va, 3);
        mem.insert(backing(entry), encode(DescKind::Page, data_ipa, 3, Attrs::default_for(Stage::S1)).unwrap());
        let regime = Regime { el: 1, ttbr: s1_root, vttbr: Some(s2_root) };
        let r = run(&mem, regime, va + 0x10, Access::Read);
        assert_eq!(r.outcome, Outcome::Translated { pa: 0x3010, ipa: Some(data_ipa + 0x10) });
        assert_eq!(r.reads.len(), 24);
        let stages: Vec<u8> = r.reads.iter().map(|x| x.stage.number()).collect();
        let mut expected = Vec::new();
        for _ in 0..4 {
            expected.extend([2, 2, 2, 2, 1]);
        }
        expected.extend([2, 2, 2, 2]);
        assert_eq!(stages, expected);
        assert_eq!(r.reads[23].ipa, Some(data_ipa + 0x10));
    }

    #[test]
    fn invalid_descriptor_faults_at_its_level() {
        let mem = HashMap::new();
        let r = run(&mem, Regime { el: 1, ttbr: 0x10_0000, vttbr: None }, 0x1000, Access::Read);
        assert_eq!(r.reads.len(), 1);
        match r.outcome {
            Outcome::Fault(f) => assert_eq!((f.kind, f.stage, f.level), (FaultKind::Translation, Stage::S1, 0)),
            o => panic!("{o:?}"),
        }
    }

    #[test]
    fn stage2_permissions() {
        let mut mem = HashMap::new();
        chain(&mut mem, 0x10_0000, 0x5000, 0x5000, Stage::S1, None);
        chain(&mut mem, 0x20_0000, 0x5000, 0x9000, Stage::S2, Some(0b00));
        for l in 0..4u64 {
            chain(&mut mem, 0x20_0000, 0x10_0000 + 0x1000 * l, 0x10_0000 + 0x1000 * l, Stage::S2, None);
        }
        let regime = Regime { el: 1, ttbr: 0x10_0000, vttbr: Some(0x20_0000) };
        let r = run(&mem, regime, 0x5000, Access::Read);
        match r.outcome {
            Outcome::Fault(f) => assert_eq!((f.kind, f.stage), (FaultKind::Permission, Stage::S2)),
            o => panic!("{o:?}"),
        }
    }

    #[test]
    fn stage1_read_only_write_faults() {
        let mut mem = HashMap::new();
        chain(&mut mem, 0x10_0000, 0x5000, 0x5000, Stage::S1, Some(0b11));
        let regime = Regime { el: 1, ttbr: 0x10_0000, vttbr: None };
        assert!(matches!(run(&mem, regime, 0x5000, Access::Read).outcome, Outcome::Translated { .. }));
        let r = run(&mem, regime, 0x5000, Access::Write);
        assert!(matches!(r.outcome, Outcome::Fault(FaultInfo { kind: FaultKind::Permission, stage: Stage::S1, .. })));
    }
}
