//! Events of a candidate execution.

use crate::descriptor::Stage;
use crate::walk::FaultInfo;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    R,
    W,
    T,
    Tlbi,
    Dmb,
    Dsb,
    Isb,
    Msr,
    Te,
    Eret,
    Fault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BarrierClass {
    Full,
    Ld,
    St,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    Sy,
    Ish,
    Osh,
    Nsh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Barrier {
    pub class: BarrierClass,
    pub domain: Domain,
}

/// Acquire flavour of a load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Acquire {
    /// LDAR
    A,
    /// LDAPR
    Q,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TlbiKind {
    Vae1,
    Vae1is,
    Vaae1,
    Vaae1is,
    Vale1is,
    Aside1,
    Aside1is,
    Vmalle1,
    Vmalle1is,
    Alle1,
    Alle1is,
    Alle2,
    Alle2is,
    Vae2,
    Vae2is,
    Ipas2e1,
    Ipas2e1is,
    Vmalls12e1,
    Vmalls12e1is,
}

impl TlbiKind {
    pub fn parse(s: &str) -> Option<Self> {
        use TlbiKind::*;
        Some(match s.to_ascii_lowercase().as_str() {
            "vae1" => Vae1,
            "vae1is" => Vae1is,
            "vaae1" => Vaae1,
            "vaae1is" => Vaae1is,
            "vale1is" => Vale1is,
            "aside1" => Aside1,
            "aside1is" => Aside1is,
            "vmalle1" => Vmalle1,
            "vmalle1is" => Vmalle1is,
            "alle1" => Alle1,
            "alle1is" => Alle1is,
            "alle2" => Alle2,
            "alle2is" => Alle2is,
            "vae2" => Vae2,
            "vae2is" => Vae2is,
            "ipas2e1" => Ipas2e1,
            "ipas2e1is" => Ipas2e1is,
            "vmalls12e1" => Vmalls12e1,
            "vmalls12e1is" => Vmalls12e1is,
            _ => return None,
        })
    }

    pub fn name(self) -> String {
        format!("{self:?}").to_ascii_uppercase()
    }

    pub fn takes_register(self) -> bool {
        use TlbiKind::*;
        matches!(
            self,
            Vae1 | Vae1is | Vaae1 | Vaae1is | Vale1is | Aside1 | Aside1is | Vae2 | Vae2is | Ipas2e1 | Ipas2e1is
        )
    }

    /// Broadcast to all PEs in the inner-shareable domain.
    pub fn broadcast(self) -> bool {
        self.name().ends_with("IS")
    }

    pub fn by_va(self) -> bool {
        use TlbiKind::*;
        matches!(self, Vae1 | Vae1is | Vaae1 | Vaae1is | Vale1is | Vae2 | Vae2is)
    }

    pub fn by_asid(self) -> bool {
        use TlbiKind::*;
        matches!(self, Vae1 | Vae1is | Vale1is | Aside1 | Aside1is)
    }

    pub fn by_ipa(self) -> bool {
        matches!(self, TlbiKind::Ipas2e1 | TlbiKind::Ipas2e1is)
    }

    /// Restricted to the current VMID.
    pub fn by_vmid(self) -> bool {
        use TlbiKind::*;
        !matches!(self, Alle1 | Alle1is | Alle2 | Alle2is | Vae2 | Vae2is)
    }

    pub fn el2_regime(self) -> bool {
        use TlbiKind::*;
        matches!(self, Alle2 | Alle2is | Vae2 | Vae2is)
    }

    pub fn affects_stage1(self) -> bool {
        !self.by_ipa()
    }

    pub fn affects_stage2(self) -> bool {
        use TlbiKind::*;
        matches!(self, Ipas2e1 | Ipas2e1is | Vmalls12e1 | Vmalls12e1is | Alle1 | Alle1is)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TlbiOp {
    pub kind: TlbiKind,
    pub va_page: Option<u64>,
    pub asid: Option<u16>,
    pub ipa_page: Option<u64>,
    /// VMID current when the TLBI executed.
    pub vmid: u16,
}

/// Translation context of an explicit access or a translation read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Context {
    pub el: u8,
    pub asid: u16,
    pub vmid: u16,
    pub el2_regime: bool,
}

/// Details of a translation-read event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransRead {
    pub stage: Stage,
    pub level: u8,
    /// Virtual address of the access being translated.
    pub va: u64,
    /// For stage-2 reads, the IPA being translated.
    pub ipa: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SysReg {
    Ttbr0El1,
    Ttbr0El2,
    VttbrEl2,
    VbarEl1,
    VbarEl2,
    ElrEl1,
    ElrEl2,
    SpsrEl1,
    SpsrEl2,
    SctlrEl1,
    SctlrEl2,
    HpfarEl2,
    FarEl1,
    FarEl2,
    EsrEl1,
    EsrEl2,
}

impl SysReg {
    pub const ALL: [SysReg; 16] = [
        SysReg::Ttbr0El1,
        SysReg::Ttbr0El2,
        SysReg::VttbrEl2,
        SysReg::VbarEl1,
        SysReg::VbarEl2,
        SysReg::ElrEl1,
        SysReg::ElrEl2,
        SysReg::SpsrEl1,
        SysReg::SpsrEl2,
        SysReg::SctlrEl1,
        SysReg::SctlrEl2,
        SysReg::HpfarEl2,
        SysReg::FarEl1,
        SysReg::FarEl2,
        SysReg::EsrEl1,
        SysReg::EsrEl2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SysReg::Ttbr0El1 => "TTBR0_EL1",
            SysReg::Ttbr0El2 => "TTBR0_EL2",
            SysReg::VttbrEl2 => "VTTBR_EL2",
            SysReg::VbarEl1 => "VBAR_EL1",
            SysReg::VbarEl2 => "VBAR_EL2",
            SysReg::ElrEl1 => "ELR_EL1",
            SysReg::ElrEl2 => "ELR_EL2",
            SysReg::SpsrEl1 => "SPSR_EL1",
            SysReg::SpsrEl2 => "SPSR_EL2",
            SysReg::SctlrEl1 => "SCTLR_EL1",
            SysReg::SctlrEl2 => "SCTLR_EL2",
            SysReg::HpfarEl2 => "HPFAR_EL2",
            SysReg::FarEl1 => "FAR_EL1",
            SysReg::FarEl2 => "FAR_EL2",
            SysReg::EsrEl1 => "ESR_EL1",
            SysReg::EsrEl2 => "ESR_EL2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let up = s.to_ascii_uppercase();
        SysReg::ALL.into_iter().find(|r| r.name() == up)
    }

    /// Writes to these registers change the translation context.
    pub fn is_context_changing(self) -> bool {
        matches!(self, SysReg::Ttbr0El1 | SysReg::Ttbr0El2 | SysReg::VttbrEl2 | SysReg::SctlrEl1 | SysReg::SctlrEl2)
    }
}

/// Thread-local dependency sources, as positions within the thread trace.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Deps {
    pub addr: BTreeSet<usize>,
    pub data: BTreeSet<usize>,
    pub ctrl: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub id: usize,
    /// `None` for initial writes.
    pub thread: Option<usize>,
    /// Dynamic instruction index within the thread.
    pub instr: usize,
    /// Position within the instruction.
    pub iio: usize,
    pub pc: u64,
    pub kind: EventKind,
    pub va: Option<u64>,
    pub ipa: Option<u64>,
    pub pa: Option<u64>,
    pub value: u64,
    pub ctx: Context,
    pub acquire: Option<Acquire>,
    pub release: bool,
    pub barrier: Option<Barrier>,
    pub tlbi: Option<TlbiOp>,
    pub fault: Option<FaultInfo>,
    pub trans: Option<TransRead>,
    pub msr: Option<SysReg>,
    pub from_r: bool,
    pub from_w: bool,
    pub is_iw: bool,
    pub deps: Deps,
}

impl Event {
    pub fn new(kind: EventKind) -> Self {
        Event {
            id: 0,
            thread: None,
            instr: 0,
            iio: 0,
            pc: 0,
            kind,
            va: None,
            ipa: None,
            pa: None,
            value: 0,
            ctx: Context::default(),
            acquire: None,
            release: false,
            barrier: None,
            tlbi: None,
            fault: None,
            trans: None,
            msr: None,
            from_r: false,
            from_w: false,
            is_iw: false,
            deps: Deps::default(),
        }
    }

    pub fn is_read(&self) -> bool {
        self.kind == EventKind::R
    }

    pub fn is_write(&self) -> bool {
        self.kind == EventKind::W
    }

    pub fn is_mem(&self) -> bool {
        matches!(self.kind, EventKind::R | EventKind::W)
    }

    /// Short label used in witnesses and dumps.
    pub fn label(&self) -> String {
        let who = match self.thread {
            Some(t) => format!("{t}:{}", self.instr),
            None => "init".to_string(),
        };
        let what = match self.kind {
            EventKind::R | EventKind::W => {
                format!("{:?} {:#x}={:#x}", self.kind, self.pa.unwrap_or(0), self.value)
            }
            EventKind::T => {
                let t = self.trans.expect("translation event");
                format!("T s{} L{} {:#x}={:#x}", t.stage.number(), t.level, self.pa.unwrap_or(0), self.value)
            }
            EventKind::Tlbi => format!("TLBI {}", self.tlbi.map(|t| t.kind.name()).unwrap_or_default()),
            EventKind::Dmb | EventKind::Dsb => {
                let b = self.barrier.expect("barrier event");
                format!("{:?}.{:?}.{:?}", self.kind, b.domain, b.class).to_ascii_uppercase()
            }
            EventKind::Msr => format!("MSR {}", self.msr.map(|r| r.name()).unwrap_or("?")),
            EventKind::Fault => format!("Fault {:?}", self.fault.map(|f| f.kind)),
            k => format!("{k:?}").to_ascii_uppercase(),
        };
        format!("e{} {who} {what}", self.id)
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}
