//! Translation-table descriptors for the 4 KiB granule, 48-bit input
//! configuration: encoding, decoding and the per-level address split.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Bits [47:12]: output address of a page, or the next-level table pointer.
pub const ADDR_MASK: u64 = 0x0000_ffff_ffff_f000;
pub const PAGE_SIZE: u64 = 0x1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    S1,
    S2,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::S1 => 1,
            Stage::S2 => 2,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}", self.number())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DescKind {
    Invalid,
    Block,
    Page,
    Table,
}

/// Leaf attribute fields. `ap` holds AP[2:1] at stage 1 and S2AP at stage 2,
/// both in bits [7:6].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attrs {
    pub attr_index: u8,
    pub ap: u8,
    pub sh: u8,
    pub af: bool,
}

impl Attrs {
    pub fn default_for(stage: Stage) -> Self {
        Attrs {
            attr_index: 0,
            ap: match stage {
                Stage::S1 => 0b01,
                Stage::S2 => 0b11,
            },
            sh: 0b11,
            af: true,
        }
    }

    pub fn bits(self) -> u64 {
        ((self.attr_index as u64 & 0b111) << 2)
            | ((self.ap as u64 & 0b11) << 6)
            | ((self.sh as u64 & 0b11) << 8)
            | ((self.af as u64) << 10)
    }

    pub fn from_bits(raw: u64) -> Self {
        Attrs {
            attr_index: ((raw >> 2) & 0b111) as u8,
            ap: ((raw >> 6) & 0b11) as u8,
            sh: ((raw >> 8) & 0b11) as u8,
            af: (raw >> 10) & 1 == 1,
        }
    }

    /// Apply a named override such as `AP=0b00`.
    pub fn set(&mut self, field: &str, value: u64) -> Result<()> {
        let fits = |bits: u32| {
            if value >> bits == 0 {
                Ok(value as u8)
            } else {
                Err(Error::Descriptor(format!("{field}={value:#x} does not fit in {bits} bits")))
            }
        };
        match field.to_ascii_uppercase().as_str() {
            "AP" | "S2AP" => self.ap = fits(2)?,
            "SH" => self.sh = fits(2)?,
            "AF" => self.af = fits(1)? == 1,
            "ATTRINDX" | "ATTRINDEX" | "ATTR" => self.attr_index = fits(3)?,
            other => return Err(Error::Descriptor(format!("unknown attribute `{other}`"))),
        }
        Ok(())
    }
}

/// Size of the region one entry maps at `level` (0..=3).
pub fn region_size(level: u8) -> u64 {
    1u64 << (12 + 9 * (3 - level as u32))
}

/// Index into the level-`level` table for input address `ia`.
pub fn level_index(ia: u64, level: u8) -> u64 {
    (ia >> (39 - 9 * level as u32)) & 0x1ff
}

/// Mask selecting the output-address bits of a leaf at `level`.
pub fn leaf_oa_mask(level: u8) -> u64 {
    ADDR_MASK & !(region_size(level) - 1)
}

pub fn encode(kind: DescKind, payload: u64, level: u8, attrs: Attrs) -> Result<u64> {
    if level > 3 {
        return Err(Error::Descriptor(format!("level {level} out of range")));
    }
    let aligned = |size: u64| {
        if payload & (size - 1) != 0 || payload & !ADDR_MASK != 0 {
            Err(Error::Descriptor(format!(
                "payload {payload:#x} not {size:#x}-aligned 48-bit address at level {level}"
            )))
        } else {
            Ok(())
        }
    };
    match kind {
        DescKind::Invalid => Ok(0),
        DescKind::Page => {
            if level != 3 {
                return Err(Error::Descriptor(format!("page descriptor at level {level}")));
            }
            aligned(PAGE_SIZE)?;
            Ok(payload | attrs.bits() | 0b11)
        }
        DescKind::Block => {
            if !(1..=2).contains(&level) {
                return Err(Error::Descriptor(format!("block descriptor at level {level}")));
            }
            aligned(region_size(level))?;
            Ok(payload | attrs.bits() | 0b01)
        }
        DescKind::Table => {
            if level == 3 {
                return Err(Error::Descriptor("table descriptor at level 3".into()));
            }
            aligned(PAGE_SIZE)?;
            Ok(payload | 0b11)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorView {
    pub raw: u64,
    pub kind: DescKind,
    /// Output address for leaves, next-level table address for tables, 0 otherwise.
    pub addr: u64,
    pub attrs: Attrs,
}

impl DescriptorView {
    pub fn is_valid(&self) -> bool {
        self.kind != DescKind::Invalid
    }
}

pub fn decode(raw: u64, level: u8) -> Result<DescriptorView> {
    if level > 3 {
        return Err(Error::Descriptor(format!("level {level} out of range")));
    }
    let attrs = Attrs::from_bits(raw);
    let (kind, addr) = match raw & 0b11 {
        0b00 | 0b10 => (DescKind::Invalid, 0),
        0b01 => {
            if level == 0 || level == 3 {
                return Err(Error::Descriptor(format!("malformed descriptor {raw:#x}: block at level {level}")));
            }
            (DescKind::Block, raw & leaf_oa_mask(level))
        }
        _ if level == 3 => (DescKind::Page, raw & ADDR_MASK),
        _ => (DescKind::Table, raw & ADDR_MASK),
    };
    let attrs = if matches!(kind, DescKind::Block | DescKind::Page) {
        attrs
    } else {
        Attrs { attr_index: 0, ap: 0, sh: 0, af: false }
    };
    Ok(DescriptorView { raw, kind, addr, attrs })
}

/// Whether `raw` would be a valid (bit 0 set) descriptor.
pub fn is_valid_bits(raw: u64) -> bool {
    raw & 1 == 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_is_zero() {
        assert_eq!(encode(DescKind::Invalid, 0x1234_5000, 3, Attrs::default_for(Stage::S1)).unwrap(), 0);
        assert_eq!(decode(0, 2).unwrap().kind, DescKind::Invalid);
    }

    #[test]
    fn table_pointer_roundtrip() {
        let d = decode(0x283003, 2).unwrap();
        assert_eq!(d.kind, DescKind::Table);
        assert_eq!(d.addr, 0x283000);
        assert_eq!(encode(DescKind::Table, 0x283000, 2, Attrs::default_for(Stage::S1)).unwrap(), 0x283003);
    }

    #[test]
    fn block_alignment_and_level_checks() {
        let a = Attrs::default_for(Stage::S1);
        assert!(encode(DescKind::Block, 0x1000, 2, a).is_err());
        assert!(encode(DescKind::Block, 0x20_0000, 3, a).is_err());
        assert!(encode(DescKind::Page, 0x1000, 2, a).is_err());
        assert!(decode(0x1, 0).is_err());
        assert!(decode(0x1, 3).is_err());
    }

    #[test]
    fn attribute_override() {
        let mut a = Attrs::default_for(Stage::S2);
        a.set("AP", 0b00).unwrap();
        let raw = encode(DescKind::Page, 0x5000, 3, a).unwrap();
        assert_eq!((raw >> 6) & 0b11, 0);
        assert!(a.set("AP", 0b100).is_err());
    }
}
