//! Page-table DSL, descriptor encoding and walk properties.

use proptest::prelude::*;
use rvm_core::descriptor::{self, Attrs, DescKind, Stage};
use rvm_core::setup::{build_images, parse_setup, render_setup, DEFAULT_TABLE_BASE};
use rvm_core::walk::{walk, Access, Outcome, Regime};
use std::collections::BTreeSet;

const S2_ROOT: u64 = 0x40_0000;

/// One generated mapping: input name, initial target (None = invalid), alternative.
#[derive(Debug, Clone)]
struct Mapping {
    input: usize,
    initial: Option<usize>,
    alternative: Option<Option<usize>>,
}

#[derive(Debug, Clone)]
struct GenSetup {
    virtuals: usize,
    physicals: usize,
    intermediates: usize,
    s1: Vec<Mapping>,
    s2: Vec<Mapping>,
    code: bool,
}

fn mappings(inputs: usize, outputs: usize) -> impl Strategy<Value = Vec<Mapping>> {
    let one = (prop::option::weighted(0.75, 0..outputs), prop::option::of(prop::option::of(0..outputs)));
    prop::collection::vec(one, inputs).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(input, (initial, alternative))| Mapping { input, initial, alternative })
            .collect()
    })
}

fn gen_setup() -> impl Strategy<Value = GenSetup> {
    (1..=5usize, 1..=3usize, 0..=2usize, any::<bool>()).prop_flat_map(|(v, p, i, code)| {
        let targets = if i > 0 { i } else { p };
        (mappings(v, targets), mappings(i, p)).prop_map(move |(s1, s2)| GenSetup {
            virtuals: v,
            physicals: p,
            intermediates: i,
            s1,
            s2,
            code,
        })
    })
}

fn mapping_lines(out: &mut String, m: &[Mapping], input: &str, output: &str) {
    for map in m {
        let target = |t: Option<usize>| t.map_or("invalid".to_string(), |o| format!("{output}{o}"));
        out.push_str(&format!("  {input}{} |-> {};\n", map.input, target(map.initial)));
        if let Some(alt) = map.alternative {
            if alt != map.initial {
                out.push_str(&format!("  {input}{} ?-> {};\n", map.input, target(alt)));
            }
        }
    }
}

fn render(g: &GenSetup) -> String {
    let mut out = String::from("option default_tables = false;\n");
    let decl = |kind: &str, prefix: &str, n: usize| {
        if n == 0 {
            String::new()
        } else {
            format!("{kind} {};\n", (0..n).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(" "))
        }
    };
    out += &decl("virtual", "v", g.virtuals);
    out += &decl("physical", "p", g.physicals);
    out += &decl("intermediate", "i", g.intermediates);
    out += &format!("s1table main {DEFAULT_TABLE_BASE:#x} {{\n");
    if g.code {
        out += "  identity 0x1000 with code;\n";
    }
    let s1_output = if g.intermediates > 0 { "i" } else { "p" };
    mapping_lines(&mut out, &g.s1, "v", s1_output);
    out += "}\n";
    if g.intermediates > 0 {
        out += &format!("s2table guest {S2_ROOT:#x} {{\n");
        mapping_lines(&mut out, &g.s2, "i", "p");
        out += "}\n";
    }
    out
}

fn page_attrs() -> impl Strategy<Value = Attrs> {
    (0..8u8, 0..4u8, 0..4u8, any::<bool>()).prop_map(|(attr_index, ap, sh, af)| Attrs { attr_index, ap, sh, af })
}

proptest! {
    #[test]
    fn page_descriptor_layout(page in 0u64..(1 << 36), attrs in page_attrs()) {
        let oa = page << 12;
        let raw = descriptor::encode(DescKind::Page, oa, 3, attrs).unwrap();
        let expected = oa
            | 0b11
            | ((attrs.attr_index as u64) << 2)
            | ((attrs.ap as u64) << 6)
            | ((attrs.sh as u64) << 8)
            | ((attrs.af as u64) << 10);
        prop_assert_eq!(raw, expected);
        let view = descriptor::decode(raw, 3).unwrap();
        prop_assert_eq!(view.kind, DescKind::Page);
        prop_assert_eq!(view.addr, oa);
        prop_assert_eq!(view.attrs, attrs);
    }

    #[test]
    fn block_and_table_roundtrip(level in 1u8..=2, slot in 0u64..(1 << 18), attrs in page_attrs()) {
        let oa = (slot << (12 + 9 * (3 - level as u32))) & descriptor::ADDR_MASK;
        let raw = descriptor::encode(DescKind::Block, oa, level, attrs).unwrap();
        let view = descriptor::decode(raw, level).unwrap();
        prop_assert_eq!((view.kind, view.addr, view.attrs), (DescKind::Block, oa, attrs));
        let next = (slot << 12) & descriptor::ADDR_MASK;
        let table = descriptor::encode(DescKind::Table, next, level, attrs).unwrap();
        prop_assert_eq!(table, next | 0b11);
        let view = descriptor::decode(table, level).unwrap();
        prop_assert_eq!((view.kind, view.addr), (DescKind::Table, next));
    }

    #[test]
    fn va_split_recomposes(va in 0u64..(1 << 48)) {
        let mut rebuilt = va & 0xfff;
        for level in 0..=3u8 {
            let index = descriptor::level_index(va, level);
            prop_assert!(index < 512);
            rebuilt |= index << (39 - 9 * level as u32);
        }
        prop_assert_eq!(rebuilt, va);
    }

    #[test]
    fn dsl_walk_roundtrip(g in gen_setup()) {
        let text = render(&g);
        let spec = parse_setup(&text).unwrap();
        let image = build_images(&spec).unwrap();
        let value = |name: String| image.env[&name].value;
        let s1_root = image.roots["main"];
        for m in &g.s1 {
            let va = value(format!("v{}", m.input));
            let expected = m.initial.map(|o| {
                let out = if g.intermediates > 0 { format!("i{o}") } else { format!("p{o}") };
                value(out)
            });
            prop_assert_eq!(image.translate_initial(va, s1_root), expected);
            let regime = Regime { el: 1, ttbr: s1_root, vttbr: None };
            let r = walk(regime, va + 8, Access::Read, &mut |_, _, pa| Ok(image.initial(pa))).unwrap();
            match expected {
                Some(out) => prop_assert_eq!(r.outcome, Outcome::Translated { pa: out + 8, ipa: None }),
                None => {
                    prop_assert!(matches!(r.outcome, Outcome::Fault(_)));
                    let last = r.reads.last().unwrap();
                    prop_assert!(!descriptor::decode(last.value, last.level).unwrap().is_valid());
                }
            }
            prop_assert!(r.reads.len() <= 4);
        }
        for m in &g.s2 {
            let ipa = value(format!("i{}", m.input));
            let expected = m.initial.map(|o| value(format!("p{o}")));
            prop_assert_eq!(image.translate_initial(ipa, image.roots["guest"]), expected);
        }
    }

    #[test]
    fn build_is_deterministic(g in gen_setup()) {
        let spec = parse_setup(&render(&g)).unwrap();
        let a = serde_json::to_string(&build_images(&spec).unwrap()).unwrap();
        let b = serde_json::to_string(&build_images(&spec).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn render_parse_roundtrip(g in gen_setup()) {
        let spec = parse_setup(&render(&g)).unwrap();
        let again = parse_setup(&render_setup(&spec)).unwrap();
        prop_assert_eq!(spec, again);
    }

    #[test]
    fn regions_disjoint_and_choices_decode(g in gen_setup()) {
        let image = build_images(&parse_setup(&render(&g)).unwrap()).unwrap();
        let mut table_pages = BTreeSet::new();
        for t in &image.tables {
            for &p in &t.pages {
                prop_assert!(table_pages.insert(p), "table page {:#x} allocated twice", p);
            }
        }
        let data_pages: BTreeSet<u64> = (0..g.physicals).map(|i| image.env[&format!("p{i}")].value & !0xfff).collect();
        prop_assert!(table_pages.is_disjoint(&image.code_pages));
        prop_assert!(table_pages.is_disjoint(&data_pages));
        prop_assert!(image.code_pages.is_disjoint(&data_pages));
        for (pa, cell) in &image.cells {
            for v in image.memory[pa].members() {
                prop_assert!(descriptor::decode(v, cell.level).is_ok(), "{:#x} at level {}", v, cell.level);
            }
        }
    }
}

#[test]
fn nested_stage1_tables_are_mapped_by_stage2() {
    let text = "option default_tables = false;
        virtual x; intermediate ipa1; physical pa1;
        s2table guest 0x300000 { ipa1 |-> pa1; s1table inner 0x280000 { x |-> ipa1; } }";
    let image = build_images(&parse_setup(text).unwrap()).unwrap();
    let inner = image.table("inner").unwrap();
    for &page in &inner.pages {
        assert_eq!(image.translate_initial(page, image.roots["guest"]), Some(page));
    }
    let regime = Regime { el: 1, ttbr: image.roots["inner"], vttbr: Some(image.roots["guest"]) };
    let r = walk(regime, image.env["x"].value, Access::Read, &mut |_, _, pa| Ok(image.initial(pa))).unwrap();
    assert_eq!(r.outcome, Outcome::Translated { pa: image.env["pa1"].value, ipa: Some(image.env["ipa1"].value) });
    assert_eq!(r.reads.len(), 24);
    assert_eq!(r.reads.iter().filter(|x| x.stage == Stage::S1).count(), 4);
}
