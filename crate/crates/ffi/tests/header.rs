//! The hand-written header must declare exactly the exported functions, with
//! the same status codes and struct layouts as the Rust side.

use std::collections::BTreeSet;

use loraplace_ffi::{LpMetrics, LpMode, LpPlacement, LpStatus};

const HEADER: &str = include_str!("../include/loraplace.h");
const SOURCE: &str = include_str!("../src/lib.rs");

fn screaming(camel: &str) -> String {
    let mut out = String::new();
    for (i, ch) in camel.chars().enumerate() {
        if ch.is_uppercase() && i > 0 {
            out.push('_');
        }
        out.push(ch.to_ascii_uppercase());
    }
    out
}

/// `NAME = value` pairs of a C enum body.
fn c_enum(name: &str) -> Vec<(String, i64)> {
    let start = HEADER.find(&format!("typedef enum {name} {{")).expect("enum in header");
    let body = &HEADER[start..HEADER[start..].find('}').unwrap() + start];
    body.lines()
        .filter_map(|l| {
            let (k, v) = l.trim().trim_end_matches(',').split_once(" = ")?;
            Some((k.to_string(), v.parse().ok()?))
        })
        .collect()
}

/// Field names of a C struct.
fn c_struct(name: &str) -> Vec<String> {
    let start = HEADER.find(&format!("typedef struct {name} {{")).expect("struct in header");
    let body = &HEADER[start..HEADER[start..].find('}').unwrap() + start];
    body.lines()
        .skip(1)
        .filter_map(|l| Some(l.trim().strip_suffix(';')?.rsplit(' ').next()?.to_string()))
        .collect()
}

/// Field names of a Rust struct in the source.
fn rust_struct(name: &str) -> Vec<String> {
    let start = SOURCE.find(&format!("pub struct {name} {{")).expect("struct in source");
    let body = &SOURCE[start..SOURCE[start..].find('}').unwrap() + start];
    body.lines()
        .skip(1)
        .filter_map(|l| Some(l.trim().strip_prefix("pub ")?.split(':').next()?.to_string()))
        .collect()
}

#[test]
fn functions_match_exports() {
    let exported: BTreeSet<String> = SOURCE
        .split("extern \"C\" fn ")
        .skip(1)
        .map(|s| s.split('(').next().unwrap().to_string())
        .collect();
    let declared: BTreeSet<String> = HEADER
        .lines()
        .filter(|l| !l.starts_with(' ') && !l.starts_with('#') && !l.starts_with("typedef") && l.contains('('))
        .map(|l| {
            let before = l.split('(').next().unwrap();
            before.rsplit(|c: char| c == ' ' || c == '*').next().unwrap().to_string()
        })
        .collect();
    assert_eq!(exported, declared);
    assert!(exported.len() >= 15);
}

#[test]
fn status_codes_match() {
    let c = c_enum("lp_status");
    let rust = [
        LpStatus::Ok,
        LpStatus::NullArgument,
        LpStatus::InvalidUtf8,
        LpStatus::Validation,
        LpStatus::Config,
        LpStatus::Domain,
        LpStatus::Fit,
        LpStatus::Simulation,
        LpStatus::Invariant,
        LpStatus::Training,
        LpStatus::Io,
        LpStatus::Json,
        LpStatus::Csv,
        LpStatus::Panic,
    ];
    assert_eq!(c.len(), rust.len());
    for ((name, value), s) in c.iter().zip(rust) {
        assert_eq!(*name, format!("LP_{}", screaming(&format!("{s:?}"))));
        assert_eq!(*value, s as i64);
    }
    let modes = c_enum("lp_mode");
    assert_eq!(modes, vec![("LP_MODE_FULL".into(), LpMode::Full as i64), ("LP_MODE_MEAN".into(), LpMode::Mean as i64)]);
}

#[test]
fn structs_match() {
    assert_eq!(c_struct("lp_metrics"), rust_struct("LpMetrics"));
    assert_eq!(c_struct("lp_placement"), rust_struct("LpPlacement"));
    assert_eq!(std::mem::size_of::<LpPlacement>(), 24);
    assert_eq!(std::mem::size_of::<LpMetrics>(), 8 * 8 + 8 + 16);
}

#[test]
fn feature_count_matches() {
    assert!(HEADER.contains(&format!("#define LP_FEATURE_COUNT {}", loraplace_ffi::LP_FEATURE_COUNT)));
    assert_eq!(loraplace_ffi::LP_FEATURE_COUNT, loraplace::placement::FEATURE_NAMES.len());
}
