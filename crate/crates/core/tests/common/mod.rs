//! Generators shared by the property tests: valid templates (built as
//! structs so the expected parse result is known) and targeted corruptions.
#![allow(dead_code)]

use edgeflow_core::template::{CronSpec, FunctionTemplate, NextSpec, OutputSpec, StorageRef, SyncMode, TemplateError};
use proptest::prelude::*;

pub fn ident() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_-]{0,10}"
}

pub fn storage_ref() -> impl Strategy<Value = StorageRef> {
    (ident(), "[a-z0-9_./-]{1,12}").prop_map(|(b, k)| StorageRef::new(b, k).unwrap())
}

fn cron() -> impl Strategy<Value = Option<CronSpec>> {
    let period = prop_oneof![
        (1u64..=86_400).prop_map(|s| s * 1000),
        (1u64..=1440).prop_map(|m| m * 60_000),
        (1u64..=24).prop_map(|h| h * 3_600_000),
    ];
    proptest::option::of((period, 1u32..500).prop_map(|(p, b)| CronSpec::new(p, b).unwrap()))
}

fn next() -> impl Strategy<Value = NextSpec> {
    (ident(), ident()).prop_map(|(f, t)| NextSpec::new(f, t))
}

/// Outputs and successors, in one of the three legal shapes.
fn wiring() -> impl Strategy<Value = (Vec<OutputSpec>, Vec<(u32, NextSpec)>)> {
    let plain = (
        proptest::option::of(storage_ref()),
        proptest::collection::vec(next(), 0..4),
    )
        .prop_map(|(out, nexts)| {
            let outputs = out.into_iter().map(|r| OutputSpec::new(None, r)).collect();
            (outputs, nexts.into_iter().map(|n| (0, n)).collect())
        });
    let branching = proptest::collection::vec((storage_ref(), proptest::option::of(next())), 1..5).prop_filter_map(
        "data names must differ",
        |branches| {
            let mut outputs: Vec<OutputSpec> = Vec::new();
            let mut nexts = Vec::new();
            for (i, (r, n)) in branches.into_iter().enumerate() {
                let idx = i as u32 + 1;
                if outputs.iter().any(|o| o.data_name == r.key()) {
                    return None;
                }
                outputs.push(OutputSpec::new(Some(idx), r));
                if let Some(n) = n {
                    nexts.push((idx, n));
                }
            }
            Some((outputs, nexts))
        },
    );
    prop_oneof![plain, branching]
}

pub fn valid_template() -> impl Strategy<Value = FunctionTemplate> {
    (
        ident(),
        ident(),
        ident(),
        prop_oneof![Just(SyncMode::Sync), Just(SyncMode::Async)],
        cron(),
        proptest::collection::vec(storage_ref(), 0..4),
        wiring(),
    )
        .prop_map(
            |(name, tier, handler, sync, cron, inputs, (outputs, nexts))| FunctionTemplate {
                name,
                tier,
                handler,
                sync,
                cron,
                inputs,
                outputs,
                nexts,
            },
        )
}

pub const CLASSES: [&str; 9] = [
    "Syntax",
    "UnknownKey",
    "DuplicateKey",
    "InvalidRef",
    "InvalidCron",
    "InvalidValue",
    "MissingKey",
    "IndexMismatch",
    "DuplicateDataName",
];

pub fn class_of(e: &TemplateError) -> &'static str {
    match e {
        TemplateError::Syntax { .. } => "Syntax",
        TemplateError::UnknownKey { .. } => "UnknownKey",
        TemplateError::DuplicateKey { .. } => "DuplicateKey",
        TemplateError::InvalidRef { .. } => "InvalidRef",
        TemplateError::InvalidCron { .. } => "InvalidCron",
        TemplateError::InvalidValue { .. } => "InvalidValue",
        TemplateError::MissingKey { .. } => "MissingKey",
        TemplateError::IndexMismatch { .. } => "IndexMismatch",
        TemplateError::DuplicateDataName { .. } => "DuplicateDataName",
    }
}

fn set_or_append(lines: &mut Vec<String>, key: &str, value: &str) {
    let prefix = format!("{key}: ");
    match lines.iter_mut().find(|l| l.starts_with(&prefix)) {
        Some(l) => *l = format!("{prefix}{value}"),
        None => lines.push(format!("{prefix}{value}")),
    }
}

/// Breaks a canonical rendering so that parsing must fail with `class`.
pub fn corrupt(rendered: &str, class: &str) -> String {
    let mut lines: Vec<String> = rendered.lines().map(str::to_string).collect();
    match class {
        "Syntax" => lines.insert(1, "this line has no separator".into()),
        "UnknownKey" => lines.push("colour: red".into()),
        "DuplicateKey" => {
            let tier = lines.iter().find(|l| l.starts_with("tier: ")).unwrap().clone();
            lines.push(tier);
        }
        "InvalidRef" => set_or_append(&mut lines, "input", "not-a-reference"),
        "InvalidCron" => set_or_append(&mut lines, "cron", "90x"),
        "InvalidValue" => set_or_append(&mut lines, "sync", "maybe"),
        "MissingKey" => lines.retain(|l| !l.starts_with("handler: ")),
        "IndexMismatch" => lines.push("next_function99: orphan".into()),
        "DuplicateDataName" => {
            lines.retain(|l| !l.starts_with("output") && !l.starts_with("next_"));
            lines.push("output1: alpha://same".into());
            lines.push("output2: beta://same".into());
        }
        other => panic!("unknown class {other}"),
    }
    let mut out = lines.join("\n");
    out.push('\n');
    out
}
