mod common;

use std::fs;
use std::io::Write;

use sag_core::bench::{
    load_dataset, perturb_adversarial, perturb_demographic, perturb_linguistic_with_edits, replay, run_matrix,
    write_dataset, write_outputs, BenchmarkItem, BenchmarkSpec, MatrixOptions, MatrixOutput, MethodSpec,
    Regime, RunMatrix, Span, SwapTable, EDIT_RATE,
};
use sag_core::engine::Timing;
use sag_core::model::{Answer, GroupConfig, Role, ValidatedConfig};

use common::*;

fn one_method(path: std::path::PathBuf, regimes: Vec<Regime>, runs: u32) -> RunMatrix {
    RunMatrix {
        methods: vec![MethodSpec {
            label: "m".into(),
            config: GroupConfig::with_counts(2, 1, 1, 1),
        }],
        benchmarks: vec![BenchmarkSpec {
            name: "b".into(),
            path,
            schema: sag_core::bench::SchemaTag::Mcq,
        }],
        regimes,
        decoding_regimes: vec![Default::default()],
        runs_per_cell: runs,
        seed_base: 0,
    }
}

fn simulated() -> MatrixOptions {
    MatrixOptions {
        timing: Timing::Simulated,
        ..MatrixOptions::default()
    }
}

fn always_correct(_: &str, cfg: &ValidatedConfig) -> Result<sag_core::backends::BackendSet, sag_core::backends::BackendError> {
    Ok(panel(cfg, |a| match a.role {
        Role::Safety => script([audit_clean()]),
        _ => script([says("{gold}")]),
    }))
}

fn first_items(dir: &std::path::Path, n: usize, keep_options: usize) -> std::path::PathBuf {
    let mut items = load_dataset(fixture("mcq.jsonl"), sag_core::bench::SchemaTag::Mcq).unwrap();
    items.truncate(n);
    for it in &mut items {
        it.options.truncate(keep_options);
        it.gold = Some("A".into());
    }
    let path = dir.join(format!("items{n}x{keep_options}.jsonl"));
    write_dataset(&path, &items).unwrap();
    path
}

#[test]
fn always_correct_panel_scores_full_marks_with_zero_spread() {
    let dir = tempfile::tempdir().unwrap();
    let matrix = one_method(first_items(dir.path(), 20, 4), vec![Regime::Clean], 5);
    let out = run_matrix(&matrix, &always_correct, &simulated()).unwrap();
    assert_eq!(out.archive.len(), 100);
    let cell = &out.cells[0];
    assert_eq!(cell.metrics["accuracy"], 100.0);
    assert_eq!(cell.metrics["run_std"], 0.0);
    assert_eq!(cell.metrics["consensus_rate"], 1.0);
}

#[test]
fn run_parity_flipping_gives_half_consensus() {
    let dir = tempfile::tempdir().unwrap();
    let matrix = one_method(first_items(dir.path(), 10, 2), vec![Regime::Clean], 4);
    let provider = |_: &str, cfg: &ValidatedConfig| {
        Ok(panel(cfg, |a| match a.role {
            Role::Safety => script([audit_clean()]),
            _ => script([says("{run_option}")]),
        }))
    };
    let out = run_matrix(&matrix, &provider, &simulated()).unwrap();
    for item in 0..10 {
        let answers: Vec<_> = out
            .archive
            .iter()
            .filter(|r| r.item_id == format!("mcq-{:03}", item + 1))
            .map(|r| r.trajectory.final_answer.clone().unwrap())
            .collect();
        assert_eq!(
            answers,
            ["A", "B", "A", "B"].map(|l| Answer::Label(l.into())).to_vec()
        );
    }
    assert_eq!(out.cells[0].metrics["consensus_rate"], 0.5);
    assert_eq!(out.cells[0].metrics["accuracy"], 50.0);
}

fn demographic_matrix() -> RunMatrix {
    let mut m = one_method(
        fixture("mcq.jsonl"),
        vec![
            Regime::Clean,
            Regime::Demographic { attribute: "gender".into() },
            Regime::Demographic { attribute: "race".into() },
        ],
        2,
    );
    m.seed_base = 5;
    m
}

/// Answers wrongly whenever the question mentions a woman.
fn gender_sensitive(_: &str, cfg: &ValidatedConfig) -> Result<sag_core::backends::BackendSet, sag_core::backends::BackendError> {
    Ok(panel(cfg, |a| match a.role {
        Role::Safety => script([audit_clean()]),
        _ => std::sync::Arc::new(sag_core::backends::FnBackend::new(1, |req| {
            let question = req.prompt.split("\nOptions:").next().unwrap_or(&req.prompt);
            let gold = req.context.gold.clone().unwrap();
            let answer = if question.contains("female") {
                req.context.option_labels.iter().find(|l| **l != gold).unwrap().clone()
            } else {
                gold
            };
            Ok(says(&answer))
        })) as std::sync::Arc<dyn sag_core::backends::AgentBackend>,
    }))
}

#[test]
fn demographic_flip_rate_matches_paired_recount() {
    let out = run_matrix(&demographic_matrix(), &gender_sensitive, &simulated()).unwrap();
    for attr in ["gender", "race"] {
        let regime = format!("demo_{attr}");
        let mut pairs = 0;
        let mut flips = 0;
        for r in out.archive.iter().filter(|r| r.cell.regime == regime) {
            let clean = out
                .archive
                .iter()
                .find(|c| c.cell.regime == "clean" && c.item_id == r.item_id && c.run == r.run)
                .unwrap();
            pairs += 1;
            flips += usize::from(clean.trajectory.final_answer != r.trajectory.final_answer);
        }
        let cell = out.cells.iter().find(|c| c.cell.regime == regime).unwrap();
        assert_eq!(cell.metrics["cdr"], 100.0 * flips as f64 / pairs as f64, "{attr}");
        if attr == "gender" {
            assert!(flips > 0);
        } else {
            assert_eq!(flips, 0);
        }
    }
    let skipped: Vec<_> = out.skipped.iter().filter(|(c, _)| c.regime == "demo_gender").collect();
    assert_eq!(skipped.len(), 5, "every tenth fixture item lacks a gender span");
}

fn archive_bytes(out: &MatrixOutput) -> Vec<u8> {
    out.archive
        .iter()
        .flat_map(|r| {
            let mut line = serde_json::to_vec(r).unwrap();
            line.push(b'\n');
            line
        })
        .collect()
}

#[test]
fn resumed_run_equals_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let matrix = demographic_matrix();
    let reference = run_matrix(&matrix, &gender_sensitive, &simulated()).unwrap();

    let journal = dir.path().join("journal.jsonl");
    let opts = MatrixOptions {
        journal: Some(journal.clone()),
        ..simulated()
    };
    let full = run_matrix(&matrix, &gender_sensitive, &opts).unwrap();
    assert_eq!(archive_bytes(&full), archive_bytes(&reference));

    // Simulate a crash: keep the header and 40 records, then a torn line.
    let text = fs::read_to_string(&journal).unwrap();
    let kept: Vec<&str> = text.lines().take(41).collect();
    let mut f = fs::File::create(&journal).unwrap();
    writeln!(f, "{}", kept.join("\n")).unwrap();
    write!(f, "{{\"cell\": {{\"method\": \"m\"").unwrap();
    drop(f);

    let resumed = run_matrix(&matrix, &gender_sensitive, &opts).unwrap();
    assert_eq!(archive_bytes(&resumed), archive_bytes(&reference));
    assert_eq!(resumed.cells, reference.cells);
    assert_eq!(resumed.reports, reference.reports);

    // A journal written for another matrix is refused.
    let mut other = matrix.clone();
    other.seed_base = 99;
    assert!(run_matrix(&other, &gender_sensitive, &opts).is_err());
}

#[test]
fn replay_reproduces_written_reports() {
    let dir = tempfile::tempdir().unwrap();
    let matrix = demographic_matrix();
    let out = run_matrix(&matrix, &gender_sensitive, &simulated()).unwrap();
    write_outputs(dir.path(), &matrix, Timing::Simulated, &out).unwrap();
    for rel in [
        "archive.jsonl",
        "manifest.json",
        "aggregate.csv",
        "reports/m/report.json",
        "reports/m/b/clean.json",
        "reports/m/b/demo_gender.json",
    ] {
        assert!(dir.path().join(rel).is_file(), "{rel} missing");
    }
    let (cells, reports) = replay(dir.path()).unwrap();
    assert_eq!(cells, out.cells);
    assert_eq!(reports, out.reports);
}

fn fifty_word_item() -> BenchmarkItem {
    let words = [
        "patient", "presents", "with", "fever", "cough", "and", "shortness", "of", "breath", "after",
    ];
    let stem: Vec<&str> = (0..50).map(|i| words[i % words.len()]).collect();
    let mut item = mcq("long", &stem.join(" "), "A");
    item.stem.push('.');
    item
}

fn lcs(a: &[&str], b: &[&str]) -> usize {
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            dp[i][j] = if a[i - 1] == b[j - 1] {
                dp[i - 1][j - 1] + 1
            } else {
                dp[i - 1][j].max(dp[i][j - 1])
            };
        }
    }
    dp[a.len()][b.len()]
}

#[test]
fn noise_edit_count_matches_recount() {
    let item = fifty_word_item();
    let original: Vec<&str> = item.stem.split_whitespace().collect();
    assert_eq!(original.len(), 50);
    let expected = 0.3 * 50.0 * EDIT_RATE;
    for seed in 0..20 {
        let (noisy, edits) = perturb_linguistic_with_edits(&item, seed, 0.3).unwrap();
        let perturbed: Vec<&str> = noisy.stem.split_whitespace().collect();
        // Tokens of the noisy stem not explained by an order-preserving match.
        let recount = perturbed.len() - lcs(&original, &perturbed);
        assert!((recount as f64 - expected).abs() <= 2.0, "seed {seed}: {recount}");
        assert_eq!(edits.len() as f64, expected.round());
        assert_eq!(noisy.options, item.options);
    }
}

#[test]
fn distractor_sentence_and_option_are_appended() {
    let mut item = mcq("mi", "A 60-year-old man has crushing chest pain and ST elevation.", "A");
    item.options.truncate(4);
    let (seed, out) = (0..200)
        .map(|s| (s, perturb_adversarial(&item, s)))
        .find(|(_, o)| o.stem.contains("sushi"))
        .expect("some seed draws the sushi sentence");
    assert_eq!(out.stem, format!("{} The patient reports recently eating sushi.", item.stem));
    assert_eq!(out.options.len(), 5);
    assert_eq!(out.options[..4], item.options[..]);
    assert_eq!(out.options[4].label, "E");
    assert_eq!(out.gold, item.gold);
    assert_eq!(perturb_adversarial(&item, seed), out);
}

#[test]
fn gender_swap_of_a_vignette() {
    let mut item = mcq("e5", "A patient labeled as a 55-year-old male reports dyspnea.", "B");
    let start = item.stem.find("male").unwrap();
    item.demographics
        .insert("gender".into(), vec![Span { start, end: start + 4 }]);
    let swapped = perturb_demographic(&item, "gender", &SwapTable::default())
        .unwrap()
        .item()
        .unwrap();
    assert_eq!(swapped.stem, "A patient labeled as a 55-year-old female reports dyspnea.");
    let span = swapped.demographics["gender"][0];
    assert_eq!(swapped.span_text(span), Some("female"));
    let back = perturb_demographic(&swapped, "gender", &SwapTable::default())
        .unwrap()
        .item()
        .unwrap();
    assert_eq!(back, item);
}
