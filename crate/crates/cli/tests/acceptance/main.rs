//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod compose;
mod config;
mod equivalence;
mod gradients;
mod invariants;
mod runs;

use std::process::ExitCode;
use std::time::Instant;

/// Result of one criterion: a verdict plus the measured evidence.
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
    /// Extra lines printed under the verdict.
    pub notes: Vec<String>,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
            notes: Vec::new(),
        }
    }

    pub fn note(mut self, line: impl Into<String>) -> Self {
        self.notes.push(line.into());
        self
    }
}

type Criterion = (&'static str, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 8] = [
    ("AC1", "sparse-dense equivalence", equivalence::run),
    ("AC2", "gradient correctness", gradients::run),
    ("AC3", "structural invariants", invariants::run),
    ("AC4", "paper configuration", config::run),
    ("AC5", "toy overfit", runs::overfit),
    ("AC6", "sparsity payoff", runs::sparsity),
    ("AC7", "ablation plumbing", runs::ablation),
    ("AC8", "multigrid compositionality", compose::run),
];

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC")).collect();
    let mut failed = Vec::new();
    for (id, title, check) in CRITERIA {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!(
            "{id} {verdict} {title}: {} [{:.1} s]",
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        for n in &outcome.notes {
            println!("    {n}");
        }
        if !outcome.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
