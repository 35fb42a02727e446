//! Runs the ten acceptance criteria on the default pair at the default tolerances.
//! Prints one pass/fail line per criterion, then the individual reports.

use nonosgood::verify::Lab;

#[test]
fn acceptance() {
    let lab = Lab::default_lab().expect("default lab builds");
    let mut failed = Vec::new();
    let mut lines = Vec::new();
    let mut details = Vec::new();
    for i in 1..=10u8 {
        let reps = lab.criterion(i);
        let ok = !reps.is_empty() && reps.iter().all(|r| r.pass);
        let flagged = reps.iter().any(|r| r.flagged);
        lines.push(format!(
            "criterion {i:>2}: {}{}",
            if ok { "PASS" } else { "FAIL" },
            if flagged { " (flagged)" } else { "" }
        ));
        if !ok {
            failed.push(i);
        }
        for r in reps {
            details.push(format!(
                "  [{i:>2}] {} {}: {:e} <= {:e}{}",
                if r.pass { "ok  " } else { "FAIL" },
                r.name,
                r.statistic,
                r.threshold,
                if r.note.is_empty() { String::new() } else { format!(" ({})", r.note) }
            ));
        }
    }
    for l in &lines {
        println!("{l}");
    }
    for d in &details {
        println!("{d}");
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
