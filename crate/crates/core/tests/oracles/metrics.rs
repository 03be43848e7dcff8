//! Golden metric values worked out by hand from the metric definitions.

use datafactory_core::bench::{cohens_d, exact_match, rouge_prf, rouge_score, BenchError, RougeVariant};

const TOL: f64 = 1e-9;

/// (prediction, gold answers, expected)
pub const EM_TABLE: &[(&str, &[&str], bool)] = &[
    ("2,004", &["2004"], true),
    ("2.50", &["2.5"], true),
    ("Paris", &["paris ", "Lyon"], false),
    ("Paris|Lyon", &["lyon", "PARIS"], true),
    ("\"Oslo\"", &["oslo"], true),
    ("'Oslo'", &["Oslo"], true),
    ("  OSLO  ", &["Oslo"], true),
    ("1,234,567", &["1234567"], true),
    ("3", &["3.0000001"], true),
    ("3", &["3.01"], false),
    ("2004-03-01", &["March 1, 2004"], true),
    ("Oslo|Bergen", &["Oslo"], false),
    ("Bergen", &["Bergen", "bergen"], true),
    ("12", &["twelve"], false),
];

fn close(name: &str, got: f64, want: f64) -> Result<(), String> {
    if (got - want).abs() <= TOL {
        Ok(())
    } else {
        Err(format!("{name}: got {got}, want {want}"))
    }
}

pub fn check_rouge() -> Result<(), String> {
    close("rouge1", rouge_score("the cat sat", "the cat", RougeVariant::One), 0.8)?;
    close(
        "rouge1 swapped",
        rouge_score("the cat", "the cat sat", RougeVariant::One),
        0.8,
    )?;
    // bigrams {the cat, cat sat} vs {the cat}: P = 1/2, R = 1
    close(
        "rouge2",
        rouge_score("the cat sat", "the cat", RougeVariant::Two),
        2.0 / 3.0,
    )?;
    // LCS 2 of 3 and 2
    close("rougeL", rouge_score("the cat sat", "the cat", RougeVariant::L), 0.8)?;
    let p = rouge_prf("the cat sat", "the cat", RougeVariant::One);
    let q = rouge_prf("the cat", "the cat sat", RougeVariant::One);
    close("precision", p.precision, 2.0 / 3.0)?;
    close("recall", p.recall, 1.0)?;
    close("swap P/R", p.precision, q.recall)?;
    close("swap R/P", p.recall, q.precision)?;
    for v in [RougeVariant::One, RougeVariant::Two, RougeVariant::L] {
        close("identical", rouge_score("The cat, sat.", "the cat sat", v), 1.0)?;
        close("disjoint", rouge_score("dogs bark", "the cat sat", v), 0.0)?;
    }
    Ok(())
}

pub fn check_exact_match() -> Result<(), String> {
    for (pred, gold, want) in EM_TABLE {
        let gold: Vec<String> = gold.iter().map(|s| s.to_string()).collect();
        if exact_match(pred, &gold) != *want {
            return Err(format!("exact_match({pred:?}, {gold:?}) should be {want}"));
        }
    }
    Ok(())
}

pub fn check_cohens_d() -> Result<(), String> {
    close(
        "d",
        cohens_d(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).map_err(|e| e.to_string())?,
        -1.0,
    )?;
    // means 1 and 11, pooled sd sqrt((2 + 2) / 2)
    close(
        "shifted",
        cohens_d(&[0.0, 2.0], &[10.0, 12.0]).map_err(|e| e.to_string())?,
        -10.0 / 2f64.sqrt(),
    )?;
    match cohens_d(&[1.0, 1.0], &[1.0, 1.0]) {
        Err(BenchError::DegenerateSample) => Ok(()),
        other => Err(format!("identical samples gave {other:?}")),
    }
}
