//! Hand-binned expectations for invocation classes and frequency bins.

use datafactory_core::bench::{collect_stats, frequency_bin, CallRecord, InvocationClass};

/// (db calls, kg calls, correct)
const TRACES: &[(u32, u32, Option<bool>)] = &[
    (1, 0, Some(true)),
    (0, 1, Some(false)),
    (2, 0, Some(true)),
    (1, 1, Some(true)),
    (0, 3, None),
    (2, 2, Some(false)),
    (5, 0, Some(true)),
    (3, 3, Some(true)),
    (6, 4, Some(false)),
    (11, 0, Some(false)),
    (7, 7, Some(true)),
    (0, 0, None),
];

/// class -> count, by hand from the table above
const CLASSES: &[(InvocationClass, usize)] = &[
    (InvocationClass::DbOnly, 4),
    (InvocationClass::KgOnly, 2),
    (InvocationClass::Both, 5),
    (InvocationClass::None, 1),
];

/// bin -> (count, scored, correct)
const BINS: &[(&str, usize, usize, usize)] = &[
    ("1", 2, 2, 1),
    ("2-3", 3, 2, 2),
    ("4-5", 2, 2, 1),
    ("6-10", 2, 2, 1),
    ("10+", 2, 2, 1),
];

pub fn check_stats() -> Result<(), String> {
    for (n, want) in [
        (1, "1"),
        (2, "2-3"),
        (3, "2-3"),
        (4, "4-5"),
        (5, "4-5"),
        (6, "6-10"),
        (10, "6-10"),
        (11, "10+"),
        (500, "10+"),
    ] {
        if frequency_bin(n) != Some(want) {
            return Err(format!("bin of {n} is {:?}, want {want}", frequency_bin(n)));
        }
    }
    if frequency_bin(0).is_some() {
        return Err("zero calls must not be binned".into());
    }
    let records: Vec<CallRecord> = TRACES
        .iter()
        .map(|&(db, kg, correct)| CallRecord { db, kg, correct })
        .collect();
    let stats = collect_stats(&records);
    if stats.total != TRACES.len() {
        return Err(format!("total {}", stats.total));
    }
    for (class, count) in CLASSES {
        let share = &stats.classes[class];
        let pct = 100.0 * *count as f64 / TRACES.len() as f64;
        if share.count != *count || (share.percent - pct).abs() > 1e-9 {
            return Err(format!("{class:?}: {share:?}, want {count} ({pct}%)"));
        }
    }
    if stats.bins.len() != BINS.len() {
        return Err(format!("{} bins", stats.bins.len()));
    }
    for (row, (bin, count, scored, correct)) in stats.bins.iter().zip(BINS) {
        let acc = (*scored > 0).then(|| *correct as f64 / *scored as f64);
        if row.bin != *bin
            || row.count != *count
            || row.scored != *scored
            || row.correct != *correct
            || row.accuracy != acc
        {
            return Err(format!("{row:?}, want {bin} {count} {scored} {correct}"));
        }
    }
    Ok(())
}
