//! CSV rendering of training histories, ablations, sweeps and exported
//! representations. Floats carry 17 significant digits and lines end in `\n`.

use std::fmt::Write as _;

use crate::train::{AblationRow, Metrics, SweepCell, TrainOutcome};

/// 17 significant digits in scientific notation.
pub fn fmt_float(value: f64) -> String {
    format!("{value:.16e}")
}

pub fn metrics_csv(outcome: &TrainOutcome) -> String {
    let mut out = String::from("epoch,split,loss,accuracy,precision,recall\n");
    for m in outcome.history.iter().chain(std::iter::once(&outcome.test)) {
        push_metrics_row(&mut out, m);
    }
    out
}

fn push_metrics_row(out: &mut String, m: &Metrics) {
    writeln!(
        out,
        "{},{},{},{},{},{}",
        m.epoch,
        m.split,
        fmt_float(m.loss),
        fmt_float(m.accuracy),
        fmt_float(m.precision),
        fmt_float(m.recall)
    )
    .expect("writing to a String");
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,adversarial,capsule,valid_accuracy,test_accuracy,test_precision,test_recall\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.label,
            r.adversarial,
            r.capsule,
            fmt_float(r.valid.accuracy),
            fmt_float(r.test.accuracy),
            fmt_float(r.test.precision),
            fmt_float(r.test.recall)
        )
        .expect("writing to a String");
    }
    out
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("param,value,n_pc,n_cc,repeats,mean_accuracy\n");
    for c in cells {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            c.param,
            c.value,
            c.n_pc,
            c.n_cc,
            c.accuracies.len(),
            fmt_float(c.mean_accuracy)
        )
        .expect("writing to a String");
    }
    out
}

/// Wall-clock seconds per sweep cell. Kept apart from [`sweep_csv`] so that
/// the accuracy table stays byte-for-byte reproducible.
pub fn sweep_timing_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("param,value,seconds\n");
    for c in cells {
        writeln!(out, "{},{},{}", c.param, c.value, fmt_float(c.elapsed.as_secs_f64())).expect("writing to a String");
    }
    out
}

/// One headerless row: the label, then the values.
pub fn representation_row(label: u8, values: &[f64]) -> String {
    let mut row = label.to_string();
    for v in values {
        row.push(',');
        row.push_str(&fmt_float(*v));
    }
    row.push('\n');
    row
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(fmt_float(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_float(1.0), "1.0000000000000000e0");
        for v in [0.1, 1.0 / 3.0, 2.5e-7, 123456.789] {
            assert_eq!(fmt_float(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn representation_rows() {
        assert_eq!(representation_row(1, &[0.5, -2.0]), "1,5.0000000000000000e-1,-2.0000000000000000e0\n");
        assert_eq!(representation_row(0, &[]), "0\n");
    }
}
