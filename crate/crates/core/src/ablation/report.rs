//! CSV renderings of grid, heatmap, sweep and with/without-whitening results.
//!
//! All scores are printed as `rho * 100` with two decimals.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::ops::RangeInclusive;

use super::{AblationError, GridResult, Result, SweepRow};
use crate::evaluation::{format_hundredths, format_x100, hundredths_x100};
use crate::pipeline::{layer_label, Pooling};

fn dataset_names(results: &[GridResult]) -> Vec<&str> {
    results
        .first()
        .map(|r| r.per_dataset.iter().map(|d| d.dataset_name.as_str()).collect())
        .unwrap_or_default()
}

fn flag(w: bool) -> &'static str {
    if w {
        "T"
    } else {
        "F"
    }
}

/// `token,layers,whitening,<dataset...>,avg`.
pub fn write_grid_csv<W: Write>(mut sink: W, results: &[GridResult]) -> io::Result<()> {
    let names = dataset_names(results);
    write!(sink, "token,layers,whitening")?;
    for n in &names {
        write!(sink, ",{n}")?;
    }
    writeln!(sink, ",avg")?;
    for r in results {
        write!(sink, "{},{},{}", r.config.pooling, r.config.layer_label(), flag(r.config.whitening))?;
        for d in &r.per_dataset {
            write!(sink, ",{}", format_x100(d.spearman_rho))?;
        }
        writeln!(sink, ",{}", format_x100(r.average))?;
    }
    Ok(())
}

/// Square matrix with a header row and a leading column of layer indices.
pub fn write_heatmap_csv<W: Write>(mut sink: W, matrix: &[Vec<f64>], layer_range: RangeInclusive<usize>) -> io::Result<()> {
    let layers: Vec<usize> = layer_range.collect();
    write!(sink, "layer")?;
    for l in &layers {
        write!(sink, ",L{l}")?;
    }
    writeln!(sink)?;
    for (l, row) in layers.iter().zip(matrix) {
        write!(sink, "L{l}")?;
        for v in row {
            write!(sink, ",{}", format_x100(*v))?;
        }
        writeln!(sink)?;
    }
    Ok(())
}

/// `k,best_avg,best_set,strategy,candidates`.
pub fn write_sweep_csv<W: Write>(mut sink: W, rows: &[SweepRow]) -> io::Result<()> {
    writeln!(sink, "k,best_avg,best_set,strategy,candidates")?;
    for r in rows {
        writeln!(
            sink,
            "{},{},{},{},{}",
            r.entry.k,
            format_x100(r.entry.best_average),
            layer_label(&r.entry.best_layers),
            r.strategy,
            r.candidates
        )?;
    }
    Ok(())
}

/// `before → after (+delta)` on the `rho * 100` scale.
///
/// The delta is taken between the two-decimal values as displayed, so every
/// row is arithmetically consistent with itself.
pub fn format_delta(before: f64, after: f64) -> String {
    let (b, a) = (hundredths_x100(before), hundredths_x100(after));
    let delta = a - b;
    let sign = if delta < 0 { "-" } else { "+" };
    format!(
        "{} → {} ({sign}{})",
        format_hundredths(b),
        format_hundredths(a),
        format_hundredths(delta.abs())
    )
}

/// One pooling/layer-set configuration evaluated with and without whitening.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub pooling: Pooling,
    pub layers: Vec<usize>,
    /// `(dataset, before, after)` rho values.
    pub per_dataset: Vec<(String, f64, f64)>,
    pub before: f64,
    pub after: f64,
}

impl DeltaRow {
    pub fn delta(&self) -> f64 {
        self.after - self.before
    }

    pub fn formatted(&self) -> String {
        format_delta(self.before, self.after)
    }
}

/// Pairs each configuration with its whitened counterpart.
pub fn whitening_delta_report(results: &[GridResult]) -> Result<Vec<DeltaRow>> {
    let mut groups: BTreeMap<(Pooling, &[usize]), [Option<&GridResult>; 2]> = BTreeMap::new();
    for r in results {
        let slot = &mut groups.entry((r.config.pooling, r.config.layers())).or_default()[r.config.whitening as usize];
        if slot.is_some() {
            return Err(AblationError::AmbiguousCell(r.config.layers().to_vec()));
        }
        *slot = Some(r);
    }
    groups
        .into_iter()
        .map(|((pooling, layers), pair)| match pair {
            [Some(before), Some(after)] => Ok(DeltaRow {
                pooling,
                layers: layers.to_vec(),
                per_dataset: before
                    .per_dataset
                    .iter()
                    .zip(&after.per_dataset)
                    .map(|(b, a)| (b.dataset_name.clone(), b.spearman_rho, a.spearman_rho))
                    .collect(),
                before: before.average,
                after: after.average,
            }),
            [Some(only), None] | [None, Some(only)] => Err(AblationError::Unpaired(only.config.to_string())),
            [None, None] => unreachable!(),
        })
        .collect()
}

/// `token,layers,<dataset...>,avg` with `before → after` cells and the delta on the average.
pub fn write_delta_csv<W: Write>(mut sink: W, rows: &[DeltaRow]) -> io::Result<()> {
    write!(sink, "token,layers")?;
    if let Some(first) = rows.first() {
        for (name, _, _) in &first.per_dataset {
            write!(sink, ",{name}")?;
        }
    }
    writeln!(sink, ",avg")?;
    for r in rows {
        write!(sink, "{},{}", r.pooling, layer_label(&r.layers))?;
        for (_, b, a) in &r.per_dataset {
            write!(sink, ",{} → {}", format_x100(*b), format_x100(*a))?;
        }
        writeln!(sink, ",{}", r.formatted())?;
    }
    Ok(())
}
