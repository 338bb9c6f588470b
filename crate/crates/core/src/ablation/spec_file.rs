//! Key-value grid spec files.
//!
//! ```text
//! # comment
//! token      = avg, cls
//! layers     = pairs 1..12        # all pairs plus singletons
//! layers     = subsets 3 1..12    # all 3-layer subsets
//! layers     = 12; 1+12; L1+L2+L12
//! whitening  = F, T
//! datasets   = stsb, sick
//! eigen_floor = 1e-10
//! fit        = per-dataset        # or pooled
//! sweep      = 4                  # layer-count sweep up to 4 layers
//! sweep_range = 1..12
//! sweep_exhaustive = 3
//! sweep_beam = 20
//! ```
//!
//! `layers` may repeat; each line adds sets. Ranges are inclusive and
//! default to `1..L`.

use super::{AblationError, FitScope, GridSpec, LayerRange, LayerSets, Result, SweepSpec};
use crate::pipeline::{parse_layer_list, Pooling};

fn list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_range(s: &str) -> Result<LayerRange, String> {
    let (lo, hi) = s
        .split_once("..")
        .ok_or_else(|| format!("expected a range like 1..12, got {s:?}"))?;
    let hi = hi.strip_prefix('=').unwrap_or(hi);
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad range bound {t:?}"));
    let (lo, hi) = (num(lo)?, num(hi)?);
    if lo > hi {
        return Err(format!("empty range {lo}..{hi}"));
    }
    Ok(Some(lo..=hi))
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.to_ascii_lowercase().as_str() {
        "t" | "true" | "1" | "yes" => Ok(true),
        "f" | "false" | "0" | "no" => Ok(false),
        _ => Err(format!("bad whitening flag {s:?}")),
    }
}

fn parse_layers(value: &str) -> Result<LayerSets, String> {
    let mut words = value.split_whitespace();
    match words.next() {
        Some("pairs") => {
            let range = words.next().map(parse_range).transpose()?.flatten();
            Ok(LayerSets::AllPairs(range))
        }
        Some("subsets") => {
            let k = words
                .next()
                .ok_or("subsets needs a size")?
                .parse::<usize>()
                .map_err(|_| "bad subset size".to_string())?;
            let range = words.next().map(parse_range).transpose()?.flatten();
            Ok(LayerSets::AllSubsetsOfSize { k, range })
        }
        _ => {
            let sets = value
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| parse_layer_list(s).map_err(|e| e.to_string()))
                .collect::<Result<Vec<_>, _>>()?;
            if sets.is_empty() {
                return Err("no layer sets given".into());
            }
            Ok(LayerSets::Explicit(sets))
        }
    }
}

pub(super) fn parse(text: &str) -> Result<GridSpec> {
    let mut spec = GridSpec::new(vec![], vec![], vec![], vec![]);
    let mut sweep: Option<SweepSpec> = None;
    let mut sweep_opts: Vec<(usize, String, String)> = Vec::new();
    for (index, raw) in text.lines().enumerate() {
        let line_no = index + 1;
        let err = |reason: String| AblationError::SpecParse { line: line_no, reason };
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "token" | "pooling" => {
                for t in list(value) {
                    spec.pooling_modes.push(t.parse::<Pooling>().map_err(|e| err(e.to_string()))?);
                }
            }
            "layers" => spec.layer_sets.push(parse_layers(value).map_err(err)?),
            "whitening" => {
                for t in list(value) {
                    spec.whitening_flags.push(parse_bool(t).map_err(err)?);
                }
            }
            "datasets" => spec.datasets.extend(list(value).map(String::from)),
            "eigen_floor" => {
                spec.eigen_floor = value
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite() && *v > 0.0)
                    .ok_or_else(|| err(format!("eigen_floor must be a positive number, got {value:?}")))?;
            }
            "fit" => {
                spec.fit = match value {
                    "per-dataset" | "per_dataset" => FitScope::PerDataset,
                    "pooled" => FitScope::Pooled,
                    _ => return Err(err(format!("fit must be per-dataset or pooled, got {value:?}"))),
                }
            }
            "sweep" => {
                let k = value
                    .parse::<usize>()
                    .map_err(|_| err(format!("sweep must be a layer count, got {value:?}")))?;
                sweep = Some(SweepSpec::new(k));
            }
            "sweep_range" | "sweep_exhaustive" | "sweep_beam" => {
                sweep_opts.push((line_no, key.to_string(), value.to_string()));
            }
            _ => return Err(err(format!("unknown key {key:?}"))),
        }
    }
    if !sweep_opts.is_empty() {
        let Some(s) = sweep.as_mut() else {
            return Err(AblationError::SpecParse {
                line: sweep_opts[0].0,
                reason: "sweep options given without `sweep = K`".into(),
            });
        };
        for (line, key, value) in sweep_opts {
            let err = |reason: String| AblationError::SpecParse { line, reason };
            let count = || value.parse::<usize>().map_err(|_| err(format!("bad count {value:?}")));
            match key.as_str() {
                "sweep_range" => s.range = parse_range(&value).map_err(err)?,
                "sweep_exhaustive" => s.exhaustive_max_k = count()?,
                _ => s.beam_width = count()?.max(1),
            }
        }
    }
    spec.sweep = sweep;
    Ok(spec)
}
