//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sentwhite::ablation::{format_delta, whitening_delta_report, write_delta_csv, GridResult, LayerSets};
use sentwhite::evaluation::{average_rho, cosine_similarity, format_x100, spearman_rho, DatasetEvalResult};
use sentwhite::pipeline::{apply_whitening, fit_whitening, fit_whitening_with, CovarianceScaling, EmbeddingMatrix};
use sentwhite::store::{write_hidden_states, HiddenStateFileHeader, HiddenStateReader, HiddenStateRecord, RecordKind};
use sentwhite::{PipelineConfig, Pooling};
use sentwhite_cli::{cmd_eval, cmd_grid, cmd_synth, EvalArgs, SynthArgs, TokenArg};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn gaussian_matrix(seed: u64, n: usize, d: usize) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    EmbeddingMatrix::new(data, d, (0..n as u64).collect()).unwrap()
}

fn whitening_identity() -> Outcome {
    let (mut worst_scatter, mut worst_mean) = (0.0f64, 0.0f64);
    let mut secs = 0.0;
    for seed in 0..50 {
        let e = gaussian_matrix(seed, 500, 32);
        let start = Instant::now();
        let t = fit_whitening(&e, 1e-10).map_err(|e| e.to_string())?;
        let w = apply_whitening(&e, &t).map_err(|e| e.to_string())?;
        secs += start.elapsed().as_secs_f64();
        let d = w.dim();
        for a in 0..d {
            let mean = w.rows().map(|r| r[a]).sum::<f64>() / w.nrows() as f64;
            worst_mean = worst_mean.max(mean.abs());
            for b in 0..d {
                let dot: f64 = w.rows().map(|r| r[a] * r[b]).sum();
                worst_scatter = worst_scatter.max((dot - if a == b { 1.0 } else { 0.0 }).abs());
            }
        }
    }
    let msg = format!("max |EtE - I| = {worst_scatter:.2e}, max |mean| = {worst_mean:.2e}, fit+apply {secs:.2} s");
    if worst_scatter <= 1e-6 && worst_mean <= 1e-9 && secs < 5.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn normalization_invariance() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let e = gaussian_matrix(seed, 500, 32);
        let a = fit_whitening_with(&e, 1e-10, CovarianceScaling::Unnormalized).map_err(|e| e.to_string())?;
        let b = fit_whitening_with(&e, 1e-10, CovarianceScaling::PerSample).map_err(|e| e.to_string())?;
        let (wa, wb) = (apply_whitening(&e, &a).unwrap(), apply_whitening(&e, &b).unwrap());
        for i in 0..wa.nrows() {
            for j in i + 1..wa.nrows() {
                let ca = cosine_similarity(wa.row(i), wa.row(j)).unwrap();
                let cb = cosine_similarity(wb.row(i), wb.row(j)).unwrap();
                worst = worst.max((ca - cb).abs());
            }
        }
    }
    let msg = format!("max cosine difference {worst:.2e} over 50 x C(500,2) pairs");
    if worst <= 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// 1-based ranks of distinct values.
fn distinct_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = (r + 1) as f64;
    }
    ranks
}

/// O(n^2) average ranks: 1 + #smaller + (#equal - 1) / 2.
fn brute_force_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn plain_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

fn spearman_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 100usize;
    let mut worst_closed = 0.0f64;
    for _ in 0..1000 {
        let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (rx, ry) = (distinct_ranks(&x), distinct_ranks(&y));
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
        let nf = n as f64;
        let closed = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
        let got = spearman_rho(&x, &y).map_err(|e| e.to_string())?;
        worst_closed = worst_closed.max((got - closed).abs());
    }
    let mut worst_ties = 0.0f64;
    let mut tested = 0;
    while tested < 1000 {
        let len = rng.random_range(2..=60);
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(0..8) as f64).collect();
        let y: Vec<f64> = (0..len).map(|_| rng.random_range(-3..4) as f64).collect();
        if x.iter().all(|&v| v == x[0]) || y.iter().all(|&v| v == y[0]) {
            continue;
        }
        let oracle = plain_pearson(&brute_force_ranks(&x), &brute_force_ranks(&y));
        let got = spearman_rho(&x, &y).map_err(|e| e.to_string())?;
        worst_ties = worst_ties.max((got - oracle).abs());
        tested += 1;
    }
    let msg = format!("closed form max err {worst_closed:.2e}, tie oracle max err {worst_ties:.2e}");
    if worst_closed <= 1e-12 && worst_ties <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn eval_args(dir: &Path, token: TokenArg, layers: &str) -> EvalArgs {
    EvalArgs {
        hidden_states: dir.join("synth1.whb"),
        pairs: dir.join("synth1.tsv"),
        token,
        layers: layers.into(),
        whiten: false,
        eigen_floor: sentwhite::DEFAULT_EIGEN_FLOOR,
        fit_corpus: None,
        name: None,
        manifest: dir.join(format!("run-{layers}.json")),
        save_transform: None,
    }
}

fn synth_args(dir: &Path, datasets: usize) -> SynthArgs {
    SynthArgs {
        out_dir: dir.to_path_buf(),
        datasets,
        sentences: 120,
        pairs: 200,
        num_layers: 13,
        dim: 16,
        pooled: false,
        gold_token: TokenArg::Avg,
        gold_layer: 1,
        seed: 2021,
    }
}

fn rho_cell(csv: &[u8]) -> String {
    let text = String::from_utf8(csv.to_vec()).unwrap();
    text.lines().nth(1).unwrap().rsplit(',').next().unwrap().to_string()
}

fn synthetic_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    cmd_synth(&synth_args(dir.path(), 1), &mut Vec::new()).map_err(|e| e.to_string())?;
    let mut gold = Vec::new();
    cmd_eval(&eval_args(dir.path(), TokenArg::Avg, "1"), &mut gold).map_err(|e| e.to_string())?;
    let mut other = Vec::new();
    cmd_eval(&eval_args(dir.path(), TokenArg::Cls, "12"), &mut other).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let (g, o) = (rho_cell(&gold), rho_cell(&other));
    let msg = format!("AVG/L1/F = {g}, CLS/L12/F = {o}, {secs:.3} s");
    let o_val: f64 = o.parse().unwrap();
    if g == "100.00" && o_val < 100.0 && secs < 1.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn random_f32(rng: &mut ChaCha8Rng) -> f32 {
    loop {
        let v = f32::from_bits(rng.random());
        if v.is_finite() {
            return v;
        }
    }
}

fn format_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut total = 0usize;
    for file in 0..10 {
        let kind = if file % 2 == 0 { RecordKind::Tokens } else { RecordKind::Pooled };
        let header = HiddenStateFileHeader::new(rng.random_range(2..6), rng.random_range(1..9), kind, 100).unwrap();
        let records: Vec<HiddenStateRecord> = (0..100u64)
            .map(|i| {
                let tokens = rng.random_range(1..7);
                let payload = (0..header.payload_len(tokens)).map(|_| random_f32(&mut rng)).collect();
                HiddenStateRecord::new(
                    rng.random::<u64>() ^ i,
                    kind,
                    header.num_layers,
                    header.hidden_dim,
                    tokens,
                    payload,
                )
                .unwrap()
            })
            .collect();
        let mut bytes = Vec::new();
        write_hidden_states(&records, &header, &mut bytes).map_err(|e| e.to_string())?;
        let reader = HiddenStateReader::new(bytes.as_slice()).map_err(|e| e.to_string())?;
        if *reader.header() != header {
            return Err(format!("file {file}: header changed"));
        }
        let back: Vec<HiddenStateRecord> = reader.collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        if back.len() != records.len() {
            return Err(format!("file {file}: {} of {} records", back.len(), records.len()));
        }
        for (a, b) in records.iter().zip(&back) {
            let bits = |r: &HiddenStateRecord| r.payload().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            if a.sentence_id() != b.sentence_id() || a.token_count() != b.token_count() || bits(a) != bits(b) {
                return Err(format!("file {file}: record {} differs", a.sentence_id()));
            }
        }
        total += back.len();
    }
    Ok(format!("{total} records over 10 files (both kinds) bit-exact"))
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn grid_reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    cmd_synth(&synth_args(dir.path(), 2), &mut Vec::new()).map_err(|e| e.to_string())?;
    let spec = dir.path().join("grid.spec");
    fs::write(&spec, "token = avg, cls\nlayers = pairs 1..12\nwhitening = F, T\nsweep = 4\n").unwrap();
    let data = dir.path().join("data.txt");
    let (out_a, out_b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_grid(&spec, &data, &out_a, None).map_err(|e| e.to_string())?;
    cmd_grid(&spec, &data, &out_b, None).map_err(|e| e.to_string())?;
    let (a, b) = (read_dir_sorted(&out_a), read_dir_sorted(&out_b));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    let csvs = names.iter().filter(|n| n.ends_with(".csv")).count();
    let resolved = LayerSets::AllPairs(None).resolve(13).map_err(|e| e.to_string())?.len();
    let grid_rows = a
        .iter()
        .find(|(n, _)| n == "grid.csv")
        .map(|(_, bytes)| bytes.iter().filter(|&&c| c == b'\n').count() - 1)
        .unwrap_or(0);
    let msg = format!(
        "{csvs} CSVs byte-identical across runs: {}; ALL_PAIRS over 12 layers = {resolved} cells; grid.csv rows = {grid_rows}",
        a == b
    );
    if a == b && resolved == 78 && grid_rows == 78 * 4 && csvs == 10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn results(values: &[f64]) -> Vec<DatasetEvalResult> {
    let names = ["STS-B", "SICK-R", "STS12", "STS13", "STS14", "STS15", "STS16"];
    names
        .iter()
        .zip(values)
        .map(|(n, &v)| DatasetEvalResult {
            dataset_name: n.to_string(),
            spearman_rho: v / 100.0,
            n_pairs: 1,
        })
        .collect()
}

fn published_arithmetic() -> Outcome {
    let whitened = results(&[68.68, 60.28, 61.94, 68.47, 67.31, 74.82, 72.82]);
    let avg = format_x100(average_rho(&whitened).map_err(|e| e.to_string())?);

    let before = results(&[59.05, 63.75, 57.72, 58.38, 61.97, 70.28, 69.63]);
    let after = results(&[68.72, 60.43, 62.20, 68.52, 67.35, 74.73, 72.42]);
    let cell = |per_dataset: Vec<DatasetEvalResult>, whitening| GridResult {
        config: PipelineConfig::new(Pooling::Avg, [1, 12], whitening).unwrap(),
        average: average_rho(&per_dataset).unwrap(),
        per_dataset,
    };
    let rows = whitening_delta_report(&[cell(before, false), cell(after, true)]).map_err(|e| e.to_string())?;
    let mut csv = Vec::new();
    write_delta_csv(&mut csv, &rows).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    let delta = format_delta(rows[0].before, rows[0].after);
    let msg = format!("average {avg}, delta {delta}");
    if avg == "67.76" && delta == "62.97 → 67.77 (+4.80)" && csv.trim_end().ends_with("(+4.80)") {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("whitening identity, 50 x (500 x 32), < 5 s", whitening_identity),
        ("covariance normalization invariance, 1e-9", normalization_invariance),
        ("spearman closed form and tie oracle, 1e-12", spearman_oracles),
        ("synthetic end-to-end, 100.00 vs strictly less, < 1 s", synthetic_end_to_end),
        ("hidden-state format round trip, 1000 records", format_round_trip),
        ("grid reproducibility and 78 pair cells", grid_reproducibility),
        ("published average 67.76 and delta +4.80", published_arithmetic),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
