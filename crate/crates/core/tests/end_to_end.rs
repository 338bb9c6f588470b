use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sentwhite::ablation::{
    evaluate_config, run_grid, run_sweep, two_layer_heatmap, GridOptions, GridSpec, LayerCache, LayerSets,
    PreparedDataset, SearchStrategy, SweepSpec,
};
use sentwhite::evaluation::{evaluate_sts, load_pairs, GoldScale, PairFormat, SentencePairExample};
use sentwhite::pipeline::{
    apply_whitening, embed_sentences, fit_whitening, pool_and_combine, whiten, EmbeddingMatrix, FitCorpus,
    PipelineConfig, Pooling,
};
use sentwhite::store::{HiddenStateReader, RecordKind};
use sentwhite::synthetic::{generate, FixtureSpec};

fn prepared(spec: &FixtureSpec, name: &str) -> PreparedDataset {
    let fx = generate(spec).unwrap();
    let tsv: String = fx.pairs.iter().map(|(g, a, b)| format!("{g}\t{a}\t{b}\n")).collect();
    let pairs = load_pairs(tsv.as_bytes(), PairFormat::Tsv, GoldScale::Graded).unwrap();
    let layers: Vec<usize> = (0..spec.num_layers as usize).collect();
    let cache = LayerCache::load(fx.records.into_iter().map(Ok), &fx.header, &[Pooling::Cls, Pooling::Avg], &layers).unwrap();
    PreparedDataset {
        name: name.into(),
        cache,
        pairs: pairs.pairs,
    }
}

fn datasets() -> BTreeMap<String, PreparedDataset> {
    let small = FixtureSpec {
        num_sentences: 40,
        num_pairs: 60,
        num_layers: 5,
        hidden_dim: 6,
        ..Default::default()
    };
    let mut out = BTreeMap::new();
    out.insert("beta".into(), prepared(&small, "beta"));
    out.insert(
        "alpha".into(),
        prepared(&FixtureSpec { seed: 7, gold_from: (Pooling::Cls, 3), ..small }, "alpha"),
    );
    out
}

#[test]
fn streaming_file_pipeline_recovers_the_gold_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let fx = generate(&FixtureSpec::default()).unwrap();
    let paths = fx.write(dir.path(), "fixture").unwrap();
    let pairs = load_pairs(
        std::io::BufReader::new(std::fs::File::open(&paths.pairs).unwrap()),
        PairFormat::Tsv,
        GoldScale::Graded,
    )
    .unwrap();
    assert_eq!(pairs.sentences.len(), 120);

    let run = |config: &PipelineConfig| {
        let reader = HiddenStateReader::open(&paths.hidden_states).unwrap();
        let header = *reader.header();
        let e = embed_sentences(reader, &header, config, FitCorpus::Transductive, 1e-10).unwrap();
        evaluate_sts(&e, &pairs.pairs, "fixture").unwrap().spearman_rho
    };
    let gold = run(&PipelineConfig::new(Pooling::Avg, [1], false).unwrap());
    assert!((gold - 1.0).abs() < 1e-12, "{gold}");
    let other = run(&PipelineConfig::new(Pooling::Cls, [12], false).unwrap());
    assert!(other < 0.9);
}

#[test]
fn pooled_and_token_exports_agree() {
    let tokens = generate(&FixtureSpec::default()).unwrap();
    let pooled = generate(&FixtureSpec {
        kind: RecordKind::Pooled,
        ..Default::default()
    })
    .unwrap();
    for config in [
        PipelineConfig::new(Pooling::Avg, [1, 12], false).unwrap(),
        PipelineConfig::new(Pooling::Cls, [3], false).unwrap(),
    ] {
        let a = pool_and_combine(tokens.records.iter().cloned().map(Ok), &tokens.header, &config).unwrap();
        let b = pool_and_combine(pooled.records.iter().cloned().map(Ok), &pooled.header, &config).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

#[test]
fn grid_cells_equal_isolated_runs() {
    let data = datasets();
    let spec = GridSpec::new(
        vec![Pooling::Avg],
        vec![LayerSets::AllPairs(Some(1..=4))],
        vec![true],
        vec!["alpha".into(), "beta".into()],
    );
    let results = run_grid(&spec, &data).unwrap();
    assert_eq!(results.len(), 10);
    let heat = two_layer_heatmap(&results, 1..=4).unwrap();
    for (a, row) in heat.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            assert_eq!(*v, heat[b][a]);
        }
    }

    // cell (1, 3) via the streaming path, per dataset
    let config = PipelineConfig::new(Pooling::Avg, [1, 3], true).unwrap();
    let cell = results.iter().find(|r| r.config == config).unwrap();
    for (name, d) in &data {
        let small = FixtureSpec {
            num_sentences: 40,
            num_pairs: 60,
            num_layers: 5,
            hidden_dim: 6,
            ..Default::default()
        };
        let spec = if name == "alpha" {
            FixtureSpec { seed: 7, gold_from: (Pooling::Cls, 3), ..small }
        } else {
            small
        };
        let fx = generate(&spec).unwrap();
        let e = embed_sentences(fx.records.into_iter().map(Ok), &fx.header, &config, FitCorpus::Transductive, 1e-10).unwrap();
        let isolated = evaluate_sts(&e, &d.pairs, name).unwrap();
        let in_grid = cell.per_dataset.iter().find(|r| &r.dataset_name == name).unwrap();
        assert_eq!(isolated.spearman_rho, in_grid.spearman_rho);
    }
    assert_eq!(cell.per_dataset[0].dataset_name, "alpha");
}

#[test]
fn grid_rerun_is_identical() {
    let data = datasets();
    let spec = GridSpec::new(
        vec![Pooling::Cls, Pooling::Avg],
        vec![LayerSets::Explicit(vec![vec![4], vec![1, 4]])],
        vec![false, true],
        vec!["alpha".into(), "beta".into()],
    );
    assert_eq!(run_grid(&spec, &data).unwrap(), run_grid(&spec, &data).unwrap());
}

#[test]
fn failing_config_is_named() {
    let data = datasets();
    let spec = GridSpec::new(
        vec![Pooling::Avg],
        vec![LayerSets::Explicit(vec![vec![1]])],
        vec![false],
        vec!["alpha".into(), "missing".into()],
    );
    assert!(run_grid(&spec, &data).unwrap_err().to_string().contains("missing"));

    // a single-pair dataset cannot produce a correlation
    let mut data = datasets();
    data.get_mut("beta").unwrap().pairs.truncate(1);
    let spec = GridSpec::new(
        vec![Pooling::Avg],
        vec![LayerSets::Explicit(vec![vec![1]])],
        vec![false],
        vec!["beta".into()],
    );
    let err = run_grid(&spec, &data).unwrap_err().to_string();
    assert!(err.contains("token=AVG, layer=L1, whitening=F"), "{err}");
}

#[test]
fn sweep_switches_to_beam_search() {
    let data = datasets();
    let names = vec!["alpha".to_string(), "beta".to_string()];
    let sweep = SweepSpec {
        max_k: 4,
        range: Some(0..=4),
        exhaustive_max_k: 2,
        beam_width: 2,
    };
    let rows = run_sweep(&sweep, Pooling::Avg, false, &names, &data, GridOptions::default()).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].candidates, 5);
    assert_eq!(rows[1].candidates, 10);
    assert_eq!(rows[2].strategy, SearchStrategy::Beam { width: 2 });
    assert!(rows[2].candidates <= 2 * 3);
    for row in &rows {
        assert_eq!(row.entry.best_layers.len(), row.entry.k);
        let config = PipelineConfig::new(Pooling::Avg, row.entry.best_layers.iter().copied(), false).unwrap();
        let selected: Vec<&PreparedDataset> = data.values().collect();
        let alone = evaluate_config(&config, &selected, GridOptions::default()).unwrap();
        assert_eq!(alone.average, row.entry.best_average);
    }
    let again = run_sweep(&sweep, Pooling::Avg, false, &names, &data, GridOptions::default()).unwrap();
    assert_eq!(rows, again);
}

#[test]
fn external_fit_corpus() {
    let fx = generate(&FixtureSpec::default()).unwrap();
    let config = PipelineConfig::new(Pooling::Avg, [1, 12], true).unwrap();
    let corpus_fx = generate(&FixtureSpec { seed: 99, ..Default::default() }).unwrap();
    let corpus = pool_and_combine(corpus_fx.records.iter().cloned().map(Ok), &corpus_fx.header, &config).unwrap();
    let e = embed_sentences(fx.records.iter().cloned().map(Ok), &fx.header, &config, FitCorpus::External(&corpus), 1e-10).unwrap();
    let raw = pool_and_combine(fx.records.iter().cloned().map(Ok), &fx.header, &config).unwrap();
    let (expected, t) = whiten(&raw, FitCorpus::External(&corpus), 1e-10).unwrap();
    assert_eq!(e, expected);
    assert_eq!(t, fit_whitening(&corpus, 1e-10).unwrap());
    assert_eq!(apply_whitening(&raw, &t).unwrap(), e);
}

#[test]
fn whitened_pipeline_output_has_identity_scatter_and_is_deterministic() {
    let fx = generate(&FixtureSpec::default()).unwrap();
    let config = PipelineConfig::new(Pooling::Avg, [1, 12], true).unwrap();
    let run = || embed_sentences(fx.records.iter().cloned().map(Ok), &fx.header, &config, FitCorpus::Transductive, 1e-10).unwrap();
    let e = run();
    assert_eq!(e.dim(), 16);
    for a in 0..16 {
        for b in 0..16 {
            let dot: f64 = e.rows().map(|r| r[a] * r[b]).sum();
            assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-6);
        }
    }
    let bits = |m: &EmbeddingMatrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&e), bits(&run()));
}

#[test]
fn random_embeddings_do_not_correlate_with_shuffled_gold() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let (n, d) = (1000usize, 16usize);
    let data: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let e = EmbeddingMatrix::new(data, d, (0..n as u64).collect()).unwrap();
    let mut gold: Vec<f64> = (0..n / 2).map(|i| (i % 51) as f64 / 10.0).collect();
    gold.shuffle(&mut rng);
    let pairs: Vec<SentencePairExample> = gold
        .iter()
        .enumerate()
        .map(|(i, &g)| SentencePairExample {
            id_a: 2 * i as u64,
            id_b: 2 * i as u64 + 1,
            gold_score: g,
        })
        .collect();
    let rho = evaluate_sts(&e, &pairs, "null").unwrap().spearman_rho;
    assert!(rho.abs() < 0.15, "{rho}");
}
