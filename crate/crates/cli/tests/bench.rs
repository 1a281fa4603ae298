use cpsm::em::EmConfig;
use cpsm::eval::summarize;
use cpsm::synth::SynthConfig;
use cpsm::FitConfig;
use cpsm_cli::adapt::Method;
use cpsm_cli::bench::{run_benchmark, ExperimentConfig, Generator, Grid};

fn experiment(generator: Generator, a: Vec<f64>, k: Vec<f64>, n: Vec<usize>, reps: usize) -> ExperimentConfig {
    ExperimentConfig {
        generator,
        methods: Method::ALL.to_vec(),
        grid: Grid { a, k, n },
        em: EmConfig::default(),
        fit: FitConfig::default(),
        repetitions: reps,
        base_seed: 40,
        output_path: "unused.csv".into(),
        aggregate_path: None,
        record_timing: false,
    }
}

fn synthetic() -> Generator {
    Generator::Synthetic(SynthConfig::default())
}

#[test]
fn full_grid_yields_one_row_per_method_and_run() {
    let cfg = experiment(synthetic(), vec![0.05, 0.5], vec![0.0, 5.0], vec![400], 5);
    let rows = run_benchmark(&cfg).unwrap();
    assert_eq!(rows.len(), 80);
    assert!(rows.iter().all(|r| r.error.is_none()));
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort();
    seeds.dedup();
    assert_eq!(seeds, (40..60).collect::<Vec<_>>());
    for w in rows.windows(2) {
        let key = |r: &cpsm::eval::MetricRow| (r.a.to_bits(), r.k.to_bits(), r.n, r.method.clone(), r.seed);
        assert!(key(&w[0]) < key(&w[1]));
    }
    assert!(rows.iter().all(|r| r.wall_clock_seconds == 0.0));
    let oracle = rows.iter().filter(|r| r.method == "oracle");
    assert!(oracle.into_iter().all(|r| r.approx_error == 0.0));
}

#[test]
fn seeds_follow_the_flat_run_index() {
    let cfg = experiment(synthetic(), vec![0.3], vec![0.0, 1.0], vec![200, 300], 2);
    let rows = run_benchmark(&cfg).unwrap();
    // cells in order (k=0,n=200), (k=0,n=300), (k=1,n=200), (k=1,n=300)
    let seed_of = |k: f64, n: usize| {
        let mut s: Vec<u64> = rows.iter().filter(|r| r.k == k && r.n == n).map(|r| r.seed).collect();
        s.sort();
        s.dedup();
        s
    };
    assert_eq!(seed_of(0.0, 200), vec![40, 41]);
    assert_eq!(seed_of(0.0, 300), vec![42, 43]);
    assert_eq!(seed_of(1.0, 200), vec![44, 45]);
    assert_eq!(seed_of(1.0, 300), vec![46, 47]);
}

#[test]
fn failing_cells_become_error_rows() {
    let generator = Generator::Resample {
        base_data: None,
        base: SynthConfig {
            source_cond_prob: 0.5,
            n_source: 3000,
            ..SynthConfig::default()
        },
        conditioning_column: 0,
    };
    // a + k = 1.1 is not a probability
    let cfg = experiment(generator, vec![0.1], vec![0.2, 1.0], vec![500], 2);
    let rows = run_benchmark(&cfg).unwrap();
    assert_eq!(rows.len(), 16);
    let (bad, good): (Vec<_>, Vec<_>) = rows.iter().partition(|r| r.k == 1.0);
    assert!(bad.iter().all(|r| r.error.is_some() && r.balanced_accuracy.is_nan()));
    assert!(good.iter().all(|r| r.error.is_none() && r.balanced_accuracy.is_finite()));
}

#[test]
fn aggregate_means_match_the_rows() {
    let cfg = experiment(synthetic(), vec![0.3], vec![2.0], vec![300], 3);
    let rows = run_benchmark(&cfg).unwrap();
    for cell in summarize(&rows) {
        let values: Vec<f64> = rows
            .iter()
            .filter(|r| r.method == cell.method)
            .map(|r| r.balanced_accuracy)
            .collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!((cell.balanced_accuracy_mean - mean).abs() < 1e-12);
        assert_eq!(cell.runs, 3);
    }
}

#[test]
fn config_round_trips_through_json() {
    let cfg = experiment(synthetic(), vec![0.05], vec![5.0], vec![5000], 5);
    let text = serde_json::to_string(&cfg).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    let minimal: ExperimentConfig = serde_json::from_str(
        r#"{"generator": {"kind": "resample", "conditioning_column": 1},
            "methods": ["cpsm"], "grid": {"a": [0.05], "k": [0.7], "n": [5000]},
            "output_path": "m.csv"}"#,
    )
    .unwrap();
    assert_eq!(minimal.repetitions, 5);
    assert!(!minimal.record_timing);
}
