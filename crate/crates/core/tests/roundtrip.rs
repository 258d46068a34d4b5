mod common;

use kronfit::data::{canonical_config, ingest_long_csv, read_factor2_distances, validate, write_canonical_csv, write_factor2_distances};
use kronfit::simulate::sample_dataset;
use kronfit::CorrSpec;

#[test]
fn simulated_data_survives_csv_round_trip() {
    for seed in 0..5 {
        let spec1 = CorrSpec::lear(0.7, 2.0).unwrap();
        let spec2 = CorrSpec::new(kronfit::CorrFamily::Exponential, vec![1.5]).unwrap();
        let ds = sample_dataset(&common::random_design(seed, spec1, spec2)).unwrap();
        let mut csv = Vec::new();
        write_canonical_csv(&ds, &mut csv).unwrap();
        let mut dist = Vec::new();
        write_factor2_distances(&ds.factor2, &mut dist).unwrap();
        let layout = read_factor2_distances(dist.as_slice()).unwrap();
        let back = ingest_long_csv(csv.as_slice(), &canonical_config(&ds), Some(layout)).unwrap();
        assert_eq!(back, ds, "seed {seed}");
        let report = validate(&back);
        assert!(report.warnings().is_empty(), "seed {seed}: {:?}", report.warnings());
        assert_eq!(report.rank, ds.q);
    }
}

#[test]
fn simulation_is_reproducible_and_seed_sensitive() {
    let spec1 = CorrSpec::lear(0.5, 1.0).unwrap();
    let spec2 = CorrSpec::ar1(0.3).unwrap();
    let d = common::random_design(11, spec1, spec2);
    let a = sample_dataset(&d).unwrap();
    let b = sample_dataset(&d).unwrap();
    assert_eq!(a, b);
    let mut d2 = d.clone();
    d2.seed = 12;
    assert_ne!(sample_dataset(&d2).unwrap().stacked_y(), a.stacked_y());
}

#[test]
fn simulated_dimensions_respect_design() {
    let d = common::random_design(3, CorrSpec::ar1(0.5).unwrap(), CorrSpec::ar1(0.5).unwrap());
    let ds = sample_dataset(&d).unwrap();
    assert_eq!(ds.n_subjects(), d.n_subjects);
    for b in &ds.subjects {
        assert!((d.t_range.0..=d.t_range.1).contains(&b.t));
        assert!((d.s_range.0..=d.s_range.1).contains(&b.s));
    }
    assert_eq!(ds.n, ds.subjects.iter().map(|b| b.n_obs()).sum::<usize>());
}
