use strat_tte::data::TrialDataset;
use strat_tte::mean_outcome::{
    aipw_ate, baseline, generate_mean_trial, parse_mean_dataset, tmle_ate, Baseline, MeanDgmConfig, MeanPreset,
    MeanSchema, MeanTrialDataset, OutcomeSpec,
};
use strat_tte::Error;

fn correct_spec(d: usize) -> OutcomeSpec {
    OutcomeSpec { features: MeanPreset::Correct.features(d), ..OutcomeSpec::default() }
}

fn to_csv(ds: &MeanTrialDataset) -> String {
    let mut out = String::from("id,a,y,w");
    for name in &ds.base.covariate_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (s, y) in ds.base.subjects.iter().zip(&ds.y) {
        out.push_str(&format!("{},{},{y:?},{}", s.id, s.a, ds.base.stratum_levels[s.stratum]));
        for v in &s.x {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    out
}

#[test]
fn csv_round_trip_is_exact() {
    let ds = generate_mean_trial(&MeanDgmConfig { n: 60, seed: 2, ..MeanDgmConfig::default() }).unwrap();
    let schema = MeanSchema { id: Some("id".into()), ..MeanSchema::default() };
    let back = parse_mean_dataset(to_csv(&ds).as_bytes(), &schema).unwrap();
    assert_eq!(back.y, ds.y);
    for (a, b) in back.base.subjects.iter().zip(&ds.base.subjects) {
        assert_eq!(a.x, b.x);
        assert_eq!(a.a, b.a);
        assert_eq!(back.base.stratum_levels[a.stratum], ds.base.stratum_levels[b.stratum]);
    }
}

#[test]
fn missing_outcome_names_the_line() {
    let csv = "a,y,w\n1,2.0,A\n0,NA,A\n1,1.0,B\n0,0.5,B\n";
    match parse_mean_dataset(csv.as_bytes(), &MeanSchema::default()) {
        Err(Error::Missing { line, column }) => {
            assert_eq!(line, 3);
            assert_eq!(column, "y");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn adjusted_estimators_are_centered_and_ordered() {
    for seed in 0..5 {
        let ds = generate_mean_trial(&MeanDgmConfig { n: 400, seed, ..MeanDgmConfig::default() }).unwrap();
        for r in [aipw_ate(&ds, &correct_spec(10), None, 0.05).unwrap(), tmle_ate(&ds, &correct_spec(10), None, 0.05).unwrap()] {
            let mean = r.if_values.iter().sum::<f64>() / r.if_values.len() as f64;
            assert!(mean.abs() < 1e-8, "{}: IF mean {mean}", r.method);
            assert!(r.stratified.variance <= r.simple.variance);
            assert!(r.simple.ci_low <= r.estimate && r.estimate <= r.simple.ci_high);
        }
    }
}

#[test]
fn difference_of_means_ignores_covariates() {
    let ds = generate_mean_trial(&MeanDgmConfig { n: 120, seed: 6, ..MeanDgmConfig::default() }).unwrap();
    let mut scrambled = ds.clone();
    for s in &mut scrambled.base.subjects {
        for v in &mut s.x {
            *v = -3.0 * *v + 1.0;
        }
    }
    let a = baseline(&ds, Baseline::Dom, 0.05).unwrap();
    let b = baseline(&scrambled, Baseline::Dom, 0.05).unwrap();
    assert_eq!(a.estimate, b.estimate);
    assert_eq!(a.simple.variance, b.simple.variance);
}

#[test]
fn strata_only_ancova_is_dom_with_one_stratum() {
    let ds = generate_mean_trial(&MeanDgmConfig { n: 200, seed: 9, ..MeanDgmConfig::default() }).unwrap();
    let mut subjects = ds.base.subjects.clone();
    for s in &mut subjects {
        s.stratum = 0;
    }
    let base = TrialDataset::new(subjects, 1, ds.base.covariate_names.clone(), vec!["all".into()]).unwrap();
    let one = MeanTrialDataset::new(base, ds.y.clone()).unwrap();
    let dom = baseline(&one, Baseline::Dom, 0.05).unwrap();
    let anc = baseline(&one, Baseline::AncovaStrata, 0.05).unwrap();
    assert!((dom.estimate - anc.estimate).abs() < 1e-10);
}

#[test]
fn correct_model_estimates_are_close_to_the_effect() {
    // with n = 4000 the standard error is about 0.05
    let ds = generate_mean_trial(&MeanDgmConfig { n: 4000, seed: 31, ..MeanDgmConfig::default() }).unwrap();
    let r = tmle_ate(&ds, &correct_spec(10), None, 0.05).unwrap();
    assert!((r.estimate - 1.0).abs() < 0.2, "{}", r.estimate);
    let dom = baseline(&ds, Baseline::Dom, 0.05).unwrap();
    assert!(r.simple.variance < dom.simple.variance);
}
