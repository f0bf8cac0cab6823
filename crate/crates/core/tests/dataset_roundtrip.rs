use ecoprod_core::dataset::{
    build_feature_matrix, generate_synthetic, load_complaints, load_feature_csv, load_provinces,
    write_complaints, write_feature_csv, write_provinces, ComplaintRecord, FeaturePlan, ProvinceRecord,
    ProvinceSchema, ResponseLabel, SyntheticSpec,
};
use ecoprod_core::dea::EcoGroup;
use proptest::prelude::*;
use std::collections::BTreeMap;

fn small() -> SyntheticSpec {
    SyntheticSpec {
        n_provinces: 9,
        n_complaints: 120,
        n_clusters: 4,
        embedding_dim: 6,
        seed: 11,
        ..SyntheticSpec::default()
    }
}

#[test]
fn synthetic_files_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&small()).unwrap();
    let pp = dir.path().join("provinces.csv");
    let cp = dir.path().join("complaints.jsonl");
    write_provinces(&pp, &data.provinces, &data.schema).unwrap();
    write_complaints(&cp, &data.complaints).unwrap();
    assert_eq!(load_provinces(&pp, &data.schema).unwrap(), data.provinces);
    assert_eq!(load_complaints(&cp, None).unwrap(), data.complaints);
}

#[test]
fn feature_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = generate_synthetic(&small()).unwrap();
    for (p, g) in data.provinces.iter_mut().zip(&data.truth.groups) {
        p.eco_score = Some(0.5);
        p.eco_group = Some(*g);
    }
    for (c, &k) in data.complaints.iter_mut().zip(&data.truth.clusters) {
        c.cluster_id = Some(k);
    }
    let plan = FeaturePlan::standard(&data.schema, 4);
    let fm = build_feature_matrix(&data.provinces, &data.complaints, &data.schema, &plan).unwrap();
    assert_eq!(fm.num_features(), 1 + 1 + 3 + 12 + 4 + 2);
    let path = dir.path().join("features.csv");
    write_feature_csv(&path, &fm).unwrap();
    assert_eq!(load_feature_csv(&path).unwrap(), fm);
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, -1e-6..1e-6f64, Just(0.0)]
}

fn positive() -> impl Strategy<Value = f64> {
    prop_oneof![1e-9..1e9f64, Just(1.0)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn provinces_round_trip(
        rows in prop::collection::vec(
            (prop::collection::vec(positive(), 2), positive(), finite(), prop::option::of(1e-6..=1.0f64), any::<bool>(), "[A-Za-z ,\"]{0,12}"),
            0..8),
    ) {
        let schema = ProvinceSchema {
            input_columns: vec!["a".into(), "b".into()],
            output_column: "gdp_output".into(),
            fiscal_columns: vec!["f".into()],
        };
        let recs: Vec<ProvinceRecord> = rows.into_iter().enumerate().map(|(i, (x, y, f, s, hi, name))| ProvinceRecord {
            id: i as u64,
            name: name.trim().to_string(),
            env_inputs: x,
            gdp_output: y,
            fiscal_features: BTreeMap::from([("f".to_string(), f)]),
            eco_score: s,
            eco_group: s.map(|_| if hi { EcoGroup::High } else { EcoGroup::Low }),
        }).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        write_provinces(&p, &recs, &schema).unwrap();
        prop_assert_eq!(load_provinces(&p, &schema).unwrap(), recs);
    }

    #[test]
    fn complaints_round_trip(
        rows in prop::collection::vec(
            (prop::collection::vec(finite(), 3), finite(), any::<bool>(), any::<bool>(), prop::option::of(0usize..10)),
            1..8),
    ) {
        let recs: Vec<ComplaintRecord> = rows.into_iter().enumerate().map(|(i, (e, s, a, l, c))| ComplaintRecord {
            id: i as u64,
            province_id: 3,
            embedding: e,
            sentiment: s,
            attention: a,
            response_label: if l { ResponseLabel::CoProduction } else { ResponseLabel::OneWay },
            cluster_id: c,
        }).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        write_complaints(&p, &recs).unwrap();
        prop_assert_eq!(load_complaints(&p, Some(3)).unwrap(), recs);
    }
}
