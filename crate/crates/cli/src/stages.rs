//! Stage runners shared by the standalone subcommands and `pipeline`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use ecoprod_core::causal::{
    cevae_ate, cevae_fit, diff_in_means, estimate, propensity, AteEstimate, CausalDataset, Method, PROPENSITY_CLIP,
};
use ecoprod_core::dataset::{
    embedding_matrix, infer_province_schema, load_complaints, load_feature_csv, load_provinces, write_feature_csv,
    build_feature_matrix, FeaturePlan, ProvinceSchema,
};
use ecoprod_core::dea::{dea_scores, split_by_median, DeaOptions, DeaPanel, EcoGroup, Rts};
use ecoprod_core::gbm::{
    archetype_clusters, cross_validate, group_means, shap_pairs, shap_summary, train_classifier, tree_shap,
    BoostedModel, FeatureImportance, TrainConfig,
};
use ecoprod_core::linalg::lower_median;
use ecoprod_core::rng::derive_seed;
use ecoprod_core::spectral::{
    centroid_shift, elbow_from_curve, pca_2d, permutation_test_with_observed, rate_by_cluster, spectral_cluster,
    wcss_curve, KMeansOptions, SpectralOptions,
};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{stage_seed, CausalConfig, ClusterConfig, PipelineConfig, STAGES};
use crate::error::{Failure, StageResult};
use crate::svg;

pub const DEA_SCORES: &str = "dea_scores.csv";
pub const CLUSTERS_CSV: &str = "clusters.csv";
pub const CLUSTER_REPORT: &str = "cluster_report.json";
pub const CLUSTERS_SVG: &str = "clusters.svg";
pub const FEATURES_CSV: &str = "features.csv";
pub const MODEL_JSON: &str = "model.json";
pub const CV_REPORT: &str = "cv_report.json";
pub const SHAP_CSV: &str = "shap.csv";
pub const SHAP_SVG: &str = "shap_summary.svg";
pub const SHAP_JSON: &str = "shap_summary.json";
pub const ARCHETYPES_JSON: &str = "archetypes.json";
pub const ARCHETYPES_SVG: &str = "archetypes.svg";
pub const ATE_REPORT: &str = "ate_report.json";
pub const SUMMARY: &str = "summary.json";
pub const FAILED: &str = "FAILED";

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<BufWriter<File>>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

pub fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
        .map_err(Failure::input)
}

fn require_file(path: &Path, stage: &'static str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(anyhow!("input file not found: {}", path.display())).input_in(stage)
    }
}

// ---------------------------------------------------------------------------
// Shared artifact readers

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeaRow {
    pub id: u64,
    pub theta_crs: f64,
    pub theta_vrs: f64,
    pub group: String,
}

pub fn read_dea_scores(path: &Path) -> anyhow::Result<BTreeMap<u64, (f64, f64, EcoGroup)>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (i, row) in rdr.deserialize::<DeaRow>().enumerate() {
        let r = row.with_context(|| format!("{} row {}", path.display(), i + 1))?;
        let g: EcoGroup = r
            .group
            .parse()
            .map_err(|e: String| anyhow!("{} row {}: {e}", path.display(), i + 1))?;
        out.insert(r.id, (r.theta_crs, r.theta_vrs, g));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct ClusterRow {
    complaint_id: u64,
    cluster: usize,
}

pub fn read_clusters(path: &Path) -> anyhow::Result<HashMap<u64, usize>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    rdr.deserialize::<ClusterRow>()
        .enumerate()
        .map(|(i, r)| {
            r.map(|r| (r.complaint_id, r.cluster))
                .with_context(|| format!("{} row {}", path.display(), i + 1))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// DEA

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeaSummary {
    pub units: usize,
    pub rts: Rts,
    pub median_theta: f64,
    pub high: usize,
    pub low: usize,
    pub frontier_crs: usize,
    pub frontier_vrs: usize,
}

/// Scores every province under CRS and VRS and splits at the median of the
/// configured returns to scale. Writes `dea_scores.csv`.
pub fn run_dea(provinces: &Path, schema: &ProvinceSchema, rts: Rts, out: &Path) -> Result<DeaSummary, Failure> {
    const S: &str = "dea";
    require_file(provinces, S)?;
    let records = load_provinces(provinces, schema).input_in(S)?;
    let ids: Vec<String> = records.iter().map(|r| r.id.to_string()).collect();
    let inputs: Vec<Vec<f64>> = records.iter().map(|r| r.env_inputs.clone()).collect();
    let outputs: Vec<Vec<f64>> = records.iter().map(|r| vec![r.gdp_output]).collect();
    let panel = DeaPanel::from_units(ids, &inputs, &outputs).input_in(S)?;
    let crs = dea_scores(&panel, DeaOptions { rts: Rts::Crs }).failed_in(S)?;
    let vrs = dea_scores(&panel, DeaOptions { rts: Rts::Vrs }).failed_in(S)?;
    let theta = match rts {
        Rts::Crs => &crs.theta,
        Rts::Vrs => &vrs.theta,
    };
    let groups = split_by_median(theta).failed_in(S)?;
    let mut w = csv_writer(&out.join(DEA_SCORES)).failed_in(S)?;
    w.write_record(["id", "theta_crs", "theta_vrs", "group"]).failed_in(S)?;
    for (i, r) in records.iter().enumerate() {
        w.write_record([
            r.id.to_string(),
            crs.theta[i].to_string(),
            vrs.theta[i].to_string(),
            groups[i].as_str().to_string(),
        ])
        .failed_in(S)?;
    }
    w.flush().failed_in(S)?;
    let frontier = |t: &[f64]| t.iter().filter(|&&v| v >= 1.0 - 1e-9).count();
    let high = groups.iter().filter(|g| g.is_high()).count();
    Ok(DeaSummary {
        units: records.len(),
        rts,
        median_theta: lower_median(theta).expect("at least two units"),
        high,
        low: records.len() - high,
        frontier_crs: frontier(&crs.theta),
        frontier_vrs: frontier(&vrs.theta),
    })
}

// ---------------------------------------------------------------------------
// Clustering

#[derive(Debug, Clone, PartialEq, Serialize)]
struct PermutationReport {
    replicates: usize,
    smoothed: bool,
    s_obs: f64,
    p: f64,
    s_perm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ShiftReport {
    cluster: usize,
    n_high: usize,
    n_low: usize,
    distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ClusterReport {
    n: usize,
    embedding_dim: usize,
    k: usize,
    k_selection: &'static str,
    k_max: usize,
    wcss_curve: Vec<f64>,
    elbow_k: Option<usize>,
    sigma: f64,
    silhouette: f64,
    kmeans_wcss: f64,
    permutation: Option<PermutationReport>,
    cluster_sizes: Vec<usize>,
    coproduction_rate: Vec<Option<f64>>,
    centroid_shift: Option<Vec<ShiftReport>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSummary {
    pub n: usize,
    pub k: usize,
    pub elbow_k: Option<usize>,
    pub silhouette: f64,
    pub p_value: Option<f64>,
    pub cluster_sizes: Vec<usize>,
}

/// Spectral clustering of the complaint embeddings. Writes `clusters.csv`,
/// `cluster_report.json` and `clusters.svg`. Centroid shifts between High
/// and Low provinces are reported when DEA scores are given.
pub fn run_cluster(
    complaints: &Path,
    embedding_dim: Option<usize>,
    dea: Option<&Path>,
    cfg: &ClusterConfig,
    seed: u64,
    out: &Path,
) -> Result<ClusterSummary, Failure> {
    const S: &str = "cluster";
    require_file(complaints, S)?;
    if let Some(d) = dea {
        require_file(d, S)?;
    }
    cfg.validate().input_in(S)?;
    let records = load_complaints(complaints, embedding_dim).input_in(S)?;
    if records.len() < 3 {
        return Err(anyhow!("need at least 3 complaints, got {}", records.len())).input_in(S);
    }
    let emb = embedding_matrix(&records);
    let n = emb.rows();
    let k_max = cfg.k_max.min(n);
    let t = Instant::now();
    let curve = wcss_curve(&emb, k_max, derive_seed(seed, 0)).failed_in(S)?;
    let elbow = elbow_from_curve(&curve);
    let (k, selection) = match (cfg.k, elbow) {
        (Some(k), _) => (k, "fixed"),
        (None, Some(k)) => (k, "elbow"),
        (None, None) => return Err(anyhow!("elbow rule found no k in 1..={k_max}")).failed_in(S),
    };
    if k > n {
        return Err(anyhow!("k = {k} exceeds {n} complaints")).input_in(S);
    }
    info!("cluster: wcss curve {:.1?}, k = {k} ({selection})", t.elapsed());
    let opts = SpectralOptions {
        row_normalize: cfg.row_normalize,
        kmeans: KMeansOptions {
            n_init: cfg.n_init,
            max_iter: cfg.max_iter,
        },
    };
    let sc = spectral_cluster(&emb, k, derive_seed(seed, 1), opts).failed_in(S)?;
    let labels = sc.labels().to_vec();
    info!("cluster: spectral clustering {:.1?}, silhouette {:.4}", t.elapsed(), sc.silhouette);
    let permutation = if cfg.permutations > 0 {
        let r = permutation_test_with_observed(
            &emb,
            k,
            sc.silhouette,
            cfg.permutations,
            derive_seed(seed, 2),
            cfg.smoothed_p,
            opts,
        )
        .failed_in(S)?;
        info!("cluster: permutation test {:.1?}, p = {}", t.elapsed(), r.p);
        Some(PermutationReport {
            replicates: cfg.permutations,
            smoothed: cfg.smoothed_p,
            s_obs: r.s_obs,
            p: r.p,
            s_perm: r.s_perm,
        })
    } else {
        None
    };
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    let targets: Vec<u8> = records.iter().map(|c| c.response_label.code()).collect();
    let rates = rate_by_cluster(&labels, &targets, k).failed_in(S)?;
    let shifts = match dea {
        Some(path) => {
            let scores = read_dea_scores(path).input_in(S)?;
            let groups = records
                .iter()
                .map(|c| {
                    scores
                        .get(&c.province_id)
                        .map(|s| s.2)
                        .ok_or_else(|| anyhow!("province {} of complaint {} has no DEA score", c.province_id, c.id))
                })
                .collect::<anyhow::Result<Vec<_>>>()
                .input_in(S)?;
            let shifts = centroid_shift(&emb, &labels, &groups, k).failed_in(S)?;
            Some(
                shifts
                    .into_iter()
                    .map(|s| ShiftReport {
                        cluster: s.cluster,
                        n_high: s.n_high,
                        n_low: s.n_low,
                        distance: s.distance,
                    })
                    .collect(),
            )
        }
        None => None,
    };

    let mut w = csv_writer(&out.join(CLUSTERS_CSV)).failed_in(S)?;
    for (c, &l) in records.iter().zip(&labels) {
        w.serialize(ClusterRow {
            complaint_id: c.id,
            cluster: l,
        })
        .failed_in(S)?;
    }
    w.flush().failed_in(S)?;

    let proj = pca_2d(&emb).failed_in(S)?;
    let points: Vec<(f64, f64)> = proj.iter_rows().map(|r| (r[0], r[1])).collect();
    let plot = svg::scatter(
        &points,
        &labels,
        &format!("Complaint embeddings, {k} spectral clusters"),
        "PC 1",
        "PC 2",
    );
    write_text(&out.join(CLUSTERS_SVG), &plot).failed_in(S)?;

    let report = ClusterReport {
        n,
        embedding_dim: emb.cols(),
        k,
        k_selection: selection,
        k_max,
        wcss_curve: curve,
        elbow_k: elbow,
        sigma: sc.sigma,
        silhouette: sc.silhouette,
        kmeans_wcss: sc.assignment.wcss,
        permutation: permutation.clone(),
        cluster_sizes: sizes.clone(),
        coproduction_rate: rates,
        centroid_shift: shifts,
    };
    write_json(&out.join(CLUSTER_REPORT), &report).failed_in(S)?;
    Ok(ClusterSummary {
        n,
        k,
        elbow_k: elbow,
        silhouette: sc.silhouette,
        p_value: permutation.map(|p| p.p),
        cluster_sizes: sizes,
    })
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize)]
struct CvFile<'a> {
    config: &'a TrainConfig,
    rows: usize,
    features: &'a [String],
    fold_accuracy: &'a [f64],
    fold_auc: &'a [f64],
    mean_accuracy: f64,
    mean_auc: f64,
    majority_share: f64,
    train_loss_history: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub rows: usize,
    pub features: usize,
    pub mean_accuracy: f64,
    pub mean_auc: f64,
    pub majority_share: f64,
}

pub struct TrainInputs<'a> {
    pub provinces: &'a Path,
    pub schema: &'a ProvinceSchema,
    pub complaints: &'a Path,
    pub embedding_dim: Option<usize>,
    pub dea_scores: &'a Path,
    pub clusters: &'a Path,
    pub plan: Option<&'a FeaturePlan>,
    pub rts: Rts,
}

/// Builds the feature table, cross-validates and fits the classifier.
/// Writes `features.csv`, `model.json` and `cv_report.json`.
pub fn run_train(inp: &TrainInputs<'_>, cfg: &TrainConfig, out: &Path) -> Result<TrainSummary, Failure> {
    const S: &str = "train";
    for p in [inp.provinces, inp.complaints, inp.dea_scores, inp.clusters] {
        require_file(p, S)?;
    }
    cfg.validate().input_in(S)?;
    let scores = read_dea_scores(inp.dea_scores).input_in(S)?;
    let mut provinces = load_provinces(inp.provinces, inp.schema).input_in(S)?;
    for p in &mut provinces {
        let &(crs, vrs, g) = scores
            .get(&p.id)
            .ok_or_else(|| anyhow!("province {} missing from {}", p.id, inp.dea_scores.display()))
            .input_in(S)?;
        p.eco_score = Some(match inp.rts {
            Rts::Crs => crs,
            Rts::Vrs => vrs,
        });
        p.eco_group = Some(g);
    }
    let clusters = read_clusters(inp.clusters).input_in(S)?;
    let mut complaints = load_complaints(inp.complaints, inp.embedding_dim).input_in(S)?;
    for c in &mut complaints {
        c.cluster_id = Some(
            *clusters
                .get(&c.id)
                .ok_or_else(|| anyhow!("complaint {} missing from {}", c.id, inp.clusters.display()))
                .input_in(S)?,
        );
    }
    let k = clusters.values().max().map_or(1, |&m| m + 1);
    let plan = inp
        .plan
        .cloned()
        .unwrap_or_else(|| FeaturePlan::standard(inp.schema, k));
    let fm = build_feature_matrix(&provinces, &complaints, inp.schema, &plan).input_in(S)?;
    write_feature_csv(&out.join(FEATURES_CSV), &fm).failed_in(S)?;
    let t = Instant::now();
    let cv = cross_validate(&fm, cfg).failed_in(S)?;
    let (model, report) = train_classifier(&fm, cfg).failed_in(S)?;
    info!(
        "train: {} rows x {} features, cv accuracy {:.4} ({:.1?})",
        fm.num_rows(),
        fm.num_features(),
        cv.mean_accuracy,
        t.elapsed()
    );
    write_json(&out.join(MODEL_JSON), &model).failed_in(S)?;
    write_json(
        &out.join(CV_REPORT),
        &CvFile {
            config: cfg,
            rows: fm.num_rows(),
            features: &fm.columns,
            fold_accuracy: &cv.fold_accuracy,
            fold_auc: &cv.fold_auc,
            mean_accuracy: cv.mean_accuracy,
            mean_auc: cv.mean_auc,
            majority_share: cv.majority_share,
            train_loss_history: &report.loss_history,
        },
    )
    .failed_in(S)?;
    Ok(TrainSummary {
        rows: fm.num_rows(),
        features: fm.num_features(),
        mean_accuracy: cv.mean_accuracy,
        mean_auc: cv.mean_auc,
        majority_share: cv.majority_share,
    })
}

// ---------------------------------------------------------------------------
// Explanation

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ProvinceArchetype {
    province_id: u64,
    mean_probability: f64,
    archetype: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ArchetypeProfile {
    archetype: usize,
    label: &'static str,
    centroid: f64,
    provinces: usize,
    rows: usize,
    /// Mean SHAP value per feature within the archetype, in ranking order.
    mean_shap: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ArchetypeFile {
    provinces: Vec<ProvinceArchetype>,
    archetypes: Option<Vec<ArchetypeProfile>>,
    error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplainSummary {
    pub base: f64,
    pub max_additivity_error: f64,
    pub top_features: Vec<FeatureImportance>,
    pub archetype_sizes: Option<[usize; 2]>,
}

const BEESWARM_FEATURES: usize = 15;
const BEESWARM_POINTS: usize = 2000;

/// TreeSHAP attributions, summary plot and province archetypes. Writes
/// `shap.csv`, `shap_summary.json`, `shap_summary.svg`, `archetypes.json`
/// and `archetypes.svg`.
pub fn run_explain(model_path: &Path, features: &Path, out: &Path) -> Result<ExplainSummary, Failure> {
    const S: &str = "explain";
    require_file(model_path, S)?;
    require_file(features, S)?;
    let file = File::open(model_path)
        .with_context(|| format!("cannot open {}", model_path.display()))
        .input_in(S)?;
    let model: BoostedModel = serde_json::from_reader(BufReader::new(file))
        .with_context(|| format!("{} is not a model file", model_path.display()))
        .input_in(S)?;
    model.validate().input_in(S)?;
    let fm = load_feature_csv(features).input_in(S)?;
    if model.feature_names != fm.columns {
        return Err(anyhow!("model features do not match the columns of {}", features.display())).input_in(S);
    }
    let shap = tree_shap(&model, &fm.rows).failed_in(S)?;
    let (n, d) = shap.phi.shape();
    let mut max_err = 0.0f64;
    for i in 0..n {
        let total = shap.base + shap.phi.row(i).iter().sum::<f64>();
        max_err = max_err.max((total - model.margin_unchecked(fm.rows.row(i))).abs());
    }
    if max_err > 1e-9 {
        warn!("explain: SHAP additivity error {max_err:e}");
    }

    let mut w = csv_writer(&out.join(SHAP_CSV)).failed_in(S)?;
    let mut header = vec!["complaint_id".to_string(), "province_id".into()];
    header.extend(fm.columns.iter().cloned());
    w.write_record(&header).failed_in(S)?;
    for i in 0..n {
        let mut rec = vec![fm.complaint_ids[i].to_string(), fm.province_ids[i].to_string()];
        rec.extend(shap.phi.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).failed_in(S)?;
    }
    w.flush().failed_in(S)?;

    let summary = shap_summary(&shap, &fm.columns);
    #[derive(Serialize)]
    struct ShapFile<'a> {
        base: f64,
        max_additivity_error: f64,
        ranking: &'a [FeatureImportance],
    }
    write_json(
        &out.join(SHAP_JSON),
        &ShapFile {
            base: shap.base,
            max_additivity_error: max_err,
            ranking: &summary.ranking,
        },
    )
    .failed_in(S)?;
    let stride = n.div_ceil(BEESWARM_POINTS).max(1);
    let rows: Vec<(String, Vec<(f64, f64)>)> = summary
        .ranking
        .iter()
        .take(BEESWARM_FEATURES.min(d))
        .map(|f| {
            let pairs = shap_pairs(&fm.rows, &shap, f.index);
            (f.name.clone(), pairs.into_iter().step_by(stride).collect())
        })
        .collect();
    write_text(
        &out.join(SHAP_SVG),
        &svg::beeswarm(&rows, "SHAP summary (colour: feature value, blue low to red high)"),
    )
    .failed_in(S)?;

    let probs = model.predict_rows(&fm.rows).failed_in(S)?;
    let (ids, means) = group_means(&probs, &fm.province_ids);
    let (file, sizes) = match archetype_clusters(&means) {
        Ok(a) => {
            let label_of: HashMap<u64, usize> = ids.iter().copied().zip(a.labels.iter().copied()).collect();
            let profiles = (0..2)
                .map(|arch| {
                    let rows: Vec<usize> = (0..n).filter(|&i| label_of[&fm.province_ids[i]] == arch).collect();
                    let mean_shap = summary
                        .ranking
                        .iter()
                        .map(|f| {
                            let m = rows.iter().map(|&i| shap.phi[(i, f.index)]).sum::<f64>() / rows.len().max(1) as f64;
                            (f.name.clone(), m)
                        })
                        .collect();
                    ArchetypeProfile {
                        archetype: arch,
                        label: if arch == 1 { "co-productive" } else { "one-way" },
                        centroid: a.centroids[arch],
                        provinces: a.labels.iter().filter(|&&l| l == arch).count(),
                        rows: rows.len(),
                        mean_shap,
                    }
                })
                .collect::<Vec<_>>();
            let sizes = [profiles[0].provinces, profiles[1].provinces];
            let provinces = ids
                .iter()
                .zip(&means)
                .zip(&a.labels)
                .map(|((&id, &p), &l)| ProvinceArchetype {
                    province_id: id,
                    mean_probability: p,
                    archetype: l,
                })
                .collect();
            (
                ArchetypeFile {
                    provinces,
                    archetypes: Some(profiles),
                    error: None,
                },
                Some(sizes),
            )
        }
        Err(e) => {
            warn!("explain: no archetype split: {e}");
            let provinces = ids
                .iter()
                .zip(&means)
                .map(|(&id, &p)| ProvinceArchetype {
                    province_id: id,
                    mean_probability: p,
                    archetype: 0,
                })
                .collect();
            (
                ArchetypeFile {
                    provinces,
                    archetypes: None,
                    error: Some(e.to_string()),
                },
                None,
            )
        }
    };
    let mut order: Vec<usize> = (0..file.provinces.len()).collect();
    order.sort_by(|&a, &b| {
        file.provinces[a]
            .mean_probability
            .total_cmp(&file.provinces[b].mean_probability)
            .then(a.cmp(&b))
    });
    let plot = svg::bars(
        &order
            .iter()
            .map(|&i| format!("province {}", file.provinces[i].province_id))
            .collect::<Vec<_>>(),
        &order.iter().map(|&i| file.provinces[i].mean_probability).collect::<Vec<_>>(),
        &order.iter().map(|&i| file.provinces[i].archetype).collect::<Vec<_>>(),
        "Mean predicted co-production probability by province (colour: archetype)",
        "probability",
    );
    write_text(&out.join(ARCHETYPES_SVG), &plot).failed_in(S)?;
    write_json(&out.join(ARCHETYPES_JSON), &file).failed_in(S)?;
    Ok(ExplainSummary {
        base: shap.base,
        max_additivity_error: max_err,
        top_features: summary.ranking.into_iter().take(5).collect(),
        archetype_sizes: sizes,
    })
}

// ---------------------------------------------------------------------------
// Causal estimation

#[derive(Debug, Clone, PartialEq, Serialize)]
struct PropensityReport {
    min: f64,
    max: f64,
    mean_treated: f64,
    mean_control: f64,
    at_clip_bounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct MethodReport {
    #[serde(flatten)]
    estimate: AteEstimate,
    interval: &'static str,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    cevae: Option<CevaeDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct CevaeDiagnostics {
    latent_dim: usize,
    hidden_layers: usize,
    hidden_units: usize,
    epochs: usize,
    mc_samples: usize,
    final_loss: f64,
    loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct AteReport<'a> {
    n: usize,
    n_treated: usize,
    treatment: &'a str,
    outcome: &'a str,
    covariates: &'a [String],
    aggregation: ecoprod_core::causal::Aggregation,
    bootstrap: usize,
    level: f64,
    diff_in_means: f64,
    propensity: PropensityReport,
    estimates: Vec<MethodReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CausalSummary {
    pub n: usize,
    pub diff_in_means: f64,
    pub estimates: Vec<AteEstimate>,
}

fn method_stream(m: Method) -> u64 {
    match m {
        Method::Cevae => 0,
        Method::S => 1,
        Method::T => 2,
        Method::X => 3,
        Method::R => 4,
        Method::DiffMeans => 5,
    }
}

/// Treatment-effect estimates for every configured method. Writes
/// `ate_report.json`.
pub fn run_causal(features: &Path, cfg: &CausalConfig, seed: u64, out: &Path) -> Result<CausalSummary, Failure> {
    const S: &str = "causal";
    require_file(features, S)?;
    cfg.validate().input_in(S)?;
    let fm = load_feature_csv(features).input_in(S)?;
    let data = CausalDataset::from_features(&fm, &cfg.covariates, &cfg.treatment, &cfg.outcome).input_in(S)?;
    let e = propensity(&data, &cfg.propensity).failed_in(S)?;
    let arm_mean = |arm: u8| {
        let v: Vec<f64> = (0..data.len()).filter(|&i| data.t[i] == arm).map(|i| e[i]).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let prop = PropensityReport {
        min: e.iter().copied().fold(f64::INFINITY, f64::min),
        max: e.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_treated: arm_mean(1),
        mean_control: arm_mean(0),
        at_clip_bounds: e
            .iter()
            .filter(|&&v| v <= PROPENSITY_CLIP.0 || v >= PROPENSITY_CLIP.1)
            .count(),
    };
    let mut reports = Vec::new();
    for &m in &cfg.methods {
        let s = derive_seed(seed, method_stream(m));
        let t = Instant::now();
        let report = if m == Method::Cevae {
            let cc = cfg.cevae(s).input_in(S)?;
            let model = cevae_fit(&data, &cc).failed_in(S)?;
            let est = cevae_ate(&model, &data, cc.mc_samples, cfg.bootstrap, cfg.aggregation).failed_in(S)?;
            MethodReport {
                estimate: est,
                interval: "percentile bootstrap of fitted unit effects",
                seed: s,
                cevae: Some(CevaeDiagnostics {
                    latent_dim: cc.latent_dim,
                    hidden_layers: cc.hidden_layers,
                    hidden_units: cc.hidden_units,
                    epochs: cc.epochs,
                    mc_samples: cc.mc_samples,
                    final_loss: *model.loss_history.last().expect("epochs >= 1"),
                    loss_history: model.loss_history.clone(),
                }),
            }
        } else {
            MethodReport {
                estimate: estimate(m, &data, &cfg.meta(s), cfg.bootstrap).failed_in(S)?,
                interval: "percentile bootstrap with refitting",
                seed: s,
                cevae: None,
            }
        };
        info!(
            "causal: {} ate {:.4} [{:.4}, {:.4}] ({:.1?})",
            m.as_str(),
            report.estimate.ate,
            report.estimate.ci_low,
            report.estimate.ci_high,
            t.elapsed()
        );
        reports.push(report);
    }
    let dm = diff_in_means(&data);
    let report = AteReport {
        n: data.len(),
        n_treated: data.t.iter().filter(|&&v| v == 1).count(),
        treatment: &cfg.treatment,
        outcome: &cfg.outcome,
        covariates: &cfg.covariates,
        aggregation: cfg.aggregation,
        bootstrap: cfg.bootstrap,
        level: 0.95,
        diff_in_means: dm,
        propensity: prop,
        estimates: reports.clone(),
    };
    write_json(&out.join(ATE_REPORT), &report).failed_in(S)?;
    Ok(CausalSummary {
        n: data.len(),
        diff_in_means: dm,
        estimates: reports.into_iter().map(|r| r.estimate).collect(),
    })
}

// ---------------------------------------------------------------------------
// Pipeline

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineSummary {
    pub seed: u64,
    pub stage_seeds: BTreeMap<&'static str, u64>,
    pub inputs: BTreeMap<&'static str, String>,
    pub schema: ProvinceSchema,
    pub artifacts: BTreeMap<&'static str, Vec<&'static str>>,
    pub dea: DeaSummary,
    pub cluster: ClusterSummary,
    pub train: TrainSummary,
    pub explain: ExplainSummary,
    pub causal: CausalSummary,
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |f| f.to_string_lossy().into_owned())
}

/// Runs every stage in order into `out`. On failure a `FAILED` marker naming
/// the stage is written beside whatever artifacts were produced.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineSummary, Failure> {
    cfg.validate().map_err(Failure::input)?;
    ensure_dir(out)?;
    let marker = out.join(FAILED);
    if marker.exists() {
        std::fs::remove_file(&marker)
            .with_context(|| format!("cannot remove stale {}", marker.display()))
            .map_err(Failure::input)?;
    }
    let result = pipeline_stages(cfg, out);
    match result {
        Ok(summary) => {
            write_json(&out.join(SUMMARY), &summary).failed_in("summary")?;
            Ok(summary)
        }
        Err(f) => {
            let text = format!("stage: {}\n{f}\n", f.stage().unwrap_or("config"));
            if let Err(e) = std::fs::write(&marker, text) {
                warn!("cannot write {}: {e}", marker.display());
            }
            Err(f)
        }
    }
}

fn pipeline_stages(cfg: &PipelineConfig, out: &Path) -> Result<PipelineSummary, Failure> {
    let schema = match &cfg.schema {
        Some(s) => s.clone(),
        None => infer_province_schema(&cfg.provinces, "gdp_output").input_in("dea")?,
    };
    let seed_of = |s: &str| stage_seed(cfg.seed, s);
    let t = Instant::now();
    let dea = run_dea(&cfg.provinces, &schema, cfg.dea.rts, out)?;
    info!("pipeline: dea done ({:.1?})", t.elapsed());
    let cluster = run_cluster(
        &cfg.complaints,
        cfg.embedding_dim,
        Some(&out.join(DEA_SCORES)),
        &cfg.cluster,
        seed_of("cluster"),
        out,
    )?;
    info!("pipeline: cluster done ({:.1?})", t.elapsed());
    let train_cfg = TrainConfig {
        seed: seed_of("train"),
        ..cfg.train
    };
    let train = run_train(
        &TrainInputs {
            provinces: &cfg.provinces,
            schema: &schema,
            complaints: &cfg.complaints,
            embedding_dim: cfg.embedding_dim,
            dea_scores: &out.join(DEA_SCORES),
            clusters: &out.join(CLUSTERS_CSV),
            plan: cfg.features.as_ref(),
            rts: cfg.dea.rts,
        },
        &train_cfg,
        out,
    )?;
    info!("pipeline: train done ({:.1?})", t.elapsed());
    let explain = run_explain(&out.join(MODEL_JSON), &out.join(FEATURES_CSV), out)?;
    info!("pipeline: explain done ({:.1?})", t.elapsed());
    let causal = run_causal(&out.join(FEATURES_CSV), &cfg.causal, seed_of("causal"), out)?;
    info!("pipeline: causal done ({:.1?})", t.elapsed());

    let stage_seeds = STAGES
        .iter()
        .filter(|&&s| s != "synth")
        .map(|&s| (s, seed_of(s)))
        .collect();
    let mut artifacts = BTreeMap::new();
    artifacts.insert("dea", vec![DEA_SCORES]);
    artifacts.insert("cluster", vec![CLUSTERS_CSV, CLUSTER_REPORT, CLUSTERS_SVG]);
    artifacts.insert("train", vec![FEATURES_CSV, MODEL_JSON, CV_REPORT]);
    artifacts.insert("explain", vec![SHAP_CSV, SHAP_JSON, SHAP_SVG, ARCHETYPES_JSON, ARCHETYPES_SVG]);
    artifacts.insert("causal", vec![ATE_REPORT]);
    let mut inputs = BTreeMap::new();
    inputs.insert("provinces", file_name(&cfg.provinces));
    inputs.insert("complaints", file_name(&cfg.complaints));
    Ok(PipelineSummary {
        seed: cfg.seed,
        stage_seeds,
        inputs,
        schema,
        artifacts,
        dea,
        cluster,
        train,
        explain,
        causal,
    })
}

/// Checks the stage artifacts listed in a summary exist under `out`.
pub fn missing_artifacts(out: &Path) -> anyhow::Result<Vec<String>> {
    let text = std::fs::read_to_string(out.join(SUMMARY))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let mut missing = Vec::new();
    let Some(map) = v["artifacts"].as_object() else {
        bail!("summary has no artifact list");
    };
    for files in map.values() {
        for f in files.as_array().into_iter().flatten() {
            let name = f.as_str().unwrap_or_default();
            if !out.join(name).is_file() {
                missing.push(name.to_string());
            }
        }
    }
    Ok(missing)
}
