//! Input-oriented data envelopment analysis.
//!
//! For each decision-making unit `o` the envelopment program
//!
//! ```text
//! min θ  s.t.  Σ_j λ_j x_ij ≤ θ x_io   (every input i)
//!              Σ_j λ_j y_rj ≥ y_ro     (every output r)
//!              Σ_j λ_j = 1             (VRS only)
//!              λ ≥ 0
//! ```
//!
//! is solved with [`crate::lp`]. Rows are rescaled by their largest entry
//! before solving; θ is invariant to per-row units so this only improves
//! conditioning.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{lower_median, Matrix};
use crate::lp::{self, LinearProgram, LpError, LpStatus, Relation};

/// Values of θ within this distance of 1 are snapped to exactly 1, so that
/// frontier units report an exact score of one.
pub const THETA_SNAP_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum DeaError {
    #[error("invalid panel: {0}")]
    InvalidPanel(String),
    #[error("unit {unit} has zero input '{input}' while other units use it")]
    DegenerateUnit { unit: String, input: usize },
    #[error("LP for unit {unit} failed: {source}")]
    Solver {
        unit: String,
        #[source]
        source: LpError,
    },
    #[error("LP for unit {unit} returned status {status:?}")]
    UnexpectedStatus { unit: String, status: LpStatus },
    #[error("efficiency {theta} for unit {unit} is outside (0, 1]")]
    ThetaOutOfRange { unit: String, theta: f64 },
    #[error("need at least two units to split by median, got {0}")]
    TooFewUnits(usize),
    #[error("no median split exists: every score is on one side of the median {median}")]
    NoSplit { median: f64 },
}

/// Returns to scale of the reference technology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Rts {
    Crs,
    #[default]
    Vrs,
}

/// Orientation is always input-oriented; only the returns-to-scale varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct DeaOptions {
    pub rts: Rts,
}

/// Inputs (`m × n`) and outputs (`s × n`), one column per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct DeaPanel {
    inputs: Matrix,
    outputs: Matrix,
    ids: Vec<String>,
}

impl DeaPanel {
    pub fn new(inputs: Matrix, outputs: Matrix, ids: Vec<String>) -> Result<Self, DeaError> {
        let n = ids.len();
        if n == 0 {
            return Err(DeaError::InvalidPanel("no units".into()));
        }
        if inputs.cols() != n || outputs.cols() != n {
            return Err(DeaError::InvalidPanel(format!(
                "{n} unit ids but inputs have {} columns and outputs {}",
                inputs.cols(),
                outputs.cols()
            )));
        }
        if inputs.rows() == 0 || outputs.rows() == 0 {
            return Err(DeaError::InvalidPanel(
                "need at least one input and one output".into(),
            ));
        }
        if !inputs.is_finite() || !outputs.is_finite() {
            return Err(DeaError::InvalidPanel("non-finite value".into()));
        }
        for j in 0..n {
            let col: Vec<f64> = inputs.column(j);
            if col.iter().any(|&v| v < 0.0) {
                return Err(DeaError::InvalidPanel(format!(
                    "unit {} has a negative input",
                    ids[j]
                )));
            }
            if col.iter().all(|&v| v == 0.0) {
                return Err(DeaError::InvalidPanel(format!(
                    "unit {} has no positive input",
                    ids[j]
                )));
            }
            if outputs.column(j).iter().any(|&v| v <= 0.0) {
                return Err(DeaError::InvalidPanel(format!(
                    "unit {} has a non-positive output",
                    ids[j]
                )));
            }
        }
        Ok(Self {
            inputs,
            outputs,
            ids,
        })
    }

    /// Builds a panel from per-unit rows (`inputs[j]`, `outputs[j]`).
    pub fn from_units(
        ids: Vec<String>,
        inputs: &[Vec<f64>],
        outputs: &[Vec<f64>],
    ) -> Result<Self, DeaError> {
        let x = Matrix::from_rows(inputs)
            .map_err(|e| DeaError::InvalidPanel(e.to_string()))?
            .transpose();
        let y = Matrix::from_rows(outputs)
            .map_err(|e| DeaError::InvalidPanel(e.to_string()))?
            .transpose();
        Self::new(x, y, ids)
    }

    pub fn num_units(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn outputs(&self) -> &Matrix {
        &self.outputs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeaScores {
    pub theta: Vec<f64>,
    /// Row `o` holds the intensity weights λ found when evaluating unit `o`.
    pub lambda: Matrix,
}

fn scaled_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let s = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    out
}

/// Builds the envelopment LP for unit `o`. Variables are `[θ, λ_1..λ_n]`.
pub fn envelopment_program(
    panel: &DeaPanel,
    o: usize,
    opts: DeaOptions,
) -> Result<LinearProgram, DeaError> {
    let n = panel.num_units();
    let x = scaled_rows(&panel.inputs);
    let y = scaled_rows(&panel.outputs);
    let wrap = |e: LpError| DeaError::Solver {
        unit: panel.ids[o].clone(),
        source: e,
    };

    let mut c = vec![0.0; n + 1];
    c[0] = 1.0;
    let mut prog = LinearProgram::new(c).map_err(wrap)?;
    for i in 0..x.rows() {
        let row = x.row(i);
        if row[o] == 0.0 && row.iter().any(|&v| v > 0.0) {
            return Err(DeaError::DegenerateUnit {
                unit: panel.ids[o].clone(),
                input: i,
            });
        }
        let mut a = Vec::with_capacity(n + 1);
        a.push(-row[o]);
        a.extend_from_slice(row);
        prog.add_constraint(a, Relation::Le, 0.0).map_err(wrap)?;
    }
    for r in 0..y.rows() {
        let row = y.row(r);
        let mut a = Vec::with_capacity(n + 1);
        a.push(0.0);
        a.extend_from_slice(row);
        prog.add_constraint(a, Relation::Ge, row[o]).map_err(wrap)?;
    }
    if opts.rts == Rts::Vrs {
        let mut a = vec![1.0; n + 1];
        a[0] = 0.0;
        prog.add_constraint(a, Relation::Eq, 1.0).map_err(wrap)?;
    }
    Ok(prog)
}

/// Efficiency score and intensity weights for unit `o`.
pub fn score_unit(panel: &DeaPanel, o: usize, opts: DeaOptions) -> Result<(f64, Vec<f64>), DeaError> {
    let unit = || panel.ids[o].clone();
    let prog = envelopment_program(panel, o, opts)?;
    let sol = lp::solve(&prog).map_err(|e| DeaError::Solver {
        unit: unit(),
        source: e,
    })?;
    if sol.status != LpStatus::Optimal {
        return Err(DeaError::UnexpectedStatus {
            unit: unit(),
            status: sol.status,
        });
    }
    let mut theta = sol.x[0];
    if (theta - 1.0).abs() <= THETA_SNAP_TOL {
        theta = 1.0;
    }
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(DeaError::ThetaOutOfRange {
            unit: unit(),
            theta,
        });
    }
    Ok((theta, sol.x[1..].to_vec()))
}

/// Scores every unit. Units are independent, so they are solved in parallel;
/// results are collected in unit order.
pub fn dea_scores(panel: &DeaPanel, opts: DeaOptions) -> Result<DeaScores, DeaError> {
    use rayon::prelude::*;
    let n = panel.num_units();
    let per_unit: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|o| score_unit(panel, o, opts))
        .collect::<Result<_, _>>()?;
    let mut lambda = Matrix::zeros(n, n);
    let mut theta = Vec::with_capacity(n);
    for (o, (t, l)) in per_unit.into_iter().enumerate() {
        theta.push(t);
        lambda.row_mut(o).copy_from_slice(&l);
    }
    Ok(DeaScores { theta, lambda })
}

/// High / low eco-efficiency designation (the causal "treatment").
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EcoGroup {
    High,
    Low,
}

impl EcoGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            EcoGroup::High => "High",
            EcoGroup::Low => "Low",
        }
    }

    pub fn is_high(self) -> bool {
        self == EcoGroup::High
    }
}

impl std::str::FromStr for EcoGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "high" => Ok(EcoGroup::High),
            "low" => Ok(EcoGroup::Low),
            other => Err(format!("unknown eco group '{other}'")),
        }
    }
}

/// Splits at the median θ: strictly above is `High`, at or below is `Low`.
/// The median of an even-length vector is the lower of the two middle values,
/// which yields the same partition as averaging them.
pub fn split_by_median(theta: &[f64]) -> Result<Vec<EcoGroup>, DeaError> {
    if theta.len() < 2 {
        return Err(DeaError::TooFewUnits(theta.len()));
    }
    let median = lower_median(theta).expect("non-empty");
    let groups: Vec<EcoGroup> = theta
        .iter()
        .map(|&t| if t > median { EcoGroup::High } else { EcoGroup::Low })
        .collect();
    if groups.iter().all(|g| *g == EcoGroup::Low) {
        return Err(DeaError::NoSplit { median });
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::lp_vertex_enumeration;

    fn panel(x: &[&[f64]], y: &[f64]) -> DeaPanel {
        let ids = (0..y.len()).map(|i| format!("u{i}")).collect();
        let inputs: Vec<Vec<f64>> = x.iter().map(|r| r.to_vec()).collect();
        let outputs: Vec<Vec<f64>> = y.iter().map(|&v| vec![v]).collect();
        DeaPanel::from_units(ids, &inputs, &outputs).unwrap()
    }

    const VRS: DeaOptions = DeaOptions { rts: Rts::Vrs };
    const CRS: DeaOptions = DeaOptions { rts: Rts::Crs };

    #[test]
    fn lone_unit_is_efficient() {
        let p = panel(&[&[2.0]], &[2.0]);
        assert_eq!(dea_scores(&p, VRS).unwrap().theta, vec![1.0]);
    }

    #[test]
    fn two_units_same_output() {
        let p = panel(&[&[2.0], &[4.0]], &[2.0, 2.0]);
        let s = dea_scores(&p, VRS).unwrap();
        // Oracle: vertex enumeration of the same LP for unit B.
        let (oracle_b, _) = lp_vertex_enumeration(&envelopment_program(&p, 1, VRS).unwrap())
            .expect("feasible");
        assert!((s.theta[0] - 1.0).abs() < 1e-12);
        assert!((s.theta[1] - 0.5).abs() < 1e-12);
        assert!((s.theta[1] - oracle_b).abs() < 1e-12);
        for o in 0..2 {
            let sum: f64 = s.lambda.row(o).iter().sum();
            assert!((sum - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn vrs_dominates_crs_on_scale_example() {
        // C(x=1,y=1), D(x=2,y=4): D has the best output/input ratio (2), so the
        // CRS score of C is 1/2; under VRS, C is the smallest unit and efficient.
        let p = panel(&[&[1.0], &[2.0]], &[1.0, 4.0]);
        let crs = dea_scores(&p, CRS).unwrap();
        let vrs = dea_scores(&p, VRS).unwrap();
        assert!((crs.theta[0] - 0.5).abs() < 1e-12);
        assert!((vrs.theta[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_unit_is_reported() {
        let p = panel(&[&[0.0, 1.0], &[1.0, 1.0]], &[1.0, 1.0]);
        assert!(matches!(
            dea_scores(&p, VRS),
            Err(DeaError::DegenerateUnit { input: 0, .. })
        ));
    }

    #[test]
    fn invalid_panels_rejected() {
        let ids = vec!["a".to_string()];
        assert!(DeaPanel::from_units(ids.clone(), &[vec![-1.0]], &[vec![1.0]]).is_err());
        assert!(DeaPanel::from_units(ids.clone(), &[vec![1.0]], &[vec![0.0]]).is_err());
        assert!(DeaPanel::from_units(ids, &[vec![0.0]], &[vec![1.0]]).is_err());
    }

    #[test]
    fn median_split_examples() {
        use EcoGroup::*;
        assert_eq!(
            split_by_median(&[0.2, 0.5, 0.9, 1.0]).unwrap(),
            vec![Low, Low, High, High]
        );
        assert_eq!(split_by_median(&[0.2, 0.5, 0.9]).unwrap(), vec![Low, Low, High]);
        assert!(matches!(
            split_by_median(&[1.0, 1.0, 1.0]),
            Err(DeaError::NoSplit { .. })
        ));
        assert!(matches!(split_by_median(&[0.4]), Err(DeaError::TooFewUnits(1))));
    }

    #[test]
    fn median_split_ties_go_low() {
        use EcoGroup::*;
        assert_eq!(
            split_by_median(&[0.5, 0.5, 0.5, 0.9]).unwrap(),
            vec![Low, Low, Low, High]
        );
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        /// `n` units with `m` inputs and one output, values in a moderate range.
        fn random_panel(max_n: usize, max_m: usize) -> impl Strategy<Value = DeaPanel> {
            (1..=max_n, 1..=max_m).prop_flat_map(|(n, m)| {
                (
                    prop::collection::vec(prop::collection::vec(0.5f64..20.0, m), n),
                    prop::collection::vec(0.5f64..20.0, n),
                )
                    .prop_map(move |(x, y)| {
                        let ids = (0..n).map(|i| format!("u{i}")).collect();
                        let outputs: Vec<Vec<f64>> = y.into_iter().map(|v| vec![v]).collect();
                        DeaPanel::from_units(ids, &x, &outputs).unwrap()
                    })
            })
        }

        /// Envelopment LP written out directly from the panel, without the
        /// row rescaling used by the production builder.
        fn raw_program(p: &DeaPanel, o: usize, rts: Rts) -> LinearProgram {
            let n = p.num_units();
            let mut c = vec![0.0; n + 1];
            c[0] = 1.0;
            let mut lp = LinearProgram::new(c).unwrap();
            for i in 0..p.inputs().rows() {
                let mut a = vec![-p.inputs()[(i, o)]];
                a.extend_from_slice(p.inputs().row(i));
                lp.add_constraint(a, Relation::Le, 0.0).unwrap();
            }
            for r in 0..p.outputs().rows() {
                let mut a = vec![0.0];
                a.extend_from_slice(p.outputs().row(r));
                lp.add_constraint(a, Relation::Ge, p.outputs()[(r, o)]).unwrap();
            }
            if rts == Rts::Vrs {
                let mut a = vec![1.0; n + 1];
                a[0] = 0.0;
                lp.add_constraint(a, Relation::Eq, 1.0).unwrap();
            }
            lp
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(60))]

            #[test]
            fn matches_vertex_oracle(p in random_panel(5, 2)) {
                for rts in [Rts::Crs, Rts::Vrs] {
                    let s = dea_scores(&p, DeaOptions { rts }).unwrap();
                    for o in 0..p.num_units() {
                        let (oracle, _) = lp_vertex_enumeration(&raw_program(&p, o, rts)).unwrap();
                        prop_assert!((s.theta[o] - oracle.min(1.0)).abs() < 1e-7);
                    }
                }
            }

            #[test]
            fn vrs_at_least_crs_and_frontier_nonempty(p in random_panel(8, 3)) {
                let crs = dea_scores(&p, CRS).unwrap();
                let vrs = dea_scores(&p, VRS).unwrap();
                for o in 0..p.num_units() {
                    prop_assert!(vrs.theta[o] >= crs.theta[o] - 1e-9);
                    let sum: f64 = vrs.lambda.row(o).iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-8);
                }
                for s in [&crs, &vrs] {
                    let max = s.theta.iter().cloned().fold(f64::MIN, f64::max);
                    prop_assert!((max - 1.0).abs() < 1e-9);
                }
            }

            #[test]
            fn input_rescaling_leaves_scores_unchanged(p in random_panel(8, 3), row in 0usize..3, c in 0.001f64..1000.0) {
                let row = row % p.inputs().rows();
                let mut x = p.inputs().clone();
                x.row_mut(row).iter_mut().for_each(|v| *v *= c);
                let q = DeaPanel::new(x, p.outputs().clone(), p.ids().to_vec()).unwrap();
                for opts in [CRS, VRS] {
                    let a = dea_scores(&p, opts).unwrap();
                    let b = dea_scores(&q, opts).unwrap();
                    for (u, v) in a.theta.iter().zip(&b.theta) {
                        prop_assert!((u - v).abs() < 1e-9);
                    }
                }
            }

            #[test]
            fn adding_a_dominating_unit_never_raises_theta(p in random_panel(6, 2), o in 0usize..6, shrink in 0.5f64..1.0, grow in 1.0f64..1.5) {
                let o = o % p.num_units();
                let n = p.num_units();
                let mut inputs: Vec<Vec<f64>> = (0..n).map(|j| p.inputs().column(j)).collect();
                let mut outputs: Vec<Vec<f64>> = (0..n).map(|j| p.outputs().column(j)).collect();
                inputs.push(inputs[o].iter().map(|v| v * shrink).collect());
                outputs.push(outputs[o].iter().map(|v| v * grow).collect());
                let mut ids = p.ids().to_vec();
                ids.push("dominant".into());
                let q = DeaPanel::from_units(ids, &inputs, &outputs).unwrap();
                for opts in [CRS, VRS] {
                    let before = dea_scores(&p, opts).unwrap().theta[o];
                    let after = dea_scores(&q, opts).unwrap().theta[o];
                    prop_assert!(after <= before + 1e-9);
                }
            }
        }
    }
}
