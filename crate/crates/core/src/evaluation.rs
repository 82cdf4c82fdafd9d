//! Evaluation battery: per-caliper and per-biometry errors against each rater,
//! inter-rater agreement and ICC(A,k).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{resolve_ground_truth, GroundTruth, GroundTruthPolicy, ManifestEntry};
use crate::error::{CaliperError, Result};
use crate::geometry::{biometry_length, compute_biometry, CaliperPoint, LandmarkSet, PixelSpacing};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const POOLED: &str = "pooled";
pub const CONSENSUS: &str = "consensus";
pub const MODEL: &str = "model";

/// Euclidean caliper error in millimetres.
pub fn caliper_error_mm(pred: CaliperPoint, gt: CaliperPoint, spacing: PixelSpacing) -> Result<f64> {
    biometry_length(pred, gt, spacing)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Option<MeanSd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MeanSd {
            mean,
            sd: var.sqrt(),
            n: values.len(),
        })
    }
}

/// Measurement-table composition for the ICC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IccMode {
    /// One column per rater plus the model.
    #[default]
    AllRaters,
    /// Consensus and model only (k = 2).
    Consensus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub policy: GroundTruthPolicy,
    pub icc_mode: IccMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            policy: GroundTruthPolicy::PerRaterMean,
            icc_mode: IccMode::AllRaters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterMatrix {
    pub raters: Vec<String>,
    /// Mean caliper error in mm between two raters' ground truths, over images and landmarks.
    pub mean_error_mm: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccEntry {
    pub value: Option<f64>,
    pub k: usize,
    pub n: usize,
}

/// Stats keyed first by landmark or biometry, then by rater (plus `pooled`).
pub type StatTable = BTreeMap<String, BTreeMap<String, MeanSd>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub plane: String,
    pub n_images: usize,
    pub missing_predictions: Vec<String>,
    pub per_caliper_mae_mm: StatTable,
    pub per_biometry_mae_mm: StatTable,
    /// Pooled caliper error over all landmarks and raters.
    pub pooled_caliper_mae_mm: Option<MeanSd>,
    /// Caliper error in pixels against the consensus ground truth.
    pub pooled_caliper_error_px: Option<MeanSd>,
    pub inter_rater_matrix: RaterMatrix,
    /// Per landmark: mean pairwise inter-rater error.
    pub inter_rater_per_caliper_mm: BTreeMap<String, f64>,
    /// Per landmark: mean rater-to-consensus error.
    pub rater_to_consensus_per_caliper_mm: BTreeMap<String, f64>,
    pub icc_mode: IccMode,
    pub icc: BTreeMap<String, IccEntry>,
    pub warnings: Vec<String>,
}

impl EvaluationReport {
    /// Checks the report's structural invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CaliperError::InvalidInput(m));
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return bad(format!("schema version {}", self.schema_version));
        }
        let stats = self
            .per_caliper_mae_mm
            .values()
            .chain(self.per_biometry_mae_mm.values())
            .flat_map(|m| m.values())
            .chain(self.pooled_caliper_mae_mm.iter())
            .chain(self.pooled_caliper_error_px.iter());
        for s in stats {
            if !(s.mean >= 0.0 && s.sd >= 0.0) {
                return bad(format!("negative error statistic {s:?}"));
            }
        }
        for (name, e) in &self.icc {
            if let Some(v) = e.value {
                if !(-1.0..=1.0).contains(&v) {
                    return bad(format!("ICC for {name} out of range: {v}"));
                }
            }
        }
        let m = &self.inter_rater_matrix;
        for i in 0..m.raters.len() {
            if m.mean_error_mm[i][i] != 0.0 {
                return bad("inter-rater diagonal must be zero".into());
            }
            for j in 0..m.raters.len() {
                if m.mean_error_mm[i][j] != m.mean_error_mm[j][i] {
                    return bad("inter-rater matrix must be symmetric".into());
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: EvaluationReport = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    /// Aligned human-readable rendering.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "plane {}  images {}", self.plane, self.n_images);
        if !self.missing_predictions.is_empty() {
            let _ = writeln!(s, "missing predictions: {}", self.missing_predictions.join(", "));
        }
        for (title, table) in [("caliper MAE (mm)", &self.per_caliper_mae_mm), ("biometry MAE (mm)", &self.per_biometry_mae_mm)] {
            let _ = writeln!(s, "\n{title}");
            let raters: Vec<&String> = table.values().next().map(|m| m.keys().collect()).unwrap_or_default();
            let _ = write!(s, "{:<10}", "");
            for r in &raters {
                let _ = write!(s, "{:>16}", r);
            }
            s.push('\n');
            for (name, row) in table {
                let _ = write!(s, "{name:<10}");
                for r in &raters {
                    let v = row[*r];
                    let _ = write!(s, "{:>16}", format!("{:.3} ± {:.3}", v.mean, v.sd));
                }
                s.push('\n');
            }
        }
        if let Some(p) = self.pooled_caliper_mae_mm {
            let _ = writeln!(s, "\npooled caliper MAE {:.3} ± {:.3} mm", p.mean, p.sd);
        }
        if let Some(p) = self.pooled_caliper_error_px {
            let _ = writeln!(s, "pooled caliper error vs consensus {:.3} ± {:.3} px", p.mean, p.sd);
        }
        let _ = writeln!(s, "\nICC(A,k) [{:?}]", self.icc_mode);
        for (name, e) in &self.icc {
            let v = e.value.map_or("undefined".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "{name:<10}{v:>12}  k={} n={}", e.k, e.n);
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

/// Sum in ascending order, so permuting subjects or raters cannot change a single bit.
fn order_free_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// ICC(A,k): two-way random effects, absolute agreement, average of k raters.
/// `table` is subjects x raters.
pub fn icc_2k(table: &[Vec<f64>]) -> Result<f64> {
    let n = table.len();
    let k = table.first().map_or(0, Vec::len);
    if n < 2 || k < 2 {
        return Err(CaliperError::InvalidInput(format!("ICC needs n >= 2 and k >= 2, got {n}x{k}")));
    }
    if table.iter().any(|r| r.len() != k || r.iter().any(|v| !v.is_finite())) {
        return Err(CaliperError::InvalidInput("ICC table must be complete and finite".into()));
    }
    let (nf, kf) = (n as f64, k as f64);
    let grand = order_free_sum(table.iter().flatten().copied()) / (nf * kf);
    let row_means: Vec<f64> = table.iter().map(|r| order_free_sum(r.iter().copied()) / kf).collect();
    let col_means: Vec<f64> = (0..k).map(|j| order_free_sum(table.iter().map(|r| r[j])) / nf).collect();
    let sst = order_free_sum(table.iter().flatten().map(|v| (v - grand).powi(2)));
    if sst == 0.0 {
        return Err(CaliperError::UndefinedIcc("zero total variance".into()));
    }
    let ssr = kf * order_free_sum(row_means.iter().map(|m| (m - grand).powi(2)));
    let ssc = nf * order_free_sum(col_means.iter().map(|m| (m - grand).powi(2)));
    let sse = order_free_sum(
        table
            .iter()
            .zip(&row_means)
            .flat_map(|(row, rm)| row.iter().zip(&col_means).map(move |(v, cm)| (v - rm - cm + grand).powi(2))),
    );
    let msr = ssr / (nf - 1.0);
    let msc = ssc / (kf - 1.0);
    let mse = sse / ((nf - 1.0) * (kf - 1.0));
    let denom = msr + (msc - mse) / nf;
    if denom <= 0.0 {
        return Err(CaliperError::UndefinedIcc(format!("non-positive denominator {denom}")));
    }
    Ok((msr - mse) / denom)
}

/// Evaluates predictions (keyed by subject id) against `entries`.
/// Entries without a prediction are listed and excluded.
pub fn evaluate(
    predictions: &BTreeMap<String, LandmarkSet>,
    entries: &[ManifestEntry],
    options: EvalOptions,
) -> Result<EvaluationReport> {
    let mut entries: Vec<&ManifestEntry> = entries.iter().collect();
    entries.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    let plane = match entries.first() {
        Some(e) => e.plane_config()?,
        None => return Err(CaliperError::InvalidInput("no entries to evaluate".into())),
    };
    if let Some(e) = entries.iter().find(|e| e.plane != plane.name()) {
        return Err(CaliperError::InvalidInput(format!(
            "mixed planes: {} is {}, expected {}",
            e.subject_id,
            e.plane,
            plane.name()
        )));
    }
    let mut warnings = Vec::new();
    let mut missing = Vec::new();
    let mut caliper: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut biometry: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut pooled_mm = Vec::new();
    let mut pooled_px = Vec::new();
    let mut rater_names: Vec<String> = Vec::new();
    let mut pair_err: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut pair_per_lm: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut to_consensus: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut icc_rows: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    let mut n_images = 0;

    for entry in entries {
        let Some(pred) = predictions.get(&entry.subject_id) else {
            missing.push(entry.subject_id.clone());
            continue;
        };
        if pred.plane().name() != plane.name() {
            return Err(CaliperError::InvalidInput(format!(
                "prediction for {} is plane {}",
                entry.subject_id,
                pred.plane().name()
            )));
        }
        pred.ensure_complete()?;
        let resolved = resolve_ground_truth(entry, GroundTruthPolicy::PerRaterMean)?;
        warnings.extend(resolved.warnings);
        let GroundTruth::PerRater(raters) = resolved.truth else {
            unreachable!("per-rater policy")
        };
        let consensus = match resolve_ground_truth(entry, GroundTruthPolicy::ConsensusMean)?.truth {
            GroundTruth::Consensus(c) => c,
            GroundTruth::PerRater(_) => unreachable!("consensus policy"),
        };
        for r in raters.keys() {
            if !rater_names.contains(r) {
                rater_names.push(r.clone());
            }
        }
        n_images += 1;
        let sp = entry.spacing;
        let references: Vec<(String, &LandmarkSet)> = match options.policy {
            GroundTruthPolicy::PerRaterMean => raters.iter().map(|(r, s)| (r.clone(), s)).collect(),
            GroundTruthPolicy::ConsensusMean => vec![(CONSENSUS.to_string(), &consensus)],
        };
        let pred_bio = compute_biometry(pred, sp)?;
        for (rater, gt) in &references {
            for name in plane.landmark_names() {
                let e = caliper_error_mm(pred.get(name).unwrap(), gt.get(name).unwrap(), sp)?;
                caliper.entry(name.clone()).or_default().entry(rater.clone()).or_default().push(e);
                pooled_mm.push(e);
            }
            for (name, gt_len) in compute_biometry(gt, sp)? {
                let e = (pred_bio[&name] - gt_len).abs();
                biometry.entry(name).or_default().entry(rater.clone()).or_default().push(e);
            }
        }
        for name in plane.landmark_names() {
            pooled_px.push(pred.get(name).unwrap().distance_px(&consensus.get(name).unwrap()));
        }
        let rs: Vec<(&String, &LandmarkSet)> = raters.iter().collect();
        for i in 0..rs.len() {
            for name in plane.landmark_names() {
                let c = caliper_error_mm(rs[i].1.get(name).unwrap(), consensus.get(name).unwrap(), sp)?;
                to_consensus.entry(name.clone()).or_default().push(c);
            }
            for j in i + 1..rs.len() {
                for name in plane.landmark_names() {
                    let e = caliper_error_mm(rs[i].1.get(name).unwrap(), rs[j].1.get(name).unwrap(), sp)?;
                    pair_err.entry((rs[i].0.clone(), rs[j].0.clone())).or_default().push(e);
                    pair_per_lm.entry(name.clone()).or_default().push(e);
                }
            }
        }
        let rater_bio: Vec<BTreeMap<String, f64>> =
            raters.values().map(|s| compute_biometry(s, sp)).collect::<Result<_>>()?;
        let consensus_bio = compute_biometry(&consensus, sp)?;
        for name in plane.biometry_names() {
            let mut row: Vec<f64> = match options.icc_mode {
                IccMode::AllRaters => rater_bio.iter().map(|b| b[&name]).collect(),
                IccMode::Consensus => vec![consensus_bio[&name]],
            };
            row.push(pred_bio[&name]);
            icc_rows.entry(name).or_default().push(row);
        }
    }
    if !missing.is_empty() {
        warnings.push(format!("{} entries without predictions excluded", missing.len()));
    }

    let finalize = |acc: BTreeMap<String, BTreeMap<String, Vec<f64>>>| -> StatTable {
        acc.into_iter()
            .map(|(name, per)| {
                let all: Vec<f64> = per.values().flatten().copied().collect();
                let mut row: BTreeMap<String, MeanSd> =
                    per.into_iter().filter_map(|(r, v)| MeanSd::of(&v).map(|s| (r, s))).collect();
                if let Some(p) = MeanSd::of(&all) {
                    row.insert(POOLED.to_string(), p);
                }
                (name, row)
            })
            .collect()
    };

    rater_names.sort();
    let nr = rater_names.len();
    let mut matrix = vec![vec![0.0; nr]; nr];
    for ((a, b), v) in &pair_err {
        let i = rater_names.iter().position(|r| r == a).unwrap();
        let j = rater_names.iter().position(|r| r == b).unwrap();
        let m = MeanSd::of(v).map_or(0.0, |s| s.mean);
        matrix[i][j] = m;
        matrix[j][i] = m;
    }

    let mut icc = BTreeMap::new();
    for (name, rows) in icc_rows {
        let k = rows.iter().map(Vec::len).min().unwrap_or(0);
        let uniform = rows.iter().all(|r| r.len() == k);
        let value = if !uniform {
            warnings.push(format!("ICC for {name}: raters do not cover every image"));
            None
        } else {
            match icc_2k(&rows) {
                Ok(v) if (-1.0..=1.0).contains(&v) => Some(v),
                Ok(v) => {
                    warnings.push(format!("ICC for {name} = {v:.4} lies outside [-1, 1]; reported as undefined"));
                    None
                }
                Err(e) => {
                    warnings.push(format!("ICC for {name}: {e}"));
                    None
                }
            }
        };
        icc.insert(name, IccEntry { value, k, n: rows.len() });
    }

    let report = EvaluationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        plane: plane.name().to_string(),
        n_images,
        missing_predictions: missing,
        per_caliper_mae_mm: finalize(caliper),
        per_biometry_mae_mm: finalize(biometry),
        pooled_caliper_mae_mm: MeanSd::of(&pooled_mm),
        pooled_caliper_error_px: MeanSd::of(&pooled_px),
        inter_rater_matrix: RaterMatrix {
            raters: rater_names,
            mean_error_mm: matrix,
        },
        inter_rater_per_caliper_mm: pair_per_lm
            .into_iter()
            .filter_map(|(k, v)| MeanSd::of(&v).map(|s| (k, s.mean)))
            .collect(),
        rater_to_consensus_per_caliper_mm: to_consensus
            .into_iter()
            .filter_map(|(k, v)| MeanSd::of(&v).map(|s| (k, s.mean)))
            .collect(),
        icc_mode: options.icc_mode,
        icc,
        warnings,
    };
    report.validate()?;
    Ok(report)
}

/// Per-caliper bar-chart series: `caliper,model_mae_mm,inter_rater_mm,rater_to_consensus_mm`.
pub fn figure_series_csv(report: &EvaluationReport) -> String {
    let mut s = String::from("caliper,model_mae_mm,inter_rater_mm,rater_to_consensus_mm\n");
    let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for (name, row) in &report.per_caliper_mae_mm {
        let _ = writeln!(
            s,
            "{name},{},{},{}",
            fmt(row.get(POOLED).map(|m| m.mean)),
            fmt(report.inter_rater_per_caliper_mm.get(name).copied()),
            fmt(report.rater_to_consensus_per_caliper_mm.get(name).copied()),
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// Pooled-over-raters caliper MAE per landmark.
    pub per_caliper: BTreeMap<String, MeanSd>,
    pub pooled_mean_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub schema_version: u32,
    pub calipers: Vec<String>,
    pub rows: Vec<AblationRow>,
}

pub fn ablation_report(runs: &[(String, EvaluationReport)]) -> Result<AblationTable> {
    let Some((_, first)) = runs.first() else {
        return Err(CaliperError::InvalidInput("no runs".into()));
    };
    let calipers: Vec<String> = first.per_caliper_mae_mm.keys().cloned().collect();
    let mut rows = Vec::new();
    for (label, r) in runs {
        let keys: Vec<String> = r.per_caliper_mae_mm.keys().cloned().collect();
        if keys != calipers {
            return Err(CaliperError::InvalidInput(format!("run {label} has different calipers")));
        }
        let per_caliper: BTreeMap<String, MeanSd> = r
            .per_caliper_mae_mm
            .iter()
            .filter_map(|(k, m)| m.get(POOLED).map(|s| (k.clone(), *s)))
            .collect();
        let pooled_mean_mm = r
            .pooled_caliper_mae_mm
            .map(|s| s.mean)
            .ok_or_else(|| CaliperError::InvalidInput(format!("run {label} has no errors")))?;
        rows.push(AblationRow {
            label: label.clone(),
            per_caliper,
            pooled_mean_mm,
        });
    }
    Ok(AblationTable {
        schema_version: REPORT_SCHEMA_VERSION,
        calipers,
        rows,
    })
}

impl AblationTable {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned grid: one row per run, `mean ± sd` per caliper, pooled mean last.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<16}", "run");
        for c in &self.calipers {
            let _ = write!(s, "{c:>18}");
        }
        let _ = writeln!(s, "{:>12}", "pooled");
        for row in &self.rows {
            let _ = write!(s, "{:<16}", row.label);
            for c in &self.calipers {
                let m = row.per_caliper[c];
                let _ = write!(s, "{:>18}", format!("{:.4} ± {:.4}", m.mean, m.sd));
            }
            let _ = writeln!(s, "{:>12}", format!("{:.4}", row.pooled_mean_mm));
        }
        s
    }

    /// Reads back `(label, per-caliper means, pooled)` from [`to_text`](Self::to_text).
    pub fn parse_text(text: &str) -> Result<Vec<(String, Vec<f64>, f64)>> {
        let mut out = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let label = line[..16.min(line.len())].trim().to_string();
            let rest: Vec<&str> = line[16..].split_whitespace().collect();
            let num = |t: &str| {
                t.parse::<f64>()
                    .map_err(|e| CaliperError::InvalidInput(format!("bad number {t}: {e}")))
            };
            let pooled = num(rest.last().ok_or_else(|| CaliperError::InvalidInput("empty row".into()))?)?;
            let means = rest[..rest.len() - 1]
                .chunks(3)
                .map(|c| num(c[0]))
                .collect::<Result<Vec<_>>>()?;
            out.push((label, means, pooled));
        }
        Ok(out)
    }
}
