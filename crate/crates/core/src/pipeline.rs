//! Coarse-to-fine registration of labeled scan pairs and dataset evaluation.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{self, PoseError, DEFAULT_BETA, DEFAULT_RRE_THRESHOLD, DEFAULT_RTE_THRESHOLD};
use crate::geom::{icp_refine, kabsch_svd, IcpConfig, Point3, RigidTransform};
use crate::graph::{build_graph, DEFAULT_GRAPH_K};
use crate::instances::{extract_instances, CategoryConfig, SemanticInstance, SemanticPointCloud};
use crate::matching::{forward_pair, hard_assign, CorrespondenceSet, SinkhornConfig, DEFAULT_THRESHOLD};
use crate::nets::{Model, SceneInput};
use crate::tensor::Tape;
use crate::training::label_gt_correspondences;

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationConfig {
    /// Scenes with fewer instances than this are skipped.
    pub min_instances: usize,
    /// Correspondences needed for the coarse solve.
    pub min_correspondences: usize,
    pub threshold: f64,
    pub beta: f64,
    pub graph_k: usize,
    pub sinkhorn: SinkhornConfig,
    pub icp: IcpConfig,
    pub rre_threshold: f64,
    pub rte_threshold: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            min_instances: 5,
            min_correspondences: 3,
            threshold: DEFAULT_THRESHOLD,
            beta: DEFAULT_BETA,
            graph_k: DEFAULT_GRAPH_K,
            sinkhorn: SinkhornConfig::default(),
            icp: IcpConfig::default(),
            rre_threshold: DEFAULT_RRE_THRESHOLD,
            rte_threshold: DEFAULT_RTE_THRESHOLD,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_correspondences < 3 {
            return Err(Error::validation("min_correspondences must be >= 3"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::validation("threshold must be in (0, 1)"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::validation("beta must be > 0"));
        }
        if self.graph_k == 0 {
            return Err(Error::validation("graph_k must be >= 1"));
        }
        if self.sinkhorn.max_iters == 0 || !(self.sinkhorn.tol > 0.0) {
            return Err(Error::validation("sinkhorn needs max_iters >= 1 and tol > 0"));
        }
        if !(self.icp.max_correspondence_dist > 0.0) || !(self.icp.convergence_eps >= 0.0) {
            return Err(Error::validation("icp needs max_correspondence_dist > 0 and convergence_eps >= 0"));
        }
        if !(self.rre_threshold > 0.0 && self.rte_threshold > 0.0) {
            return Err(Error::validation("success thresholds must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub instances_x: usize,
    pub instances_y: usize,
    pub correspondences: usize,
    /// Correspondences kept for the coarse solve by the rigidity check.
    pub consistent_correspondences: usize,
    pub sinkhorn_iterations: Option<usize>,
    pub icp_converged: Option<bool>,
    pub icp_iterations: Option<usize>,
    /// Capped RMS at the coarse pose and after ICP.
    pub coarse_rms: Option<f64>,
    pub fine_rms: Option<f64>,
    pub skipped: Option<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub coarse: Option<RigidTransform>,
    /// Present iff the coarse solve succeeded and ICP ran.
    pub fine: Option<RigidTransform>,
    pub correspondences: CorrespondenceSet,
    pub diagnostics: Diagnostics,
}

impl RegistrationResult {
    fn empty(diagnostics: Diagnostics) -> Self {
        RegistrationResult {
            coarse: None,
            fine: None,
            correspondences: CorrespondenceSet::default(),
            diagnostics,
        }
    }

    pub fn skipped(&self) -> bool {
        self.diagnostics.skipped.is_some() || self.diagnostics.error.is_some()
    }
}

pub const REASON_INSTANCES: &str = "insufficient instances";
pub const REASON_CORRESPONDENCES: &str = "insufficient correspondences";

/// Extracts instances from both scans and registers `x` onto `y`.
///
/// Never fails: errors from any stage are recorded in the diagnostics.
pub fn register_pair(
    x: &SemanticPointCloud,
    y: &SemanticPointCloud,
    model: &Model,
    categories: &CategoryConfig,
    cfg: &RegistrationConfig,
) -> RegistrationResult {
    let k = model.config.shape_points;
    match (extract_instances(x, categories, k), extract_instances(y, categories, k)) {
        (Ok(ix), Ok(iy)) => register_instances(x, y, &ix, &iy, model, cfg),
        (Err(e), _) | (_, Err(e)) => RegistrationResult::empty(Diagnostics {
            error: Some(format!("instance extraction: {e}")),
            ..Diagnostics::default()
        }),
    }
}

/// Registration from already-extracted instances.
pub fn register_instances(
    x: &SemanticPointCloud,
    y: &SemanticPointCloud,
    ix: &[SemanticInstance],
    iy: &[SemanticInstance],
    model: &Model,
    cfg: &RegistrationConfig,
) -> RegistrationResult {
    let mut diag = Diagnostics {
        instances_x: ix.len(),
        instances_y: iy.len(),
        ..Diagnostics::default()
    };
    if ix.len() < cfg.min_instances || iy.len() < cfg.min_instances {
        diag.skipped = Some(REASON_INSTANCES.into());
        return RegistrationResult::empty(diag);
    }
    let correspondences = match match_instances(ix, iy, model, cfg) {
        Ok((c, iters)) => {
            diag.sinkhorn_iterations = Some(iters);
            diag.correspondences = c.len();
            c
        }
        Err(e) => {
            diag.error = Some(format!("matching: {e}"));
            return RegistrationResult::empty(diag);
        }
    };
    let mut result = RegistrationResult {
        coarse: None,
        fine: None,
        correspondences,
        diagnostics: diag,
    };
    if result.correspondences.len() < cfg.min_correspondences {
        result.diagnostics.skipped = Some(REASON_CORRESPONDENCES.into());
        return result;
    }
    let (src, dst): (Vec<Point3>, Vec<Point3>) = result
        .correspondences
        .matches
        .iter()
        .map(|m| (ix[m.i].centroid, iy[m.j].centroid))
        .unzip();
    // two inliers each land within β of their partner, so their distances differ by < 2β
    let keep = consistent_pairs(&src, &dst, 2.0 * cfg.beta);
    result.diagnostics.consistent_correspondences = keep.len();
    if keep.len() < cfg.min_correspondences {
        result.diagnostics.skipped = Some(REASON_CORRESPONDENCES.into());
        return result;
    }
    let (src, dst): (Vec<Point3>, Vec<Point3>) = keep.iter().map(|&a| (src[a], dst[a])).unzip();
    let coarse = match kabsch_svd(&src, &dst) {
        Ok(t) => t,
        Err(e) => {
            result.diagnostics.error = Some(format!("coarse alignment: {e}"));
            return result;
        }
    };
    result.coarse = Some(coarse);
    match icp_refine(x.cloud(), y.cloud(), &coarse, &cfg.icp) {
        Ok(icp) => {
            result.diagnostics.icp_converged = Some(icp.converged);
            result.diagnostics.icp_iterations = Some(icp.iterations);
            result.diagnostics.coarse_rms = icp.rms_history.first().copied();
            result.diagnostics.fine_rms = Some(icp.final_rms());
            result.fine = Some(icp.transform);
        }
        Err(e) => result.diagnostics.error = Some(format!("fine alignment: {e}")),
    }
    result
}

/// Largest subset of the pairs `(src[a], dst[a])` whose pairwise distances
/// agree within `tol`, as ascending indices. This is an exact maximum clique
/// of the compatibility graph; among equally large subsets the
/// lexicographically first wins.
pub fn consistent_pairs(src: &[Point3], dst: &[Point3], tol: f64) -> Vec<usize> {
    let n = src.len().min(dst.len());
    let compatible: Vec<Vec<bool>> = (0..n)
        .map(|a| (0..n).map(|b| a != b && (src[a].dist(&src[b]) - dst[a].dist(&dst[b])).abs() < tol).collect())
        .collect();

    fn grow(clique: &mut Vec<usize>, candidates: &[usize], compatible: &[Vec<bool>], best: &mut Vec<usize>) {
        if clique.len() > best.len() {
            best.clone_from(clique);
        }
        for (pos, &v) in candidates.iter().enumerate() {
            if clique.len() + candidates.len() - pos <= best.len() {
                return;
            }
            let next: Vec<usize> = candidates[pos + 1..].iter().copied().filter(|&u| compatible[v][u]).collect();
            clique.push(v);
            grow(clique, &next, compatible, best);
            clique.pop();
        }
    }

    let mut best = Vec::new();
    grow(&mut Vec::new(), &(0..n).collect::<Vec<_>>(), &compatible, &mut best);
    best
}

/// Network matching of two instance sets: Φ and the Sinkhorn iteration count.
pub fn match_instances(
    ix: &[SemanticInstance],
    iy: &[SemanticInstance],
    model: &Model,
    cfg: &RegistrationConfig,
) -> Result<(CorrespondenceSet, usize)> {
    let gx = build_graph(ix, cfg.graph_k)?;
    let gy = build_graph(iy, cfg.graph_k)?;
    let sx = SceneInput::new(ix, &gx, &model.config)?;
    let sy = SceneInput::new(iy, &gy, &model.config)?;
    let tape = Tape::new();
    let fwd = forward_pair(model, &tape, &sx, &sy, &cfg.sinkhorn)?;
    let c = hard_assign(&fwd.assignment.trimmed(), cfg.threshold)?;
    Ok((c, fwd.assignment.iterations))
}

/// One scan pair with its ground-truth motion (X into Y's frame).
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub name: String,
    pub x: SemanticPointCloud,
    pub y: SemanticPointCloud,
    pub gt: RigidTransform,
}

/// Per-pair evaluation record, one line of the JSONL dump.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairRecord {
    pub index: usize,
    pub name: String,
    /// Errors of the fine transform; absent for skipped pairs.
    pub rre_deg: Option<f64>,
    pub rte_m: Option<f64>,
    pub coarse_rre_deg: Option<f64>,
    pub coarse_rte_m: Option<f64>,
    pub success: bool,
    /// Inlier precision; 0 with `ip_defined = false` for an empty Φ.
    pub ip: Option<f64>,
    pub ip_defined: bool,
    pub ir: Option<f64>,
    pub gt_correspondences: usize,
    pub estimate: Option<[f64; 12]>,
    pub diagnostics: Diagnostics,
}

impl PairRecord {
    pub fn skipped(&self) -> bool {
        self.rre_deg.is_none()
    }

    fn pose_error(&self) -> Option<PoseError> {
        Some(PoseError {
            rre_deg: self.rre_deg?,
            rte_m: self.rte_m?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(v: &[f64]) -> Option<Self> {
        eval::mean_std(v).map(|(mean, std)| MeanStd { mean, std })
    }
}

/// Aggregates over an evaluated dataset. Undefined metrics are `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub pairs: usize,
    /// Ψ: pairs that produced a fine transform.
    pub evaluated: usize,
    pub skipped: usize,
    pub rre_deg: Option<MeanStd>,
    pub rte_m: Option<MeanStd>,
    pub median_rte_m: Option<f64>,
    pub registration_recall: Option<f64>,
    /// RR with skipped pairs counted as failures.
    pub strict_registration_recall: Option<f64>,
    pub inlier_precision: Option<f64>,
    pub inlier_recall: Option<f64>,
    pub rre_threshold: f64,
    pub rte_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub records: Vec<PairRecord>,
}

fn blank_record(index: usize, name: String) -> PairRecord {
    PairRecord {
        index,
        name,
        rre_deg: None,
        rte_m: None,
        coarse_rre_deg: None,
        coarse_rte_m: None,
        success: false,
        ip: None,
        ip_defined: false,
        ir: None,
        gt_correspondences: 0,
        estimate: None,
        diagnostics: Diagnostics::default(),
    }
}

fn evaluate_one(index: usize, pair: &EvalPair, model: &Model, categories: &CategoryConfig, cfg: &RegistrationConfig) -> PairRecord {
    let mut rec = blank_record(index, pair.name.clone());
    let k = model.config.shape_points;
    let (ix, iy) = match (extract_instances(&pair.x, categories, k), extract_instances(&pair.y, categories, k)) {
        (Ok(ix), Ok(iy)) => (ix, iy),
        (Err(e), _) | (_, Err(e)) => {
            rec.diagnostics.error = Some(format!("instance extraction: {e}"));
            return rec;
        }
    };
    let r = register_instances(&pair.x, &pair.y, &ix, &iy, model, cfg);
    rec.diagnostics = r.diagnostics.clone();
    let matched = r.diagnostics.sinkhorn_iterations.is_some();
    if matched {
        let cx: Vec<Point3> = ix.iter().map(|i| i.centroid).collect();
        let cy: Vec<Point3> = iy.iter().map(|i| i.centroid).collect();
        let phi = r.correspondences.pairs();
        let pts: Vec<(Point3, Point3)> = phi.iter().map(|&(i, j)| (cx[i], cy[j])).collect();
        let metrics = label_gt_correspondences(&ix, &iy, &pair.gt, cfg.beta).and_then(|theta| {
            let (ip, defined) = eval::inlier_precision(&pts, &pair.gt, cfg.beta)?;
            let ir = eval::inlier_recall(&phi, &theta.pairs, &cx, &cy, &pair.gt, cfg.beta)?;
            Ok((ip, defined, ir, theta.pairs.len()))
        });
        match metrics {
            Ok((ip, defined, ir, n)) => {
                rec.ip = Some(ip);
                rec.ip_defined = defined;
                rec.ir = ir;
                rec.gt_correspondences = n;
            }
            Err(e) => rec.diagnostics.error = Some(format!("metrics: {e}")),
        }
    }
    if let Some(c) = r.coarse {
        if let Ok(e) = PoseError::between(&c, &pair.gt) {
            rec.coarse_rre_deg = Some(e.rre_deg);
            rec.coarse_rte_m = Some(e.rte_m);
        }
    }
    if let Some(f) = r.fine {
        match PoseError::between(&f, &pair.gt) {
            Ok(e) => {
                rec.rre_deg = Some(e.rre_deg);
                rec.rte_m = Some(e.rte_m);
                rec.success = e.success(cfg.rre_threshold, cfg.rte_threshold);
                rec.estimate = Some(f.to_row_major_3x4());
            }
            Err(e) => rec.diagnostics.error = Some(format!("pose error: {e}")),
        }
    }
    rec
}

/// Aggregates per-pair records. Order of `records` does not matter.
pub fn summarize(records: &[PairRecord], rre_threshold: f64, rte_threshold: f64) -> EvalSummary {
    let errors: Vec<Option<PoseError>> = records.iter().map(PairRecord::pose_error).collect();
    let evaluated: Vec<PoseError> = errors.iter().flatten().copied().collect();
    let rre: Vec<f64> = evaluated.iter().map(|e| e.rre_deg).collect();
    let rte: Vec<f64> = evaluated.iter().map(|e| e.rte_m).collect();
    let ips: Vec<f64> = records.iter().filter_map(|r| r.ip).collect();
    let irs: Vec<f64> = records.iter().filter_map(|r| r.ir).collect();
    let mean = |v: &[f64]| eval::mean_std(v).map(|(m, _)| m);
    let successes = evaluated.iter().filter(|e| e.success(rre_threshold, rte_threshold)).count();
    EvalSummary {
        pairs: records.len(),
        evaluated: evaluated.len(),
        skipped: records.len() - evaluated.len(),
        rre_deg: MeanStd::of(&rre),
        rte_m: MeanStd::of(&rte),
        median_rte_m: eval::median(&rte),
        registration_recall: eval::registration_recall(&errors, rre_threshold, rte_threshold),
        strict_registration_recall: (!records.is_empty()).then(|| successes as f64 / records.len() as f64),
        inlier_precision: mean(&ips),
        inlier_recall: mean(&irs),
        rre_threshold,
        rte_threshold,
    }
}

/// Registers every pair (in parallel) and scores it. Per-pair failures are
/// recorded, never propagated.
pub fn evaluate(pairs: &[EvalPair], model: &Model, categories: &CategoryConfig, cfg: &RegistrationConfig) -> EvalReport {
    evaluate_with(pairs.len(), |i| Ok(pairs[i].clone()), model, categories, cfg)
}

/// Like [`evaluate`], loading pair `i` on demand so only the pairs in flight
/// are held in memory. A failed load becomes an error record.
pub fn evaluate_with<F>(
    count: usize,
    load: F,
    model: &Model,
    categories: &CategoryConfig,
    cfg: &RegistrationConfig,
) -> EvalReport
where
    F: Fn(usize) -> Result<EvalPair> + Sync,
{
    let records: Vec<PairRecord> = (0..count)
        .into_par_iter()
        .map(|i| match load(i) {
            Ok(p) => evaluate_one(i, &p, model, categories, cfg),
            Err(e) => {
                let mut r = blank_record(i, format!("pair {i}"));
                r.diagnostics.error = Some(format!("load: {e}"));
                r
            }
        })
        .collect();
    let summary = summarize(&records, cfg.rre_threshold, cfg.rte_threshold);
    EvalReport { summary, records }
}

fn fmt_opt(v: Option<f64>, scale: f64, unit: &str) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{:.4}{unit}", x * scale))
}

impl EvalReport {
    /// One JSON object per pair.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn summary_table(&self) -> String {
        let m = &self.summary;
        let ms = |v: Option<MeanStd>, unit: &str| {
            v.map_or_else(|| "undefined".into(), |v| format!("{:.4} ± {:.4}{unit}", v.mean, v.std))
        };
        let mut s = String::new();
        let mut row = |k: &str, v: String| writeln!(s, "{k:<26}{v}").expect("writing to a string");
        row("pairs", m.pairs.to_string());
        row("evaluated", m.evaluated.to_string());
        row("skipped", m.skipped.to_string());
        row("RRE (deg)", ms(m.rre_deg, ""));
        row("RTE (m)", ms(m.rte_m, ""));
        row("median RTE (m)", fmt_opt(m.median_rte_m, 1.0, ""));
        row(
            &format!("RR ({}°, {} m)", m.rre_threshold, m.rte_threshold),
            fmt_opt(m.registration_recall, 100.0, " %"),
        );
        row("RR incl. skipped", fmt_opt(m.strict_registration_recall, 100.0, " %"));
        row("IP", fmt_opt(m.inlier_precision, 100.0, " %"));
        row("IR", fmt_opt(m.inlier_recall, 100.0, " %"));
        s
    }

    /// Writes `pairs.jsonl`, `summary.txt` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        put("pairs.jsonl", self.to_jsonl())?;
        put("summary.txt", self.summary_table())?;
        put(
            "summary.json",
            serde_json::to_string_pretty(&self.summary).expect("summary serializes") + "\n",
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::PointCloud;
    use crate::nets::ModelConfig;
    use nalgebra::Vector3;

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            shape_points: 8,
            gcn_dims: [8, 8, 8],
            shape_dims: [8, 8, 8],
            tnet_hidden: [4, 4],
            ..ModelConfig::default()
        };
        Model::new(cfg, 3).unwrap()
    }

    /// Clusters of car points (raw label 10) at the given centers.
    fn scene(centers: &[(f64, f64)]) -> SemanticPointCloud {
        let mut pts = Vec::new();
        for (c, &(x, y)) in centers.iter().enumerate() {
            for i in 0..30 {
                let a = i as f64 * 0.7 + c as f64;
                pts.push(Point3::new(x + 0.8 * a.cos(), y + 0.8 * a.sin(), 0.1 * (i % 7) as f64));
            }
        }
        let n = pts.len();
        SemanticPointCloud::new(PointCloud::new(pts), vec![10; n]).unwrap()
    }

    #[test]
    fn consistent_pairs_drop_outliers() {
        let t = RigidTransform::from_axis_angle(Vector3::z(), 1.1, Vector3::new(3.0, -2.0, 0.5));
        let src: Vec<Point3> = (0..8).map(|i| Point3::new((i * i) as f64, (3 * i) as f64 - 7.0, 0.5 * i as f64)).collect();
        let mut dst: Vec<Point3> = src.iter().map(|p| t.apply_point(p)).collect();
        dst[2] = dst[2] + Point3::new(9.0, 0.0, 0.0);
        dst[5] = dst[6];
        assert_eq!(consistent_pairs(&src, &dst, 0.5), vec![0, 1, 3, 4, 6, 7]);
        let all: Vec<Point3> = src.iter().map(|p| t.apply_point(p)).collect();
        assert_eq!(consistent_pairs(&src, &all, 1e-9), (0..8).collect::<Vec<_>>());
        assert!(consistent_pairs(&[], &[], 1.0).is_empty());
    }

    #[test]
    fn too_few_instances_is_skipped() {
        let s = scene(&[(0.0, 0.0), (10.0, 0.0)]);
        let r = register_pair(&s, &s, &tiny_model(), &CategoryConfig::default(), &RegistrationConfig::default());
        assert_eq!(r.diagnostics.skipped.as_deref(), Some(REASON_INSTANCES));
        assert_eq!(r.diagnostics.instances_x, 2);
        assert!(r.coarse.is_none() && r.fine.is_none());
    }

    #[test]
    fn label_mismatch_goes_to_diagnostics() {
        let s = scene(&[(0.0, 0.0)]);
        let bad = SemanticPointCloud::new(PointCloud::new(vec![Point3::new(f64::NAN, 0.0, 0.0)]), vec![10]).unwrap();
        let r = register_pair(&bad, &s, &tiny_model(), &CategoryConfig::default(), &RegistrationConfig::default());
        assert!(r.diagnostics.error.as_deref().unwrap().contains("extraction"));
        assert!(r.skipped());
    }

    fn record(rre: Option<f64>, rte: Option<f64>, ip: Option<f64>, ir: Option<f64>) -> PairRecord {
        PairRecord {
            index: 0,
            name: String::new(),
            rre_deg: rre,
            rte_m: rte,
            coarse_rre_deg: None,
            coarse_rte_m: None,
            success: false,
            ip,
            ip_defined: ip.is_some(),
            ir,
            gt_correspondences: 0,
            estimate: None,
            diagnostics: Diagnostics::default(),
        }
    }

    #[test]
    fn summary_by_hand() {
        let recs = [
            record(Some(1.0), Some(0.1), Some(1.0), Some(0.5)),
            record(Some(3.0), Some(2.5), Some(0.5), None),
            record(None, None, Some(0.0), Some(0.0)),
        ];
        let s = summarize(&recs, 5.0, 2.0);
        assert_eq!((s.pairs, s.evaluated, s.skipped), (3, 2, 1));
        assert_eq!(s.registration_recall, Some(0.5));
        assert_eq!(s.strict_registration_recall, Some(1.0 / 3.0));
        assert_eq!(s.rre_deg, Some(MeanStd { mean: 2.0, std: 1.0 }));
        assert_eq!(s.median_rte_m, Some(1.3));
        assert_eq!(s.inlier_precision, Some(0.5));
        assert_eq!(s.inlier_recall, Some(0.25));
        let mut rev = recs.clone();
        rev.reverse();
        assert_eq!(summarize(&rev, 5.0, 2.0), s);
    }

    #[test]
    fn all_skipped_is_undefined() {
        let s = summarize(&[record(None, None, None, None)], 5.0, 2.0);
        assert_eq!(s.registration_recall, None);
        assert_eq!(s.rte_m, None);
        assert_eq!(s.inlier_precision, None);
        let report = EvalReport { summary: s, records: vec![] };
        assert!(report.summary_table().contains("undefined"));
    }

    #[test]
    fn evaluate_skips_without_aborting() {
        let small = scene(&[(0.0, 0.0)]);
        let pairs = vec![EvalPair {
            name: "a".into(),
            x: small.clone(),
            y: small,
            gt: RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0)),
        }];
        let rep = evaluate(&pairs, &tiny_model(), &CategoryConfig::default(), &RegistrationConfig::default());
        assert_eq!(rep.summary.skipped, 1);
        assert_eq!(rep.records[0].diagnostics.skipped.as_deref(), Some(REASON_INSTANCES));
        let line = rep.to_jsonl();
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(v["name"], "a");
    }

    #[test]
    fn config_validation() {
        assert!(RegistrationConfig::default().validate().is_ok());
        let bad = RegistrationConfig {
            min_correspondences: 2,
            ..RegistrationConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
