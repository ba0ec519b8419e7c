//! Affinity, dustbin augmentation, Sinkhorn normalization and hard assignment.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nets::{extract_features, Model, SceneFeatures, SceneInput};
use crate::tensor::{concat, Tape, Tensor, Var};

/// Default acceptance threshold on assignment probabilities.
pub const DEFAULT_THRESHOLD: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

/// `A_ij = F_X,iᵀ · W · F_Y,j`.
pub fn affinity<'t>(fx: &Var<'t>, fy: &Var<'t>, w: &Var<'t>) -> Result<Var<'t>> {
    let (sx, sy, sw) = (fx.shape(), fy.shape(), w.shape());
    if sx.len() != 2 || sy.len() != 2 || sw != [sx[1], sy[1]] {
        return Err(Error::ShapeMismatch {
            op: "affinity",
            lhs: sx,
            rhs: sy,
        });
    }
    fx.matmul(w)?.matmul_t(fy, false, true)
}

/// Appends a row and a column filled with `z` (corner included).
pub fn augment_dustbins<'t>(a: &Var<'t>, z: &Var<'t>) -> Result<Var<'t>> {
    let s = a.shape();
    if s.len() != 2 || z.value().len() != 1 {
        return Err(Error::ShapeMismatch {
            op: "augment_dustbins",
            lhs: s,
            rhs: z.shape(),
        });
    }
    let (m, n) = (s[0], s[1]);
    let tape = a.tape();
    let z = z.reshape(&[1, 1])?;
    let col = tape.constant(Tensor::full(&[m, 1], 1.0)).mul(&z)?;
    let row = tape.constant(Tensor::full(&[1, n + 1], 1.0)).mul(&z)?;
    concat(&[concat(&[*a, col], 1)?, row], 0)
}

/// Output of [`sinkhorn`].
#[derive(Clone, Copy, Debug)]
pub struct SoftAssignment<'t> {
    /// Elementwise log of the augmented `(M+1)×(N+1)` plan.
    pub log_plan: Var<'t>,
    pub iterations: usize,
    /// `max |row sum − 1|, |col sum − 1|` after the last iteration.
    pub residual: f64,
}

impl SoftAssignment<'_> {
    /// The augmented plan `P̄`.
    pub fn plan(&self) -> Tensor {
        self.log_plan.value().map(f64::exp)
    }

    /// The `M×N` plan without dustbins.
    pub fn trimmed(&self) -> Tensor {
        let full = self.plan();
        let (rows, cols) = (full.rows() - 1, full.cols() - 1);
        let data = (0..rows)
            .flat_map(|i| full.row(i)[..cols].to_vec())
            .collect();
        Tensor::new(vec![rows, cols], data).expect("consistent dims")
    }

    pub fn converged(&self, tol: f64) -> bool {
        self.residual <= tol
    }
}

fn plan_residual(log_plan: &Tensor) -> f64 {
    let (r, c) = (log_plan.rows(), log_plan.cols());
    let mut col = vec![0.0; c];
    let mut worst: f64 = 0.0;
    for i in 0..r {
        let mut row = 0.0;
        for (j, v) in log_plan.row(i).iter().enumerate() {
            let e = v.exp();
            row += e;
            col[j] += e;
        }
        worst = worst.max((row - 1.0).abs());
    }
    col.iter().fold(worst, |w, s| w.max((s - 1.0).abs()))
}

/// Alternating row and column normalization of `exp(Ā)`.
///
/// Entries are shifted by the global max before exponentiation. Each
/// normalization is carried out on logarithms (`x − log Σ exp x`), which is the
/// same map as dividing by the sum but cannot underflow to an exact zero.
pub fn sinkhorn<'t>(aug: &Var<'t>, cfg: &SinkhornConfig) -> Result<SoftAssignment<'t>> {
    if cfg.max_iters == 0 || !(cfg.tol > 0.0) {
        return Err(Error::validation("sinkhorn needs max_iters >= 1 and tol > 0"));
    }
    let value = aug.value();
    if value.rank() != 2 || value.is_empty() {
        return Err(Error::validation("sinkhorn needs a non-empty matrix"));
    }
    if !value.all_finite() {
        return Err(Error::NonFinite("sinkhorn input"));
    }
    let shift = value.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut log_plan = aug.sub(&aug.tape().constant(Tensor::scalar(shift)))?;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        log_plan = log_plan.sub(&log_plan.logsumexp(1)?)?;
        log_plan = log_plan.sub(&log_plan.logsumexp(0)?)?;
        iterations += 1;
        residual = plan_residual(&log_plan.value());
        if residual <= cfg.tol {
            break;
        }
    }
    Ok(SoftAssignment {
        log_plan,
        iterations,
        residual,
    })
}

/// Tape-free [`sinkhorn`]: returns `(plan, iterations, residual)`.
pub fn sinkhorn_plan(aug: &Tensor, cfg: &SinkhornConfig) -> Result<(Tensor, usize, f64)> {
    let tape = Tape::new();
    let x = tape.constant(aug.clone());
    // run one iteration at a time on fresh tapes to keep memory flat
    let first = sinkhorn(&x, &SinkhornConfig { max_iters: 1, tol: cfg.tol })?;
    let mut log_plan = (*first.log_plan.value()).clone();
    let (mut iterations, mut residual) = (1, first.residual);
    while iterations < cfg.max_iters && residual > cfg.tol {
        let tape = Tape::new();
        let v = tape.constant(log_plan);
        let v = v.sub(&v.logsumexp(1)?)?;
        let v = v.sub(&v.logsumexp(0)?)?;
        log_plan = (*v.value()).clone();
        residual = plan_residual(&log_plan);
        iterations += 1;
    }
    Ok((log_plan.map(f64::exp), iterations, residual))
}

/// One accepted instance pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Match {
    pub i: usize,
    pub j: usize,
    pub score: f64,
}

/// One-to-one instance correspondences with the instances left unmatched.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CorrespondenceSet {
    pub matches: Vec<Match>,
    pub unmatched_x: Vec<usize>,
    pub unmatched_y: Vec<usize>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.matches.iter().map(|m| (m.i, m.j)).collect()
    }

    /// `i j score` lines followed by the unmatched lists.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for m in &self.matches {
            s.push_str(&format!("{} {} {:.9}\n", m.i, m.j, m.score));
        }
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        s.push_str(&format!("unmatched_x {}\n", join(&self.unmatched_x)).replace(" \n", "\n"));
        s.push_str(&format!("unmatched_y {}\n", join(&self.unmatched_y)).replace(" \n", "\n"));
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Accepts `(i, j)` iff `P_ij > threshold` and `i`, `j` are each other's
/// row and column argmax (first index on ties).
pub fn hard_assign(p: &Tensor, threshold: f64) -> Result<CorrespondenceSet> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::validation(format!("threshold {threshold} outside (0, 1)")));
    }
    if p.rank() != 2 {
        return Err(Error::validation("assignment must be a matrix"));
    }
    let (m, n) = (p.rows(), p.cols());
    let argmax = |vals: &mut dyn Iterator<Item = f64>| {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (idx, v) in vals.enumerate() {
            if v > best.1 {
                best = (idx, v);
            }
        }
        best.0
    };
    let col_best: Vec<usize> = (0..n)
        .map(|j| argmax(&mut (0..m).map(|i| p.at2(i, j))))
        .collect();
    let mut out = CorrespondenceSet::default();
    let mut taken_y = vec![false; n];
    for i in 0..m {
        let j = if n == 0 { usize::MAX } else { argmax(&mut p.row(i).iter().copied()) };
        if j != usize::MAX && col_best[j] == i && p.at2(i, j) > threshold {
            out.matches.push(Match { i, j, score: p.at2(i, j) });
            taken_y[j] = true;
        } else {
            out.unmatched_x.push(i);
        }
    }
    out.unmatched_y = (0..n).filter(|&j| !taken_y[j]).collect();
    debug_assert!(is_one_to_one(&out.pairs()));
    Ok(out)
}

pub(crate) fn is_one_to_one(pairs: &[(usize, usize)]) -> bool {
    let mut xs: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let mut ys: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    xs.sort_unstable();
    ys.sort_unstable();
    xs.windows(2).all(|w| w[0] != w[1]) && ys.windows(2).all(|w| w[0] != w[1])
}

/// Maximum-score one-to-one assignment of a rectangular score matrix
/// (`min(M, N)` pairs), by the O(n³) shortest augmenting path method.
pub fn hungarian(score: &Tensor) -> Result<Vec<(usize, usize)>> {
    if score.rank() != 2 || !score.all_finite() {
        return Err(Error::validation("hungarian needs a finite matrix"));
    }
    let (m, n) = (score.rows(), score.cols());
    let transpose = m > n;
    let (rows, cols) = if transpose { (n, m) } else { (m, n) };
    let cost = |i: usize, j: usize| if transpose { -score.at2(j, i) } else { -score.at2(i, j) };
    // potentials and matching over 1-based indices with column 0 as sentinel
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=cols)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (r, c) = (owner[j] - 1, j - 1);
            if transpose {
                (c, r)
            } else {
                (r, c)
            }
        })
        .collect();
    pairs.sort_unstable();
    Ok(pairs)
}

/// Everything computed for one scene pair up to the soft assignment.
pub struct PairForward<'t> {
    pub features_x: SceneFeatures<'t>,
    pub features_y: SceneFeatures<'t>,
    pub affinity: Var<'t>,
    pub assignment: SoftAssignment<'t>,
}

/// Features → affinity → dustbins → Sinkhorn.
pub fn forward_pair<'t>(
    model: &Model,
    tape: &'t Tape,
    x: &SceneInput,
    y: &SceneInput,
    cfg: &SinkhornConfig,
) -> Result<PairForward<'t>> {
    let (fx, fy) = extract_features(model, tape, x, y)?;
    let a = affinity(&fx.fused, &fy.fused, &model.p(tape, "affinity.W"))?;
    let aug = augment_dustbins(&a, &model.p(tape, "dustbin.z"))?;
    let assignment = sinkhorn(&aug, cfg)?;
    Ok(PairForward {
        features_x: fx,
        features_y: fy,
        affinity: a,
        assignment,
    })
}
