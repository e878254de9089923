//! Differentiable k-means structural alignment.
//!
//! A fixed number of soft E/M iterations clusters the student's flattened
//! layer weights; the resulting soft assignment and centroids are matched
//! against each teacher's centroid table through a hybrid of assignment
//! Jaccard overlap and centroid distance, combined into teacher-aligned
//! target centroids, and finally scored by a mean-squared reconstruction
//! loss. The whole pipeline is one fixed computational graph, so
//! `align_loss_and_grad` returns its exact derivative with respect to the
//! student weights — E/M unroll included — which `align-check` and the test
//! suite pin against central finite differences.
//!
//! Teacher soft assignments are reconstructed locally as one-hot rows from
//! the index sequence that already crossed the wire, costing zero extra
//! communication.

use crate::cfd::TeacherWeights;
use crate::error::{Error, Result};
use crate::wcp::CompressedLayer;

/// Stability constant: softmax/M-step denominators and similarity damping.
pub const EPSILON: f64 = 1e-8;
/// Default number of unrolled E/M iterations.
pub const DEFAULT_T_DKM: usize = 5;
/// Default geometric-mean mix between Jaccard and distance similarity.
pub const DEFAULT_ALPHA_MIX: f64 = 0.5;
/// Default centroid-distance sensitivity.
pub const DEFAULT_BETA_DIST: f64 = 1.0;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Row-stochastic N×K matrix mapping weights to centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    n: usize,
    k: usize,
    data: Vec<f64>,
}

impl SoftAssignment {
    pub fn new(n: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * k {
            return Err(Error::Shape(format!("assignment data length {} != {n}x{k}", data.len())));
        }
        Ok(Self { n, k, data })
    }

    /// One-hot rows from a hard index sequence.
    pub fn one_hot(indices: &[u32], k: usize) -> Self {
        let n = indices.len();
        let mut data = vec![0.0; n * k];
        for (row, &idx) in indices.iter().enumerate() {
            data[row * k + idx as usize] = 1.0;
        }
        Self { n, k, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.k + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.k..(row + 1) * self.k]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Student-side clustering state after a fixed E/M unroll.
#[derive(Debug, Clone)]
pub struct StudentClustering {
    pub centroids: Vec<f64>,
    pub assignment: SoftAssignment,
    pub iterations_run: usize,
}

/// Row-normalized K_teacher × K_student matching weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchWeights {
    k_teacher: usize,
    k_student: usize,
    data: Vec<f64>,
}

impl MatchWeights {
    pub fn k_teacher(&self) -> usize {
        self.k_teacher
    }

    pub fn k_student(&self) -> usize {
        self.k_student
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.k_student + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k_student..(i + 1) * self.k_student]
    }
}

/// Teacher-aligned target centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetCentroids {
    values: Vec<f64>,
}

impl TargetCentroids {
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// One teacher's contribution to alignment, borrowed from its compressed
/// layer: the centroid table plus the hard index sequence that stands in for
/// its soft assignment.
#[derive(Debug, Clone, Copy)]
pub struct AlignTeacher<'a> {
    pub indices: &'a [u32],
    pub centroids: &'a [f64],
}

impl<'a> AlignTeacher<'a> {
    pub fn from_layer(layer: &'a CompressedLayer) -> Self {
        Self { indices: layer.indices().as_slice(), centroids: layer.table().values() }
    }
}

/// Hyperparameters of the alignment pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignConfig {
    /// Unrolled E/M iterations; fixed, no early stopping.
    pub t_dkm: usize,
    /// Geometric-mean weight on the Jaccard term (1 = Jaccard only).
    pub alpha_mix: f64,
    /// Centroid-distance sensitivity in the similarity kernel.
    pub beta_dist: f64,
    pub eps: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            t_dkm: DEFAULT_T_DKM,
            alpha_mix: DEFAULT_ALPHA_MIX,
            beta_dist: DEFAULT_BETA_DIST,
            eps: EPSILON,
        }
    }
}

// ---------------------------------------------------------------------------
// E-step / M-step
// ---------------------------------------------------------------------------

/// Soft assignment A[n,k] = softmax_k(−(w[n] − c[k])²).
pub fn e_step(weights: &[f64], centroids: &[f64]) -> SoftAssignment {
    let n = weights.len();
    let k = centroids.len();
    let mut data = vec![0.0; n * k];
    for (row, &w) in weights.iter().enumerate() {
        let out = &mut data[row * k..(row + 1) * k];
        let mut max = f64::NEG_INFINITY;
        for (j, &c) in centroids.iter().enumerate() {
            let d = w - c;
            out[j] = -d * d;
            max = max.max(out[j]);
        }
        let mut sum = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in out.iter_mut() {
            *v /= sum;
        }
    }
    SoftAssignment { n, k, data }
}

/// Soft centroid update C[k] = Σ A[n,k]·w[n] / (Σ A[n,k] + ε).
pub fn m_step(weights: &[f64], assignment: &SoftAssignment, eps: f64) -> Vec<f64> {
    let k = assignment.k();
    let mut num = vec![0.0; k];
    let mut den = vec![eps; k];
    for (row, &w) in weights.iter().enumerate() {
        let a = assignment.row(row);
        for j in 0..k {
            num[j] += a[j] * w;
            den[j] += a[j];
        }
    }
    num.iter().zip(&den).map(|(n, d)| n / d).collect()
}

/// Exactly `t_dkm` alternations of E-step and M-step from a deterministic
/// initial table; no early stopping, so the computation graph is fixed.
pub fn dkm_cluster(weights: &[f64], c_init: &[f64], t_dkm: usize, eps: f64) -> Result<StudentClustering> {
    if t_dkm < 1 {
        return Err(Error::Config("t_dkm must be >= 1".into()));
    }
    if c_init.is_empty() || weights.is_empty() {
        return Err(Error::Config("dkm_cluster needs nonempty weights and centroids".into()));
    }
    let mut centroids = c_init.to_vec();
    let mut assignment = None;
    for _ in 0..t_dkm {
        let a = e_step(weights, &centroids);
        centroids = m_step(weights, &a, eps);
        assignment = Some(a);
    }
    Ok(StudentClustering { centroids, assignment: assignment.unwrap(), iterations_run: t_dkm })
}

/// One-hot soft assignment a teacher's index sequence implies.
pub fn teacher_assignment(layer: &CompressedLayer) -> SoftAssignment {
    SoftAssignment::one_hot(layer.indices().as_slice(), layer.table().k())
}

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

/// Hybrid matching between teacher and student clusters: column-wise Jaccard
/// overlap of the assignments, a Gaussian kernel on centroid distance, their
/// weighted geometric mean, and exact row normalization.
pub fn match_weights(
    a_teacher: &SoftAssignment,
    c_teacher: &[f64],
    a_student: &SoftAssignment,
    c_student: &[f64],
    alpha_mix: f64,
    beta_dist: f64,
    eps: f64,
) -> Result<MatchWeights> {
    if a_teacher.n() != a_student.n() {
        return Err(Error::Shape(format!(
            "assignments disagree on N: {} vs {}",
            a_teacher.n(),
            a_student.n()
        )));
    }
    if a_teacher.k() != c_teacher.len() || a_student.k() != c_student.len() {
        return Err(Error::Shape("centroid count does not match assignment width".into()));
    }
    let (kt, ks) = (a_teacher.k(), a_student.k());
    let n = a_teacher.n();
    let mut data = vec![0.0; kt * ks];
    for i in 0..kt {
        let row = &mut data[i * ks..(i + 1) * ks];
        for (j, slot) in row.iter_mut().enumerate() {
            let mut mn = 0.0;
            let mut mx = 0.0;
            for r in 0..n {
                let t = a_teacher.get(r, i);
                let s = a_student.get(r, j);
                mn += t.min(s);
                mx += t.max(s);
            }
            let jac = mn / (mx + eps);
            let d = c_teacher[i] - c_student[j];
            let sim = (-beta_dist * d * d).exp();
            *slot = (jac + eps).powf(alpha_mix) * (sim + eps).powf(1.0 - alpha_mix);
        }
        let sum: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(MatchWeights { k_teacher: kt, k_student: ks, data })
}

/// Teacher-aligned target centroids:
/// C̃[j] = Σ_t α_t · Σ_i w_t[i,j] · C_t[i].
pub fn target_centroids(
    teachers: &[(&MatchWeights, &[f64])],
    alpha: &TeacherWeights,
) -> Result<TargetCentroids> {
    if teachers.is_empty() || teachers.len() != alpha.len() {
        return Err(Error::Shape(format!(
            "{} teachers with {} weights",
            teachers.len(),
            alpha.len()
        )));
    }
    let ks = teachers[0].0.k_student();
    let kt = teachers[0].0.k_teacher();
    let mut values = vec![0.0; ks];
    for ((w, c_t), &a) in teachers.iter().zip(alpha.alphas()) {
        if w.k_student() != ks || w.k_teacher() != kt {
            return Err(Error::Shape("teachers disagree on cluster counts".into()));
        }
        if w.k_teacher() != c_t.len() {
            return Err(Error::Shape("match weights do not cover teacher centroids".into()));
        }
        for i in 0..w.k_teacher() {
            let row = w.row(i);
            let ci = c_t[i];
            for j in 0..ks {
                values[j] += a * row[j] * ci;
            }
        }
    }
    Ok(TargetCentroids { values })
}

// ---------------------------------------------------------------------------
// Alignment loss: fused forward (+ optional exact backward)
// ---------------------------------------------------------------------------

/// Everything the backward pass needs from one teacher's matching block.
struct TeacherTrace {
    mx: Vec<f64>,
    jac: Vec<f64>,
    sim: Vec<f64>,
    m: Vec<f64>,
    rowsum: Vec<f64>,
    w: Vec<f64>,
}

struct PipelineTrace {
    /// assignments[t] is A^{t+1}, n×k row-major (t_dkm entries).
    assignments: Vec<Vec<f64>>,
    /// centroids[t] is C^t (t_dkm + 1 entries, [0] = c_init).
    centroids: Vec<Vec<f64>>,
    /// dens[t] pairs with assignments[t]: Σ_n A[n,k] + ε.
    dens: Vec<Vec<f64>>,
    teachers: Vec<TeacherTrace>,
    target: Vec<f64>,
    residual: Vec<f64>,
    loss: f64,
}

fn check_align_inputs(
    weights: &[f64],
    c_init: &[f64],
    teachers: &[AlignTeacher<'_>],
    alpha: &TeacherWeights,
    cfg: &AlignConfig,
) -> Result<()> {
    if weights.is_empty() || c_init.is_empty() {
        return Err(Error::Config("alignment needs nonempty weights and centroids".into()));
    }
    if teachers.is_empty() || teachers.len() != alpha.len() {
        return Err(Error::Shape(format!(
            "{} teachers with {} importance weights",
            teachers.len(),
            alpha.len()
        )));
    }
    for (t, teacher) in teachers.iter().enumerate() {
        if teacher.indices.len() != weights.len() {
            return Err(Error::Shape(format!(
                "teacher {t}: {} indices for {} weights",
                teacher.indices.len(),
                weights.len()
            )));
        }
        if teacher.centroids.is_empty() {
            return Err(Error::Shape(format!("teacher {t}: empty centroid table")));
        }
        if let Some(&bad) = teacher
            .indices
            .iter()
            .find(|&&i| i as usize >= teacher.centroids.len())
        {
            return Err(Error::Corrupt(format!("teacher {t}: index {bad} out of range")));
        }
    }
    if cfg.t_dkm < 1 || !(0.0..=1.0).contains(&cfg.alpha_mix) || !(cfg.beta_dist > 0.0) || !(cfg.eps > 0.0) {
        return Err(Error::Config(format!(
            "bad alignment hyperparameters: t_dkm={}, alpha_mix={}, beta_dist={}, eps={}",
            cfg.t_dkm, cfg.alpha_mix, cfg.beta_dist, cfg.eps
        )));
    }
    Ok(())
}

/// Forward pass of the full pipeline, keeping every intermediate the
/// backward pass needs. Teacher assignments are one-hot, so the Jaccard
/// sums collapse to per-cluster partial sums of the student assignment:
/// mn[i,j] = Σ_{n: idx_t[n]=i} A[n,j] and mx[i,j] = cnt_i + colsum_j − mn[i,j].
fn forward_pipeline(
    weights: &[f64],
    c_init: &[f64],
    teachers: &[AlignTeacher<'_>],
    alpha: &TeacherWeights,
    cfg: &AlignConfig,
) -> PipelineTrace {
    let n = weights.len();
    let k = c_init.len();
    let eps = cfg.eps;

    // Unrolled E/M.
    let mut assignments = Vec::with_capacity(cfg.t_dkm);
    let mut centroids = Vec::with_capacity(cfg.t_dkm + 1);
    let mut dens = Vec::with_capacity(cfg.t_dkm);
    centroids.push(c_init.to_vec());
    for t in 0..cfg.t_dkm {
        let a = e_step(weights, &centroids[t]);
        let mut num = vec![0.0; k];
        let mut den = vec![eps; k];
        for (row, &w) in weights.iter().enumerate() {
            let ar = a.row(row);
            for j in 0..k {
                num[j] += ar[j] * w;
                den[j] += ar[j];
            }
        }
        centroids.push(num.iter().zip(&den).map(|(x, d)| x / d).collect());
        dens.push(den);
        assignments.push(a.data);
    }
    let a_s = &assignments[cfg.t_dkm - 1];
    let c_s = &centroids[cfg.t_dkm];

    let mut colsum = vec![0.0; k];
    for row in 0..n {
        for j in 0..k {
            colsum[j] += a_s[row * k + j];
        }
    }

    // Per-teacher matching.
    let mut traces = Vec::with_capacity(teachers.len());
    let mut target = vec![0.0; k];
    for (teacher, &a_t) in teachers.iter().zip(alpha.alphas()) {
        let kt = teacher.centroids.len();
        let mut counts = vec![0.0; kt];
        let mut mn = vec![0.0; kt * k];
        for (row, &idx) in teacher.indices.iter().enumerate() {
            let i = idx as usize;
            counts[i] += 1.0;
            let dst = &mut mn[i * k..(i + 1) * k];
            let src = &a_s[row * k..(row + 1) * k];
            for j in 0..k {
                dst[j] += src[j];
            }
        }
        let mut mx = vec![0.0; kt * k];
        let mut jac = vec![0.0; kt * k];
        let mut sim = vec![0.0; kt * k];
        let mut m = vec![0.0; kt * k];
        let mut rowsum = vec![0.0; kt];
        let mut w = vec![0.0; kt * k];
        for i in 0..kt {
            for j in 0..k {
                let e = i * k + j;
                mx[e] = counts[i] + colsum[j] - mn[e];
                jac[e] = mn[e] / (mx[e] + eps);
                let d = teacher.centroids[i] - c_s[j];
                sim[e] = (-cfg.beta_dist * d * d).exp();
                m[e] = (jac[e] + eps).powf(cfg.alpha_mix) * (sim[e] + eps).powf(1.0 - cfg.alpha_mix);
                rowsum[i] += m[e];
            }
            for j in 0..k {
                let e = i * k + j;
                w[e] = m[e] / rowsum[i];
                target[j] += a_t * w[e] * teacher.centroids[i];
            }
        }
        traces.push(TeacherTrace { mx, jac, sim, m, rowsum, w });
    }

    // Reconstruction loss.
    let mut residual = vec![0.0; n];
    let mut loss = 0.0;
    for row in 0..n {
        let mut recon = 0.0;
        let ar = &a_s[row * k..(row + 1) * k];
        for j in 0..k {
            recon += ar[j] * target[j];
        }
        let r = weights[row] - recon;
        residual[row] = r;
        loss += r * r;
    }
    loss /= n as f64;

    PipelineTrace { assignments, centroids, dens, teachers: traces, target, residual, loss }
}

/// Alignment loss L = (1/N)·‖W − A_S·C̃‖² of the full pipeline.
pub fn align_loss(
    weights: &[f64],
    c_init: &[f64],
    teachers: &[AlignTeacher<'_>],
    alpha: &TeacherWeights,
    cfg: &AlignConfig,
) -> Result<f64> {
    check_align_inputs(weights, c_init, teachers, alpha, cfg)?;
    Ok(forward_pipeline(weights, c_init, teachers, alpha, cfg).loss)
}

/// Alignment loss plus its exact gradient with respect to the student
/// weights, obtained by reverse-mode differentiation of the unrolled
/// pipeline (E/M iterations, Jaccard and distance matching, target centroids
/// and the reconstruction loss). `c_init` and the teacher data are constants.
pub fn align_loss_and_grad(
    weights: &[f64],
    c_init: &[f64],
    teachers: &[AlignTeacher<'_>],
    alpha: &TeacherWeights,
    cfg: &AlignConfig,
) -> Result<(f64, Vec<f64>)> {
    check_align_inputs(weights, c_init, teachers, alpha, cfg)?;
    let trace = forward_pipeline(weights, c_init, teachers, alpha, cfg);
    let n = weights.len();
    let k = c_init.len();
    let eps = cfg.eps;
    let a_s = &trace.assignments[cfg.t_dkm - 1];
    let c_s = &trace.centroids[cfg.t_dkm];

    let mut w_bar = vec![0.0; n];
    let mut a_bar = vec![0.0; n * k]; // grad wrt A_S = A^{t_dkm}
    let mut c_bar = vec![0.0; k]; // grad wrt C_S = C^{t_dkm}
    let mut target_bar = vec![0.0; k];

    // Loss head: L = (1/N) Σ (w[n] − Σ_j A[n,j]·C̃[j])².
    let scale = 2.0 / n as f64;
    for row in 0..n {
        let r = trace.residual[row];
        w_bar[row] += scale * r;
        let ar = &a_s[row * k..(row + 1) * k];
        let ab = &mut a_bar[row * k..(row + 1) * k];
        for j in 0..k {
            ab[j] -= scale * r * trace.target[j];
            target_bar[j] -= scale * r * ar[j];
        }
    }

    // Matching blocks, one per teacher.
    for (teacher, (tr, &a_t)) in teachers.iter().zip(trace.teachers.iter().zip(alpha.alphas())) {
        let kt = teacher.centroids.len();

        // C̃[j] += α_t · w[i,j] · C_t[i]  ⇒  w̄[i,j] = α_t · C_t[i] · C̃̄[j]
        // Row normalization w = m / rowsum ⇒
        // m̄[i,j] = (w̄[i,j] − Σ_j' w̄[i,j']·w[i,j']) / rowsum[i].
        let mut m_bar = vec![0.0; kt * k];
        for i in 0..kt {
            let ci = teacher.centroids[i];
            let mut dot = 0.0;
            for j in 0..k {
                let wb = a_t * ci * target_bar[j];
                dot += wb * tr.w[i * k + j];
            }
            for j in 0..k {
                let e = i * k + j;
                let wb = a_t * ci * target_bar[j];
                m_bar[e] = (wb - dot) / tr.rowsum[i];
            }
        }

        // m = (jac+ε)^a · (sim+ε)^{1−a}
        // sim = exp(−β·(C_t[i] − C_s[j])²) ⇒ ∂sim/∂C_s[j] = sim·2β(C_t[i]−C_s[j])
        // jac = mn/(mx+ε) with ∂jac/∂mn = 1/(mx+ε), ∂jac/∂mx = −jac/(mx+ε).
        // One-hot teacher ⇒ ∂mn[i,j]/∂A[r,j] = [idx_r = i],
        //                   ∂mx[i,j]/∂A[r,j] = [idx_r ≠ i].
        let mut mn_bar = vec![0.0; kt * k];
        let mut mx_bar_colsum = vec![0.0; k];
        let mut mx_bar = vec![0.0; kt * k];
        for i in 0..kt {
            for j in 0..k {
                let e = i * k + j;
                let jac_bar = m_bar[e] * cfg.alpha_mix * tr.m[e] / (tr.jac[e] + eps);
                let sim_bar = m_bar[e] * (1.0 - cfg.alpha_mix) * tr.m[e] / (tr.sim[e] + eps);
                let d = teacher.centroids[i] - c_s[j];
                c_bar[j] += sim_bar * tr.sim[e] * 2.0 * cfg.beta_dist * d;
                let inv = 1.0 / (tr.mx[e] + eps);
                mn_bar[e] = jac_bar * inv;
                mx_bar[e] = -jac_bar * tr.jac[e] * inv;
                mx_bar_colsum[j] += mx_bar[e];
            }
        }
        for (row, &idx) in teacher.indices.iter().enumerate() {
            let i = idx as usize;
            let ab = &mut a_bar[row * k..(row + 1) * k];
            for j in 0..k {
                let e = i * k + j;
                ab[j] += mn_bar[e] + (mx_bar_colsum[j] - mx_bar[e]);
            }
        }
    }

    // Reverse through the unrolled E/M iterations.
    for t in (0..cfg.t_dkm).rev() {
        let a = &trace.assignments[t]; // A^{t+1}
        let den = &trace.dens[t];
        let c_out = &trace.centroids[t + 1]; // C^{t+1}
        let c_in = &trace.centroids[t]; // C^t

        // M-step: C[j] = Σ A[r,j]·w[r] / den[j]
        //   ∂C[j]/∂A[r,j] = (w[r] − C[j]) / den[j]
        //   ∂C[j]/∂w[r]   = A[r,j] / den[j]
        for row in 0..n {
            let ar = &a[row * k..(row + 1) * k];
            let ab = &mut a_bar[row * k..(row + 1) * k];
            let w = weights[row];
            let mut acc = 0.0;
            for j in 0..k {
                let cb = c_bar[j] / den[j];
                ab[j] += cb * (w - c_out[j]);
                acc += cb * ar[j];
            }
            w_bar[row] += acc;
        }

        // E-step: A[r,:] = softmax(d[r,:]), d[r,j] = −(w[r] − C_in[j])².
        let mut c_in_bar = vec![0.0; k];
        for row in 0..n {
            let ar = &a[row * k..(row + 1) * k];
            let ab = &a_bar[row * k..(row + 1) * k];
            let mut dot = 0.0;
            for j in 0..k {
                dot += ab[j] * ar[j];
            }
            let w = weights[row];
            for j in 0..k {
                let d_bar = ar[j] * (ab[j] - dot);
                let diff = w - c_in[j];
                w_bar[row] += d_bar * (-2.0 * diff);
                c_in_bar[j] += d_bar * (2.0 * diff);
            }
        }

        c_bar = c_in_bar;
        if t > 0 {
            a_bar.iter_mut().for_each(|v| *v = 0.0);
        }
        // At t = 0, c_bar flows into the constant c_init and is dropped.
    }

    Ok((trace.loss, w_bar))
}
