//! T-distributed spherical (T-SP) similarity and the partitioned-view
//! contrastive objective built on it.
//!
//! For unit embeddings with cosine `c`, the similarity is
//! `0.5·(1 + c) / (1 + (1 − c)·κ)`, which lies in `[0, 1]`. Each anchor `i`
//! of a batch of `2N` embeddings contributes
//! `−log( exp(τ·s(i, partner)) / Σ_{j≠i} exp(τ·s(i, j)) )`; note that τ
//! multiplies the similarity.

use crate::error::{Error, Result};
use crate::numeric::{CustomOp, Graph, Tensor, Var};

pub const DEFAULT_KAPPA: f64 = 1.0;
pub const DEFAULT_TAU_INIT: f64 = 10.0;
pub const DEFAULT_TAU_MIN: f64 = 1.0;
pub const DEFAULT_TAU_MAX: f64 = 100.0;

const UNIT_TOLERANCE: f64 = 1e-4;

/// Concentration κ and the trainable temperature `τ = exp(theta_tau)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossParams {
    pub kappa: f64,
    /// Scalar tensor so the optimizer and checkpoints treat it like any weight.
    pub theta_tau: Tensor,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self::new(DEFAULT_KAPPA, DEFAULT_TAU_INIT)
    }
}

impl LossParams {
    pub fn new(kappa: f64, tau_init: f64) -> Self {
        LossParams {
            kappa,
            theta_tau: Tensor::scalar(tau_init.ln() as f32),
            tau_min: DEFAULT_TAU_MIN,
            tau_max: DEFAULT_TAU_MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) {
            return Err(Error::Config(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_max) {
            return Err(Error::Config(format!(
                "invalid temperature bounds [{}, {}]",
                self.tau_min, self.tau_max
            )));
        }
        if !self.theta_tau.is_scalar() || !self.theta_tau.is_finite() {
            return Err(Error::Config("theta_tau must be a finite scalar".into()));
        }
        Ok(())
    }

    fn raw_tau(theta: f32) -> f64 {
        f64::from(theta).exp()
    }

    /// Effective temperature, clamped to `[tau_min, tau_max]`.
    pub fn tau(&self) -> f64 {
        Self::raw_tau(self.theta_tau.item()).clamp(self.tau_min, self.tau_max)
    }

    /// Projects `theta_tau` back into the clamp range after an update.
    pub fn clamp_theta(&mut self) {
        let lo = self.tau_min.ln() as f32;
        let hi = self.tau_max.ln() as f32;
        let t = &mut self.theta_tau.data_mut()[0];
        *t = t.clamp(lo, hi);
    }
}

/// T-SP similarity as a function of the cosine; `c` is clamped to `[-1, 1]`.
pub fn tsp_value(cos: f64, kappa: f64) -> f64 {
    let c = cos.clamp(-1.0, 1.0);
    0.5 * (1.0 + c) / (1.0 + (1.0 - c) * kappa)
}

fn tsp_derivative(cos: f64, kappa: f64) -> f64 {
    if !(-1.0..=1.0).contains(&cos) {
        return 0.0;
    }
    let denom = 1.0 + (1.0 - cos) * kappa;
    0.5 * (1.0 + 2.0 * kappa) / (denom * denom)
}

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("kappa must be positive, got {kappa}")))
    }
}

fn check_unit_rows(z: &Tensor) -> Result<()> {
    let (rows, _) = z
        .dims2()
        .ok_or_else(|| Error::shape("unit rows", z.shape(), &[0, 0]))?;
    for r in 0..rows {
        let n = z.row(r).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Contract(format!("row {r} has norm {n}, expected unit length")));
        }
    }
    Ok(())
}

/// Similarity of two unit vectors.
pub fn tsp_similarity(z1: &[f32], z2: &[f32], kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    if z1.len() != z2.len() {
        return Err(Error::shape("tsp_similarity", &[z1.len()], &[z2.len()]));
    }
    let z = Tensor::new(&[2, z1.len()], z1.iter().chain(z2).copied().collect())?;
    check_unit_rows(&z)?;
    // exact cosine in f64: inputs only need to be unit up to f32 rounding
    let dot = |a: &[f32], b: &[f32]| -> f64 { a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum() };
    let cos = dot(z1, z2) / (dot(z1, z1) * dot(z2, z2)).sqrt();
    Ok(tsp_value(cos, kappa))
}

struct TspMap {
    kappa: f64,
}

impl CustomOp for TspMap {
    fn name(&self) -> &'static str {
        "tsp_map"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f32]) -> Vec<Vec<f32>> {
        let dc = inputs[0]
            .data()
            .iter()
            .zip(grad_out)
            .map(|(&c, &g)| (f64::from(g) * tsp_derivative(f64::from(c), self.kappa)) as f32)
            .collect();
        vec![dc]
    }
}

/// Pairwise T-SP similarities of the rows of `z` (assumed unit length).
pub fn similarity_matrix(g: &mut Graph<'_>, z: Var, kappa: f64) -> Result<Var> {
    check_kappa(kappa)?;
    let zt = g.transpose(z)?;
    let cos = g.matmul(z, zt)?;
    let value = g.value(cos);
    let mapped: Vec<f32> = value
        .data()
        .iter()
        .map(|&c| tsp_value(f64::from(c), kappa) as f32)
        .collect();
    let out = Tensor::new(value.shape(), mapped)?;
    Ok(g.custom(&[cos], out, Box::new(TspMap { kappa })))
}

/// Value-only [`similarity_matrix`] with a unit-row check.
pub fn similarity_matrix_value(z: &Tensor, kappa: f64) -> Result<Tensor> {
    check_unit_rows(z)?;
    let mut g = Graph::new();
    let v = g.constant_ref(z);
    let s = similarity_matrix(&mut g, v, kappa)?;
    Ok(g.value(s).clone())
}

/// Perfect matching of the `2N` batch rows into positive pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing {
    partner: Vec<usize>,
}

impl Pairing {
    pub fn new(partner: Vec<usize>) -> Result<Self> {
        if partner.len() < 2 {
            return Err(Error::Config("a batch needs at least one positive pair".into()));
        }
        for (i, &p) in partner.iter().enumerate() {
            if p >= partner.len() || p == i || partner[p] != i {
                return Err(Error::Config(format!("pairing is not a perfect matching at row {i}")));
            }
        }
        Ok(Pairing { partner })
    }

    /// Rows `2i` and `2i + 1` come from image `i`.
    pub fn adjacent(images: usize) -> Result<Self> {
        Self::new((0..2 * images).map(|i| i ^ 1).collect())
    }

    pub fn partner(&self, i: usize) -> usize {
        self.partner[i]
    }

    pub fn len(&self) -> usize {
        self.partner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partner.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLossReport {
    pub total: f64,
    pub per_anchor: Vec<f64>,
    pub mean_pos_sim: f64,
    /// NaN when the batch has no negatives.
    pub mean_neg_sim: f64,
    pub tau_value: f64,
}

struct ContrastiveOp {
    partner: Vec<usize>,
    probs: Vec<f64>,
    tau: f64,
    tau_active: bool,
}

impl CustomOp for ContrastiveOp {
    fn name(&self) -> &'static str {
        "tsp_contrastive"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f32]) -> Vec<Vec<f32>> {
        let s = inputs[0];
        let m = self.partner.len();
        let scale = f64::from(grad_out[0]) / m as f64;
        let mut ds = vec![0.0f32; m * m];
        let mut dtau = 0.0f64;
        for i in 0..m {
            let p = self.partner[i];
            let row = s.row(i);
            let mut expected = 0.0;
            for j in (0..m).filter(|&j| j != i) {
                let pij = self.probs[i * m + j];
                let target = if j == p { 1.0 } else { 0.0 };
                ds[i * m + j] = (scale * self.tau * (pij - target)) as f32;
                expected += pij * f64::from(row[j]);
            }
            dtau += expected - f64::from(row[p]);
        }
        let dtheta = if self.tau_active { scale * dtau * self.tau } else { 0.0 };
        vec![ds, vec![dtheta as f32]]
    }
}

/// Records the mean contrastive loss over all `2N` anchors. `theta` is the
/// graph leaf for `params.theta_tau`; `z` must have unit rows.
pub fn batch_loss(
    g: &mut Graph<'_>,
    z: Var,
    pairing: &Pairing,
    theta: Var,
    params: &LossParams,
) -> Result<(Var, BatchLossReport)> {
    params.validate()?;
    let zt = g.value(z);
    let m = zt.dims2().map_or(0, |(r, _)| r);
    if m != pairing.len() {
        return Err(Error::Config(format!(
            "pairing covers {} rows but the batch has {m}",
            pairing.len()
        )));
    }
    check_unit_rows(zt)?;

    let theta_value = g.value(theta).item();
    let raw = LossParams::raw_tau(theta_value);
    let tau = raw.clamp(params.tau_min, params.tau_max);
    let tau_active = raw > params.tau_min && raw < params.tau_max;

    let s = similarity_matrix(g, z, params.kappa)?;
    let sv = g.value(s);
    let mut probs = vec![0.0f64; m * m];
    let mut per_anchor = Vec::with_capacity(m);
    let (mut pos_sum, mut neg_sum, mut neg_count) = (0.0f64, 0.0f64, 0usize);
    for i in 0..m {
        let row = sv.row(i);
        let p = pairing.partner(i);
        let max = (0..m)
            .filter(|&j| j != i)
            .map(|j| tau * f64::from(row[j]))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in (0..m).filter(|&j| j != i) {
            let e = (tau * f64::from(row[j]) - max).exp();
            probs[i * m + j] = e;
            denom += e;
        }
        for j in (0..m).filter(|&j| j != i) {
            probs[i * m + j] /= denom;
        }
        let loss = max + denom.ln() - tau * f64::from(row[p]);
        per_anchor.push(loss.max(0.0));
        pos_sum += f64::from(row[p]);
        for j in (0..m).filter(|&j| j != i && j != p) {
            neg_sum += f64::from(row[j]);
            neg_count += 1;
        }
    }
    let total = per_anchor.iter().sum::<f64>() / m as f64;
    if !total.is_finite() {
        return Err(Error::NonFinite("contrastive loss".into()));
    }
    let report = BatchLossReport {
        total,
        per_anchor,
        mean_pos_sim: pos_sum / m as f64,
        mean_neg_sim: if neg_count == 0 { f64::NAN } else { neg_sum / neg_count as f64 },
        tau_value: tau,
    };
    let op = ContrastiveOp {
        partner: pairing.partner.clone(),
        probs,
        tau,
        tau_active,
    };
    let loss = g.custom(&[s, theta], Tensor::scalar(total as f32), Box::new(op));
    Ok((loss, report))
}

/// Value-only [`batch_loss`].
pub fn batch_loss_value(z: &Tensor, pairing: &Pairing, params: &LossParams) -> Result<BatchLossReport> {
    let mut g = Graph::new();
    let zv = g.constant_ref(z);
    let theta = g.constant_ref(&params.theta_tau);
    Ok(batch_loss(&mut g, zv, pairing, theta, params)?.1)
}

/// Loss value at representation collapse (all embeddings identical).
pub fn collapse_loss(anchors: usize) -> f64 {
    ((anchors - 1) as f64).ln()
}

/// Flags a run whose loss sits at the collapse value for too long.
#[derive(Debug, Clone)]
pub struct CollapseMonitor {
    pub tolerance: f64,
    pub patience: usize,
    streak: usize,
}

impl Default for CollapseMonitor {
    fn default() -> Self {
        CollapseMonitor {
            tolerance: 1e-3,
            patience: 50,
            streak: 0,
        }
    }
}

impl CollapseMonitor {
    /// Returns true on the step the streak reaches `patience`.
    pub fn observe(&mut self, total: f64, anchors: usize) -> bool {
        if anchors > 2 && (total - collapse_loss(anchors)).abs() < self.tolerance {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        self.streak == self.patience
    }

    pub fn streak(&self) -> usize {
        self.streak
    }
}
