//! Synthetic activations with known linear structure.
//!
//! Each attribute `a` gets a unit direction `d_a = √c·u₀ + √(1−c)·u_a` built
//! from orthonormal vectors, with `c = cos θ`, so every pair of directions
//! meets at angle θ. Attribute latents are standard normal with a common
//! pairwise correlation chosen through a Gaussian copula so that the
//! requested value is the Spearman correlation of the attribute values.
//! Row `i` at layer `l` is `Σ_a s_a·m_l·z_a(i)·d_a + σ·ε`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entity::{AttributeMeta, AttributeTable, EntityClass, Transform};
use crate::stats;
use crate::store::InMemoryLayers;

pub const ORACLE_DRAWS: usize = 100_000;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Marginal distribution of an attribute's raw values given its latent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Marginal {
    Normal { mean: f64, sd: f64 },
    LogNormal { mu: f64, sigma: f64 },
}

impl Default for Marginal {
    fn default() -> Self {
        Marginal::Normal { mean: 0.0, sd: 1.0 }
    }
}

impl Marginal {
    fn value(self, z: f64) -> f64 {
        match self {
            Marginal::Normal { mean, sd } => mean + sd * z,
            Marginal::LogNormal { mu, sigma } => (mu + sigma * z).exp(),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthAttribute {
    pub name: String,
    pub signal_scale: f64,
    /// When false the attribute has values but no direction in the activations.
    #[serde(default = "default_true")]
    pub encoded: bool,
    #[serde(default)]
    pub marginal: Marginal,
}

impl SynthAttribute {
    pub fn new(name: &str, signal_scale: f64) -> Self {
        SynthAttribute { name: name.to_string(), signal_scale, encoded: true, marginal: Marginal::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub h: usize,
    pub seed: u64,
    pub attributes: Vec<SynthAttribute>,
    /// Angle between every pair of attribute directions, degrees in [0, 90].
    pub subspace_angle_deg: f64,
    /// Target Spearman correlation between every pair of attribute values.
    pub value_correlation: f64,
    /// Standard deviation of isotropic noise per coordinate.
    pub noise_scale: f64,
    /// Per-layer signal multiplier; one entry per layer, layer indices from 0.
    pub layer_profile: Vec<f64>,
}

impl SynthSpec {
    /// Two attributes `s` and `t`, one layer, equal signal.
    pub fn pair(n: usize, h: usize, angle_deg: f64, value_correlation: f64, snr: f64, seed: u64) -> Self {
        SynthSpec {
            n,
            h,
            seed,
            attributes: vec![SynthAttribute::new("s", 1.0), SynthAttribute::new("t", 1.0)],
            subspace_angle_deg: angle_deg,
            value_correlation,
            noise_scale: 1.0 / snr,
            layer_profile: vec![1.0],
        }
    }

    /// Attribute `s` carries ten times the signal of `t`; the directions share
    /// a 45° subspace and the values are rank-correlated at 0.8.
    pub fn dominance(n: usize, h: usize, seed: u64) -> Self {
        let mut spec = SynthSpec::pair(n, h, 45.0, 0.8, 1.0, seed);
        spec.attributes[0].signal_scale = 10.0;
        spec
    }

    /// Profile rising linearly from 0 at layer 0 to 1 at `saturate_at`, flat after.
    pub fn ramp_profile(layers: usize, saturate_at: usize) -> Vec<f64> {
        (0..layers)
            .map(|l| if saturate_at == 0 { 1.0 } else { (l as f64 / saturate_at as f64).min(1.0) })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        let m = self.attributes.len();
        if m == 0 {
            return bad("no attributes".into());
        }
        if self.n < 4 {
            return bad(format!("n = {} too small", self.n));
        }
        if self.h < m + 1 {
            return bad(format!("h = {} must exceed the attribute count {m}", self.h));
        }
        if !(0.0..=90.0).contains(&self.subspace_angle_deg) {
            return bad(format!("angle {} outside [0, 90]", self.subspace_angle_deg));
        }
        if !(-1.0..=1.0).contains(&self.value_correlation) {
            return bad(format!("value correlation {} outside [-1, 1]", self.value_correlation));
        }
        if self.value_correlation < 0.0 && m > 2 {
            return bad("negative value correlation needs exactly two attributes".into());
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise scale must be finite and non-negative".into());
        }
        if self.layer_profile.is_empty() || self.layer_profile.iter().any(|v| !v.is_finite()) {
            return bad("layer profile must be non-empty and finite".into());
        }
        let mut names = std::collections::HashSet::new();
        for a in &self.attributes {
            if !names.insert(&a.name) {
                return bad(format!("duplicate attribute {:?}", a.name));
            }
            if !a.signal_scale.is_finite() {
                return bad(format!("signal scale of {:?} not finite", a.name));
            }
        }
        Ok(())
    }

    /// Pearson correlation of the latents that yields the requested Spearman
    /// correlation under a Gaussian copula.
    pub fn latent_correlation(&self) -> f64 {
        spearman_to_pearson(self.value_correlation)
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    fn peak_multiplier(&self) -> f64 {
        self.layer_profile.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `r = 2 sin(π ρ_S / 6)` for bivariate normals.
pub fn spearman_to_pearson(rho_s: f64) -> f64 {
    if rho_s.abs() == 1.0 {
        return rho_s;
    }
    (2.0 * (PI * rho_s / 6.0).sin()).clamp(-1.0, 1.0)
}

/// `ρ_S = (6/π) asin(r / 2)` for bivariate normals.
pub fn pearson_to_spearman(r: f64) -> f64 {
    6.0 / PI * (r / 2.0).asin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    /// Unit direction per attribute (length `h`).
    pub directions: BTreeMap<String, Vec<f64>>,
    /// Pairwise cosine between directions (`cos θ`).
    pub direction_cosine: f64,
    /// Latent Pearson correlation used by the copula.
    pub latent_correlation: f64,
    /// Generative Spearman correlation of attribute values.
    pub value_spearman: f64,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub layers: InMemoryLayers,
    pub table: AttributeTable,
    pub truth: GroundTruth,
    /// Standard-normal latents, `n × attributes`.
    pub latents: Array2<f64>,
}

fn orthonormal_vectors(count: usize, h: usize, rng: &mut impl Rng) -> Vec<Array1<f64>> {
    let mut out: Vec<Array1<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Array1<f64> = Array1::from_shape_fn(h, |_| StandardNormal.sample(rng));
        for _ in 0..2 {
            for u in &out {
                let proj = v.dot(u);
                v.scaled_add(-proj, u);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            out.push(v / norm);
        }
    }
    out
}

fn sample_latents(count: usize, r: f64, rng: &mut impl Rng) -> Vec<f64> {
    if r >= 0.0 {
        let shared: f64 = StandardNormal.sample(rng);
        (0..count)
            .map(|_| {
                let own: f64 = StandardNormal.sample(rng);
                r.sqrt() * shared + (1.0 - r).sqrt() * own
            })
            .collect()
    } else {
        let first: f64 = StandardNormal.sample(rng);
        let own: f64 = StandardNormal.sample(rng);
        vec![first, r * first + (1.0 - r * r).sqrt() * own]
    }
}

/// Generates activations for every profile layer plus the attribute table.
///
/// Entities are named `e00000`, `e00001`, ….
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.attributes.len();
    let c = spec.subspace_angle_deg.to_radians().cos().clamp(0.0, 1.0);
    let basis = orthonormal_vectors(m + 1, spec.h, &mut rng);
    let directions: Vec<Array1<f64>> = (0..m)
        .map(|a| {
            let mut d = &basis[0] * c.sqrt() + &basis[a + 1] * (1.0 - c).sqrt();
            let norm = d.dot(&d).sqrt();
            d /= norm;
            d
        })
        .collect();

    let r = spec.latent_correlation();
    let mut latents = Array2::zeros((spec.n, m));
    for i in 0..spec.n {
        for (a, z) in sample_latents(m, r, &mut rng).into_iter().enumerate() {
            latents[[i, a]] = z;
        }
    }

    let entities: Vec<String> = (0..spec.n).map(|i| format!("e{i:05}")).collect();
    let signal = {
        let mut mix = Array2::zeros((m, spec.h));
        for (a, attr) in spec.attributes.iter().enumerate() {
            if attr.encoded {
                mix.row_mut(a).assign(&(&directions[a] * attr.signal_scale));
            }
        }
        latents.dot(&mix)
    };
    let mut layers = InMemoryLayers::new(entities.clone());
    for (l, &mult) in spec.layer_profile.iter().enumerate() {
        let noise = Array2::from_shape_fn((spec.n, spec.h), |_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            e * spec.noise_scale
        });
        layers = layers.with_layer(l as u32, &signal * mult + noise);
    }

    let mut table = AttributeTable::new();
    for attr in &spec.attributes {
        let transform = match attr.marginal {
            Marginal::Normal { .. } => Transform::Identity,
            Marginal::LogNormal { .. } => Transform::Log10 { shift: 0.0 },
        };
        table.declare(&attr.name, AttributeMeta { unit: String::new(), transform, class: EntityClass::Other });
    }
    for (i, e) in entities.iter().enumerate() {
        for (a, attr) in spec.attributes.iter().enumerate() {
            table
                .insert(e, &attr.name, attr.marginal.value(latents[[i, a]]))
                .map_err(|err| SynthError::InvalidSpec(err.to_string()))?;
        }
    }

    let truth = GroundTruth {
        spec: spec.clone(),
        directions: spec
            .attributes
            .iter()
            .zip(&directions)
            .map(|(a, d)| (a.name.clone(), d.to_vec()))
            .collect(),
        direction_cosine: c,
        latent_correlation: r,
        value_spearman: pearson_to_spearman(r),
    };
    Ok(SynthOutput { layers, table, truth, latents })
}

/// Population-optimal linear probe for `source` in the span of the
/// directions, then the Spearman correlation of its output with `target`,
/// estimated by Monte-Carlo over [`ORACLE_DRAWS`] draws at the peak layer.
///
/// This path never builds `h`-dimensional activations: it works in the
/// `(m + 1)`-dimensional coordinates of the generating basis, where noise
/// outside the span is irrelevant to any linear probe.
pub fn oracle_expected_cross_rho(spec: &SynthSpec, source: &str, target: &str) -> Result<f64> {
    oracle_with_draws(spec, source, target, ORACLE_DRAWS)
}

pub fn oracle_with_draws(spec: &SynthSpec, source: &str, target: &str, draws: usize) -> Result<f64> {
    spec.validate()?;
    let s = spec
        .attribute_index(source)
        .ok_or_else(|| SynthError::InvalidSpec(format!("unknown attribute {source:?}")))?;
    let t = spec
        .attribute_index(target)
        .ok_or_else(|| SynthError::InvalidSpec(format!("unknown attribute {target:?}")))?;
    let m = spec.attributes.len();
    let dim = m + 1;
    let c = spec.subspace_angle_deg.to_radians().cos().clamp(0.0, 1.0);
    let r = spec.latent_correlation();
    let mult = spec.peak_multiplier();

    // Coordinates of each scaled direction in the basis (u0, u1, ..., um).
    let mut mix = vec![vec![0.0; dim]; m];
    for (a, attr) in spec.attributes.iter().enumerate() {
        if attr.encoded {
            mix[a][0] = c.sqrt() * attr.signal_scale * mult;
            mix[a][a + 1] = (1.0 - c).sqrt() * attr.signal_scale * mult;
        }
    }
    let corr = |a: usize, b: usize| if a == b { 1.0 } else { r };
    // Σ = Mᵀ C M + σ² I and cov(x, z_s) = Mᵀ C e_s
    let mut sigma = vec![vec![0.0; dim]; dim];
    let mut cov = vec![0.0; dim];
    for p in 0..dim {
        for q in 0..dim {
            let mut acc = 0.0;
            for a in 0..m {
                for b in 0..m {
                    acc += mix[a][p] * corr(a, b) * mix[b][q];
                }
            }
            sigma[p][q] = acc + if p == q { spec.noise_scale.powi(2) } else { 0.0 };
        }
        cov[p] = (0..m).map(|a| mix[a][p] * corr(a, s)).sum();
    }
    let beta = solve_small(sigma, cov);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_0AC1E);
    let mut predicted = Vec::with_capacity(draws);
    let mut truth = Vec::with_capacity(draws);
    for _ in 0..draws {
        let z = sample_latents(m, r, &mut rng);
        let mut y = 0.0;
        for p in 0..dim {
            let e: f64 = StandardNormal.sample(&mut rng);
            let xp: f64 = (0..m).map(|a| mix[a][p] * z[a]).sum::<f64>() + spec.noise_scale * e;
            y += beta[p] * xp;
        }
        predicted.push(y);
        truth.push(z[t]);
    }
    Ok(stats::spearman(&predicted, &truth).map(|v| v.rho).unwrap_or(0.0))
}

/// Solves a small SPD-ish system, falling back to a pseudo-solution along
/// zero pivots (directions with no signal or noise carry no weight).
fn solve_small(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut pivots = vec![usize::MAX; n];
    let mut row_used = vec![false; n];
    for col in 0..n {
        let Some(p) = (0..n)
            .filter(|&r| !row_used[r])
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
        else {
            continue;
        };
        if a[p][col].abs() < 1e-12 {
            continue;
        }
        row_used[p] = true;
        pivots[col] = p;
        for r in 0..n {
            if r != p {
                let f = a[r][col] / a[p][col];
                if f != 0.0 {
                    let pivot_row = a[p].clone();
                    for (x, y) in a[r].iter_mut().zip(&pivot_row) {
                        *x -= f * y;
                    }
                    b[r] -= f * b[p];
                }
            }
        }
    }
    for col in 0..n {
        if pivots[col] != usize::MAX {
            x[col] = b[pivots[col]] / a[pivots[col]][col];
        }
    }
    x
}
