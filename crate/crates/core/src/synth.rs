//! Synthetic tabular data with a controllable concept-completeness level.
//!
//! Each sample draws latent factors z_j ~ Uniform(0,1). Every factor is
//! discretized into equal-width bins; the bin pattern of *all* factors picks
//! the label from a fixed random lookup table, while only the *revealed*
//! factors contribute one-hot concept groups. Hiding factors therefore
//! removes label-relevant information from the concept vector — exactly the
//! channel a leaky predictor can exploit through concept probabilities,
//! since features mix every factor: X = A z + noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::substream;
use crate::schema::ConceptSchema;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_samples: usize,
    /// Number of latent factors G.
    pub n_factors: usize,
    /// Bins per factor; each revealed factor becomes a one-hot group of this size.
    pub bins_per_factor: usize,
    /// Indices of the factors exposed as concept groups (the completeness level).
    pub revealed_groups: Vec<usize>,
    /// Width of the observed feature vector.
    pub feature_dim: usize,
    /// Standard deviation of additive Gaussian feature noise.
    pub feature_noise_sigma: f64,
    /// Per-bit flip probability for revealed concepts, in [0, 0.5).
    pub concept_flip_prob: f64,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_samples: 5000,
            n_factors: 6,
            bins_per_factor: 3,
            revealed_groups: vec![0, 1, 2],
            feature_dim: 10,
            feature_noise_sigma: 0.05,
            concept_flip_prob: 0.0,
            n_classes: 4,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.n_samples == 0 {
            return fail("n_samples must be positive".into());
        }
        if self.n_factors == 0 {
            return fail("n_factors must be positive".into());
        }
        if self.bins_per_factor < 2 {
            return fail(format!(
                "bins_per_factor must be at least 2, got {}",
                self.bins_per_factor
            ));
        }
        if self.revealed_groups.is_empty() {
            return fail("revealed_groups must name at least one factor".into());
        }
        let mut seen = vec![false; self.n_factors];
        for &g in &self.revealed_groups {
            if g >= self.n_factors {
                return fail(format!(
                    "revealed factor {g} out of range for {} factors",
                    self.n_factors
                ));
            }
            if seen[g] {
                return fail(format!("revealed factor {g} listed twice"));
            }
            seen[g] = true;
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive".into());
        }
        if self.feature_noise_sigma < 0.0 || self.feature_noise_sigma.is_nan() {
            return fail(format!(
                "feature_noise_sigma must be non-negative, got {}",
                self.feature_noise_sigma
            ));
        }
        if !(0.0..0.5).contains(&self.concept_flip_prob) {
            return fail(format!(
                "concept_flip_prob must lie in [0, 0.5), got {}",
                self.concept_flip_prob
            ));
        }
        if self.n_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.n_classes));
        }
        let table = (self.bins_per_factor as f64).powi(self.n_factors as i32);
        if table > 1e6 {
            return fail(format!(
                "{} bins over {} factors makes the label table too large ({table:.0} cells)",
                self.bins_per_factor, self.n_factors
            ));
        }
        Ok(())
    }

    /// Copy with a different revealed set (used by completeness sweeps).
    pub fn with_revealed(&self, revealed: Vec<usize>) -> SynthSpec {
        SynthSpec {
            revealed_groups: revealed,
            ..self.clone()
        }
    }

    pub fn schema(&self) -> Result<ConceptSchema> {
        self.validate()?;
        let mut concepts = Vec::new();
        let mut groups = Vec::new();
        for &factor in &self.revealed_groups {
            let start = concepts.len();
            for bin in 0..self.bins_per_factor {
                concepts.push(format!("f{factor}::b{bin}"));
            }
            groups.push((start..concepts.len()).collect());
        }
        let classes = (0..self.n_classes).map(|i| format!("class_{i}")).collect();
        ConceptSchema::new(concepts, groups, vec![], classes)
    }
}

/// Equal-width bin of `z` in [0,1]; values exactly on a cut point fall into
/// the lower bin.
fn bin_of(z: f64, bins: usize) -> usize {
    let mut b = 0;
    while b + 1 < bins && z > (b + 1) as f64 / bins as f64 {
        b += 1;
    }
    b
}

/// Standard normal via Box-Muller, driven by two uniform draws per call.
fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generates a dataset; identical specs yield identical datasets.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let schema = spec.schema()?;
    let g = spec.n_factors;
    let bins = spec.bins_per_factor;
    let d = spec.feature_dim;

    // Fixed per-seed structure: mixing matrix and label lookup table.
    let mut rng_mix = substream(spec.seed, "synth.mixing");
    let mut mixing = Matrix::zeros(d, g);
    let scale = 1.0 / (g as f64).sqrt();
    for i in 0..d {
        for j in 0..g {
            mixing.set(i, j, normal(&mut rng_mix) * scale);
        }
    }
    let table_len = bins.pow(g as u32);
    let mut rng_table = substream(spec.seed, "synth.lookup");
    let lookup: Vec<usize> = (0..table_len)
        .map(|_| rng_table.gen_range(0..spec.n_classes))
        .collect();

    let mut rng_z = substream(spec.seed, "synth.factors");
    let mut rng_noise = substream(spec.seed, "synth.noise");
    let mut rng_flip = substream(spec.seed, "synth.flips");

    let n = spec.n_samples;
    let k = schema.k();
    let mut x = Matrix::zeros(n, d);
    let mut c = Matrix::zeros(n, k);
    let mut y = Vec::with_capacity(n);

    for i in 0..n {
        let z: Vec<f64> = (0..g).map(|_| rng_z.gen::<f64>()).collect();
        let factor_bins: Vec<usize> = z.iter().map(|&v| bin_of(v, bins)).collect();

        for row in 0..d {
            let mut v = 0.0;
            for (j, &zj) in z.iter().enumerate() {
                v += mixing.get(row, j) * zj;
            }
            if spec.feature_noise_sigma > 0.0 {
                v += spec.feature_noise_sigma * normal(&mut rng_noise);
            }
            x.set(i, row, v);
        }

        let mut code = 0usize;
        for &b in &factor_bins {
            code = code * bins + b;
        }
        y.push(lookup[code]);

        for (slot, &factor) in spec.revealed_groups.iter().enumerate() {
            let base = slot * bins;
            let mut hot = factor_bins[factor];
            // Noise model: flip each bit independently, then restore the
            // one-hot invariant by moving the hot position to one of the
            // flipped bits, chosen uniformly.
            let flipped: Vec<usize> = (0..bins)
                .filter(|_| rng_flip.gen::<f64>() < spec.concept_flip_prob)
                .collect();
            if !flipped.is_empty() {
                hot = flipped[rng_flip.gen_range(0..flipped.len())];
            }
            c.set(i, base + hot, 1.0);
        }
    }

    Dataset::new(x, c, y, (0..n as u64).collect(), schema)
}
