//! A small seeded transformer used to produce real attention stacks and to
//! measure how much pruning moves the model output.
//!
//! Pre-norm multi-head softmax attention with residual connections and fixed
//! Gaussian projections, no MLP, mean-pooled output. Weights are never
//! trained.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::attention::{AttentionStack, ModelDims, TokenLayout};
use crate::strategies::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModelSpec {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub n_language: usize,
    pub n_visual: usize,
    pub seed: u64,
}

impl ToyModelSpec {
    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.n_language + self.n_visual
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::language_first(self.n_language, self.n_visual)
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.layers < 3 {
            return Err(SynthError::Infeasible(format!(
                "toy model needs >= 3 layers, got {}",
                self.layers
            )));
        }
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(SynthError::Infeasible(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.n_visual == 0 || self.seq_len() < 2 {
            return Err(SynthError::Infeasible("toy model needs visual tokens".into()));
        }
        Ok(())
    }
}

struct LayerWeights {
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
}

pub struct ToyModel {
    spec: ToyModelSpec,
    weights: Vec<LayerWeights>,
    language: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Vec<f64>,
    /// All layers at full width. After pruning, dropped tokens keep an
    /// identity row and receive no attention.
    pub stack: AttentionStack,
}

/// `out (m x d) = x (m x d) * w (d x d)`.
fn matmul(x: &[f64], w: &[f64], d: usize) -> Vec<f64> {
    let m = x.len() / d;
    let mut out = vec![0.0; m * d];
    for i in 0..m {
        let xi = &x[i * d..(i + 1) * d];
        let oi = &mut out[i * d..(i + 1) * d];
        for (k, &xv) in xi.iter().enumerate() {
            let wr = &w[k * d..(k + 1) * d];
            for (o, &wv) in oi.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
    out
}

fn rms_norm(row: &[f64]) -> Vec<f64> {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    row.iter().map(|v| v * inv).collect()
}

impl ToyModel {
    pub fn new(spec: ToyModelSpec) -> Result<Self, SynthError> {
        spec.validate()?;
        let d = spec.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let scale = 1.0 / (d as f64).sqrt();
        let mat = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..d * d)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let weights = (0..spec.layers)
            .map(|_| LayerWeights {
                wq: mat(&mut rng),
                wk: mat(&mut rng),
                wv: mat(&mut rng),
                wo: mat(&mut rng),
            })
            .collect();
        let language = (0..spec.n_language * d).map(|_| rng.sample(StandardNormal)).collect();
        Ok(Self {
            spec,
            weights,
            language,
        })
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }

    /// Prepends the model's fixed language-token embeddings to visual
    /// features, giving the full `N x d_model` input.
    pub fn assemble_input(&self, visual: &FeatureMatrix) -> Result<FeatureMatrix, SynthError> {
        if visual.rows() != self.spec.n_visual || visual.dim() != self.spec.d_model {
            return Err(SynthError::DimMismatch(format!(
                "visual features are {}x{}, model expects {}x{}",
                visual.rows(),
                visual.dim(),
                self.spec.n_visual,
                self.spec.d_model
            )));
        }
        let mut data = self.language.clone();
        data.extend_from_slice(visual.data());
        Ok(FeatureMatrix::new(self.spec.seq_len(), self.spec.d_model, data)?)
    }

    /// Runs the model on `input` (`N x d_model`). When `retained` is given,
    /// visual tokens outside it are dropped from layer `prune_from` on.
    pub fn forward(
        &self,
        input: &FeatureMatrix,
        retained: Option<&[usize]>,
        prune_from: usize,
    ) -> Result<ForwardPass, SynthError> {
        let spec = &self.spec;
        let (n, d, dh) = (spec.seq_len(), spec.d_model, spec.d_head());
        if input.rows() != n || input.dim() != d {
            return Err(SynthError::DimMismatch(format!(
                "input is {}x{}, model expects {n}x{d}",
                input.rows(),
                input.dim()
            )));
        }
        let keep: Option<Vec<usize>> = match retained {
            None => None,
            Some(r) => {
                let mut r = r.to_vec();
                r.sort_unstable();
                r.dedup();
                if let Some(&bad) = r.iter().find(|&&i| i >= spec.n_visual) {
                    return Err(SynthError::DimMismatch(format!(
                        "retained index {bad} >= {} visual tokens",
                        spec.n_visual
                    )));
                }
                Some(r)
            }
        };

        let mut x = input.data().to_vec();
        let mut active: Vec<usize> = (0..n).collect();
        let mut data = vec![0.0; spec.layers * spec.heads * n * n];
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        for (layer, w) in self.weights.iter().enumerate() {
            if layer == prune_from {
                if let Some(keep) = &keep {
                    active = (0..spec.n_language)
                        .chain(keep.iter().map(|&j| spec.n_language + j))
                        .collect();
                }
            }
            let m = active.len();
            let mut h = Vec::with_capacity(m * d);
            for &t in &active {
                h.extend(rms_norm(&x[t * d..(t + 1) * d]));
            }
            let q = matmul(&h, &w.wq, d);
            let k = matmul(&h, &w.wk, d);
            let v = matmul(&h, &w.wv, d);
            let mut mixed = vec![0.0; m * d];
            let mut p = vec![0.0; m];
            for head in 0..spec.heads {
                let base = (layer * spec.heads + head) * n * n;
                let cols = head * dh..(head + 1) * dh;
                for i in 0..m {
                    let qi = &q[i * d + cols.start..i * d + cols.end];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..m {
                        let kj = &k[j * d + cols.start..j * d + cols.end];
                        p[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt;
                        max = max.max(p[j]);
                    }
                    let mut sum = 0.0;
                    for pj in p.iter_mut() {
                        *pj = (*pj - max).exp();
                        sum += *pj;
                    }
                    let row = base + active[i] * n;
                    for j in 0..m {
                        p[j] /= sum;
                        data[row + active[j]] = p[j];
                        let vj = &v[j * d + cols.start..j * d + cols.end];
                        for (o, &vv) in mixed[i * d + cols.start..i * d + cols.end].iter_mut().zip(vj) {
                            *o += p[j] * vv;
                        }
                    }
                }
                if m < n {
                    let mut is_active = vec![false; n];
                    active.iter().for_each(|&t| is_active[t] = true);
                    for t in (0..n).filter(|&t| !is_active[t]) {
                        data[base + t * n + t] = 1.0;
                    }
                }
            }
            let out = matmul(&mixed, &w.wo, d);
            for (i, &t) in active.iter().enumerate() {
                for c in 0..d {
                    x[t * d + c] += out[i * d + c];
                }
            }
        }

        let mut output = vec![0.0; d];
        for &t in &active {
            for c in 0..d {
                output[c] += x[t * d + c];
            }
        }
        let inv = 1.0 / active.len() as f64;
        output.iter_mut().for_each(|o| *o *= inv);

        let stack = AttentionStack::new(spec.layers, spec.heads, n, spec.layout(), data)?;
        Ok(ForwardPass { output, stack })
    }
}

pub fn toy_forward(
    model: &ToyModel,
    input: &FeatureMatrix,
    retained: Option<&[usize]>,
    prune_from: usize,
) -> Result<ForwardPass, SynthError> {
    model.forward(input, retained, prune_from)
}

pub fn output_drift(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
