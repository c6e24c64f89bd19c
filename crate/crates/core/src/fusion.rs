//! The capsule fusion head: per-modality confidence metrics, learnable
//! modality weights, the adaptive tanh gate, the classification head, and
//! the full multimodal forward pass.
//!
//! Each modality runs through its own primary/digit capsule stack. Digit
//! capsule evidence is summarized by a modality-appropriate confidence
//! vector (squash norms for images, per-class cosine between the two text
//! channels, entropy-based certainty for numerics), rescaled by learnable
//! scalars, concatenated, and gated. A small linear head turns the bounded
//! gate output into class logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capsule::{CapsuleTensor, CapsuleVar, DigitCapsuleLayer, PrimaryCapsuleLayer};
use crate::data::Batch;
use crate::error::{shape_string, Error, Result};
use crate::numerics::{xavier_uniform, Binder, ParamId, ParamSet, Tape, Tensor, Var};

/// Epsilon for cosine denominators.
const COSINE_EPS: f64 = 1e-9;
/// Shift inside `ln` so `p * log2 p` vanishes as `p -> 0`.
const PLOGP_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
    Numeric,
}

/// Per-sample, per-class confidence summary of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceVector {
    pub modality: Modality,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub text_a_dim: usize,
    pub text_b_dim: usize,
    pub image_dim: usize,
    pub numeric_raw_dim: usize,
    /// Hidden layer widths of the numeric encoder MLP.
    pub numeric_hidden: Vec<usize>,
    /// Output width of the numeric encoder.
    pub numeric_embed_dim: usize,
    pub n_primary: usize,
    pub primary_dim: usize,
    pub digit_dim: usize,
    pub routing_iters: usize,
    pub squash_primary: bool,
    pub share_text_weights: bool,
    /// Width of the tanh gate layer. The fused confidence vector has
    /// `3 * n_classes` entries; keeping the gate the same width before the
    /// head compresses to classes trains far more reliably than a gate
    /// squeezed to `n_classes` units, which gets trapped in single-quadrant
    /// minima on cross-modal interaction tasks.
    pub gate_width: usize,
}

impl ModelConfig {
    pub fn with_dims(
        text_a_dim: usize,
        text_b_dim: usize,
        image_dim: usize,
        numeric_raw_dim: usize,
    ) -> Self {
        ModelConfig {
            n_classes: 2,
            text_a_dim,
            text_b_dim,
            image_dim,
            numeric_raw_dim,
            numeric_hidden: vec![32, 32],
            numeric_embed_dim: 16,
            n_primary: 8,
            primary_dim: 16,
            digit_dim: 16,
            routing_iters: 3,
            squash_primary: true,
            share_text_weights: false,
            gate_width: 3 * 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "n_classes must be >= 2, got {}",
                self.n_classes
            )));
        }
        if self.share_text_weights && self.text_a_dim != self.text_b_dim {
            return Err(Error::Config(format!(
                "shared text weights need equal text dims, got {} and {}",
                self.text_a_dim, self.text_b_dim
            )));
        }
        for (name, v) in [
            ("text_a_dim", self.text_a_dim),
            ("text_b_dim", self.text_b_dim),
            ("image_dim", self.image_dim),
            ("numeric_raw_dim", self.numeric_raw_dim),
            ("numeric_embed_dim", self.numeric_embed_dim),
            ("n_primary", self.n_primary),
            ("primary_dim", self.primary_dim),
            ("digit_dim", self.digit_dim),
            ("gate_width", self.gate_width),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(1..=10).contains(&self.routing_iters) {
            return Err(Error::Config(format!(
                "routing_iters must be in 1..=10, got {}",
                self.routing_iters
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct CapsuleStack {
    primary: PrimaryCapsuleLayer,
    digit: DigitCapsuleLayer,
}

/// All learnable state of the fusion network plus its config snapshot.
#[derive(Debug, Clone)]
pub struct FusionModel {
    config: ModelConfig,
    params: ParamSet,
    numeric_layers: Vec<(ParamId, ParamId)>,
    text_a: CapsuleStack,
    /// `None` when the text channels share weights.
    text_b: Option<CapsuleStack>,
    image: CapsuleStack,
    numeric: CapsuleStack,
    /// Modality weights in gate order: text, image, numeric.
    omega: [ParamId; 3],
    gate_w: ParamId,
    gate_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// Tape handles produced by one forward pass.
pub struct FusionForward {
    pub probs: Var,
    pub logits: Var,
    pub gate_input: Var,
    pub gate_output: Var,
    pub z_text: Var,
    pub z_image: Var,
    pub z_numeric: Var,
    /// Per modality (text_a, text_b, image, numeric): per-class coefficient
    /// rows of shape `[B, n_in]`.
    pub routing: [Vec<Var>; 4],
}

impl FusionModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();

        let mut numeric_layers = Vec::new();
        let mut sizes = vec![config.numeric_raw_dim];
        sizes.extend(&config.numeric_hidden);
        sizes.push(config.numeric_embed_dim);
        for (i, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = params.add(
                format!("numeric_encoder.{i}.weight"),
                xavier_uniform(vec![fan_in, fan_out], fan_in, fan_out, &mut rng),
            );
            let b = params.add(
                format!("numeric_encoder.{i}.bias"),
                Tensor::zeros(vec![fan_out]),
            );
            numeric_layers.push((w, b));
        }

        let stack = |params: &mut ParamSet,
                     rng: &mut ChaCha8Rng,
                     prefix: &str,
                     in_dim: usize|
         -> Result<CapsuleStack> {
            let primary = PrimaryCapsuleLayer::init(
                params,
                prefix,
                config.n_primary,
                in_dim,
                config.primary_dim,
                config.squash_primary,
                rng,
            )?;
            let digit = DigitCapsuleLayer::init(
                params,
                prefix,
                config.n_primary,
                config.n_classes,
                config.primary_dim,
                config.digit_dim,
                config.routing_iters,
                rng,
            )?;
            Ok(CapsuleStack { primary, digit })
        };

        let text_a = stack(&mut params, &mut rng, "text_a", config.text_a_dim)?;
        let text_b = if config.share_text_weights {
            None
        } else {
            Some(stack(&mut params, &mut rng, "text_b", config.text_b_dim)?)
        };
        let image = stack(&mut params, &mut rng, "image", config.image_dim)?;
        let numeric = stack(&mut params, &mut rng, "numeric", config.numeric_embed_dim)?;

        let omega = [
            params.add("omega.text", Tensor::scalar(1.0)),
            params.add("omega.image", Tensor::scalar(1.0)),
            params.add("omega.numeric", Tensor::scalar(1.0)),
        ];
        let gate_in = 3 * config.n_classes;
        let gate_w = params.add(
            "gate.weight",
            xavier_uniform(
                vec![gate_in, config.gate_width],
                gate_in,
                config.gate_width,
                &mut rng,
            ),
        );
        let gate_b = params.add("gate.bias", Tensor::zeros(vec![config.gate_width]));
        let head_w = params.add(
            "head.weight",
            xavier_uniform(
                vec![config.gate_width, config.n_classes],
                config.gate_width,
                config.n_classes,
                &mut rng,
            ),
        );
        let head_b = params.add("head.bias", Tensor::zeros(vec![config.n_classes]));

        Ok(FusionModel {
            config,
            params,
            numeric_layers,
            text_a,
            text_b,
            image,
            numeric,
            omega,
            gate_w,
            gate_b,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn omega_values(&self) -> [f64; 3] {
        [
            self.params.get(self.omega[0]).data()[0],
            self.params.get(self.omega[1]).data()[0],
            self.params.get(self.omega[2]).data()[0],
        ]
    }

    fn check_batch_dims(&self, batch: &Batch) -> Result<()> {
        let expect = [
            ("text_a", batch.text_a.shape()[1], self.config.text_a_dim),
            ("text_b", batch.text_b.shape()[1], self.config.text_b_dim),
            ("image", batch.image.shape()[1], self.config.image_dim),
            (
                "numeric",
                batch.numeric.shape()[1],
                self.config.numeric_raw_dim,
            ),
        ];
        for (name, found, wanted) in expect {
            if found != wanted {
                return Err(Error::dimension(
                    "forward",
                    format!("{name} embedding dim {found}"),
                    format!("model expects {wanted}"),
                ));
            }
        }
        Ok(())
    }

    /// Run the numeric encoder MLP: tanh on hidden layers, linear output.
    fn encode_numeric(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.numeric_layers.len() - 1;
        for (i, &(w, b)) in self.numeric_layers.iter().enumerate() {
            let wv = binder.bind(tape, w);
            let bv = binder.bind(tape, b);
            let lin = tape.matmul(h, wv)?;
            h = tape.add_bias(lin, bv)?;
            if i != last {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Full forward pass on an existing tape. `override_param` substitutes a
    /// caller-supplied variable for one parameter (gradient checking).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        override_param: Option<(ParamId, Var)>,
    ) -> Result<FusionForward> {
        self.check_batch_dims(batch)?;
        let mut binder = Binder::new(&self.params, override_param);

        let e_t1 = tape.leaf(&batch.text_a);
        let e_t2 = tape.leaf(&batch.text_b);
        let e_img = tape.leaf(&batch.image);
        let raw_num = tape.leaf(&batch.numeric);
        let e_num = self.encode_numeric(tape, &mut binder, raw_num)?;

        let run_stack = |tape: &mut Tape,
                         binder: &mut Binder,
                         stack: &CapsuleStack,
                         e: Var|
         -> Result<(CapsuleVar, Vec<Var>)> {
            let p = stack.primary.project(tape, binder, e)?;
            let (s, routing) = stack.digit.route(tape, binder, &p)?;
            Ok((s, routing.per_class))
        };

        let (s_t1, r_t1) = run_stack(tape, &mut binder, &self.text_a, e_t1)?;
        let text_b_stack = self.text_b.as_ref().unwrap_or(&self.text_a);
        let (s_t2, r_t2) = run_stack(tape, &mut binder, text_b_stack, e_t2)?;
        let (s_img, r_img) = run_stack(tape, &mut binder, &self.image, e_img)?;
        let (s_num, r_num) = run_stack(tape, &mut binder, &self.numeric, e_num)?;

        let z_text = text_confidence_var(tape, &s_t1, &s_t2)?;
        let z_image = image_confidence_var(tape, &s_img)?;
        let z_numeric = numeric_confidence_var(tape, &s_num)?;

        let om_t = binder.bind(tape, self.omega[0]);
        let om_i = binder.bind(tape, self.omega[1]);
        let om_n = binder.bind(tape, self.omega[2]);
        let zt = tape.scale_var(z_text, om_t)?;
        let zi = tape.scale_var(z_image, om_i)?;
        let zn = tape.scale_var(z_numeric, om_n)?;
        let gate_input = tape.concat_last(&[zt, zi, zn])?;

        let gw = binder.bind(tape, self.gate_w);
        let gb = binder.bind(tape, self.gate_b);
        let pre = tape.matmul(gate_input, gw)?;
        let pre = tape.add_bias(pre, gb)?;
        let gate_output = tape.tanh(pre)?;

        let hw = binder.bind(tape, self.head_w);
        let hb = binder.bind(tape, self.head_b);
        let logits = tape.matmul(gate_output, hw)?;
        let logits = tape.add_bias(logits, hb)?;
        let probs = tape.softmax_last(logits)?;

        Ok(FusionForward {
            probs,
            logits,
            gate_input,
            gate_output,
            z_text,
            z_image,
            z_numeric,
            routing: [r_t1, r_t2, r_img, r_num],
        })
    }

    /// Class probabilities for a batch, no gradient bookkeeping.
    pub fn predict_probs(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fwd = self.forward_on_tape(&mut tape, batch, None)?;
        Ok(tape.value_tensor(fwd.probs))
    }

    /// Probabilities plus one interpretability record per sample.
    pub fn predict_with_trace(
        &self,
        batch: &Batch,
        sample_offset: usize,
    ) -> Result<(Tensor, Vec<RoutingTrace>)> {
        let mut tape = Tape::new();
        let fwd = self.forward_on_tape(&mut tape, batch, None)?;
        let probs = tape.value_tensor(fwd.probs);

        let matrix_of = |tape: &Tape, rows: &[Var], b: usize| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|&r| {
                    let width = tape.shape(r)[1];
                    tape.data(r)[b * width..(b + 1) * width].to_vec()
                })
                .collect()
        };
        let row_of = |tape: &Tape, v: Var, b: usize| -> Vec<f64> {
            let width = tape.shape(v)[1];
            tape.data(v)[b * width..(b + 1) * width].to_vec()
        };

        let omega = self.omega_values();
        let mut traces = Vec::with_capacity(batch.len());
        for b in 0..batch.len() {
            traces.push(RoutingTrace {
                sample_index: sample_offset + b,
                label: Some(batch.labels[b] as u8),
                coefficients: TraceCoefficients {
                    text_a: matrix_of(&tape, &fwd.routing[0], b),
                    text_b: matrix_of(&tape, &fwd.routing[1], b),
                    image: matrix_of(&tape, &fwd.routing[2], b),
                    numeric: matrix_of(&tape, &fwd.routing[3], b),
                },
                confidences: TraceConfidences {
                    text: row_of(&tape, fwd.z_text, b),
                    image: row_of(&tape, fwd.z_image, b),
                    numeric: row_of(&tape, fwd.z_numeric, b),
                },
                omega: TraceOmega {
                    text: omega[0],
                    image: omega[1],
                    numeric: omega[2],
                },
                gate_input: row_of(&tape, fwd.gate_input, b),
                gate_output: row_of(&tape, fwd.gate_output, b),
                probs: row_of(&tape, fwd.probs, b),
            });
        }
        Ok((probs, traces))
    }

    /// Eager single-sample gate evaluation (plain loops, no tape).
    pub fn fuse_gate_single(
        &self,
        z_text: &[f64],
        z_image: &[f64],
        z_numeric: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let nc = self.config.n_classes;
        if z_text.len() != nc || z_image.len() != nc || z_numeric.len() != nc {
            return Err(Error::dimension(
                "fuse_gate",
                format!(
                    "confidence lengths {}, {}, {}",
                    z_text.len(),
                    z_image.len(),
                    z_numeric.len()
                ),
                format!("{nc} classes"),
            ));
        }
        let omega = self.omega_values();
        let mut f = Vec::with_capacity(3 * nc);
        f.extend(z_text.iter().map(|v| v * omega[0]));
        f.extend(z_image.iter().map(|v| v * omega[1]));
        f.extend(z_numeric.iter().map(|v| v * omega[2]));

        let w = self.params.get(self.gate_w);
        let b = self.params.get(self.gate_b);
        let width = self.config.gate_width;
        let mut g = vec![0.0; width];
        for (j, gj) in g.iter_mut().enumerate() {
            let mut acc = b.data()[j];
            for (i, fi) in f.iter().enumerate() {
                acc += fi * w.data()[i * width + j];
            }
            *gj = acc.tanh();
        }
        Ok((g, f))
    }
}

// ── on-tape confidence metrics ──────────────────────────────────────────

/// Image confidence: the norm of the squashed digit capsule, computed in
/// closed form as `n2 / (1 + n2)` with `n2 = ||s||^2`.
pub fn image_confidence_var(tape: &mut Tape, s: &CapsuleVar) -> Result<Var> {
    let mut per_class = Vec::with_capacity(s.n_capsules);
    for j in 0..s.n_capsules {
        let cap = tape.index_cap(s.var, j)?;
        let sq = tape.mul(cap, cap)?;
        let n2 = tape.sum_last(sq)?;
        let denom = tape.add_scalar(n2, 1.0)?;
        per_class.push(tape.div(n2, denom)?);
    }
    tape.concat_last(&per_class)
}

/// Text confidence: per-class cosine between the two text channels' digit
/// capsules. Norm denominators are floored at epsilon, which sends
/// zero-vector operands to confidence 0 while keeping the cosine exactly
/// scale-free for nonzero inputs.
pub fn text_confidence_var(tape: &mut Tape, s1: &CapsuleVar, s2: &CapsuleVar) -> Result<Var> {
    if s1.n_capsules != s2.n_capsules || s1.dim != s2.dim {
        return Err(Error::dimension(
            "text_confidence",
            format!("[{}, {}]", s1.n_capsules, s1.dim),
            format!("[{}, {}]", s2.n_capsules, s2.dim),
        ));
    }
    // max(norm, eps) built from relu: relu(norm - eps) + eps.
    let floored_norm = |tape: &mut Tape, v: Var| -> Result<Var> {
        let sq = tape.mul(v, v)?;
        let n2 = tape.sum_last(sq)?;
        let norm = tape.sqrt(n2)?;
        let shifted = tape.add_scalar(norm, -COSINE_EPS)?;
        let clipped = tape.relu(shifted)?;
        tape.add_scalar(clipped, COSINE_EPS)
    };
    let mut per_class = Vec::with_capacity(s1.n_capsules);
    for j in 0..s1.n_capsules {
        let a = tape.index_cap(s1.var, j)?;
        let b = tape.index_cap(s2.var, j)?;
        let prod = tape.mul(a, b)?;
        let dot = tape.sum_last(prod)?;
        let na = floored_norm(tape, a)?;
        let nb = floored_norm(tape, b)?;
        let denom = tape.mul(na, nb)?;
        per_class.push(tape.div(dot, denom)?);
    }
    tape.concat_last(&per_class)
}

/// Numeric confidence: softmax over capsule norms, then per-class certainty
/// `1 - p log2 p`.
pub fn numeric_confidence_var(tape: &mut Tape, s: &CapsuleVar) -> Result<Var> {
    let mut norms = Vec::with_capacity(s.n_capsules);
    for j in 0..s.n_capsules {
        let cap = tape.index_cap(s.var, j)?;
        let sq = tape.mul(cap, cap)?;
        let n2 = tape.sum_last(sq)?;
        norms.push(tape.sqrt(n2)?);
    }
    let stacked = tape.concat_last(&norms)?;
    let p = tape.softmax_last(stacked)?;
    let shifted = tape.add_scalar(p, PLOGP_EPS)?;
    let lnp = tape.ln(shifted)?;
    let log2p = tape.mul_scalar(lnp, 1.0 / std::f64::consts::LN_2)?;
    let plogp = tape.mul(p, log2p)?;
    let neg = tape.mul_scalar(plogp, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

// ── eager confidence metrics (independent loop implementations) ─────────

fn capsule_norm2(cap: &[f64]) -> f64 {
    cap.iter().map(|v| v * v).sum()
}

/// Eager image confidence for tests and trace-free inspection.
pub fn image_confidence(s: &CapsuleTensor) -> Vec<ConfidenceVector> {
    (0..s.batch())
        .map(|b| ConfidenceVector {
            modality: Modality::Image,
            values: (0..s.n_capsules())
                .map(|j| {
                    let n2 = capsule_norm2(s.capsule(b, j));
                    n2 / (1.0 + n2)
                })
                .collect(),
        })
        .collect()
}

/// Eager text confidence.
pub fn text_confidence(s1: &CapsuleTensor, s2: &CapsuleTensor) -> Result<Vec<ConfidenceVector>> {
    if s1.tensor().shape() != s2.tensor().shape() {
        return Err(Error::dimension(
            "text_confidence",
            shape_string(s1.tensor().shape()),
            shape_string(s2.tensor().shape()),
        ));
    }
    Ok((0..s1.batch())
        .map(|b| ConfidenceVector {
            modality: Modality::Text,
            values: (0..s1.n_capsules())
                .map(|j| {
                    let (a, c) = (s1.capsule(b, j), s2.capsule(b, j));
                    let dot: f64 = a.iter().zip(c).map(|(x, y)| x * y).sum();
                    let na = capsule_norm2(a).sqrt().max(COSINE_EPS);
                    let nc = capsule_norm2(c).sqrt().max(COSINE_EPS);
                    dot / (na * nc)
                })
                .collect(),
        })
        .collect())
}

/// Eager numeric confidence with the exact `p log2 p -> 0` guard.
pub fn numeric_confidence(s: &CapsuleTensor) -> Vec<ConfidenceVector> {
    (0..s.batch())
        .map(|b| {
            let norms: Vec<f64> = (0..s.n_capsules())
                .map(|j| capsule_norm2(s.capsule(b, j)).sqrt())
                .collect();
            let max = norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = norms.iter().map(|&l| (l - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            ConfidenceVector {
                modality: Modality::Numeric,
                values: exps
                    .iter()
                    .map(|&e| {
                        let p = e / denom;
                        let plogp = if p < PLOGP_EPS { 0.0 } else { p * p.log2() };
                        1.0 - plogp
                    })
                    .collect(),
            }
        })
        .collect()
}

// ── interpretability record ─────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCoefficients {
    /// `[n_classes][n_primary]`; each row is one digit capsule's vote
    /// distribution over input capsules and sums to 1.
    pub text_a: Vec<Vec<f64>>,
    pub text_b: Vec<Vec<f64>>,
    pub image: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfidences {
    pub text: Vec<f64>,
    pub image: Vec<f64>,
    pub numeric: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceOmega {
    pub text: f64,
    pub image: f64,
    pub numeric: f64,
}

/// One exported record per sample: routing coefficients, confidence vectors,
/// modality weights, gate activations, and predicted probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub sample_index: usize,
    pub label: Option<u8>,
    pub coefficients: TraceCoefficients,
    pub confidences: TraceConfidences,
    pub omega: TraceOmega,
    pub gate_input: Vec<f64>,
    pub gate_output: Vec<f64>,
    pub probs: Vec<f64>,
}
