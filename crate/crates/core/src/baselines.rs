//! Reference fusion strategies: addition, concatenation, and single-head
//! cross-attention. All three share the numeric encoder architecture, the
//! linear adapters to a common dimension, and the classifier head, so
//! comparisons against the capsule fusion isolate the fusion stage itself.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::numerics::{xavier_uniform, Binder, ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineStrategy {
    Addition,
    Concatenation,
    CrossAttention,
}

impl BaselineStrategy {
    pub fn name(self) -> &'static str {
        match self {
            BaselineStrategy::Addition => "addition",
            BaselineStrategy::Concatenation => "concatenation",
            BaselineStrategy::CrossAttention => "cross_attention",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub strategy: BaselineStrategy,
    pub n_classes: usize,
    pub text_a_dim: usize,
    pub text_b_dim: usize,
    pub image_dim: usize,
    pub numeric_raw_dim: usize,
    pub numeric_hidden: Vec<usize>,
    pub numeric_embed_dim: usize,
    /// Common adapter dimension; addition and cross-attention fuse at `d_f`,
    /// concatenation at `4 * d_f`.
    pub d_f: usize,
    pub classifier_hidden: usize,
}

impl BaselineConfig {
    pub fn with_dims(
        strategy: BaselineStrategy,
        text_a_dim: usize,
        text_b_dim: usize,
        image_dim: usize,
        numeric_raw_dim: usize,
    ) -> Self {
        BaselineConfig {
            strategy,
            n_classes: 2,
            text_a_dim,
            text_b_dim,
            image_dim,
            numeric_raw_dim,
            numeric_hidden: vec![32, 32],
            numeric_embed_dim: 16,
            d_f: 64,
            classifier_hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_classes", self.n_classes),
            ("text_a_dim", self.text_a_dim),
            ("text_b_dim", self.text_b_dim),
            ("image_dim", self.image_dim),
            ("numeric_raw_dim", self.numeric_raw_dim),
            ("numeric_embed_dim", self.numeric_embed_dim),
            ("d_f", self.d_f),
            ("classifier_hidden", self.classifier_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be >= 2".into()));
        }
        Ok(())
    }

    pub fn fused_dim(&self) -> usize {
        match self.strategy {
            BaselineStrategy::Concatenation => 4 * self.d_f,
            _ => self.d_f,
        }
    }
}

#[derive(Debug, Clone)]
struct AttentionParams {
    /// Per modality, in batch order (text_a, text_b, image, numeric).
    query: [ParamId; 4],
    key: [ParamId; 4],
    value: [ParamId; 4],
}

#[derive(Debug, Clone)]
pub struct BaselineModel {
    config: BaselineConfig,
    params: ParamSet,
    numeric_layers: Vec<(ParamId, ParamId)>,
    /// Linear adapters (weight, bias) to `d_f`, one per modality.
    adapters: [(ParamId, ParamId); 4],
    attention: Option<AttentionParams>,
    classifier: [(ParamId, ParamId); 2],
}

impl BaselineModel {
    pub fn new(config: BaselineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();

        let mut numeric_layers = Vec::new();
        let mut sizes = vec![config.numeric_raw_dim];
        sizes.extend(&config.numeric_hidden);
        sizes.push(config.numeric_embed_dim);
        for (i, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            numeric_layers.push((
                params.add(
                    format!("numeric_encoder.{i}.weight"),
                    xavier_uniform(vec![fan_in, fan_out], fan_in, fan_out, &mut rng),
                ),
                params.add(
                    format!("numeric_encoder.{i}.bias"),
                    Tensor::zeros(vec![fan_out]),
                ),
            ));
        }

        let modality_dims = [
            ("text_a", config.text_a_dim),
            ("text_b", config.text_b_dim),
            ("image", config.image_dim),
            ("numeric", config.numeric_embed_dim),
        ];
        let adapters: Vec<(ParamId, ParamId)> = modality_dims
            .iter()
            .map(|(name, dim)| {
                (
                    params.add(
                        format!("adapter.{name}.weight"),
                        xavier_uniform(vec![*dim, config.d_f], *dim, config.d_f, &mut rng),
                    ),
                    params.add(
                        format!("adapter.{name}.bias"),
                        Tensor::zeros(vec![config.d_f]),
                    ),
                )
            })
            .collect();

        let attention = match config.strategy {
            BaselineStrategy::CrossAttention => {
                let role = |what: &str, rng: &mut ChaCha8Rng, params: &mut ParamSet| {
                    let ids: Vec<ParamId> = modality_dims
                        .iter()
                        .map(|(name, _)| {
                            params.add(
                                format!("attention.{name}.{what}"),
                                xavier_uniform(
                                    vec![config.d_f, config.d_f],
                                    config.d_f,
                                    config.d_f,
                                    rng,
                                ),
                            )
                        })
                        .collect();
                    [ids[0], ids[1], ids[2], ids[3]]
                };
                Some(AttentionParams {
                    query: role("query", &mut rng, &mut params),
                    key: role("key", &mut rng, &mut params),
                    value: role("value", &mut rng, &mut params),
                })
            }
            _ => None,
        };

        let fused = config.fused_dim();
        let classifier = [
            (
                params.add(
                    "classifier.0.weight",
                    xavier_uniform(
                        vec![fused, config.classifier_hidden],
                        fused,
                        config.classifier_hidden,
                        &mut rng,
                    ),
                ),
                params.add(
                    "classifier.0.bias",
                    Tensor::zeros(vec![config.classifier_hidden]),
                ),
            ),
            (
                params.add(
                    "classifier.1.weight",
                    xavier_uniform(
                        vec![config.classifier_hidden, config.n_classes],
                        config.classifier_hidden,
                        config.n_classes,
                        &mut rng,
                    ),
                ),
                params.add("classifier.1.bias", Tensor::zeros(vec![config.n_classes])),
            ),
        ];

        Ok(BaselineModel {
            config,
            params,
            numeric_layers,
            adapters: [adapters[0], adapters[1], adapters[2], adapters[3]],
            attention,
            classifier,
        })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
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

    /// Class logits for a batch: adapt each modality to `d_f`, fuse per the
    /// configured strategy, classify.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        override_param: Option<(ParamId, Var)>,
    ) -> Result<Var> {
        self.check_batch_dims(batch)?;
        let mut binder = Binder::new(&self.params, override_param);

        let raw = [
            tape.leaf(&batch.text_a),
            tape.leaf(&batch.text_b),
            tape.leaf(&batch.image),
            tape.leaf(&batch.numeric),
        ];
        let encoded_numeric = self.encode_numeric(tape, &mut binder, raw[3])?;
        let inputs = [raw[0], raw[1], raw[2], encoded_numeric];

        let mut adapted = Vec::with_capacity(4);
        for (x, (w, b)) in inputs.iter().zip(&self.adapters) {
            let wv = binder.bind(tape, *w);
            let bv = binder.bind(tape, *b);
            let lin = tape.matmul(*x, wv)?;
            adapted.push(tape.add_bias(lin, bv)?);
        }

        let fused = match self.config.strategy {
            BaselineStrategy::Addition => {
                let mut acc = adapted[0];
                for &x in &adapted[1..] {
                    acc = tape.add(acc, x)?;
                }
                acc
            }
            BaselineStrategy::Concatenation => tape.concat_last(&adapted)?,
            BaselineStrategy::CrossAttention => {
                let attn = self.attention.as_ref().expect("strategy implies params");
                self.cross_attention(tape, &mut binder, &adapted, attn)?
            }
        };

        let (w1, b1) = self.classifier[0];
        let (w2, b2) = self.classifier[1];
        let w1v = binder.bind(tape, w1);
        let b1v = binder.bind(tape, b1);
        let hidden = tape.matmul(fused, w1v)?;
        let hidden = tape.add_bias(hidden, b1v)?;
        let hidden = tape.tanh(hidden)?;
        let w2v = binder.bind(tape, w2);
        let b2v = binder.bind(tape, b2);
        let logits = tape.matmul(hidden, w2v)?;
        tape.add_bias(logits, b2v)
    }

    /// Single-head scaled dot-product attention: each modality queries the
    /// other three, attention weights per query sum to 1, outputs are
    /// mean-pooled over the four query modalities.
    fn cross_attention(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        adapted: &[Var],
        attn: &AttentionParams,
    ) -> Result<Var> {
        let scale = 1.0 / (self.config.d_f as f64).sqrt();
        let mut pooled: Option<Var> = None;
        for m in 0..4 {
            let wq = binder.bind(tape, attn.query[m]);
            let q = tape.matmul(adapted[m], wq)?;
            let others: Vec<usize> = (0..4).filter(|&o| o != m).collect();
            let mut logit_cols = Vec::with_capacity(3);
            let mut values = Vec::with_capacity(3);
            for &o in &others {
                let wk = binder.bind(tape, attn.key[o]);
                let wv = binder.bind(tape, attn.value[o]);
                let k = tape.matmul(adapted[o], wk)?;
                let v = tape.matmul(adapted[o], wv)?;
                let prod = tape.mul(q, k)?;
                let dot = tape.sum_last(prod)?;
                logit_cols.push(tape.mul_scalar(dot, scale)?);
                values.push(v);
            }
            let logits = tape.concat_last(&logit_cols)?;
            let alpha = tape.softmax_last(logits)?;
            let mut out_m: Option<Var> = None;
            for (slot, v) in values.iter().enumerate() {
                let a = tape.slice_last(alpha, slot, 1)?;
                let contrib = tape.scale_last(*v, a)?;
                out_m = Some(match out_m {
                    Some(acc) => tape.add(acc, contrib)?,
                    None => contrib,
                });
            }
            let out_m = out_m.expect("three others");
            pooled = Some(match pooled {
                Some(acc) => tape.add(acc, out_m)?,
                None => out_m,
            });
        }
        tape.mul_scalar(pooled.expect("four modalities"), 0.25)
    }

    pub fn predict_probs(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let logits = self.logits_on_tape(&mut tape, batch, None)?;
        let probs = tape.softmax_last(logits)?;
        Ok(tape.value_tensor(probs))
    }
}

// ── eager fusion primitives (loop oracles and spec surface) ─────────────

/// Elementwise sum of equal-length vectors.
pub fn fuse_add(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let dim = vectors
        .first()
        .ok_or_else(|| Error::contract("fuse_add", "no vectors"))?
        .len();
    let mut out = vec![0.0; dim];
    for v in vectors {
        if v.len() != dim {
            return Err(Error::dimension(
                "fuse_add",
                format!("[{dim}]"),
                format!("[{}]", v.len()),
            ));
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    Ok(out)
}

/// Concatenation in the fixed order text_a, text_b, image, numeric.
pub fn fuse_concat(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    if vectors.is_empty() {
        return Err(Error::contract("fuse_concat", "no vectors"));
    }
    Ok(vectors.concat())
}

/// Parameters for the eager single-sample cross-attention oracle.
pub struct CrossAttentionWeights<'a> {
    /// Per modality: `d_f x d_f` row-major query/key/value matrices.
    pub query: [&'a [f64]; 4],
    pub key: [&'a [f64]; 4],
    pub value: [&'a [f64]; 4],
}

/// Straight-line single-sample cross-attention; returns the fused vector and
/// the per-query attention weights (rows sum to 1).
pub fn fuse_cross_attention(
    vectors: &[Vec<f64>; 4],
    weights: &CrossAttentionWeights,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::contract("fuse_cross_attention", "unequal dims"));
    }
    let matvec = |m: &[f64], x: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|c| (0..d).map(|r| x[r] * m[r * d + c]).sum())
            .collect()
    };
    let scale = 1.0 / (d as f64).sqrt();
    let mut fused = vec![0.0; d];
    let mut all_alpha = Vec::with_capacity(4);
    for m in 0..4 {
        let q = matvec(weights.query[m], &vectors[m]);
        let others: Vec<usize> = (0..4).filter(|&o| o != m).collect();
        let logits: Vec<f64> = others
            .iter()
            .map(|&o| {
                let k = matvec(weights.key[o], &vectors[o]);
                q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() * scale
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let alpha: Vec<f64> = exps.iter().map(|e| e / denom).collect();
        for (slot, &o) in others.iter().enumerate() {
            let v = matvec(weights.value[o], &vectors[o]);
            for (f, x) in fused.iter_mut().zip(&v) {
                *f += 0.25 * alpha[slot] * x;
            }
        }
        all_alpha.push(alpha);
    }
    Ok((fused, all_alpha))
}
