//! Capsule mechanics shared by all modalities: primary-capsule projection,
//! the squash nonlinearity, digit-capsule transforms, and routing by
//! agreement.

use rand::Rng;

use crate::error::{shape_string, Error, Result};
use crate::numerics::{xavier_uniform, Binder, ParamId, ParamSet, Tape, Tensor, Var};

/// Epsilon in the squash norm denominator so the zero vector maps to zero.
pub const SQUASH_EPS: f64 = 1e-9;

/// A `batch x n_capsules x cap_dim` activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleTensor {
    data: Tensor,
}

impl CapsuleTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::contract(
                "CapsuleTensor::new",
                format!("rank must be 3, found shape {}", shape_string(data.shape())),
            ));
        }
        Ok(CapsuleTensor { data })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_capsules(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    /// Capsule `k` of sample `b`.
    pub fn capsule(&self, b: usize, k: usize) -> &[f64] {
        let (n, d) = (self.n_capsules(), self.dim());
        &self.data.data()[(b * n + k) * d..(b * n + k + 1) * d]
    }
}

/// Tape-resident capsule activations; shape is tracked for cheap checks.
#[derive(Debug, Clone, Copy)]
pub struct CapsuleVar {
    pub var: Var,
    pub n_capsules: usize,
    pub dim: usize,
}

/// Routing coefficients for one layer: `batch x n_in x n_out`, where the
/// weights over input capsules form a convex combination for every
/// (sample, digit-capsule) pair.
#[derive(Debug, Clone)]
pub struct RoutingCoefficients {
    data: Tensor,
}

impl RoutingCoefficients {
    /// Assemble from per-class coefficient tensors of shape `[B, n_in]`.
    pub fn from_per_class(per_class: &[Tensor]) -> Result<Self> {
        if per_class.is_empty() {
            return Err(Error::contract("RoutingCoefficients", "no classes"));
        }
        let batch = per_class[0].shape()[0];
        let n_in = per_class[0].shape()[1];
        let n_out = per_class.len();
        let mut data = vec![0.0; batch * n_in * n_out];
        for (j, c) in per_class.iter().enumerate() {
            if c.shape() != [batch, n_in] {
                return Err(Error::dimension(
                    "RoutingCoefficients",
                    shape_string(&[batch, n_in]),
                    shape_string(c.shape()),
                ));
            }
            for b in 0..batch {
                for k in 0..n_in {
                    data[(b * n_in + k) * n_out + j] = c.data()[b * n_in + k];
                }
            }
        }
        Ok(RoutingCoefficients {
            data: Tensor::new(vec![batch, n_in, n_out], data)?,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_in(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn get(&self, b: usize, k: usize, j: usize) -> f64 {
        let (n_in, n_out) = (self.n_in(), self.n_out());
        self.data.data()[(b * n_in + k) * n_out + j]
    }

    /// The `[n_out][n_in]` coefficient matrix of one sample; each row is the
    /// vote distribution one digit capsule placed over the input capsules.
    pub fn sample_matrix(&self, b: usize) -> Vec<Vec<f64>> {
        (0..self.n_out())
            .map(|j| (0..self.n_in()).map(|k| self.get(b, k, j)).collect())
            .collect()
    }

    /// Check nonnegativity and that each (sample, digit-capsule) row sums to
    /// one within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for b in 0..self.batch() {
            for j in 0..self.n_out() {
                let mut sum = 0.0;
                for k in 0..self.n_in() {
                    let c = self.get(b, k, j);
                    if c < 0.0 {
                        return Err(Error::numeric(
                            "RoutingCoefficients::validate",
                            format!("negative coefficient {c} at ({b}, {k}, {j})"),
                        ));
                    }
                    sum += c;
                }
                if (sum - 1.0).abs() > tol {
                    return Err(Error::numeric(
                        "RoutingCoefficients::validate",
                        format!("row ({b}, {j}) sums to {sum}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Squash along the last axis: `s * ||s||^2 / ((1 + ||s||^2) (||s|| + eps))`.
/// Output norm is `||s||^2 / (1 + ||s||^2) < 1` and direction is preserved;
/// the epsilon sends the zero vector to zero.
pub fn squash_last(tape: &mut Tape, v: Var) -> Result<Var> {
    let sq = tape.mul(v, v)?;
    let n2 = tape.sum_last(sq)?;
    let norm = tape.sqrt(n2)?;
    let one_plus = tape.add_scalar(n2, 1.0)?;
    let norm_eps = tape.add_scalar(norm, SQUASH_EPS)?;
    let denom = tape.mul(one_plus, norm_eps)?;
    let factor = tape.div(n2, denom)?;
    tape.scale_last(v, factor)
}

/// Squash plain vectors without a surrounding graph.
pub fn squash_tensor(t: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.leaf(t);
    let out = squash_last(&mut tape, v)?;
    Ok(tape.value_tensor(out))
}

/// Projects one modality's embedding into `n_capsules` views, each through
/// its own weight matrix.
#[derive(Debug, Clone)]
pub struct PrimaryCapsuleLayer {
    pub n_capsules: usize,
    pub in_dim: usize,
    pub cap_dim: usize,
    pub apply_squash: bool,
    projections: Vec<ParamId>,
}

impl PrimaryCapsuleLayer {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        n_capsules: usize,
        in_dim: usize,
        cap_dim: usize,
        apply_squash: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if n_capsules == 0 || in_dim == 0 || cap_dim == 0 {
            return Err(Error::Config(format!(
                "primary capsule layer {prefix} needs positive sizes"
            )));
        }
        let projections = (0..n_capsules)
            .map(|k| {
                params.add(
                    format!("{prefix}.primary.{k}"),
                    xavier_uniform(vec![in_dim, cap_dim], in_dim, cap_dim, rng),
                )
            })
            .collect();
        Ok(PrimaryCapsuleLayer {
            n_capsules,
            in_dim,
            cap_dim,
            apply_squash,
            projections,
        })
    }

    pub fn projection_ids(&self) -> &[ParamId] {
        &self.projections
    }

    /// `e: [B, in_dim]` -> capsules `[B, n_capsules, cap_dim]`, squashed per
    /// capsule when `apply_squash` is set.
    pub fn project(&self, tape: &mut Tape, binder: &mut Binder, e: Var) -> Result<CapsuleVar> {
        let shape = tape.shape(e).to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::dimension(
                "project_primary",
                format!("embedding {}", shape_string(&shape)),
                format!("[_, {}]", self.in_dim),
            ));
        }
        let mut caps = Vec::with_capacity(self.n_capsules);
        for &w in &self.projections {
            let wv = binder.bind(tape, w);
            caps.push(tape.matmul(e, wv)?);
        }
        let mut stacked = tape.stack_caps(&caps)?;
        if self.apply_squash {
            stacked = squash_last(tape, stacked)?;
        }
        Ok(CapsuleVar {
            var: stacked,
            n_capsules: self.n_capsules,
            dim: self.cap_dim,
        })
    }

    /// Convenience evaluation outside a training graph.
    pub fn project_tensor(&self, params: &ParamSet, e: &Tensor) -> Result<CapsuleTensor> {
        let mut tape = Tape::new();
        let ev = tape.leaf(e);
        let mut binder = Binder::new(params, None);
        let caps = self.project(&mut tape, &mut binder, ev)?;
        CapsuleTensor::new(tape.value_tensor(caps.var))
    }
}

/// Transforms primary capsules into class-level digit capsules and routes
/// votes by agreement.
#[derive(Debug, Clone)]
pub struct DigitCapsuleLayer {
    pub n_in: usize,
    pub n_out: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub routing_iters: usize,
    /// `transforms[k][j]` maps primary capsule `k` into digit capsule `j`'s
    /// space. Stored separately from the primary projections, never aliased.
    transforms: Vec<Vec<ParamId>>,
}

/// Tape-resident routing output: the per-class coefficient rows `[B, n_in]`.
pub struct RoutingVars {
    pub per_class: Vec<Var>,
}

impl DigitCapsuleLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        n_in: usize,
        n_out: usize,
        in_dim: usize,
        out_dim: usize,
        routing_iters: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !(1..=10).contains(&routing_iters) {
            return Err(Error::Config(format!(
                "routing_iters must be in 1..=10, got {routing_iters}"
            )));
        }
        if n_in == 0 || n_out == 0 || in_dim == 0 || out_dim == 0 {
            return Err(Error::Config(format!(
                "digit capsule layer {prefix} needs positive sizes"
            )));
        }
        let transforms = (0..n_in)
            .map(|k| {
                (0..n_out)
                    .map(|j| {
                        params.add(
                            format!("{prefix}.transform.{k}.{j}"),
                            xavier_uniform(vec![in_dim, out_dim], in_dim, out_dim, rng),
                        )
                    })
                    .collect()
            })
            .collect();
        Ok(DigitCapsuleLayer {
            n_in,
            n_out,
            in_dim,
            out_dim,
            routing_iters,
            transforms,
        })
    }

    pub fn transform_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.transforms.iter().flatten().copied()
    }

    /// Routing by agreement.
    ///
    /// Votes `u[k][j] = p_k W_kj` are combined as `s_j = sum_k c_kj u[k][j]`
    /// where, for each (sample, digit capsule), the coefficients over input
    /// capsules are a softmax of the agreement logits. Logits start at zero,
    /// so a single iteration reduces to the uniform average
    /// `s_j = (1/n_in) sum_k u[k][j]`. After every iteration except the last,
    /// logits are bumped by the dot product between each vote and the
    /// squashed combined output. Returns the unsquashed final `s` plus the
    /// final coefficients; downstream confidence stages decide whether to
    /// squash.
    pub fn route(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        p: &CapsuleVar,
    ) -> Result<(CapsuleVar, RoutingVars)> {
        if p.n_capsules != self.n_in || p.dim != self.in_dim {
            return Err(Error::dimension(
                "route",
                format!("primary capsules [{}, {}]", p.n_capsules, p.dim),
                format!("layer expects [{}, {}]", self.n_in, self.in_dim),
            ));
        }
        let batch = tape.shape(p.var)[0];

        let mut votes: Vec<Vec<Var>> = Vec::with_capacity(self.n_in);
        for k in 0..self.n_in {
            let pk = tape.index_cap(p.var, k)?;
            let mut row = Vec::with_capacity(self.n_out);
            for j in 0..self.n_out {
                let w = binder.bind(tape, self.transforms[k][j]);
                row.push(tape.matmul(pk, w)?);
            }
            votes.push(row);
        }

        // logits[k][j]: [B, 1], zeroed at the start of every forward pass.
        let mut logits: Vec<Vec<Var>> = (0..self.n_in)
            .map(|_| {
                (0..self.n_out)
                    .map(|_| {
                        tape.constant(vec![batch, 1], vec![0.0; batch])
                            .expect("zero logits")
                    })
                    .collect()
            })
            .collect();

        let mut outputs: Vec<Var> = Vec::new();
        let mut coeff_rows: Vec<Var> = Vec::new();
        for iter in 0..self.routing_iters {
            outputs.clear();
            coeff_rows.clear();
            for j in 0..self.n_out {
                let cols: Vec<Var> = (0..self.n_in).map(|k| logits[k][j]).collect();
                let stacked = tape.concat_last(&cols)?;
                let coeffs = tape.softmax_last(stacked)?;
                let mut s_j: Option<Var> = None;
                for k in 0..self.n_in {
                    let c_k = tape.slice_last(coeffs, k, 1)?;
                    let weighted = tape.scale_last(votes[k][j], c_k)?;
                    s_j = Some(match s_j {
                        Some(acc) => tape.add(acc, weighted)?,
                        None => weighted,
                    });
                }
                outputs.push(s_j.expect("n_in >= 1"));
                coeff_rows.push(coeffs);
            }
            if iter + 1 < self.routing_iters {
                for j in 0..self.n_out {
                    let v_j = squash_last(tape, outputs[j])?;
                    for k in 0..self.n_in {
                        let prod = tape.mul(votes[k][j], v_j)?;
                        let agreement = tape.sum_last(prod)?;
                        logits[k][j] = tape.add(logits[k][j], agreement)?;
                    }
                }
            }
        }

        let s = tape.stack_caps(&outputs)?;
        Ok((
            CapsuleVar {
                var: s,
                n_capsules: self.n_out,
                dim: self.out_dim,
            },
            RoutingVars {
                per_class: coeff_rows,
            },
        ))
    }

    /// Convenience evaluation outside a training graph.
    pub fn route_tensor(
        &self,
        params: &ParamSet,
        p: &CapsuleTensor,
    ) -> Result<(CapsuleTensor, RoutingCoefficients)> {
        let mut tape = Tape::new();
        let pv = tape.leaf(p.tensor());
        let caps = CapsuleVar {
            var: pv,
            n_capsules: p.n_capsules(),
            dim: p.dim(),
        };
        let mut binder = Binder::new(params, None);
        let (s, routing) = self.route(&mut tape, &mut binder, &caps)?;
        let per_class: Vec<Tensor> = routing
            .per_class
            .iter()
            .map(|&v| tape.value_tensor(v))
            .collect();
        Ok((
            CapsuleTensor::new(tape.value_tensor(s.var))?,
            RoutingCoefficients::from_per_class(&per_class)?,
        ))
    }
}
