//! Property tests: every differentiable tape op agrees with central finite
//! differences on random inputs, and softmax outputs form a distribution.

use proptest::prelude::*;

use capsfuse::capsule::squash_last;
use capsfuse::numerics::{finite_diff_check, Tape, Tensor, Var};

const TRIALS: u32 = 120;
const TOL: f64 = 1e-4;

fn tensor_strategy(numel: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(lo..hi, numel)
}

/// Collapse any output to a scalar through a fixed weighted sum, so the
/// check exercises non-uniform upstream gradients.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> capsfuse::Result<Var> {
    let n = tape.data(v).len();
    let shape = tape.shape(v).to_vec();
    let weights: Vec<f64> = (0..n)
        .map(|i| {
            let h = seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add((i as u64).wrapping_mul(0xd1342543de82ef95));
            ((h >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    let w = tape.constant(shape, weights)?;
    let prod = tape.mul(v, w)?;
    tape.sum_all(prod)
}

macro_rules! op_gradient_test {
    ($name:ident, $numel:expr, $shape:expr, $range:expr, $body:expr) => {
        proptest! {
            #![proptest_config(ProptestConfig::with_cases(TRIALS))]
            #[test]
            fn $name(data in tensor_strategy($numel, $range.0, $range.1), seed in 0u64..1_000_000) {
                let x = Tensor::new($shape.to_vec(), data).unwrap();
                #[allow(clippy::redundant_closure_call)]
                let err = finite_diff_check(
                    |tape, v| {
                        let out = ($body)(tape, v, seed)?;
                        weighted_sum(tape, out, seed)
                    },
                    &x,
                    1e-5,
                )
                .unwrap();
                prop_assert!(err < TOL, "gradient error {err}");
            }
        }
    };
}

op_gradient_test!(
    matmul_left_operand,
    6,
    [2, 3],
    (-2.0, 2.0),
    |tape: &mut Tape, v, _| {
        let other = Tensor::new(vec![3, 2], vec![0.4, -1.1, 0.9, 0.3, -0.7, 1.6]).unwrap();
        let o = tape.leaf(&other);
        tape.matmul(v, o)
    }
);

op_gradient_test!(
    matmul_right_operand,
    6,
    [3, 2],
    (-2.0, 2.0),
    |tape: &mut Tape, v, _| {
        let other = Tensor::new(vec![2, 3], vec![1.2, -0.5, 0.8, -1.4, 0.2, 0.6]).unwrap();
        let o = tape.leaf(&other);
        tape.matmul(o, v)
    }
);

op_gradient_test!(
    add_and_sub,
    6,
    [2, 3],
    (-2.0, 2.0),
    |tape: &mut Tape, v, _| {
        let first = Tensor::new(vec![2, 3], vec![0.3, -0.6, 1.4, 0.9, -1.8, 0.2]).unwrap();
        let second = Tensor::new(vec![2, 3], vec![-0.5, 0.8, 0.1, -1.2, 0.4, 1.0]).unwrap();
        let a = tape.leaf(&first);
        let b = tape.leaf(&second);
        let s = tape.add(v, a)?;
        tape.sub(b, s)
    }
);

op_gradient_test!(
    mul_elementwise,
    6,
    [2, 3],
    (-2.0, 2.0),
    |tape: &mut Tape, v, _| {
        let other = Tensor::new(vec![2, 3], vec![1.5, -0.4, 0.7, 2.0, -1.2, 0.05]).unwrap();
        let o = tape.leaf(&other);
        tape.mul(v, o)
    }
);

op_gradient_test!(
    div_by_bounded_denominator,
    6,
    [2, 3],
    (0.5, 2.0),
    |tape: &mut Tape, v, _| {
        let num = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 1.5, -0.25, 0.75]).unwrap();
        let n = tape.leaf(&num);
        tape.div(n, v)
    }
);

op_gradient_test!(
    div_numerator,
    6,
    [2, 3],
    (-2.0, 2.0),
    |tape: &mut Tape, v, _| {
        let den = Tensor::new(vec![2, 3], vec![1.2, 0.8, 2.0, 1.5, 0.6, 1.1]).unwrap();
        let d = tape.leaf(&den);
        tape.div(v, d)
    }
);

op_gradient_test!(
    add_bias_over_batch,
    3,
    [3],
    (-2.0, 2.0),
    |tape: &mut Tape, v, _| {
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.5, -0.9, 1.2, -0.3, 0.7]).unwrap();
        let xv = tape.leaf(&x);
        tape.add_bias(xv, v)
    }
);

op_gradient_test!(
    scalar_ops,
    6,
    [2, 3],
    (-2.0, 2.0),
    |tape: &mut Tape, v, _| {
        let shifted = tape.add_scalar(v, 0.37)?;
        tape.mul_scalar(shifted, -1.9)
    }
);

op_gradient_test!(
    scale_by_scalar_var,
    1,
    [1],
    (-2.0, 2.0),
    |tape: &mut Tape, v, _| {
        let x = Tensor::new(vec![2, 2], vec![0.4, -0.8, 1.1, 0.2]).unwrap();
        let xv = tape.leaf(&x);
        tape.scale_var(xv, v)
    }
);

op_gradient_test!(
    tanh_elementwise,
    6,
    [2, 3],
    (-2.0, 2.0),
    |tape: &mut Tape, v, _| { tape.tanh(v) }
);

// Relu is non-differentiable at 0; sample away from the kink.
op_gradient_test!(
    relu_away_from_kink,
    6,
    [2, 3],
    (0.1, 2.0),
    |tape: &mut Tape, v, _| {
        let shifted = tape.add_scalar(v, -1.0)?;
        let abs_shift = tape.mul_scalar(shifted, 3.0)?;
        tape.relu(abs_shift)
    }
);

op_gradient_test!(
    ln_positive,
    6,
    [2, 3],
    (0.1, 4.0),
    |tape: &mut Tape, v, _| { tape.ln(v) }
);

op_gradient_test!(
    sqrt_positive,
    6,
    [2, 3],
    (0.1, 4.0),
    |tape: &mut Tape, v, _| { tape.sqrt(v) }
);

op_gradient_test!(
    reductions,
    6,
    [2, 3],
    (-2.0, 2.0),
    |tape: &mut Tape, v, seed| {
        let per_row = tape.sum_last(v)?;
        weighted_sum(tape, per_row, seed)
    }
);

op_gradient_test!(
    softmax_rows,
    6,
    [2, 3],
    (-2.0, 2.0),
    |tape: &mut Tape, v, _| { tape.softmax_last(v) }
);

op_gradient_test!(
    softmax_middle_axis,
    12,
    [2, 3, 2],
    (-2.0, 2.0),
    |tape: &mut Tape, v, _| { tape.softmax(v, 1) }
);

op_gradient_test!(
    scale_last_rows,
    8,
    [2, 4],
    (-2.0, 2.0),
    |tape: &mut Tape, v, _| {
        let f = Tensor::new(vec![2, 1], vec![0.7, -1.3]).unwrap();
        let fv = tape.leaf(&f);
        tape.scale_last(v, fv)
    }
);

op_gradient_test!(
    scale_last_factor,
    2,
    [2, 1],
    (-2.0, 2.0),
    |tape: &mut Tape, v, _| {
        let x = Tensor::new(vec![2, 4], vec![0.2, -0.4, 0.9, 1.1, -0.6, 0.3, 0.5, -1.0]).unwrap();
        let xv = tape.leaf(&x);
        tape.scale_last(xv, v)
    }
);

op_gradient_test!(
    stack_and_index,
    6,
    [2, 3],
    (-2.0, 2.0),
    |tape: &mut Tape, v, _| {
        let other = Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap();
        let o = tape.leaf(&other);
        let stacked = tape.stack_caps(&[v, o, v])?;
        tape.index_cap(stacked, 2)
    }
);

op_gradient_test!(
    concat_and_slice,
    6,
    [2, 3],
    (-2.0, 2.0),
    |tape: &mut Tape, v, _| {
        let other = Tensor::new(vec![2, 2], vec![0.9, -0.1, 0.4, 0.8]).unwrap();
        let o = tape.leaf(&other);
        let joined = tape.concat_last(&[v, o])?;
        tape.slice_last(joined, 1, 3)
    }
);

op_gradient_test!(
    pick_per_row_gather,
    6,
    [2, 3],
    (-2.0, 2.0),
    |tape: &mut Tape, v, _| { tape.pick_per_row(v, &[2, 0]) }
);

op_gradient_test!(
    squash_composite,
    6,
    [2, 3],
    (-2.0, 2.0),
    |tape: &mut Tape, v, _| { squash_last(tape, v) }
);

proptest! {
    #![proptest_config(ProptestConfig::with_cases(TRIALS))]

    /// Softmax rows are strictly positive distributions summing to one
    /// within 1e-12, for any finite input along any axis.
    #[test]
    fn softmax_rows_are_distributions(
        data in tensor_strategy(12, -50.0, 50.0),
        axis in 0usize..3,
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2, 3, 2], data).unwrap());
        let y = tape.softmax(x, axis).unwrap();
        let shape = [2usize, 3, 2];
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let out = tape.data(y);
        for o in 0..outer {
            for i in 0..inner {
                let mut sum = 0.0;
                for j in 0..axis_len {
                    let v = out[o * axis_len * inner + j * inner + i];
                    prop_assert!(v > 0.0);
                    sum += v;
                }
                prop_assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
            }
        }
    }
}
