//! Finite-difference agreement for every differentiable operation.

use numcore::{grad_check, grad_check_many, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Weighted sum so the upstream gradient is not all ones.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> numcore::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = tape.value(x).dims2();
    let shape = tape.value(x).shape().to_vec();
    let w = random(&mut rng, r, c).reshape(shape).unwrap();
    let w = tape.constant(w)?;
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

#[test]
fn sum_of_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, 3, 4);
    let err = grad_check(
        |t, x| {
            let sq = t.mul(x, x)?;
            t.sum(sq)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn each_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, 3, 4);
    let b = random(&mut rng, 4, 5);
    let bt = random(&mut rng, 5, 4);
    let bias = Tensor::vector((0..4).map(|i| i as f64 * 0.1).collect());
    let gamma = Tensor::vector(vec![1.1, 0.9, 1.3, 0.7]);

    type Case = (&'static str, Box<dyn Fn(&mut Tape, &[Var]) -> numcore::Result<Var>>, Vec<Tensor>);
    let cases: Vec<Case> = vec![
        ("matmul", Box::new(|t, v| { let y = t.matmul(v[0], v[1])?; weighted_sum(t, y, 1) }), vec![a.clone(), b.clone()]),
        ("matmul_nt", Box::new(|t, v| { let y = t.matmul_nt(v[0], v[1])?; weighted_sum(t, y, 2) }), vec![a.clone(), bt.clone()]),
        ("add_sub_mul", Box::new(|t, v| { let s = t.add(v[0], v[1])?; let d = t.sub(s, v[1])?; let m = t.mul(d, v[1])?; weighted_sum(t, m, 3) }), vec![a.clone(), a.clone()]),
        ("add_bias", Box::new(|t, v| { let y = t.add_bias(v[0], v[1])?; weighted_sum(t, y, 4) }), vec![a.clone(), bias.clone()]),
        ("scale_transpose", Box::new(|t, v| { let y = t.scale(v[0], -2.5)?; let y = t.transpose(y)?; weighted_sum(t, y, 5) }), vec![a.clone()]),
        ("segment_mean", Box::new(|t, v| { let y = t.segment_mean(v[0], &[0, 1, 3])?; weighted_sum(t, y, 6) }), vec![a.clone()]),
        ("gather", Box::new(|t, v| { let y = t.gather(v[0], &[2, 0, 2, 1])?; weighted_sum(t, y, 7) }), vec![a.clone()]),
        ("layer_norm", Box::new(|t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?; weighted_sum(t, y, 8) }), vec![a.clone(), gamma.clone(), bias.clone()]),
        ("softmax", Box::new(|t, v| { let y = t.softmax(v[0])?; weighted_sum(t, y, 9) }), vec![a.clone()]),
        ("log_softmax", Box::new(|t, v| { let y = t.log_softmax(v[0])?; weighted_sum(t, y, 10) }), vec![a.clone()]),
        ("l2_normalize", Box::new(|t, v| { let y = t.l2_normalize(v[0])?; weighted_sum(t, y, 11) }), vec![a.clone()]),
        ("gelu", Box::new(|t, v| { let y = t.gelu(v[0])?; weighted_sum(t, y, 12) }), vec![a.clone()]),
        ("cross_entropy", Box::new(|t, v| t.cross_entropy(v[0], &[Some(1), None, Some(3)])), vec![a.clone()]),
        ("mean_rows", Box::new(|t, v| { let y = t.mean_rows(v[0])?; weighted_sum(t, y, 13) }), vec![a.clone()]),
        ("dropout_mask", Box::new(|t, v| { let y = t.apply_mask(v[0], (0..12).map(|i| (i % 3) as f64).collect())?; weighted_sum(t, y, 14) }), vec![a.clone()]),
    ];
    for (name, f, pts) in cases {
        let err = grad_check_many(&f, &pts, EPS).unwrap();
        assert!(err < TOL, "{name}: {err}");
    }
}

#[test]
fn causal_attention_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    // three packed sequences of lengths 1, 3, 2; dim 4, two heads
    let qkv = random(&mut rng, 6, 12);
    let err = grad_check(
        |t, x| {
            let y = t.causal_attention(x, &[0, 1, 4, 6], 2)?;
            weighted_sum(t, y, 99)
        },
        &qkv,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[derive(Clone, Copy, Debug)]
enum Step {
    MatMul,
    Bias,
    Norm,
    Gelu,
    Softmax,
    L2,
    Attention,
}

fn apply(t: &mut Tape, x: Var, side: &[Var], step: Step) -> numcore::Result<Var> {
    match step {
        Step::MatMul => t.matmul(x, side[0]),
        Step::Bias => t.add_bias(x, side[1]),
        Step::Norm => t.layer_norm(x, side[2], side[1], 1e-5),
        Step::Gelu => t.gelu(x),
        Step::Softmax => t.softmax(x),
        Step::L2 => t.l2_normalize(x),
        Step::Attention => {
            // reuse x three times as q, k, v by multiplying with a 4 x 12 map
            let qkv = t.matmul(x, side[3])?;
            t.causal_attention(qkv, &[0, 2, 3], 2)
        }
    }
}

fn step_strategy() -> impl Strategy<Value = Step> {
    prop_oneof![
        Just(Step::MatMul),
        Just(Step::Bias),
        Just(Step::Norm),
        Just(Step::Gelu),
        Just(Step::Softmax),
        Just(Step::L2),
        Just(Step::Attention),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    /// Random compositions of supported operations.
    #[test]
    fn random_compositions(seed in 0u64..1_000_000, steps in prop::collection::vec(step_strategy(), 1..5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = vec![
            random(&mut rng, 3, 4),
            random(&mut rng, 4, 4),
            random(&mut rng, 1, 4).reshape(vec![4]).unwrap(),
            Tensor::vector((0..4).map(|_| rng.random_range(0.5..1.5)).collect()),
            random(&mut rng, 4, 12),
        ];
        let f = |t: &mut Tape, v: &[Var]| {
            let mut x = v[0];
            for s in &steps {
                x = apply(t, x, &v[1..], *s)?;
            }
            weighted_sum(t, x, seed ^ 0xabc)
        };
        let err = grad_check_many(f, &pts, EPS).unwrap();
        prop_assert!(err < TOL, "{:?}: {}", steps, err);
    }

    #[test]
    fn l2_normalize_gives_unit_rows(data in prop::collection::vec(-100.0f64..100.0, 1..40)) {
        let n = data.len();
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(data.clone())).unwrap();
        let y = t.l2_normalize(x).unwrap();
        let norm = t.value(y).l2_norm();
        if data.iter().all(|&v| v == 0.0) {
            prop_assert_eq!(norm, 0.0);
        } else {
            prop_assert!((norm - 1.0).abs() < 1e-9, "n={} norm={}", n, norm);
        }
    }
}
