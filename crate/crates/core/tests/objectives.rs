use groundlab::objectives::{contrastive_loss, lm_loss, ContrastiveConfig};
use groundlab::seed;
use numcore::{grad_check_many, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn losses(v: &Tensor, u: &Tensor) -> (f64, f64, f64) {
    let mut tape = Tape::new();
    let a = tape.constant(v.clone()).unwrap();
    let b = tape.constant(u.clone()).unwrap();
    let l = contrastive_loss(&mut tape, a, b, &ContrastiveConfig::default()).unwrap();
    (
        tape.value(l.loss).item(),
        tape.value(l.frame_term).item(),
        tape.value(l.utterance_term).item(),
    )
}

fn random_matrix<R: Rng>(rng: &mut R, n: usize, d: usize) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

/// Straight-line symmetric InfoNCE on cosine similarities.
fn oracle(v: &Tensor, u: &Tensor, tau: f64) -> f64 {
    let n = v.rows();
    let unit = |r: &[f64]| {
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter().map(|x| x / norm).collect::<Vec<_>>()
    };
    let vs: Vec<Vec<f64>> = (0..n).map(|i| unit(v.row(i))).collect();
    let us: Vec<Vec<f64>> = (0..n).map(|i| unit(u.row(i))).collect();
    let s = |i: usize, j: usize| vs[i].iter().zip(&us[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
    let mut lf = 0.0;
    let mut lu = 0.0;
    for i in 0..n {
        lf -= s(i, i) - (0..n).map(|j| s(i, j).exp()).sum::<f64>().ln();
        lu -= s(i, i) - (0..n).map(|j| s(j, i).exp()).sum::<f64>().ln();
    }
    0.5 * lf / n as f64 + 0.5 * lu / n as f64
}

#[test]
fn random_unit_batches_average_near_ln_n() {
    let mut rng = seed::rng(21, 0);
    let mut total = 0.0;
    for _ in 0..1000 {
        let v = random_matrix(&mut rng, 4, 512);
        let u = random_matrix(&mut rng, 4, 512);
        total += losses(&v, &u).0;
    }
    let mean = total / 1000.0;
    assert!((mean - 4f64.ln()).abs() < 0.35, "mean {mean}");
}

#[test]
fn matches_straight_line_oracle() {
    let mut rng = seed::rng(22, 0);
    for n in 1..6 {
        let v = random_matrix(&mut rng, n, 7);
        let u = random_matrix(&mut rng, n, 7);
        let got = losses(&v, &u).0;
        assert!((got - oracle(&v, &u, 0.07)).abs() < 1e-10);
    }
}

#[test]
fn contrastive_gradient_check() {
    let mut rng = seed::rng(23, 0);
    let v = random_matrix(&mut rng, 4, 8);
    let u = random_matrix(&mut rng, 4, 8);
    let err = grad_check_many(
        |tape, x| Ok(contrastive_loss(tape, x[0], x[1], &ContrastiveConfig::default()).unwrap().loss),
        &[v, u],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn lm_value(logits: Tensor, targets: &[Option<usize>]) -> f64 {
    let mut tape = Tape::new();
    let l = tape.constant(logits).unwrap();
    let loss = lm_loss(&mut tape, l, targets).unwrap();
    tape.value(loss).item()
}

#[test]
fn lm_loss_examples() {
    let uniform = lm_value(Tensor::zeros(vec![3, 10]), &[Some(1), Some(4), Some(9)]);
    assert!((uniform - 10f64.ln()).abs() < 1e-12);

    let mut sharp = vec![0.0; 3 * 10];
    for (t, c) in [3usize, 5, 7].iter().enumerate() {
        sharp[t * 10 + c] = 100.0;
    }
    let v = lm_value(Tensor::matrix(3, 10, sharp).unwrap(), &[Some(3), Some(5), Some(7)]);
    assert!(v < 1e-30);

    let data: Vec<f64> = (0..15).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect();
    let targets = [Some(2), None, Some(4)];
    let mut want = 0.0;
    let mut count = 0.0;
    for (t, target) in targets.iter().enumerate() {
        if let Some(c) = target {
            let row = &data[t * 5..t * 5 + 5];
            let mut z = 0.0;
            for x in row {
                z += x.exp();
            }
            want += z.ln() - row[*c];
            count += 1.0;
        }
    }
    want /= count;
    let got = lm_value(Tensor::matrix(3, 5, data).unwrap(), &targets);
    assert!((got - want).abs() < 1e-12);
}

fn matrix(n: usize, d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, n * d).prop_map(move |v| Tensor::matrix(n, d, v).unwrap())
}

fn pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..6, 2usize..6).prop_flat_map(|(n, d)| (matrix(n, d), matrix(n, d)))
}

fn usable(t: &Tensor) -> bool {
    (0..t.rows()).all(|i| t.row(i).iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

proptest! {
    #[test]
    fn directions_swap_under_argument_swap((v, u) in pair()) {
        prop_assume!(usable(&v) && usable(&u));
        let (_, vf, vu) = losses(&v, &u);
        let (_, uf, uu) = losses(&u, &v);
        prop_assert!((vf - uu).abs() < 1e-9);
        prop_assert!((vu - uf).abs() < 1e-9);
    }

    #[test]
    fn positive_row_scaling_is_invisible((v, u) in pair(), scales in prop::collection::vec(0.01f64..100.0, 5)) {
        prop_assume!(usable(&v) && usable(&u));
        let mut scaled = v.clone();
        let d = v.cols();
        for i in 0..v.rows() {
            for x in &mut scaled.data_mut()[i * d..(i + 1) * d] {
                *x *= scales[i];
            }
        }
        prop_assert!((losses(&v, &u).0 - losses(&scaled, &u).0).abs() < 1e-9);
    }

    #[test]
    fn permuting_pairs_is_invisible((v, u) in pair(), shift in 0usize..5) {
        prop_assume!(usable(&v) && usable(&u));
        let n = v.rows();
        let perm = |t: &Tensor| {
            let rows: Vec<&[f64]> = (0..n).map(|i| t.row((i + shift) % n)).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        prop_assert!((losses(&v, &u).0 - losses(&perm(&v), &perm(&u)).0).abs() < 1e-9);
    }
}
