use poslab::autodiff::{compare_gradients, finite_diff_grad, Tape, Tensor, Var, DEFAULT_STEP};
use poslab::rng::{substream, Rng};
use proptest::prelude::*;
use rand::Rng as _;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

/// Builds `op` over the given inputs, contracts the output with a fixed
/// random weight tensor, and checks every input's gradient against central
/// differences.
fn check_op<F>(name: &str, shapes: &[&[usize]], op: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    for seed in 0..SEEDS {
        let mut rng = substream(seed, name);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        let weights = {
            let mut probe = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t)).collect();
            let out = op(&mut probe, &vars);
            random(&mut rng, probe.shape(out))
        };
        let eval = |inputs: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
            let out = op(&mut tape, &vars);
            tape.value(out).iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = op(&mut tape, &vars);
        let w = tape.constant(&weights);
        let prod = tape.mul(out, w).unwrap();
        let root = tape.sum(prod);
        tape.backward(root).unwrap();

        for (i, var) in vars.iter().enumerate() {
            let numeric = finite_diff_grad(
                |probe| {
                    let mut args = inputs.clone();
                    args[i] = probe.clone();
                    eval(&args)
                },
                &inputs[i],
                DEFAULT_STEP,
            )
            .unwrap();
            let cmp = compare_gradients(tape.grad(*var).unwrap(), numeric.data());
            assert!(cmp.passes(TOL), "{name} seed {seed} input {i}: {cmp:?}");
        }
    }
}

#[test]
fn matmul_gradients() {
    check_op("matmul", &[&[4, 5], &[5, 3]], |t, v| t.matmul(v[0], v[1]).unwrap());
    check_op("matmul_nt", &[&[4, 5], &[3, 5]], |t, v| t.matmul_nt(v[0], v[1]).unwrap());
}

#[test]
fn elementwise_gradients() {
    check_op("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]).unwrap());
    check_op("sub", &[&[3, 4], &[3, 4]], |t, v| t.sub(v[0], v[1]).unwrap());
    check_op("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]).unwrap());
    check_op("scale", &[&[3, 4]], |t, v| t.scale(v[0], -2.5));
    check_op("add_row_bias", &[&[3, 4], &[4]], |t, v| t.add_row_bias(v[0], v[1]).unwrap());
    check_op("gelu", &[&[3, 4]], |t, v| t.gelu(v[0]));
}

#[test]
fn structural_gradients() {
    check_op("transpose", &[&[3, 4]], |t, v| t.transpose(v[0]).unwrap());
    check_op("slice_cols", &[&[3, 6]], |t, v| t.slice_cols(v[0], 2, 3).unwrap());
    check_op("concat_cols", &[&[3, 2], &[3, 4]], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap());
    check_op("gather_rows", &[&[5, 3]], |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]).unwrap());
    check_op("gather_elems", &[&[2, 5]], |t, v| t.gather_elems(v[0], &[0, 9, 9, 3, 5, 1], &[2, 3]).unwrap());
    check_op("reset_first", &[&[4, 4], &[1], &[1]], |t, v| t.reset_first(v[0], v[1], v[2]).unwrap());
}

#[test]
fn normalization_and_loss_gradients() {
    check_op("softmax_rows", &[&[3, 5]], |t, v| t.softmax_rows(v[0], None).unwrap());
    let mask = [true, false, true, true, true, true, true, false, false, true, false, true, true, true, true];
    check_op("softmax_rows_masked", &[&[3, 5]], move |t, v| t.softmax_rows(v[0], Some(&mask)).unwrap());
    check_op("layer_norm", &[&[3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
    check_op("cross_entropy", &[&[4, 6]], |t, v| t.cross_entropy(v[0], &[(0, 2), (3, 5), (3, 1)]).unwrap());
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transpose() {
    let mut rng = substream(11, "matmul-ones");
    let a = random(&mut rng, &[4, 5]);
    let b = random(&mut rng, &[5, 3]);
    let mut tape = Tape::new();
    let av = tape.param(&a);
    let bv = tape.constant(&b);
    let c = tape.matmul(av, bv).unwrap();
    let s = tape.sum(c);
    tape.backward(s).unwrap();
    let grad = tape.grad(av).unwrap();
    for i in 0..4 {
        for k in 0..5 {
            let want: f64 = (0..3).map(|j| b.at(k, j)).sum();
            assert!((grad[i * 5 + k] - want).abs() < 1e-12);
        }
    }
    let numeric = finite_diff_grad(
        |p| {
            let mut t = Tape::new();
            let pa = t.constant(p);
            let pb = t.constant(&b);
            let c = t.matmul(pa, pb).unwrap();
            t.value(c).iter().sum()
        },
        &a,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(compare_gradients(grad, numeric.data()).passes(TOL));
}

#[test]
fn softmax_of_one_two_three_matches_direct_evaluation() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let s = tape.softmax_rows(x, None).unwrap();
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
    let total: f64 = e.iter().sum();
    for (got, want) in tape.value(s).iter().zip(e.iter().map(|v| v / total)) {
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }
    let big = tape.constant(&Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap());
    let s = tape.softmax_rows(big, None).unwrap();
    assert_eq!(tape.value(s)[0], 1.0);
    assert!(tape.value(s)[1] >= 0.0 && tape.value(s)[1] < 1e-300);
}

#[test]
fn tape_is_deterministic() {
    let run = || {
        let mut rng = substream(5, "determinism");
        let a = random(&mut rng, &[6, 7]);
        let b = random(&mut rng, &[7, 4]);
        let mut tape = Tape::new();
        let av = tape.param(&a);
        let bv = tape.param(&b);
        let c = tape.matmul(av, bv).unwrap();
        let g = tape.gelu(c);
        let s = tape.softmax_rows(g, None).unwrap();
        let l = tape.cross_entropy(s, &[(0, 1), (5, 3)]).unwrap();
        tape.backward(l).unwrap();
        (tape.value(l).to_vec(), tape.grad(av).unwrap().to_vec(), tape.grad(bv).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 12), keep in prop::collection::vec(any::<bool>(), 12)) {
        let mut mask = keep.clone();
        for r in 0..3 {
            mask[r * 4] = true;
        }
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[3, 4], values).unwrap());
        let s = tape.softmax_rows(x, Some(&mask)).unwrap();
        for r in 0..3 {
            let row = &tape.value(s)[r * 4..(r + 1) * 4];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for c in 0..4 {
                prop_assert!(row[c] >= 0.0);
                if !mask[r * 4 + c] {
                    prop_assert_eq!(row[c], 0.0);
                }
            }
        }
    }

    #[test]
    fn gather_rows_gradient_counts_duplicates(rows in prop::collection::vec(0usize..5, 1..12)) {
        let mut tape = Tape::new();
        let t = tape.param(&Tensor::zeros(&[5, 2]));
        let g = tape.gather_rows(t, &rows).unwrap();
        let s = tape.sum(g);
        tape.backward(s).unwrap();
        let grad = tape.grad(t).unwrap();
        for r in 0..5 {
            let count = rows.iter().filter(|&&x| x == r).count() as f64;
            prop_assert_eq!(grad[2 * r], count);
            prop_assert_eq!(grad[2 * r + 1], count);
        }
    }
}
