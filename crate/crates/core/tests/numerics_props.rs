use gesturegen::numerics::kernels::ConvGeom;
use gesturegen::numerics::{finite_difference_check, GradCheckOptions, ParamStore, Tape, Tensor, Var};
use gesturegen::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.get2(i, p) * b.get2(p, j);
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng);
    let b = Tensor::uniform(&[4, 2], -2.0, 2.0, &mut rng);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    for (x, y) in tape.value(c).data().iter().zip(naive_matmul(&a, &b)) {
        assert!((x - y).abs() <= 1e-12);
    }
}

/// One differentiable primitive applied to parameters `x` (and `y`).
#[derive(Debug, Clone, Copy)]
enum Prim {
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    Square,
    Gelu,
    Tanh,
    Exp,
    Ln,
    Sqrt,
    SoftmaxRows,
    SoftmaxCols,
    MaskedSoftmax,
    CrossEntropy,
    LayerNorm,
    Im2Col,
    Col2Im,
    Gather,
    SliceCols,
    SliceRows,
    ConcatCols,
    ConcatRows,
    RowSum,
    Mean,
}

const PRIMS: [Prim; 27] = [
    Prim::MatMul,
    Prim::Transpose,
    Prim::Add,
    Prim::Sub,
    Prim::Mul,
    Prim::AddRow,
    Prim::Scale,
    Prim::Square,
    Prim::Gelu,
    Prim::Tanh,
    Prim::Exp,
    Prim::Ln,
    Prim::Sqrt,
    Prim::SoftmaxRows,
    Prim::SoftmaxCols,
    Prim::MaskedSoftmax,
    Prim::CrossEntropy,
    Prim::LayerNorm,
    Prim::Im2Col,
    Prim::Col2Im,
    Prim::Gather,
    Prim::SliceCols,
    Prim::SliceRows,
    Prim::ConcatCols,
    Prim::ConcatRows,
    Prim::RowSum,
    Prim::Mean,
];

fn apply(prim: Prim, t: &mut Tape, x: Var, y: Var, r: Var) -> Result<Var> {
    // x: [4×3], y: [4×3], r: [1×3]
    Ok(match prim {
        Prim::MatMul => {
            let yt = t.transpose(y)?;
            t.matmul(x, yt)?
        }
        Prim::Transpose => t.transpose(x)?,
        Prim::Add => t.add(x, y)?,
        Prim::Sub => t.sub(x, y)?,
        Prim::Mul => t.mul(x, y)?,
        Prim::AddRow => t.add_row(x, r)?,
        Prim::Scale => t.scale(x, -1.7),
        Prim::Square => t.square(x),
        Prim::Gelu => t.gelu(x),
        Prim::Tanh => t.tanh(x),
        Prim::Exp => t.exp(x),
        Prim::Ln => {
            let s = t.square(x);
            let s = t.add_scalar(s, 0.5);
            t.ln(s)
        }
        Prim::Sqrt => {
            let s = t.square(x);
            let s = t.add_scalar(s, 0.5);
            t.sqrt(s)
        }
        Prim::SoftmaxRows => t.softmax(x, 1)?,
        Prim::SoftmaxCols => t.softmax(x, 0)?,
        Prim::MaskedSoftmax => {
            let mask = (0..12).map(|i| i % 3 != 1 || i == 4).collect();
            t.masked_softmax(x, Some(mask))?
        }
        Prim::CrossEntropy => t.cross_entropy(x, &[0, 2, 1, 2])?,
        Prim::LayerNorm => {
            let b = t.scale(r, 0.5);
            t.layer_norm(x, r, b, 1e-5)?
        }
        Prim::Im2Col => t.im2col(x, ConvGeom::conv(4, 3, 3, 2, 1).unwrap())?,
        Prim::Col2Im => {
            // [4×3] patches of K=3, C=1 folded into a length-8 signal
            let g = ConvGeom::transposed(4, 1, 3, 2, 1).unwrap();
            t.col2im(x, g)?
        }
        Prim::Gather => t.gather_rows(x, &[3, 0, 3, 1])?,
        Prim::SliceCols => t.slice_cols(x, 1, 2)?,
        Prim::SliceRows => t.slice_rows(x, 1, 2)?,
        Prim::ConcatCols => t.concat_cols(&[x, y])?,
        Prim::ConcatRows => t.concat_rows(&[x, r])?,
        Prim::RowSum => t.row_sum(x)?,
        Prim::Mean => t.mean(x),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(160))]

    /// Every primitive's autodiff gradient matches central differences.
    #[test]
    fn primitive_gradients_match_central_differences(which in 0usize..PRIMS.len(), seed in any::<u64>()) {
        let prim = PRIMS[which];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::uniform(&[4, 3], -1.5, 1.5, &mut rng));
        let y = store.add("y", Tensor::uniform(&[4, 3], -1.5, 1.5, &mut rng));
        let r = store.add("r", Tensor::uniform(&[1, 3], 0.5, 1.5, &mut rng));
        // random projection turns any output into a scalar
        let proj_seed = seed ^ 0xABCD;
        let report = finite_difference_check(&store, |t, b| {
            let out = apply(prim, t, b[x], b[y], b[r])?;
            let shape = t.shape(out).to_vec();
            let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
            let w = t.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut prng));
            let prod = t.mul(out, w)?;
            Ok(t.sum(prod))
        }, GradCheckOptions { epsilon: 1e-6, tolerance: 1e-4, ..Default::default() }).unwrap();
        prop_assert!(report.passed, "{prim:?}: {:?}", report.worst);
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
        let n = vals.len();
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(1, n, vals).unwrap());
        let s = t.softmax(x, 1).unwrap();
        let sum: f64 = t.value(s).data().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!(t.value(s).data().iter().all(|v| *v >= 0.0));
    }

    /// Replacing a path's input with stop_gradient removes exactly that
    /// path's contribution: d/dx [f(x) + g(sg(x))] == d/dx f(x).
    #[test]
    fn stop_gradient_removes_path_exactly(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xv = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng);
        let run = |block: bool| {
            let mut t = Tape::new();
            let x = t.variable(xv.clone());
            let a = t.gelu(x);
            let fa = t.mean(a);
            let src = if block { t.stop_gradient(x) } else { x };
            let sq = t.square(src);
            let gb = t.sum(sq);
            let total = t.add(fa, gb).unwrap();
            let g = t.backward(total).unwrap();
            g.tensor(x)
        };
        let only_f = {
            let mut t = Tape::new();
            let x = t.variable(xv.clone());
            let a = t.gelu(x);
            let fa = t.mean(a);
            t.backward(fa).unwrap().tensor(x)
        };
        let (blocked, open) = (run(true), run(false));
        prop_assert_eq!(blocked.data(), only_f.data());
        prop_assert_ne!(open.data(), only_f.data());
    }
}

#[test]
fn softmax_cross_entropy_composite_gradient() {
    // -mean(log(softmax(z))[target]) built from primitives.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let z = store.add("z", Tensor::uniform(&[3, 5], -2.0, 2.0, &mut rng));
    let report = finite_difference_check(
        &store,
        |t, b| {
            let s = t.softmax(b[z], 1)?;
            let l = t.ln(s);
            let onehot = Tensor::from_rows(&[
                vec![0.0, 1.0, 0.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.0, 0.0, 1.0],
                vec![1.0, 0.0, 0.0, 0.0, 0.0],
            ])?;
            let oh = t.constant(onehot);
            let picked = t.mul(l, oh)?;
            let s = t.sum(picked);
            Ok(t.scale(s, -1.0 / 3.0))
        },
        GradCheckOptions {
            tolerance: 1e-5,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed, "{:?}", report.worst);
}

#[test]
fn backward_visits_each_op_once_in_reverse_order() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::scalar(2.0));
    let a = t.square(x);
    let b = t.mul(a, x).unwrap();
    let c = t.add(b, a).unwrap();
    assert_eq!(t.op_names(), vec!["leaf", "square", "mul", "add"]);
    let g = t.backward(c).unwrap();
    // d/dx (x^3 + x^2) = 3x^2 + 2x = 16
    assert_eq!(g.get(x).unwrap(), &[16.0]);
}
