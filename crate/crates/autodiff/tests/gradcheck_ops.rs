use autodiff::{gradient_check, CheckConfig, FrameSpec, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces any tensor to a scalar with fixed random weights so every output coordinate matters.
fn weighted_sum<'t>(v: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let val = v.value();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, val.shape(), -1.0, 1.0);
    v.mul(v.tape().constant(w))?.sum()
}

fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    gradient_check(inputs, f, CheckConfig::default()).unwrap().worst()
}

#[test]
fn elementwise_and_algebra_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let c = rand_tensor(&mut rng, &[3, 4], 0.5, 2.0);
    let row = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let col = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    let sig = rand_tensor(&mut rng, &[30], -1.0, 1.0);

    let cases: Vec<(&str, f64)> = vec![
        ("matmul", check(&[a.clone(), b.clone()], |_, v| weighted_sum(v[0].matmul(v[1])?, 2))),
        ("transpose", check(&[a.clone()], |_, v| weighted_sum(v[0].transpose()?, 3))),
        ("add", check(&[a.clone(), c.clone()], |_, v| weighted_sum(v[0].add(v[1])?, 4))),
        ("sub", check(&[a.clone(), c.clone()], |_, v| weighted_sum(v[0].sub(v[1])?, 5))),
        ("mul", check(&[a.clone(), c.clone()], |_, v| weighted_sum(v[0].mul(v[1])?, 6))),
        ("div", check(&[a.clone(), c.clone()], |_, v| weighted_sum(v[0].div(v[1])?, 7))),
        ("affine", check(&[a.clone()], |_, v| weighted_sum(v[0].affine(-2.5, 0.3)?, 8))),
        ("add_row", check(&[a.clone(), row.clone()], |_, v| weighted_sum(v[0].add_row(v[1])?, 9))),
        ("add_col", check(&[a.clone(), col.clone()], |_, v| weighted_sum(v[0].add_col(v[1])?, 10))),
        ("tanh", check(&[a.clone()], |_, v| weighted_sum(v[0].tanh()?, 11))),
        ("sigmoid", check(&[a.clone()], |_, v| weighted_sum(v[0].scale(3.0)?.sigmoid()?, 12))),
        ("exp", check(&[a.clone()], |_, v| weighted_sum(v[0].exp()?, 13))),
        ("log", check(&[c.clone()], |_, v| weighted_sum(v[0].log()?, 14))),
        ("sin", check(&[a.clone()], |_, v| weighted_sum(v[0].scale(4.0)?.sin()?, 15))),
        ("square", check(&[a.clone()], |_, v| weighted_sum(v[0].square()?, 16))),
        ("clamp", check(&[a.clone()], |_, v| weighted_sum(v[0].clamp(-0.5, 0.5)?, 17))),
        ("ln_gamma", check(&[c.clone()], |_, v| weighted_sum(v[0].ln_gamma()?, 18))),
        ("digamma", check(&[c.clone()], |_, v| weighted_sum(v[0].digamma()?, 19))),
        ("softmax", check(&[a.clone()], |_, v| weighted_sum(v[0].softmax_rows()?, 20))),
        ("log_softmax", check(&[a.clone()], |_, v| weighted_sum(v[0].log_softmax_rows()?, 21))),
        ("sum", check(&[a.clone()], |_, v| v[0].square()?.sum())),
        ("mean", check(&[a.clone()], |_, v| v[0].square()?.mean())),
        ("sum_rows", check(&[a.clone()], |_, v| weighted_sum(v[0].square()?.sum_rows()?, 22))),
        ("cumsum", check(&[a.clone()], |_, v| weighted_sum(v[0].cumsum()?, 23))),
        ("reshape", check(&[a.clone()], |_, v| weighted_sum(v[0].reshape(&[12])?, 24))),
        ("gather_rows", check(&[a.clone()], |_, v| weighted_sum(v[0].gather_rows(&[2, 0, 2, 1])?, 25))),
        ("slice_rows", check(&[a.clone()], |_, v| weighted_sum(v[0].slice_rows(1, 3)?, 26))),
        ("slice_cols", check(&[a.clone()], |_, v| weighted_sum(v[0].slice_cols(1, 3)?, 27))),
        ("concat_cols", check(&[a.clone(), c.clone()], |_, v| weighted_sum(Var::concat_cols(&[v[0], v[1]])?, 28))),
        ("stack_rows", check(&[row.clone(), row.clone()], |_, v| weighted_sum(Var::stack_rows(&[v[0], v[1], v[0]])?, 29))),
        ("fir", check(&[sig], |_, v| weighted_sum(v[0].fir(&[0.5, -0.25, 0.1, 0.05])?, 30))),
    ];
    for (name, err) in cases {
        assert!(err < TOL, "{name}: rel err {err}");
    }
}

#[test]
fn conv_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[3, 40], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[4, 3, 3], -0.5, 0.5);
    for d in [1, 2, 8] {
        let err = check(&[x.clone(), w.clone()], move |_, v| weighted_sum(v[0].conv1d(v[1], d)?, 40 + d as u64));
        assert!(err < TOL, "conv1d dilation {d}: {err}");
    }
    for (k, s) in [(25, 5), (16, 4)] {
        let x = rand_tensor(&mut rng, &[3, 6], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, k], -0.5, 0.5);
        let err = check(&[x, w], move |_, v| weighted_sum(v[0].transposed_conv1d(v[1], s)?, 50));
        assert!(err < TOL, "transposed_conv1d k={k} s={s}: {err}");
    }
}

#[test]
fn lstm_cell_all_gates() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n_in, h) = (5, 4);
    let inputs = vec![
        rand_tensor(&mut rng, &[n_in], -1.0, 1.0),
        rand_tensor(&mut rng, &[h], -1.0, 1.0),
        rand_tensor(&mut rng, &[h], -1.0, 1.0),
        rand_tensor(&mut rng, &[4 * h, n_in], -0.8, 0.8),
        rand_tensor(&mut rng, &[4 * h, h], -0.8, 0.8),
        rand_tensor(&mut rng, &[4 * h], -0.5, 0.5),
    ];
    // Two chained steps so the recurrent path is exercised as well.
    let err = check(&inputs, |_, v| {
        let s1 = Var::lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5])?;
        let (h1, c1) = (s1.slice_rows(0, 4)?, s1.slice_rows(4, 8)?);
        let s2 = Var::lstm_cell(v[0], h1, c1, v[3], v[4], v[5])?;
        weighted_sum(s2, 60)
    });
    assert!(err < TOL, "lstm_cell: {err}");
}

#[test]
fn rfft_power_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[100], -1.0, 1.0);
    let spec = FrameSpec { fft_bins: 32, frame_length: 24, stride: 10 };
    let err = check(&[x], move |_, v| weighted_sum(v[0].rfft_power(spec)?, 70));
    assert!(err < TOL, "rfft_power: {err}");
}

/// Log-spectral distance at one resolution, written directly against the engine's ops.
fn log_spectral<'t>(y: Var<'t>, target: &Tensor, spec: FrameSpec) -> Result<Var<'t>> {
    let tape = y.tape();
    let p_hat = y.rfft_power(spec)?.affine(1.0, 1e-5)?.log()?;
    let p = tape.constant(target.clone()).rfft_power(spec)?.affine(1.0, 1e-5)?.log()?;
    p.sub(p_hat)?.square()?.mean()?.scale(0.5)
}

#[test]
fn spectral_loss_graph_on_400_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let target = Tensor::vector((0..400).map(|i| (i as f64 * 0.07).sin() * 0.5).collect());
    let y = rand_tensor(&mut rng, &[400], -0.5, 0.5);
    let specs = [
        FrameSpec { fft_bins: 128, frame_length: 80, stride: 40 },
        FrameSpec { fft_bins: 512, frame_length: 400, stride: 100 },
    ];
    let err = check(&[y], move |_, v| {
        let a = log_spectral(v[0], &target, specs[0])?;
        let b = log_spectral(v[0], &target, specs[1])?;
        a.add(b)?.scale(0.5)
    });
    assert!(err < TOL, "spectral graph: {err}");
}

#[test]
fn matmul_identity_and_softmax_rows() {
    let tape = Tape::new();
    let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap();
    let i = tape.constant(Tensor::eye(2));
    let xv = tape.constant(x.clone());
    assert_eq!(*i.matmul(xv).unwrap().value(), x);
    let sm = xv.softmax_rows().unwrap().value();
    for r in 0..2 {
        assert!((sm.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_jacobian_rows_sum_to_zero() {
    // Σ_j y_j is constant, so every one-hot cotangent pulls back to an input gradient summing to zero.
    for probe in 0..4 {
        let tape = Tape::new();
        let x = tape.param(Tensor::matrix(1, 4, vec![0.3, -1.2, 2.0, 0.1]).unwrap());
        let y = x.softmax_rows().unwrap();
        let mut onehot = vec![0.0; 4];
        onehot[probe] = 1.0;
        let c = tape.constant(Tensor::matrix(1, 4, onehot).unwrap());
        let loss = y.mul(c).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        let s: f64 = g.get(x).unwrap().data().iter().sum();
        assert!(s.abs() < 1e-15, "probe {probe}: {s}");
    }
}

#[test]
fn scalar_product_rule() {
    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.param(Tensor::scalar(-4.5));
    let g = tape.backward(x.mul(y).unwrap()).unwrap();
    assert_eq!(g.get(x).unwrap().item(), -4.5);
    assert_eq!(g.get(y).unwrap().item(), 3.0);
}

#[test]
fn transposed_conv_length_and_crop() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2, 7], 1.0));
    let w = tape.constant(Tensor::full(&[2, 3, 25], 0.1));
    let y = x.transposed_conv1d(w, 5).unwrap();
    // full length is 5·7 + 20; ten samples are cropped from each side
    assert_eq!(y.shape(), vec![3, 35]);
}

#[test]
fn backward_errors() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(tape.backward(x.square().unwrap()).is_err());
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let l = x.square().unwrap().sum().unwrap();
    assert!(tape.backward(l).is_ok());
    assert!(tape.backward(l).is_err(), "second sweep must be rejected");
}

#[test]
fn shape_errors_name_the_op() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match a.matmul(b) {
        Err(autodiff::AdError::Shape { op, .. }) => assert_eq!(op, "matmul"),
        _ => panic!("expected shape error"),
    }
    let checked = Tape::checked();
    let z = checked.constant(Tensor::vector(vec![0.0]));
    assert!(matches!(z.log(), Err(autodiff::AdError::NonFinite { op: "log" })));
}

#[test]
fn identical_tapes_give_identical_gradients() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[4, 64], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 4, 3], -1.0, 1.0);
        let tape = Tape::new();
        let (xv, wv) = (tape.param(x), tape.param(w));
        let loss = xv.conv1d(wv, 4).unwrap().tanh().unwrap().square().unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        (g.get(xv).unwrap().clone(), g.get(wv).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert!(a.0.data().iter().zip(b.0.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(a.1.data().iter().zip(b.1.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_shapes_pass_gradient_check(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[m, k], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[k, n], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[n], -1.0, 1.0);
        let err = check(&[a, b, bias], move |_, v| {
            let h = v[0].matmul(v[1])?.add_row(v[2])?.tanh()?;
            weighted_sum(h.log_softmax_rows()?, seed)
        });
        prop_assert!(err < TOL, "err {}", err);
    }

    #[test]
    fn random_conv_shapes_pass_gradient_check(ci in 1usize..4, co in 1usize..4, t in 4usize..30, dil in 1usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[ci, t], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[co, ci, 3], -1.0, 1.0);
        let err = check(&[x, w], move |_, v| weighted_sum(v[0].conv1d(v[1], dil)?, seed));
        prop_assert!(err < TOL, "err {}", err);
    }
}

#[test]
fn directional_check_agrees_and_detects_detached_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let a = rand_tensor(&mut rng, &[6, 7], -1.0, 1.0);
    let good = autodiff::directional_check(&[a.clone()], |_, v| v[0].tanh()?.square()?.sum(), CheckConfig::default()).unwrap();
    assert!(good.worst() < 1e-8, "{}", good.worst());
    assert_eq!(good.probed, vec![32]);
    // Detaching one factor halves the analytic gradient of x·x.
    let bad = autodiff::directional_check(
        &[a],
        |t, v| v[0].mul(t.constant((*v[0].value()).clone()))?.sum(),
        CheckConfig::default(),
    )
    .unwrap();
    assert!((bad.worst() - 0.5).abs() < 1e-6, "{}", bad.worst());
}
