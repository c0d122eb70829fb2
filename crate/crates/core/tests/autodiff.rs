use pavi::autodiff::{finite_difference_check, Tape, Tensor, Var};
use proptest::prelude::*;

type Unary = fn(&mut Tape, Var) -> Result<Var, pavi::autodiff::AutodiffError>;

fn reduce(tape: &mut Tape, y: Var) -> Var {
    // Weighted sum so every output entry has a distinct cotangent.
    let shape = tape.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|k| 0.3 + 0.17 * k as f64).collect()).unwrap();
    let wv = tape.constant(w).unwrap();
    let p = tape.mul(y, wv).unwrap();
    tape.sum(p).unwrap()
}

fn as_matrix(tape: &mut Tape, x: Var, rows: usize) -> Var {
    let n = tape.value(x).numel();
    tape.reshape(x, &[rows, n / rows]).unwrap()
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5f64..1.5, 6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn elementwise_primitives_match_finite_differences(x in point()) {
        let ops: [(&str, Unary); 7] = [
            ("exp", Tape::exp),
            ("tanh", Tape::tanh),
            ("softplus", Tape::softplus),
            ("sigmoid", Tape::sigmoid),
            ("square", Tape::square),
            ("neg", Tape::neg),
            ("softmax_rows", Tape::softmax_rows),
        ];
        for (name, op) in ops {
            let err = finite_difference_check(
                |t, v| {
                    let m = as_matrix(t, v, 2);
                    let y = op(t, m)?;
                    Ok(reduce(t, y))
                },
                &x,
                1e-6,
            )
            .unwrap();
            prop_assert!(err < 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn positive_domain_primitives_match_finite_differences(x in prop::collection::vec(0.2f64..3.0, 6)) {
        let ops: [(&str, Unary); 2] = [("log", Tape::log), ("sqrt", Tape::sqrt)];
        for (name, op) in ops {
            let err = finite_difference_check(|t, v| { let y = op(t, v)?; Ok(reduce(t, y)) }, &x, 1e-6).unwrap();
            prop_assert!(err < 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn structural_primitives_match_finite_differences(x in point()) {
        let err = finite_difference_check(
            |t, v| {
                let m = as_matrix(t, v, 3);
                let tr = t.transpose(m)?;
                let mm = t.matmul(m, tr)?;
                let rows = t.sum_rows(mm)?;
                let b = t.broadcast_rows(rows, 2)?;
                let cols = t.sum_cols(m)?;
                let bc = t.broadcast_cols(cols, 3)?;
                let g = t.gather_rows(bc, &[2, 0, 0, 1])?;
                let sl = t.slice_rows(g, 1, 3)?;
                let left = t.slice_cols(sl, 0, 1)?;
                let right = t.slice_cols(sl, 1, 3)?;
                let sc = t.concat_cols(&[right, left])?;
                let cat = t.concat_rows(&[b, sc])?;
                let cc = t.concat_cols(&[cat, cat])?;
                Ok(reduce(t, cc))
            },
            &x,
            1e-6,
        )
        .unwrap();
        prop_assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn gaussian_and_triangular_primitives_match_finite_differences(x in point()) {
        let err = finite_difference_check(
            |t, v| {
                let m = as_matrix(t, v, 2);
                let mean = t.slice_cols(m, 0, 1)?;
                let raw = t.slice_cols(m, 1, 2)?;
                let sd = t.softplus(raw)?;
                let data = t.constant(Tensor::matrix(2, 1, vec![0.4, -0.9]).unwrap())?;
                let lp = t.gaussian_log_pdf(data, mean, sd)?;
                let packed = t.slice_cols(m, 0, 3)?;
                let u = t.slice_cols(m, 1, 3)?;
                let tv = t.tri_matvec(packed, u)?;
                let diag = t.slice_cols(m, 0, 1)?;
                let pos = t.softplus(diag)?;
                let tri = t.concat_cols(&[pos, raw])?;
                let ld = t.log_abs_det_triangular(tri)?;
                let a = reduce(t, lp);
                let b = reduce(t, tv);
                let c = reduce(t, ld);
                let ab = t.add(a, b)?;
                t.add(ab, c)
            },
            &x,
            1e-6,
        )
        .unwrap();
        prop_assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn backward_is_linear_in_the_output(x in point(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let grad = |f: &dyn Fn(&mut Tape, Var) -> Var| {
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::row(x.clone())).unwrap();
            let y = f(&mut tape, v);
            tape.backward(y).unwrap().wrt(v).unwrap().data().to_vec()
        };
        let f = |t: &mut Tape, v: Var| { let y = t.tanh(v).unwrap(); t.sum(y).unwrap() };
        let g = |t: &mut Tape, v: Var| { let y = t.square(v).unwrap(); t.sum(y).unwrap() };
        let combined = grad(&|t, v| {
            let fa = f(t, v);
            let gb = g(t, v);
            let fa = t.scale(fa, a).unwrap();
            let gb = t.scale(gb, b).unwrap();
            t.add(fa, gb).unwrap()
        });
        let (gf, gg) = (grad(&f), grad(&g));
        for k in 0..x.len() {
            prop_assert!((combined[k] - (a * gf[k] + b * gg[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluation_is_deterministic(x in point()) {
        let run = || {
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::row(x.clone())).unwrap();
            let m = as_matrix(&mut tape, v, 3);
            let s = tape.softmax_rows(m).unwrap();
            let y = reduce(&mut tape, s);
            let g = tape.backward(y).unwrap();
            (tape.scalar(y).to_bits(), g.wrt(v).unwrap().data().iter().map(|d| d.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }
}
