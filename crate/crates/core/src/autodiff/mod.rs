//! Reverse-mode automatic differentiation over dense 2-D `f64` tensors.

mod optim;
mod tape;
mod tensor;

pub use optim::{adam_step, AdamConfig, Parameter, PlateauScheduler};
pub(crate) use tape::sigmoid;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    type Build = dyn Fn(&mut Tape, Var) -> Var;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect(),
        )
        .unwrap()
    }

    fn eval(f: &Build, x: &Tensor) -> f64 {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let out = f(&mut t, v);
        t.value(out).data[0]
    }

    /// Largest relative error of the tape gradient against central differences.
    fn grad_error(f: &Build, x: &Tensor) -> f64 {
        let mut t = Tape::new();
        let v = t.input(x.clone());
        let out = f(&mut t, v);
        let grads = t.gradients(out).unwrap();
        let g = grads[0].clone().unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data[i] += h;
            xm.data[i] -= h;
            let fd = (eval(f, &xp) - eval(f, &xm)) / (2.0 * h);
            let err = (fd - g.data[i]).abs() / fd.abs().max(g.data[i].abs()).max(1e-3);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, 4, 3, -1.0, 1.0);
        let other = random(&mut rng, 5, 4, -1.0, 1.0);
        let targets = Rc::new(random(&mut rng, 5, 4, 0.0, 1.0));
        let bias = random(&mut rng, 1, 4, -1.0, 1.0);
        let cases: Vec<(&str, Box<Build>)> = vec![
            (
                "matmul",
                Box::new(move |t, x| {
                    let w = t.constant(w.clone());
                    let y = t.matmul(x, w).unwrap();
                    let y2 = t.mul(y, y).unwrap();
                    t.sum(y2)
                }),
            ),
            (
                "add_bias",
                Box::new(move |t, x| {
                    let b = t.constant(bias.clone());
                    let y = t.add_bias(x, b).unwrap();
                    let y2 = t.mul(y, y).unwrap();
                    t.sum(y2)
                }),
            ),
            (
                "add_sub_mul",
                Box::new({
                    let other = other.clone();
                    move |t, x| {
                        let o = t.constant(other.clone());
                        let a = t.add(x, o).unwrap();
                        let b = t.sub(x, o).unwrap();
                        let c = t.mul(a, b).unwrap();
                        let d = t.mul(c, x).unwrap();
                        t.sum(d)
                    }
                }),
            ),
            (
                "scale_add_scalar",
                Box::new(|t, x| {
                    let a = t.scale(x, -2.5);
                    let b = t.add_scalar(a, 3.0);
                    let c = t.mul(b, b).unwrap();
                    t.mean(c)
                }),
            ),
            (
                "leaky_relu",
                Box::new(|t, x| {
                    let a = t.leaky_relu(x, 0.01);
                    let b = t.mul(a, x).unwrap();
                    t.sum(b)
                }),
            ),
            (
                "sigmoid",
                Box::new(|t, x| {
                    let a = t.sigmoid(x);
                    let b = t.mul(a, a).unwrap();
                    t.sum(b)
                }),
            ),
            (
                "softplus_log",
                Box::new(|t, x| {
                    let a = t.softplus(x);
                    let b = t.log(a);
                    t.sum(b)
                }),
            ),
            (
                "exp",
                Box::new(|t, x| {
                    let a = t.exp(x);
                    t.mean(a)
                }),
            ),
            (
                "row_sum",
                Box::new(|t, x| {
                    let a = t.row_sum(x);
                    let b = t.mul(a, a).unwrap();
                    t.sum(b)
                }),
            ),
            (
                "bce",
                Box::new(move |t, x| {
                    let a = t.scale(x, 4.0);
                    let b = t.bce_with_logits(a, targets.clone()).unwrap();
                    t.sum(b)
                }),
            ),
            (
                "mod_periodic",
                Box::new(|t, x| {
                    let a = t.add_scalar(x, 10.25);
                    let b = t.mod_periodic(a, 1.0);
                    let c = t.mul(b, x).unwrap();
                    t.sum(c)
                }),
            ),
            (
                "select",
                Box::new(|t, x| {
                    let a = t.scale(x, 2.0);
                    let b = t.mul(x, x).unwrap();
                    let c = t.select_by_threshold(x, 0.05, a, b).unwrap();
                    t.sum(c)
                }),
            ),
            (
                "cols_concat",
                Box::new(|t, x| {
                    let a = t.cols(x, 1, 2).unwrap();
                    let b = t.cols(x, 0, 1).unwrap();
                    let c = t.concat_cols(&[a, b, a]).unwrap();
                    let d = t.mul(c, c).unwrap();
                    let e = t.exp(d);
                    t.sum(e)
                }),
            ),
        ];
        for (name, f) in &cases {
            // Keep inputs off the discontinuity sets of mod and select.
            let mut x = random(&mut rng, 5, 4, -1.0, 1.0);
            for v in &mut x.data {
                if v.abs() < 0.1 || (v.fract().abs() - 0.75).abs() < 0.05 {
                    *v += 0.2;
                }
            }
            let err = grad_error(f.as_ref(), &x);
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn forward_examples() {
        let mut t = Tape::new();
        let x = t.input(Tensor::scalar(-1.0));
        let y = t.leaky_relu(x, 0.01);
        assert_eq!(t.value(y).data[0], -0.01);
        let g = t.gradients(y).unwrap();
        assert_eq!(g[x.index()].as_ref().unwrap().data[0], 0.01);

        let mut t = Tape::new();
        let x = t.input(Tensor::scalar(2.3));
        let y = t.mod_periodic(x, 1.0);
        assert!((t.value(y).data[0] - 0.3).abs() < 1e-12);
        let g = t.gradients(y).unwrap();
        assert_eq!(g[x.index()].as_ref().unwrap().data[0], 1.0);
    }

    #[test]
    fn sum_gives_all_ones_and_unreached_params_stay_zero() {
        let mut params = vec![
            Parameter::new("w", Tensor::full(2, 3, 0.7)),
            Parameter::new("unused", Tensor::full(1, 2, 1.0)),
        ];
        let mut t = Tape::new();
        let w = t.param(0, &params[0]);
        let loss = t.sum(w);
        t.backward(loss, &mut params).unwrap();
        assert!(params[0].grad.data.iter().all(|&g| g == 1.0));
        assert!(params[1].grad.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.input(Tensor::zeros(2, 2));
        assert!(t.gradients(x).is_err());
    }

    #[test]
    fn shape_mismatch_fails_at_construction() {
        let mut t = Tape::new();
        let a = t.input(Tensor::zeros(2, 2));
        let b = t.input(Tensor::zeros(3, 2));
        assert!(t.add(a, b).is_err());
        assert!(t.matmul(a, b).is_err());
        let bias = t.input(Tensor::zeros(1, 3));
        assert!(t.add_bias(a, bias).is_err());
    }

    /// Two-layer MLP with every weight as one flat input, for FD checks.
    fn mlp_loss(t: &mut Tape, flat: Var, x: &Tensor) -> Var {
        let (d_in, hidden, d_out) = (x.cols, 6, 3);
        let input = t.constant(x.clone());
        let mut offset = 0;
        let mut take = |t: &mut Tape, rows: usize, cols: usize| {
            let mut parts = Vec::new();
            for _ in 0..rows {
                parts.push(t.cols(flat, offset, cols).unwrap());
                offset += cols;
            }
            parts
        };
        let w1_rows = take(t, d_in, hidden);
        let b1 = take(t, 1, hidden)[0];
        let w2_rows = take(t, hidden, d_out);
        // Rebuild the matrices by multiplying one-hot selectors, so the
        // weights stay views of the flat input.
        let stack = |t: &mut Tape, rows: &[Var]| {
            let n = rows.len();
            let mut acc: Option<Var> = None;
            for (r, &row) in rows.iter().enumerate() {
                let mut e = Tensor::zeros(n, 1);
                e.data[r] = 1.0;
                let e = t.constant(e);
                let placed = t.matmul(e, row).unwrap();
                acc = Some(match acc {
                    None => placed,
                    Some(a) => t.add(a, placed).unwrap(),
                });
            }
            acc.unwrap()
        };
        let w1 = stack(t, &w1_rows);
        let w2 = stack(t, &w2_rows);
        let h = t.matmul(input, w1).unwrap();
        let h = t.add_bias(h, b1).unwrap();
        let h = t.leaky_relu(h, 0.01);
        let o = t.matmul(h, w2).unwrap();
        let s = t.sigmoid(o);
        let s2 = t.mul(s, s).unwrap();
        t.mean(s2)
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 7, 5, -1.0, 1.0);
        let n = 5 * 6 + 6 + 6 * 3;
        let flat = random(&mut rng, 1, n, -1.0, 1.0);
        let f = move |t: &mut Tape, v: Var| mlp_loss(t, v, &x);
        assert!(grad_error(&f, &flat) < 1e-4);
    }

    #[test]
    fn kl_graph_has_zero_gradient_at_its_minimum() {
        // KL(N(m, s^2) || N(0.5, 0.1)) per coordinate, built from primitives.
        let f = |t: &mut Tape, x: Var| {
            let m = t.cols(x, 0, 1).unwrap();
            let s = t.cols(x, 1, 1).unwrap();
            let var = t.mul(s, s).unwrap();
            let tr = t.scale(var, 1.0 / 0.1);
            let d = t.add_scalar(m, -0.5);
            let d2 = t.mul(d, d).unwrap();
            let maha = t.scale(d2, 1.0 / 0.1);
            let logv = t.log(var);
            let a = t.add(tr, maha).unwrap();
            let b = t.sub(a, logv).unwrap();
            let c = t.add_scalar(b, 0.1f64.ln() - 1.0);
            let kl = t.scale(c, 0.5);
            t.sum(kl)
        };
        let mut t = Tape::new();
        let x = t.input(Tensor::new(1, 2, vec![0.5, 0.1f64.sqrt()]).unwrap());
        let loss = f(&mut t, x);
        assert!(t.value(loss).data[0].abs() < 1e-15);
        let g = t.gradients(loss).unwrap();
        assert!(g[x.index()]
            .as_ref()
            .unwrap()
            .data
            .iter()
            .all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn repeated_backward_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, 4, 5, -1.0, 1.0);
        let mut params = vec![Parameter::new("flat", random(&mut rng, 1, 54, -1.0, 1.0))];
        let mut t = Tape::new();
        let v = t.param(0, &params[0]);
        let loss = mlp_loss(&mut t, v, &x);
        t.backward(loss, &mut params).unwrap();
        let first = params[0].grad.clone();
        params[0].zero_grad();
        t.backward(loss, &mut params).unwrap();
        assert_eq!(first, params[0].grad);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Parameter::new("w", Tensor::scalar(1.0))];
        p[0].grad.data[0] = 1.0;
        adam_step(&mut p, 1e-3, AdamConfig::default()).unwrap();
        let expect = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((p[0].value.data[0] - expect).abs() < 1e-15);
        assert_eq!(p[0].grad.data[0], 0.0);
        assert_eq!(p[0].step_count, 1);
    }

    #[test]
    fn adam_with_zero_gradient_is_a_no_op() {
        let mut p = vec![Parameter::new("w", Tensor::full(2, 2, 0.3))];
        adam_step(&mut p, 1e-2, AdamConfig::default()).unwrap();
        assert!(p[0].value.data.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn adam_rejects_non_finite_gradients_by_name() {
        let mut p = vec![
            Parameter::new("fine", Tensor::scalar(1.0)),
            Parameter::new("decoder.bias", Tensor::scalar(1.0)),
        ];
        p[0].grad.data[0] = 1.0;
        p[1].grad.data[0] = f64::NAN;
        let err = adam_step(&mut p, 1e-3, AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("decoder.bias"));
        assert_eq!(p[0].value.data[0], 1.0);
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        let mut p = vec![Parameter::new("x", Tensor::scalar(3.0))];
        for _ in 0..2000 {
            let mut t = Tape::new();
            let x = t.param(0, &p[0]);
            let d = t.add_scalar(x, -1.25);
            let sq = t.mul(d, d).unwrap();
            let loss = t.sum(sq);
            t.backward(loss, &mut p).unwrap();
            adam_step(&mut p, 0.05, AdamConfig::default()).unwrap();
        }
        assert!((p[0].value.data[0] - 1.25).abs() < 1e-4, "{}", p[0].value.data[0]);
    }

    #[test]
    fn plateau_traces() {
        let mut s = PlateauScheduler::new(1.0, 0.99, 10);
        for k in 0..100 {
            assert_eq!(s.observe(10.0 - k as f64), 1.0);
        }

        let mut s = PlateauScheduler::new(1.0, 0.99, 10);
        for _ in 0..10 {
            s.observe(5.0);
        }
        assert_eq!(s.lr, 1.0);
        assert_eq!(s.observe(5.0), 0.99);

        let mut s = PlateauScheduler::new(1.0, 0.99, 10);
        for _ in 0..31 {
            s.observe(5.0);
        }
        assert_eq!(s.reductions(), 3);
        assert!((s.lr - 0.99f64.powi(3)).abs() < 1e-15);
    }
}
