//! Architecture gradients for the alternating bilevel optimisation.
//!
//! Both approximations are written against [`Objective`], a loss over flat
//! weight and architecture vectors on either split, so the same code serves
//! the supernet and the analytic test problems.
//!
//! First order: `∇α L_val(w, α)`.
//!
//! Second order (one virtual step): with `w' = w − ξ ∇w L_train(w, α)`,
//! `∇α L_val(w', α) − ξ ∇²_{α,w} L_train(w, α) · ∇w' L_val(w', α)`, where the
//! mixed product is a central difference of `∇α L_train` at
//! `w ± ε ∇w' L_val` with `ε = 0.01 / ‖∇w' L_val‖`.

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, Default)]
pub struct Eval {
    pub loss: f64,
    pub w: Option<Vec<f32>>,
    pub alpha: Option<Vec<f32>>,
}

pub trait Objective {
    /// Loss on `split` at `(w, alpha)` plus the requested gradients. Must be
    /// a deterministic function of its arguments.
    fn eval(&mut self, split: Split, w: &[f32], alpha: &[f32], want_w: bool, want_alpha: bool) -> Result<Eval>;
}

pub const HVP_SCALE: f32 = 0.01;
pub const HVP_FALLBACK_EPS: f32 = 1e-3;

pub fn first_order<O: Objective + ?Sized>(obj: &mut O, w: &[f32], alpha: &[f32]) -> Result<Vec<f32>> {
    Ok(obj.eval(Split::Val, w, alpha, false, true)?.alpha.unwrap_or_default())
}

fn norm(v: &[f32]) -> f32 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt() as f32
}

/// `∇²_{α,w} L_train(w, α) · v` by central differences along `v`; returns
/// the product and the step used.
pub fn mixed_hvp<O: Objective + ?Sized>(obj: &mut O, w: &[f32], alpha: &[f32], v: &[f32]) -> Result<(Vec<f32>, f32)> {
    let n = norm(v);
    let eps = if n > 0.0 { HVP_SCALE / n } else { HVP_FALLBACK_EPS };
    let shifted = |sign: f32| -> Vec<f32> { w.iter().zip(v).map(|(&a, &b)| a + sign * eps * b).collect() };
    let gp = obj.eval(Split::Train, &shifted(1.0), alpha, false, true)?.alpha.unwrap_or_default();
    let gm = obj.eval(Split::Train, &shifted(-1.0), alpha, false, true)?.alpha.unwrap_or_default();
    let hvp = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    Ok((hvp, eps))
}

#[derive(Clone, Debug)]
pub struct SecondOrder {
    pub grad: Vec<f32>,
    pub eps: f32,
}

pub fn second_order<O: Objective + ?Sized>(obj: &mut O, w: &[f32], alpha: &[f32], xi: f32) -> Result<SecondOrder> {
    let gw = obj.eval(Split::Train, w, alpha, true, false)?.w.unwrap_or_default();
    let w_virtual: Vec<f32> = w.iter().zip(&gw).map(|(&a, &g)| a - xi * g).collect();
    let val = obj.eval(Split::Val, &w_virtual, alpha, true, true)?;
    let (d_alpha, d_w) = (val.alpha.unwrap_or_default(), val.w.unwrap_or_default());
    let (hvp, eps) = mixed_hvp(obj, w, alpha, &d_w)?;
    let grad = d_alpha.iter().zip(&hvp).map(|(&a, &h)| a - xi * h).collect();
    Ok(SecondOrder { grad, eps })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `L_train = (w − α)²`, `L_val = w²`.
    struct Quadratic;

    impl Objective for Quadratic {
        fn eval(&mut self, split: Split, w: &[f32], a: &[f32], want_w: bool, want_alpha: bool) -> Result<Eval> {
            let (w, a) = (w[0], a[0]);
            let (loss, gw, ga) = match split {
                Split::Train => ((w - a) * (w - a), 2.0 * (w - a), -2.0 * (w - a)),
                Split::Val => (w * w, 2.0 * w, 0.0),
            };
            Ok(Eval {
                loss: loss as f64,
                w: want_w.then(|| vec![gw]),
                alpha: want_alpha.then(|| vec![ga]),
            })
        }
    }

    #[test]
    fn second_order_matches_unrolled_closed_form() {
        for (w, a, xi) in [(1.0f32, 0.3f32, 0.1f32), (-0.7, 0.4, 0.025), (2.0, -1.0, 0.5), (0.2, 0.2, 0.01)] {
            // d/dα L_val(w − ξ·2(w − α)) = 2w'·2ξ.
            let w_virtual = w - xi * 2.0 * (w - a);
            let want = 4.0 * xi * w_virtual;
            let got = second_order(&mut Quadratic, &[w], &[a], xi).unwrap().grad[0];
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_xi_is_first_order() {
        let first = first_order(&mut Quadratic, &[0.8], &[0.1]).unwrap();
        let second = second_order(&mut Quadratic, &[0.8], &[0.1], 0.0).unwrap();
        assert_eq!(first, second.grad);
    }

    #[test]
    fn zero_direction_uses_fallback_step() {
        let (h, eps) = mixed_hvp(&mut Quadratic, &[0.5], &[0.1], &[0.0]).unwrap();
        assert_eq!(eps, HVP_FALLBACK_EPS);
        assert_eq!(h, vec![0.0]);
    }

    /// Ten weights, three architecture entries:
    /// `L = Σ_i sin(a_j w_i) + ½ a_j w_i³` with `j = i mod 3`.
    struct Smooth;

    fn smooth_loss(w: &[f64], a: &[f64]) -> f64 {
        w.iter().enumerate().map(|(i, &wi)| {
            let aj = a[i % 3];
            (aj * wi).sin() + 0.5 * aj * wi.powi(3)
        }).sum()
    }

    impl Objective for Smooth {
        fn eval(&mut self, _: Split, w: &[f32], a: &[f32], want_w: bool, want_alpha: bool) -> Result<Eval> {
            let w: Vec<f64> = w.iter().map(|&x| x as f64).collect();
            let a: Vec<f64> = a.iter().map(|&x| x as f64).collect();
            let mut ga = [0.0f64; 3];
            let mut gw = vec![0.0f64; w.len()];
            for (i, &wi) in w.iter().enumerate() {
                let aj = a[i % 3];
                ga[i % 3] += wi * (aj * wi).cos() + 0.5 * wi.powi(3);
                gw[i] = aj * (aj * wi).cos() + 1.5 * aj * wi * wi;
            }
            Ok(Eval {
                loss: smooth_loss(&w, &a),
                w: want_w.then(|| gw.iter().map(|&x| x as f32).collect()),
                alpha: want_alpha.then(|| ga.iter().map(|&x| x as f32).collect()),
            })
        }
    }

    #[test]
    fn finite_difference_hvp_matches_double_perturbation() {
        let w: Vec<f32> = (0..10).map(|i| 0.3 * (i as f32 - 4.5) / 4.5 + 0.1).collect();
        let a = [0.7f32, -0.4, 1.2];
        let v: Vec<f32> = (0..10).map(|i| ((i * 7 % 5) as f32 - 2.0) * 0.8).collect();
        let (hvp, _) = mixed_hvp(&mut Smooth, &w, &a, &v).unwrap();
        // Oracle from loss values only.
        let (h, d) = (1e-4, 1e-4);
        let wf: Vec<f64> = w.iter().map(|&x| x as f64).collect();
        let af: Vec<f64> = a.iter().map(|&x| x as f64).collect();
        for j in 0..3 {
            let l = |sw: f64, sa: f64| {
                let ww: Vec<f64> = wf.iter().zip(&v).map(|(&x, &vi)| x + sw * h * vi as f64).collect();
                let mut aa = af.clone();
                aa[j] += sa * d;
                smooth_loss(&ww, &aa)
            };
            let want = (l(1.0, 1.0) - l(1.0, -1.0) - l(-1.0, 1.0) + l(-1.0, -1.0)) / (4.0 * h * d);
            let got = hvp[j] as f64;
            assert!((got - want).abs() <= 1e-2 * want.abs().max(1e-3), "entry {j}: {got} vs {want}");
        }
    }
}
