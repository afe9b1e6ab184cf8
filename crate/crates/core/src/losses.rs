//! Orientation-alignment and contrastive descriptor losses.
//!
//! Each loss exists twice: as a tape graph for training and as a plain
//! `f64` function used for reporting and as a cross-check.

use crate::autodiff::{Tape, Var};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::gtensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Softmax temperature of the descriptor loss.
    pub tau: f64,
    /// Orientation-loss weight.
    pub alpha: f64,
    /// Include the positive pair in the contrastive denominator.
    pub inclusive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            alpha: 10.0,
            inclusive: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "need tau > 0 and alpha >= 0, got tau={} alpha={}",
                self.tau, self.alpha
            )));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            tau: kv.take_or("tau", d.tau)?,
            alpha: kv.take_or("alpha", d.alpha)?,
            inclusive: kv.take_or("inclusive_denominator", d.inclusive)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "tau={}\nalpha={}\ninclusive_denominator={}\n",
            self.tau, self.alpha, self.inclusive
        )
    }
}

/// `Δ = round(|G|·θ/360) mod |G|`.
pub fn quantize_shift(theta_deg: f64, order: usize) -> usize {
    let g = order as f64;
    ((theta_deg * g / 360.0).round().rem_euclid(g)) as usize % order
}

/// `−Σ_k Σ_g σ(O_A)_kg · log σ(shift(O_B, Δ))_kg` for `(K, |G|)` histograms.
pub fn orientation_loss_graph<T: Real>(tape: &mut Tape<T>, o_a: Var, o_b: Var, delta: usize) -> Result<Var> {
    let shape = tape.value(o_a).shape().to_vec();
    if shape.len() != 2 || tape.value(o_b).shape() != &shape[..] {
        return Err(Error::ShapeMismatch(format!(
            "orientation histograms {:?} vs {:?}",
            shape,
            tape.value(o_b).shape()
        )));
    }
    let (k, g) = (shape[0], shape[1]);
    let p = tape.softmax(o_a);
    let shifted = tape.shift_rows(o_b, g, &vec![delta as i64; k])?;
    let lq = tape.log_softmax(shifted);
    let prod = tape.mul(p, lq)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0))
}

/// `Σ_i (log Σ_k exp(S_ik) − S_ii)` with `S = D_A D_Bᵀ / τ`; the sum over `k`
/// skips `k = i` unless `inclusive`.
pub fn descriptor_loss_graph<T: Real>(
    tape: &mut Tape<T>,
    d_a: Var,
    d_b: Var,
    tau: f64,
    inclusive: bool,
) -> Result<Var> {
    let sim = tape.matmul_nt(d_a, d_b)?;
    let s = tape.scale(sim, 1.0 / tau);
    let lse = tape.logsumexp_rows(s, !inclusive)?;
    let pos = tape.diag(s)?;
    let terms = tape.sub(lse, pos)?;
    Ok(tape.sum(terms))
}

/// `α·L_ori + L_desc`.
pub fn total_loss_graph<T: Real>(tape: &mut Tape<T>, ori: Var, desc: Var, alpha: f64) -> Result<Var> {
    let w = tape.scale(ori, alpha);
    tape.add(w, desc)
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn orientation_loss(o_a: &[Vec<f64>], o_b: &[Vec<f64>], delta: usize) -> Result<f64> {
    if o_a.len() != o_b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} histograms", o_a.len(), o_b.len())));
    }
    let mut total = 0.0;
    for (a, b) in o_a.iter().zip(o_b) {
        let g = a.len();
        if b.len() != g || g == 0 {
            return Err(Error::ShapeMismatch(format!("histogram lengths {g} vs {}", b.len())));
        }
        let shifted: Vec<f64> = (0..g).map(|i| b[(i + delta) % g]).collect();
        let lp = log_softmax(a);
        let lq = log_softmax(&shifted);
        total -= lp.iter().zip(&lq).map(|(p, q)| p.exp() * q).sum::<f64>();
    }
    Ok(total)
}

/// Shannon entropy (nats) of `σ(o)`.
pub fn softmax_entropy(o: &[f64]) -> f64 {
    -log_softmax(o).iter().map(|l| l.exp() * l).sum::<f64>()
}

fn check_unit_rows(d: &[Vec<f64>]) -> Result<()> {
    for (row, v) in d.iter().enumerate() {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::NotNormalized { row, norm });
        }
    }
    Ok(())
}

pub fn descriptor_loss(d_a: &[Vec<f64>], d_b: &[Vec<f64>], tau: f64, inclusive: bool) -> Result<f64> {
    let k = d_a.len();
    if k != d_b.len() || k < 2 {
        return Err(Error::ShapeMismatch(format!(
            "need K >= 2 matched rows, got {k} and {}",
            d_b.len()
        )));
    }
    if let Some(b) = d_b.iter().chain(d_a).find(|r| r.len() != d_a[0].len()) {
        return Err(Error::DimMismatch {
            a: d_a[0].len(),
            b: b.len(),
        });
    }
    check_unit_rows(d_a)?;
    check_unit_rows(d_b)?;
    let mut total = 0.0;
    for (i, a) in d_a.iter().enumerate() {
        let s: Vec<f64> = d_b
            .iter()
            .map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / tau)
            .collect();
        let denom: Vec<f64> = s
            .iter()
            .enumerate()
            .filter(|(j, _)| inclusive || *j != i)
            .map(|(_, v)| *v)
            .collect();
        let m = denom.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + denom.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - s[i];
    }
    Ok(total)
}

pub fn total_loss(ori: f64, desc: f64, alpha: f64) -> f64 {
    alpha * ori + desc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, forward, GradCheckOptions, ParamSet, Parameter};
    use crate::gtensor::Tensor;
    use proptest::prelude::*;

    fn graph_ori(a: &[Vec<f64>], b: &[Vec<f64>], delta: usize) -> f64 {
        let (k, g) = (a.len(), a[0].len());
        let flat = |m: &[Vec<f64>]| Tensor::new(vec![k, g], m.concat()).unwrap();
        forward::<f64>(|t| {
            let x = t.input(flat(a));
            let y = t.input(flat(b));
            orientation_loss_graph(t, x, y, delta)
        })
        .unwrap()
        .0
    }

    #[test]
    fn uniform_two_bins_is_log2() {
        let z = vec![vec![0.0, 0.0]];
        assert!((orientation_loss(&z, &z, 0).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((graph_ori(&z, &z, 0) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_matching_histograms_give_zero() {
        let a = vec![vec![0.0, 20.0, 0.0, 0.0]];
        // O_B = shift(O_A, −2): peak moves to bin 3
        let b = vec![vec![0.0, 0.0, 0.0, 20.0]];
        assert!(orientation_loss(&a, &b, 2).unwrap() < 1e-6);
    }

    #[test]
    fn contrastive_hand_cases() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((descriptor_loss(&a, &a, 1.0, false).unwrap() + 2.0).abs() < 1e-12);
        let incl = descriptor_loss(&a, &a, 1.0, true).unwrap();
        assert!((incl - 2.0 * (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((incl - 0.6266).abs() < 1e-4);
        let same = vec![vec![0.6, 0.8]; 5];
        assert!((descriptor_loss(&same, &same, 0.5, false).unwrap() - 5.0 * 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn graph_matches_plain_descriptor_loss() {
        let a = vec![vec![0.6, 0.8, 0.0], vec![0.0, 0.6, 0.8], vec![1.0, 0.0, 0.0]];
        let b = vec![vec![0.8, 0.6, 0.0], vec![0.0, 0.0, 1.0], vec![0.6, 0.0, 0.8]];
        for inclusive in [false, true] {
            let plain = descriptor_loss(&a, &b, 0.07, inclusive).unwrap();
            let (g, _) = forward::<f64>(|t| {
                let x = t.input(Tensor::new(vec![3, 3], a.concat()).unwrap());
                let y = t.input(Tensor::new(vec![3, 3], b.concat()).unwrap());
                descriptor_loss_graph(t, x, y, 0.07, inclusive)
            })
            .unwrap();
            assert!((plain - g).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        assert!(matches!(
            descriptor_loss(&a, &a, 1.0, true),
            Err(Error::NotNormalized { row: 1, .. })
        ));
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(0.5, 1.0, 10.0), 6.0);
        assert_eq!(total_loss(3.0, 1.5, 0.0), 1.5);
        assert_eq!(total_loss(0.0, 0.0, 10.0), 0.0);
    }

    #[test]
    fn shift_quantization() {
        assert_eq!(quantize_shift(0.0, 4), 0);
        assert_eq!(quantize_shift(270.0, 4), 3);
        assert_eq!(quantize_shift(350.0, 4), 0);
        assert_eq!(quantize_shift(44.0, 4), 0);
        assert_eq!(quantize_shift(46.0, 4), 1);
        assert_eq!(quantize_shift(30.0, 16), 1);
    }

    #[test]
    fn both_losses_pass_gradient_check() {
        let params = ParamSet::new(vec![
            Parameter::new("a", Tensor::from_fn(vec![3, 4], |i| ((i * 7) % 5) as f32 * 0.3 - 0.5)),
            Parameter::new("b", Tensor::from_fn(vec![3, 4], |i| ((i * 3) % 7) as f32 * 0.2 - 0.4)),
        ]);
        for inclusive in [true, false] {
            let r = check_gradients(&params, &GradCheckOptions::default(), |t, v| {
                let ori = orientation_loss_graph(t, v[0], v[1], 1)?;
                let na = t.l2_normalize_rows(v[0]);
                let nb = t.l2_normalize_rows(v[1]);
                let desc = descriptor_loss_graph(t, na, nb, 0.5, inclusive)?;
                total_loss_graph(t, ori, desc, 10.0)
            })
            .unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    fn hist(g: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-4.0f64..4.0, g)
    }

    proptest! {
        #[test]
        fn matched_histograms_give_entropy(o in prop::collection::vec(hist(6), 1..5), delta in 0usize..6) {
            // O_B = shift(O, −Δ)
            let b: Vec<Vec<f64>> = o.iter().map(|r| (0..6).map(|i| r[(i + 6 - delta) % 6]).collect()).collect();
            let l = orientation_loss(&o, &b, delta).unwrap();
            let h: f64 = o.iter().map(|r| softmax_entropy(r)).sum();
            prop_assert!((l - h).abs() < 1e-9);
            prop_assert!((graph_ori(&o, &b, delta) - h).abs() < 1e-9);
        }

        #[test]
        fn gibbs_and_logit_shift_invariance(a in hist(5), b in hist(5), c in -3.0f64..3.0) {
            let l = orientation_loss(std::slice::from_ref(&a), std::slice::from_ref(&b), 0).unwrap();
            prop_assert!(l >= softmax_entropy(&a) - 1e-12);
            let bc: Vec<f64> = b.iter().map(|v| v + c).collect();
            prop_assert!((orientation_loss(&[a], &[bc], 0).unwrap() - l).abs() < 1e-9);
        }
    }
}
