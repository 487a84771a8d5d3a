//! Voxel-averaged segmentation losses on the tract channel of a
//! probability map.
//!
//! Channel 1 holds the tract probability, channel 0 the background. Both
//! losses return the gradient with respect to the full probability tensor
//! (zero on channel 0).

use serde::{Deserialize, Serialize};

use super::{NnError, Real, Result, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Weighted inner product: `-W·y·p - (1-y)(1-p)`.
    Wip,
    /// Weighted cross entropy: `-W·y·ln p - (1-y)·ln(1-p)`.
    Wce,
}

impl LossKind {
    pub fn eval<T: Real>(self, p: &Tensor<T>, y: &Tensor<T>, w: f64) -> Result<LossOutput<T>> {
        match self {
            LossKind::Wip => loss_wip(p, y, w),
            LossKind::Wce => loss_wce(p, y, w),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: f64,
    pub grad: Tensor<T>,
}

fn check<T: Real>(p: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if p.c() < 2 || y.c() != 1 || p.n() != y.n() || p.spatial() != y.spatial() {
        return Err(NnError::ShapeMismatch(format!(
            "probabilities {:?} vs labels {:?}",
            p.shape(),
            y.shape()
        )));
    }
    Ok(())
}

fn reduce<T: Real>(
    p: &Tensor<T>,
    y: &Tensor<T>,
    mut voxel: impl FnMut(T, bool) -> (f64, T),
) -> Result<LossOutput<T>> {
    check(p, y)?;
    let mut grad = Tensor::zeros(p.shape());
    let mut total = 0.0;
    for i in 0..p.n() {
        let labels = y.channel(i, 0);
        let probs = p.channel(i, 1);
        let g = grad.channel_mut(i, 1);
        for ((gv, &pv), &yv) in g.iter_mut().zip(probs).zip(labels) {
            let (l, d) = voxel(pv, yv > T::of(0.5));
            total += l;
            *gv = d;
        }
    }
    let n = (p.n() * p.vox()) as f64;
    Ok(LossOutput { loss: total / n, grad })
}

pub fn loss_wip<T: Real>(p: &Tensor<T>, y: &Tensor<T>, w: f64) -> Result<LossOutput<T>> {
    let n = T::from_usize(p.n() * p.vox()).unwrap();
    let wt = T::of(w);
    let g_tract = -wt / n;
    let g_back = T::one() / n;
    reduce(p, y, |pv, tract| {
        let pf = pv.to_f64().unwrap();
        if tract {
            (-w * pf, g_tract)
        } else {
            (-(1.0 - pf), g_back)
        }
    })
}

pub fn loss_wce<T: Real>(p: &Tensor<T>, y: &Tensor<T>, w: f64) -> Result<LossOutput<T>> {
    let n = (p.n() * p.vox()) as f64;
    reduce(p, y, |pv, tract| {
        let pf = pv.to_f64().unwrap().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        if tract {
            (-w * pf.ln(), T::of(-w / (pf * n)))
        } else {
            (-(1.0 - pf).ln(), T::of(1.0 / ((1.0 - pf) * n)))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(p: f64, y: f64) -> (Tensor<f64>, Tensor<f64>) {
        (
            Tensor::from_vec([1, 2, 1, 1, 1], vec![1.0 - p, p]).unwrap(),
            Tensor::from_vec([1, 1, 1, 1, 1], vec![y]).unwrap(),
        )
    }

    #[test]
    fn wip_values() {
        let (p, y) = one(0.8, 1.0);
        assert!((loss_wip(&p, &y, 3.0).unwrap().loss + 2.4).abs() < 1e-12);
        let (p, y) = one(0.8, 0.0);
        assert!((loss_wip(&p, &y, 3.0).unwrap().loss + 0.2).abs() < 1e-12);
        let (p, y) = one(0.0, 0.0);
        assert_eq!(loss_wip(&p, &y, 3.0).unwrap().loss, -1.0);
    }

    #[test]
    fn wip_gradient_is_exact() {
        let n = 7 * 5 * 3 * 2;
        let mut pd = vec![0.3f32; n * 2];
        pd.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 11) as f32 / 10.0);
        let p = Tensor::from_vec([2, 2, 7, 5, 3], pd).unwrap();
        let yd: Vec<f32> = (0..n).map(|i| (i % 3 == 0) as u8 as f32).collect();
        let y = Tensor::from_vec([2, 1, 7, 5, 3], yd.clone()).unwrap();
        let out = loss_wip(&p, &y, 3.0).unwrap();
        let nn = n as f32;
        for i in 0..2 {
            assert!(out.grad.channel(i, 0).iter().all(|&g| g == 0.0));
            for (j, &g) in out.grad.channel(i, 1).iter().enumerate() {
                let tract = y.channel(i, 0)[j] == 1.0;
                let expect = if tract { -3.0f32 / nn } else { 1.0 / nn };
                assert_eq!(g.to_bits(), expect.to_bits());
            }
        }
    }

    #[test]
    fn wce_values() {
        let ln2 = std::f64::consts::LN_2;
        let (p, y) = one(0.5, 1.0);
        assert!((loss_wce(&p, &y, 3.0).unwrap().loss - 3.0 * ln2).abs() < 1e-12);
        for w in [0.5, 3.0, 10.0] {
            let (p, y) = one(0.5, 0.0);
            assert!((loss_wce(&p, &y, w).unwrap().loss - ln2).abs() < 1e-12);
        }
        let (p, y) = one(1.0, 1.0);
        let l = loss_wce(&p, &y, 3.0).unwrap();
        assert!(l.loss > 0.0 && l.loss < 1e-6);
        assert!(l.grad.all_finite());
        let (p, y) = one(0.0, 1.0);
        assert!(loss_wce(&p, &y, 3.0).unwrap().grad.all_finite());
    }

    #[test]
    fn wce_gradient_matches_differences() {
        for &(pv, yv) in &[(0.3, 1.0), (0.7, 0.0), (0.55, 1.0)] {
            let (p, y) = one(pv, yv);
            let g = loss_wce(&p, &y, 2.5).unwrap().grad.data()[1];
            let h = 1e-6;
            let f = |q: f64| loss_wce(&one(q, yv).0, &y, 2.5).unwrap().loss;
            let num = (f(pv + h) - f(pv - h)) / (2.0 * h);
            assert!((g - num).abs() < 1e-6 * num.abs().max(1.0));
        }
    }

    #[test]
    fn shape_mismatch() {
        let p = Tensor::<f64>::zeros([1, 2, 2, 2, 2]);
        let y = Tensor::<f64>::zeros([1, 1, 2, 2, 3]);
        assert!(loss_wip(&p, &y, 1.0).is_err());
        assert!(loss_wce(&p, &y, 1.0).is_err());
    }
}
