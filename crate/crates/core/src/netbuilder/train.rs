//! Mini-batch training with a plateau learning-rate schedule.

use std::borrow::Borrow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{build, ArchConfig, Checkpoint, EpochStats, NetError, Network, Result};
use crate::nn3d::{Layer, Mode, NnError, Optimizer, Tensor};
use crate::volume::{Mask, Volume};

/// One training pair: a `[1, C, z, y, x]` input and its `[1, 1, z, y, x]`
/// binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor<f32>,
    pub label: Tensor<f32>,
}

impl Sample {
    /// From a channel-stacked volume and a mask on the same grid.
    pub fn from_volumes(input: &Volume, label: &Mask) -> Result<Self> {
        let [nx, ny, nz] = input.spatial_dims();
        if label.dims() != [nx, ny, nz] {
            return Err(NetError::Volume(crate::volume::VolumeError::ShapeMismatch(format!(
                "label {:?} vs input {:?}",
                label.dims(),
                [nx, ny, nz]
            ))));
        }
        Ok(Sample {
            input: Tensor::from_vec([1, input.channels(), nz, ny, nx], input.data().to_vec())?,
            label: Tensor::from_vec([1, 1, nz, ny, nx], label.volume().data().to_vec())?,
        })
    }
}

/// Random-access dataset whose samples are materialized on demand, so
/// only the current batch needs to be resident.
pub trait SampleSource {
    type Item: Borrow<Sample>;

    fn len(&self) -> usize;

    fn load(&self, index: usize) -> Result<Self::Item>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// In-memory dataset; `load` hands out copies.
#[derive(Debug, Clone, Default)]
pub struct VecSource(pub Vec<Sample>);

impl SampleSource for VecSource {
    type Item = Sample;

    fn len(&self) -> usize {
        self.0.len()
    }

    fn load(&self, index: usize) -> Result<Sample> {
        Ok(self.0[index].clone())
    }
}

/// Two datasets back to back.
pub struct ConcatSource<'a, A, B> {
    pub first: &'a A,
    pub second: &'a B,
}

impl<A, B> SampleSource for ConcatSource<'_, A, B>
where
    A: SampleSource,
    B: SampleSource<Item = A::Item>,
{
    type Item = A::Item;

    fn len(&self) -> usize {
        self.first.len() + self.second.len()
    }

    fn load(&self, index: usize) -> Result<A::Item> {
        if index < self.first.len() {
            self.first.load(index)
        } else {
            self.second.load(index - self.first.len())
        }
    }
}

/// Which samples drive the plateau schedule and best-model selection.
#[derive(Debug, Clone, PartialEq)]
pub enum ValidationSplit {
    /// Hold out `cfg.val_fraction` of the samples (seeded shuffle, at least
    /// one when there are two or more samples).
    Fraction,
    /// Hold out exactly these indices.
    Indices(Vec<usize>),
    /// Validate on the training samples themselves.
    TrainSet,
}

impl ValidationSplit {
    fn resolve(&self, n: usize, cfg: &ArchConfig) -> Result<(Vec<usize>, Vec<usize>)> {
        let all: Vec<usize> = (0..n).collect();
        match self {
            ValidationSplit::TrainSet => Ok((all.clone(), all)),
            ValidationSplit::Indices(v) => {
                if v.iter().any(|&i| i >= n) {
                    return Err(NetError::InvalidConfig(format!("validation index out of range for {n} samples")));
                }
                let train: Vec<usize> = all.into_iter().filter(|i| !v.contains(i)).collect();
                if train.is_empty() || v.is_empty() {
                    return Err(NetError::EmptyDataset);
                }
                Ok((train, v.clone()))
            }
            ValidationSplit::Fraction => {
                if n < 2 || cfg.val_fraction == 0.0 {
                    return Ok((all.clone(), all));
                }
                let mut order = all;
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
                let k = ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1);
                let mut val = order[..k].to_vec();
                let mut train = order[k..].to_vec();
                val.sort_unstable();
                train.sort_unstable();
                Ok((train, val))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State after the final epoch; resumable.
    pub last: Checkpoint,
    /// Parameters at the lowest validation loss.
    pub best: Checkpoint,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn history(&self) -> &[EpochStats] {
        &self.last.history
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn stack<S: SampleSource>(src: &S, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut x: Option<Tensor<f32>> = None;
    let mut y: Option<Tensor<f32>> = None;
    for (b, &i) in idx.iter().enumerate() {
        let item = src.load(i)?;
        let s: &Sample = item.borrow();
        let [_, c, z, yy, xx] = s.input.shape();
        let xt = x.get_or_insert_with(|| Tensor::zeros([idx.len(), c, z, yy, xx]));
        let yt = y.get_or_insert_with(|| Tensor::zeros([idx.len(), 1, z, yy, xx]));
        if s.input.shape() != [1, xt.c(), xt.shape()[2], xt.shape()[3], xt.shape()[4]]
            || s.label.shape() != [1, 1, z, yy, xx]
        {
            return Err(NetError::Nn(NnError::ShapeMismatch(format!(
                "sample {i}: input {:?}, label {:?}",
                s.input.shape(),
                s.label.shape()
            ))));
        }
        xt.item_mut(b).copy_from_slice(s.input.data());
        yt.item_mut(b).copy_from_slice(s.label.data());
    }
    Ok((x.expect("non-empty batch"), y.expect("non-empty batch")))
}

/// Dice of `P > 0.5` against the label, 1 when both are empty.
pub(crate) fn dice_of(p: &Tensor<f32>, y: &Tensor<f32>) -> f64 {
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for i in 0..p.n() {
        for (&pv, &yv) in p.channel(i, 1).iter().zip(y.channel(i, 0)) {
            let s = pv > 0.5;
            let t = yv > 0.5;
            inter += (s && t) as usize;
            a += s as usize;
            b += t as usize;
        }
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

fn diverged(epoch: usize, what: impl Into<String>, last_good: &Checkpoint) -> NetError {
    NetError::DivergedTraining {
        epoch,
        what: what.into(),
        checkpoint: Box::new(last_good.clone()),
    }
}

/// Train `net` for `net.config().epochs` epochs (counting those already in
/// `resume`). Batches are drawn in a seeded per-epoch order, so resuming
/// from a checkpoint continues the uninterrupted run exactly.
pub fn train<S: SampleSource>(
    net: &mut Network<f32>,
    data: &S,
    split: &ValidationSplit,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    let cfg = net.config().clone();
    let (train_idx, val_idx) = split.resolve(data.len(), &cfg)?;

    let mut state = match resume {
        Some(ck) => {
            if ck.config != cfg {
                log::warn!("resuming with a config that differs from the checkpoint's");
            }
            net.load_state(&ck.params)?;
            let mut s = ck.clone();
            s.config = cfg.clone();
            s
        }
        None => Checkpoint::from_network(net),
    };
    let mut best = state.clone();
    let mut stopped_early = false;

    for epoch in state.epoch + 1..=cfg.epochs {
        let lr = state.scheduler.lr();
        let opt = Optimizer::new(cfg.optimizer, lr);
        let mut order = train_idx.clone();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));

        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = stack(data, batch)?;
            net.zero_grad();
            let p = net.forward(&x, Mode::Train)?;
            let out = cfg.loss.eval(&p, &y, cfg.tract_weight)?;
            if !out.loss.is_finite() {
                return Err(diverged(epoch, "training loss", &state));
            }
            net.backward(&out.grad)?;
            match opt.step(&mut net.params_mut()) {
                Err(NnError::NonFiniteGrad(name)) => {
                    return Err(diverged(epoch, format!("gradient of {name}"), &state))
                }
                r => r?,
            }
            total += out.loss * batch.len() as f64;
        }
        let train_loss = total / order.len() as f64;

        let (mut val_loss, mut val_dice) = (0.0, 0.0);
        for &i in &val_idx {
            let (x, y) = stack(data, &[i])?;
            let p = net.forward(&x, Mode::Eval)?;
            val_loss += cfg.loss.eval(&p, &y, cfg.tract_weight)?.loss;
            val_dice += dice_of(&p, &y);
        }
        val_loss /= val_idx.len() as f64;
        val_dice /= val_idx.len() as f64;
        let params = net.snapshot();
        if !val_loss.is_finite() || params.iter().any(|p| p.value.iter().any(|v| !v.is_finite())) {
            return Err(diverged(epoch, "validation loss", &state));
        }

        state.scheduler.observe(val_loss);
        state.history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_dice,
            lr,
        });
        state.epoch = epoch;
        state.params = params;
        let improved = state.best_val_loss.is_none_or(|b| val_loss < b);
        if improved {
            state.best_val_loss = Some(val_loss);
            best = state.clone();
        } else {
            best.history.clone_from(&state.history);
        }
        log::info!(
            "epoch {epoch}: train {train_loss:.6} val {val_loss:.6} dice {val_dice:.4} lr {lr:.3e}"
        );
        if cfg.target_dice.is_some_and(|t| val_dice >= t) {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        last: state,
        best,
        stopped_early,
    })
}

/// Train one model on the union of left and right datasets, for use as
/// initialization of per-side models.
pub fn pretrain_bilateral<S: SampleSource>(left: &S, right: &S, cfg: &ArchConfig) -> Result<TrainOutcome> {
    if left.is_empty() || right.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    let mut net = build::<f32>(cfg)?;
    let both = ConcatSource {
        first: left,
        second: right,
    };
    train(&mut net, &both, &ValidationSplit::Fraction, None)
}

/// Continue from pretrained weights with fresh optimizer and schedule
/// state for `epochs` epochs.
pub fn fine_tune<S: SampleSource>(
    pretrained: &Checkpoint,
    data: &S,
    split: &ValidationSplit,
    epochs: usize,
) -> Result<TrainOutcome> {
    let cfg = ArchConfig {
        epochs,
        ..pretrained.config.clone()
    };
    let mut net = build::<f32>(&cfg)?;
    net.load_values(&pretrained.params)?;
    train(&mut net, data, split, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netbuilder::Variant;
    use crate::synth::{toy_dataset, ToyOptions};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn small_cfg(epochs: usize) -> ArchConfig {
        ArchConfig {
            variant: Variant::Proposed,
            depth: 2,
            base_channels: 2,
            epochs,
            lr: 0.01,
            ..Default::default()
        }
    }

    fn small_data(n: usize) -> VecSource {
        let o = ToyOptions {
            dims: [8, 8, 8],
            ..Default::default()
        };
        VecSource(
            toy_dataset(n, 11, &o)
                .iter()
                .map(|s| Sample::from_volumes(&s.tensor, &s.label).unwrap())
                .collect(),
        )
    }

    fn losses(o: &TrainOutcome) -> Vec<(u64, u64)> {
        o.history().iter().map(|e| (e.train_loss.to_bits(), e.val_loss.to_bits())).collect()
    }

    #[test]
    fn empty_dataset_errors() {
        let mut net = build::<f32>(&small_cfg(1)).unwrap();
        let r = train(&mut net, &VecSource::default(), &ValidationSplit::Fraction, None);
        assert!(matches!(r, Err(NetError::EmptyDataset)));
        let d = small_data(2);
        assert!(matches!(
            pretrain_bilateral(&d, &VecSource::default(), &small_cfg(1)),
            Err(NetError::EmptyDataset)
        ));
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let d = small_data(5);
        let run = || {
            let mut net = build::<f32>(&small_cfg(10)).unwrap();
            train(&mut net, &d, &ValidationSplit::Fraction, None).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(losses(&a), losses(&b));
        assert_eq!(a.last.params, b.last.params);
    }

    #[test]
    fn resume_reproduces_curve() {
        let d = small_data(4);
        let mut net = build::<f32>(&small_cfg(6)).unwrap();
        let full = train(&mut net, &d, &ValidationSplit::Fraction, None).unwrap();

        let mut net = build::<f32>(&small_cfg(3)).unwrap();
        let half = train(&mut net, &d, &ValidationSplit::Fraction, None).unwrap();
        let ck = Checkpoint::from_bytes(&half.last.to_bytes()).unwrap();
        let mut net = build::<f32>(&small_cfg(6)).unwrap();
        let resumed = train(&mut net, &d, &ValidationSplit::Fraction, Some(&ck)).unwrap();
        assert_eq!(losses(&resumed), losses(&full));
        assert_eq!(resumed.last.params, full.last.params);
    }

    #[test]
    fn zero_lr_keeps_trainable_weights() {
        let d = small_data(3);
        let cfg = ArchConfig { lr: 0.0, ..small_cfg(2) };
        let mut net = build::<f32>(&cfg).unwrap();
        let before = net.snapshot();
        let out = train(&mut net, &d, &ValidationSplit::TrainSet, None).unwrap();
        for (a, b) in before.iter().zip(&out.last.params) {
            if a.trainable {
                assert_eq!(a.value, b.value, "{}", a.name);
            }
        }
    }

    #[test]
    fn split_resolution() {
        let cfg = small_cfg(1);
        let (t, v) = ValidationSplit::Fraction.resolve(20, &cfg).unwrap();
        assert_eq!((t.len(), v.len()), (18, 2));
        assert!(v.iter().all(|i| !t.contains(i)));
        let (t, v) = ValidationSplit::Indices(vec![0, 3]).resolve(5, &cfg).unwrap();
        assert_eq!((t, v), (vec![1, 2, 4], vec![0, 3]));
        assert!(ValidationSplit::Indices(vec![9]).resolve(5, &cfg).is_err());
        let (t, v) = ValidationSplit::TrainSet.resolve(3, &cfg).unwrap();
        assert_eq!(t, v);
    }

    static LIVE: AtomicUsize = AtomicUsize::new(0);
    static PEAK: AtomicUsize = AtomicUsize::new(0);

    struct Tracked(Sample);

    impl Borrow<Sample> for Tracked {
        fn borrow(&self) -> &Sample {
            &self.0
        }
    }

    impl Drop for Tracked {
        fn drop(&mut self) {
            LIVE.fetch_sub(1, Ordering::SeqCst);
        }
    }

    struct Lazy(VecSource);

    impl SampleSource for Lazy {
        type Item = Tracked;
        fn len(&self) -> usize {
            self.0.len()
        }
        fn load(&self, i: usize) -> Result<Tracked> {
            let live = LIVE.fetch_add(1, Ordering::SeqCst) + 1;
            PEAK.fetch_max(live, Ordering::SeqCst);
            Ok(Tracked(self.0.load(i)?))
        }
    }

    #[test]
    fn samples_are_loaded_on_the_fly() {
        let src = Lazy(small_data(6));
        let mut net = build::<f32>(&small_cfg(2)).unwrap();
        train(&mut net, &src, &ValidationSplit::Fraction, None).unwrap();
        assert_eq!(LIVE.load(Ordering::SeqCst), 0);
        assert!(PEAK.load(Ordering::SeqCst) <= net.config().batch_size);
    }

    #[test]
    fn diverging_run_reports_last_finite_state() {
        let d = small_data(2);
        let cfg = ArchConfig { lr: 1e30, ..small_cfg(20) };
        let mut net = build::<f32>(&cfg).unwrap();
        match train(&mut net, &d, &ValidationSplit::TrainSet, None) {
            Err(NetError::DivergedTraining { checkpoint, .. }) => {
                assert!(checkpoint.params.iter().all(|p| p.value.iter().all(|v| v.is_finite())));
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.last.epoch)),
        }
    }

    #[test]
    fn zero_epoch_fine_tune_keeps_pretrained_weights() {
        let l = small_data(2);
        let r = small_data(3);
        let pre = pretrain_bilateral(&l, &r, &small_cfg(2)).unwrap();
        let ft = fine_tune(&pre.last, &l, &ValidationSplit::TrainSet, 0).unwrap();
        for (a, b) in pre.last.params.iter().zip(&ft.last.params) {
            assert_eq!(a.value, b.value);
        }
    }
}
