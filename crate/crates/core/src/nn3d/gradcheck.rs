//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Layer, Mode, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Coordinates sampled from the parameters and input together.
    pub max_samples: usize,
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// A failing coordinate whose one-sided slopes disagree enough to
    /// explain the error straddles a kink (PReLU at 0, max-pool switch) and
    /// is re-evaluated with `h / 10`, up to this many times.
    pub kink_retries: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            max_samples: 256,
            tolerance: 1e-4,
            floor: 1e-6,
            kink_retries: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    /// Coordinates that needed a smaller step because of a kink.
    pub kinks: usize,
    pub max_rel_error: f64,
    /// Coordinate with the largest error, e.g. `conv1.weight[12]` or `input[3]`.
    pub worst: String,
    pub passed: bool,
}

/// Compare the analytic gradient of `L = Σ out · r` (r fixed random) with
/// central differences on up to `max_samples` coordinates.
pub fn grad_check(layer: &mut dyn Layer<f64>, input: &Tensor<f64>, opts: &GradCheckOptions) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let loss_of = |layer: &mut dyn Layer<f64>, x: &Tensor<f64>, r: &Tensor<f64>| -> f64 {
        let y = layer.forward(x, Mode::Train).expect("forward");
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };

    let y = layer.forward(input, Mode::Train).expect("forward");
    let r = Tensor::<f64>::randn(y.shape(), &mut rng);
    layer.zero_grad();
    let gx = layer.backward(&r).expect("backward");

    // (param index or None for the input, element)
    let mut coords: Vec<(Option<usize>, usize)> = Vec::new();
    for (pi, p) in layer.params().iter().enumerate() {
        if p.trainable {
            coords.extend((0..p.len()).map(|e| (Some(pi), e)));
        }
    }
    coords.extend((0..input.data().len()).map(|e| (None, e)));
    let picks: Vec<usize> = if coords.len() <= opts.max_samples {
        (0..coords.len()).collect()
    } else {
        let mut v = sample(&mut rng, coords.len(), opts.max_samples).into_vec();
        v.sort_unstable();
        v
    };

    let analytic: Vec<f64> = {
        let params = layer.params();
        picks
            .iter()
            .map(|&k| match coords[k] {
                (Some(pi), e) => params[pi].grad[e],
                (None, e) => gx.data()[e],
            })
            .collect()
    };

    let f0 = loss_of(layer, input, &r);
    let mut x = input.clone();
    let mut worst = (0.0f64, String::new());
    let mut kinks = 0;
    for (&k, &a) in picks.iter().zip(&analytic) {
        let (which, e) = coords[k];
        let name = match which {
            Some(pi) => format!("{}[{e}]", layer.params()[pi].name),
            None => format!("input[{e}]"),
        };
        let mut h = opts.h;
        let mut rel = 0.0;
        for attempt in 0..=opts.kink_retries {
            let mut eval = |layer: &mut dyn Layer<f64>, delta: f64| match which {
                Some(pi) => {
                    let orig = layer.params()[pi].value[e];
                    layer.params_mut()[pi].value[e] = orig + delta;
                    let f = loss_of(layer, &x, &r);
                    layer.params_mut()[pi].value[e] = orig;
                    f
                }
                None => {
                    let orig = x.data()[e];
                    x.data_mut()[e] = orig + delta;
                    let f = loss_of(layer, &x, &r);
                    x.data_mut()[e] = orig;
                    f
                }
            };
            let plus = eval(layer, h);
            let minus = eval(layer, -h);
            let num = (plus - minus) / (2.0 * h);
            rel = (a - num).abs() / a.abs().max(num.abs()).max(opts.floor);
            // Across a kink the one-sided slopes disagree by about twice the
            // central-difference error; only then is a smaller step tried.
            let (fd, bd) = ((plus - f0) / h, (f0 - minus) / h);
            let kinked = (fd - bd).abs() >= (a - num).abs();
            if rel < opts.tolerance || !kinked {
                break;
            }
            if attempt == 0 {
                kinks += 1;
            }
            h /= 10.0;
        }
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, name);
        }
    }
    // leave the layer's caches consistent with the unperturbed input
    let _ = layer.forward(input, Mode::Train);

    GradReport {
        checked: picks.len(),
        kinks,
        max_rel_error: worst.0,
        worst: worst.1,
        passed: worst.0 < opts.tolerance,
    }
}
