//! End-to-end acceptance checks. Runs every criterion (a failure does not
//! stop the others), prints one PASS/FAIL line each and exits non-zero if
//! any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use tractseg::dtimetrics::{eig3_sym, scalars_from_eigenvalues};
use tractseg::eval::{dice, kappa, rescan_epsilon};
use tractseg::netbuilder::{
    build, segment, train, ArchConfig, Checkpoint, Sample, ValidationSplit, VecSource,
};
use tractseg::nn3d::{
    grad_check, loss_wce, loss_wip, BatchNorm3d, Conv3d, GradCheckOptions, GradReport, Layer, LossKind, MaxPool3d,
    Mode, NnError, PRelu, Padding, Param, Residual, Sequential, Softmax, Tensor, Upsample3d,
};
use tractseg::stats::{
    age_association_report, anova_oneway, bonferroni, ols_fit, synthetic_cohort, t_two_sided, AnovaVariant,
    CohortOptions, Model,
};
use tractseg::synth::{toy_dataset, ToyOptions};
use tractseg::tensorfit::{add_rician, fit_lm, fit_loglinear, simulate_dwi, DiffusionScheme, LmOptions, TensorField};
use tractseg::volume::{read_nifti, write_nifti, BoundingBox, Mask, Volume};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------- 1

/// Conv whose backward scales its gradients by 1.01.
struct Perturbed(Conv3d<f64>);

impl Layer<f64> for Perturbed {
    fn forward(&mut self, x: &Tensor<f64>, m: Mode) -> Result<Tensor<f64>, NnError> {
        self.0.forward(x, m)
    }
    fn backward(&mut self, g: &Tensor<f64>) -> Result<Tensor<f64>, NnError> {
        let mut gx = self.0.backward(g)?;
        gx.data_mut().iter_mut().for_each(|v| *v *= 1.01);
        self.0.weight.grad.iter_mut().for_each(|v| *v *= 1.01);
        Ok(gx)
    }
    fn params(&self) -> Vec<&Param<f64>> {
        self.0.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        self.0.params_mut()
    }
}

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let opts = GradCheckOptions::default();
    let x = |c: usize, s: usize, rng: &mut ChaCha8Rng| Tensor::<f64>::randn([2, c, s, s, s], rng);
    let mut reports: Vec<(&str, GradReport)> = Vec::new();

    let mut conv = Conv3d::<f64>::new("conv", 3, 4, 3, 1, Padding::Same, false, &mut rng);
    reports.push(("conv3d", grad_check(&mut conv, &x(3, 6, &mut rng), &opts)));
    let mut strided = Conv3d::<f64>::new("down", 3, 4, 2, 2, Padding::Valid, false, &mut rng);
    reports.push(("strided conv", grad_check(&mut strided, &x(3, 6, &mut rng), &opts)));
    let mut convt = Conv3d::<f64>::new("up", 3, 2, 2, 2, Padding::Valid, true, &mut rng);
    reports.push(("transposed conv", grad_check(&mut convt, &x(3, 4, &mut rng), &opts)));
    reports.push(("batch norm", grad_check(&mut BatchNorm3d::<f64>::new("bn", 3), &x(3, 4, &mut rng), &opts)));
    reports.push(("prelu", grad_check(&mut PRelu::<f64>::new("act", 3), &x(3, 4, &mut rng), &opts)));
    reports.push(("max pool", grad_check(&mut MaxPool3d::new(2), &x(2, 6, &mut rng), &opts)));
    reports.push(("upsample", grad_check(&mut Upsample3d::new(2), &x(2, 3, &mut rng), &opts)));
    reports.push(("softmax", grad_check(&mut Softmax::<f64>::new(), &x(2, 4, &mut rng), &opts)));
    let mut body = Sequential::<f64>::new(Vec::new());
    body.push(Conv3d::<f64>::new("r1", 2, 3, 3, 1, Padding::Same, false, &mut rng));
    body.push(PRelu::<f64>::new("ra", 3));
    let proj = Conv3d::<f64>::new("rp", 2, 3, 1, 1, Padding::Same, false, &mut rng);
    reports.push(("residual", grad_check(&mut Residual::new(body, Some(proj)), &x(2, 5, &mut rng), &opts)));

    let cfg = ArchConfig {
        depth: 2,
        base_channels: 4,
        ..Default::default()
    };
    let mut net = build::<f64>(&cfg).map_err(|e| e.to_string())?;
    let input = Tensor::<f64>::randn([1, 6, 16, 16, 16], &mut rng);
    reports.push(("proposed network 16^3", grad_check(&mut net, &input, &opts)));

    let worst = reports
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .unwrap();
    for (name, r) in &reports {
        ensure(
            r.passed && r.max_rel_error < 1e-4,
            format!("{name}: max rel error {:.3e} at {}", r.max_rel_error, r.worst),
        )?;
    }
    let conv = Conv3d::<f64>::new("m", 2, 2, 3, 1, Padding::Same, false, &mut rng);
    let mutated = grad_check(&mut Perturbed(conv), &x(2, 5, &mut rng), &opts);
    ensure(!mutated.passed, "perturbed conv backward was not detected")?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!(
        "{} checks, worst {:.2e} ({}), mutation error {:.2e}, {secs:.1} s",
        reports.len(),
        worst.1.max_rel_error,
        worst.0,
        mutated.max_rel_error
    ))
}

// ---------------------------------------------------------------- 2

fn random_spd(rng: &mut ChaCha8Rng) -> [f64; 6] {
    let n = Normal::new(0.0, 1.0).unwrap();
    let axis = Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng)).normalize();
    let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), rng.random_range(0.0..std::f64::consts::TAU));
    let l = Matrix3::from_diagonal(&Vector3::from_fn(|_, _| rng.random_range(0.1e-3..3.0e-3)));
    let d = r.matrix() * l * r.matrix().transpose();
    [d[(0, 0)], d[(0, 1)], d[(0, 2)], d[(1, 1)], d[(1, 2)], d[(2, 2)]]
}

fn frob(d: &[f64; 6]) -> f64 {
    (d[0] * d[0] + d[3] * d[3] + d[5] * d[5] + 2.0 * (d[1] * d[1] + d[2] * d[2] + d[4] * d[4])).sqrt()
}

fn fa_of(d: &[f64; 6]) -> f64 {
    scalars_from_eigenvalues(&eig3_sym(d).unwrap().values).fa
}

fn tensor_round_trip() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scheme = DiffusionScheme::clinical_25();
    let grid = Volume::zeros(&[100, 1, 1]);
    let mut truth = TensorField::zeros_like(&grid);
    let tensors: Vec<[f64; 6]> = (0..100).map(|_| random_spd(&mut rng)).collect();
    for (i, d) in tensors.iter().enumerate() {
        truth.set(i, d);
    }
    let mask = Mask::full(&grid);
    let s0 = 1000.0;

    // noiseless: compare with the tensors as stored (f32) on the grid
    let dwi = simulate_dwi(&truth, s0, &scheme);
    let init = fit_loglinear(&dwi, &scheme, &mask).map_err(|e| e.to_string())?;
    let fit = fit_lm(&dwi, &scheme, &mask, &init, &LmOptions::default()).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (a, b) = (fit.get(i), truth.get(i));
        let diff: [f64; 6] = std::array::from_fn(|k| a[k] - b[k]);
        worst = worst.max(frob(&diff) / frob(&b));
    }
    ensure(worst < 1e-6, format!("noiseless relative Frobenius error {worst:.3e}"))?;

    // Rician noise at SNR 20
    let n = grid.n_spatial();
    let mut noisy = dwi.clone();
    for i in 0..n {
        let clean: Vec<f64> = (0..scheme.len()).map(|k| dwi.data()[k * n + i] as f64).collect();
        for (k, s) in add_rician(&clean, s0, 20.0, &mut rng).into_iter().enumerate() {
            noisy.data_mut()[k * n + i] = s as f32;
        }
    }
    let init = fit_loglinear(&noisy, &scheme, &mask).map_err(|e| e.to_string())?;
    let fit = fit_lm(&noisy, &scheme, &mask, &init, &LmOptions::default()).map_err(|e| e.to_string())?;
    let mut errs: Vec<f64> = (0..100)
        .map(|i| if fit.flags[i] { 1.0 } else { (fa_of(&fit.get(i)) - fa_of(&tensors[i])).abs() })
        .collect();
    errs.sort_by(f64::total_cmp);
    let median = 0.5 * (errs[49] + errs[50]);
    ensure(median < 0.05, format!("median FA error {median:.4} at SNR 20"))?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 30.0, format!("took {secs:.1} s"))?;
    Ok(format!("noiseless rel error {worst:.2e}, SNR 20 median |dFA| {median:.4}, {secs:.2} s"))
}

// ---------------------------------------------------------------- 3

fn scalar_closed_forms() -> Outcome {
    let prolate = scalars_from_eigenvalues(&[1.7e-3, 0.2e-3, 0.2e-3]);
    ensure((prolate.fa - 0.8704).abs() <= 1e-4, format!("FA {}", prolate.fa))?;
    ensure((prolate.mo - 1.0).abs() <= 1e-6, format!("prolate MO {}", prolate.mo))?;
    let oblate = scalars_from_eigenvalues(&[1.0, 1.0, 0.0]);
    ensure((oblate.mo + 1.0).abs() <= 1e-6, format!("oblate MO {}", oblate.mo))?;
    let iso = scalars_from_eigenvalues(&[0.8e-3, 0.8e-3, 0.8e-3]);
    ensure(iso.fa == 0.0 && iso.mo == 0.0, format!("isotropic FA {} MO {}", iso.fa, iso.mo))?;
    Ok(format!("FA {:.6}, MO {:+.6} / {:+.6}, isotropic exact", prolate.fa, prolate.mo, oblate.mo))
}

// ---------------------------------------------------------------- 4

fn toy_run(loss: LossKind, w: f64, target: f64, data: &VecSource) -> Result<(f64, usize, f64), String> {
    let t0 = Instant::now();
    let cfg = ArchConfig {
        depth: 2,
        base_channels: 8,
        loss,
        tract_weight: w,
        lr: 0.1,
        batch_size: 2,
        patience: 15,
        epochs: 150,
        // validation is the training set; stop once it is clearly converged
        target_dice: Some(target + 0.03),
        ..Default::default()
    };
    let mut net = build::<f32>(&cfg).map_err(|e| e.to_string())?;
    let out = train(&mut net, data, &ValidationSplit::TrainSet, None).map_err(|e| e.to_string())?;
    let epochs = out.history().len();
    let mut net = out.last.network().map_err(|e| e.to_string())?;
    // independent check: segment every training volume, mean Dice
    let mut total = 0.0;
    for s in &data.0 {
        let [_, c, nz, ny, nx] = s.input.shape();
        let vol = Volume::from_data(&[nx, ny, nz, c], s.input.data().to_vec()).map_err(|e| e.to_string())?;
        let label = Mask::from_threshold(&Volume::from_data(&[nx, ny, nz], s.label.data().to_vec()).unwrap(), 0.5);
        let seg = segment(&mut net, &vol, &BoundingBox::full([nx, ny, nz]), 0.5).map_err(|e| e.to_string())?;
        total += dice(&seg.mask, &label, None).unwrap();
    }
    Ok((total / data.0.len() as f64, epochs, t0.elapsed().as_secs_f64()))
}

fn toy_overfit() -> Outcome {
    let samples = toy_dataset(8, 2024, &ToyOptions::default());
    let data = VecSource(
        samples
            .iter()
            .map(|s| Sample::from_volumes(&s.tensor, &s.label))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?,
    );
    let (wip, e1, t1) = toy_run(LossKind::Wip, 3.0, 0.90, &data)?;
    let (wce, e2, t2) = toy_run(LossKind::Wce, 1.0, 0.85, &data)?;
    let detail = format!(
        "wip W=3 Dice {wip:.3} after {e1} epochs ({t1:.0} s); wce W=1 Dice {wce:.3} after {e2} epochs ({t2:.0} s)"
    );
    ensure(wip >= 0.90 && wce >= 0.85, detail.clone())?;
    ensure(t1 + t2 < 600.0, format!("{detail}; over the 10 min budget"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 5

fn loss_contracts() -> Outcome {
    let n = 8;
    let mut p = Tensor::<f64>::zeros([1, 2, 2, 2, 2]);
    let mut y = Tensor::<f64>::zeros([1, 1, 2, 2, 2]);
    for i in 0..n {
        p.channel_mut(0, 1)[i] = 0.1 * i as f64;
        p.channel_mut(0, 0)[i] = 1.0 - 0.1 * i as f64;
        y.channel_mut(0, 0)[i] = (i % 3 == 0) as u8 as f64;
    }
    let w = 3.0;
    let g = loss_wip(&p, &y, w).map_err(|e| e.to_string())?.grad;
    for i in 0..n {
        let want = if i % 3 == 0 { -w / n as f64 } else { 1.0 / n as f64 };
        ensure(g.channel(0, 1)[i] == want, format!("wip gradient {} at voxel {i}, expected {want}", g.channel(0, 1)[i]))?;
        ensure(g.channel(0, 0)[i] == 0.0, "background-channel gradient is not zero")?;
    }
    let one = |pv: f64| Tensor::from_vec([1, 2, 1, 1, 1], vec![1.0 - pv, pv]).unwrap();
    let y1 = Tensor::from_vec([1, 1, 1, 1, 1], vec![1.0]).unwrap();
    let lw = loss_wip(&one(0.8), &y1, 3.0).unwrap().loss;
    ensure((lw + 2.4).abs() < 1e-12, format!("L_wip = {lw}"))?;
    let lc = loss_wce(&one(0.5), &y1, 3.0).unwrap().loss;
    ensure((lc - 3.0 * std::f64::consts::LN_2).abs() <= 1e-12, format!("L_wce = {lc}"))?;
    Ok(format!("wip gradients exact, L_wip {lw}, L_wce {lc:.15}"))
}

// ---------------------------------------------------------------- 6

fn metric_oracles() -> Outcome {
    let mask = |dims: [usize; 3], on: &[usize]| {
        let mut bits = vec![false; dims.iter().product()];
        on.iter().for_each(|&i| bits[i] = true);
        Mask::from_bools(dims, &bits).unwrap()
    };
    let a = mask([4, 4, 1], &[0, 1, 2, 3, 4, 5, 6, 7]);
    let b = mask([4, 4, 1], &[2, 3, 4, 5, 6, 7, 8, 9]);
    let d = dice(&a, &b, None).unwrap();
    ensure(d == 0.75, format!("Dice {d}"))?;
    let k = kappa(&mask([10, 1, 1], &[0, 1, 2, 3]), &mask([10, 1, 1], &[2, 3, 4, 5])).unwrap();
    ensure((k - 1.0 / 6.0).abs() <= 1e-12, format!("kappa {k}"))?;
    let e = rescan_epsilon(0.40, 0.44).unwrap();
    ensure((e - 9.5238).abs() <= 1e-4, format!("epsilon {e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let (m1, m2, c) = (rng.random_range(0.01..5.0), rng.random_range(0.01..5.0), rng.random_range(1e-3..1e3));
        let (e0, e1) = (rescan_epsilon(m1, m2).unwrap(), rescan_epsilon(c * m1, c * m2).unwrap());
        ensure((e0 - e1).abs() <= 1e-9 * e0.max(1.0), format!("scale invariance: {e0} vs {e1} (c={c})"))?;
    }
    Ok(format!("Dice {d}, kappa {k:.12}, epsilon {e:.4}%, 1000 scaled pairs"))
}

// ---------------------------------------------------------------- 7

/// (XᵀX)⁻¹ by Gauss-Jordan, then β and SE from the normal equations.
fn normal_equations(y: &[f64], x: &[f64], p: usize) -> (Vec<f64>, Vec<f64>) {
    let n = y.len();
    let mut a: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            let mut row: Vec<f64> = (0..p).map(|j| (0..n).map(|r| x[r * p + i] * x[r * p + j]).sum()).collect();
            row.extend((0..p).map(|j| (i == j) as u8 as f64));
            row
        })
        .collect();
    for c in 0..p {
        let piv = (c..p).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        let d = a[c][c];
        a[c].iter_mut().for_each(|v| *v /= d);
        for r in 0..p {
            if r != c {
                let f = a[r][c];
                let pivot_row = a[c].clone();
                a[r].iter_mut().zip(&pivot_row).for_each(|(v, pv)| *v -= f * pv);
            }
        }
    }
    let xty: Vec<f64> = (0..p).map(|j| (0..n).map(|r| x[r * p + j] * y[r]).sum()).collect();
    let beta: Vec<f64> = (0..p).map(|i| (0..p).map(|j| a[i][p + j] * xty[j]).sum()).collect();
    let rss: f64 = (0..n)
        .map(|r| (y[r] - (0..p).map(|j| x[r * p + j] * beta[j]).sum::<f64>()).powi(2))
        .sum();
    let s2 = rss / (n - p) as f64;
    let se = (0..p).map(|j| (s2 * a[j][p + j]).sqrt()).collect();
    (beta, se)
}

fn statistics() -> Outcome {
    let b84 = bonferroni(0.05, 84);
    let b7 = bonferroni(0.05, 7);
    ensure(format!("{b84:.1e}") == "6.0e-4" && (b84 - 5.95e-4).abs() < 5e-7, format!("Bonferroni(84) {b84}"))?;
    ensure(format!("{b7:.1e}") == "7.1e-3", format!("Bonferroni(7) {b7}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(10..60);
        let p = rng.random_range(2..6);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            x.push(1.0);
            for _ in 1..p {
                x.push(rng.random_range(-2.0..2.0));
            }
            y.push(noise.sample(&mut rng));
        }
        let f = ols_fit(&y, &x, p).map_err(|e| e.to_string())?;
        let (b, se) = normal_equations(&y, &x, p);
        for j in 0..p {
            worst = worst.max((f.beta[j] - b[j]).abs()).max((f.se[j] - se[j]).abs());
        }
    }
    ensure(worst < 1e-8, format!("OLS vs normal equations {worst:.2e}"))?;

    // two groups: F equals the square of the pooled two-sample t
    let mut f_t = 0.0f64;
    for _ in 0..20 {
        let g1: Vec<f64> = (0..rng.random_range(3..15)).map(|_| noise.sample(&mut rng)).collect();
        let g2: Vec<f64> = (0..rng.random_range(3..15)).map(|_| 0.5 + noise.sample(&mut rng)).collect();
        let mean = |g: &[f64]| g.iter().sum::<f64>() / g.len() as f64;
        let ss = |g: &[f64]| g.iter().map(|v| (v - mean(g)).powi(2)).sum::<f64>();
        let (n1, n2) = (g1.len() as f64, g2.len() as f64);
        let sp2 = (ss(&g1) + ss(&g2)) / (n1 + n2 - 2.0);
        let t = (mean(&g1) - mean(&g2)) / (sp2 * (1.0 / n1 + 1.0 / n2)).sqrt();
        let r = anova_oneway(&[g1, g2], AnovaVariant::Classic).map_err(|e| e.to_string())?;
        f_t = f_t.max((r.f - t * t).abs() / (t * t).max(1.0));
        ensure((r.p - t_two_sided(t, n1 + n2 - 2.0)).abs() < 1e-10, "ANOVA p differs from t-test p")?;
    }
    ensure(f_t < 1e-10, format!("|F - t²| {f_t:.2e}"))?;

    let fa = |t: &tractseg::stats::StudyTable, m: Model| {
        age_association_report(t, m, 0.05, Some(84))
            .unwrap()
            .into_iter()
            .find(|a| a.measure == "FA")
            .unwrap()
    };
    let cohort = synthetic_cohort(&CohortOptions::default());
    let m1 = fa(&cohort, Model::One);
    ensure((m1.beta + 1.0e-3).abs() < 2.0 * m1.se, format!("β_age {:.3e} ± {:.1e}", m1.beta, m1.se))?;
    let mediated = synthetic_cohort(&CohortOptions {
        mediated: 0.3,
        seed: 43,
        ..Default::default()
    });
    let (a1, a2) = (fa(&mediated, Model::One), fa(&mediated, Model::Two));
    ensure(
        a2.beta < 0.0 && a2.beta.abs() < a1.beta.abs() && a2.beta.abs() > 0.5 * a1.beta.abs() && a2.significant,
        format!("model 1 β {:.3e}, model 2 β {:.3e}", a1.beta, a2.beta),
    )?;
    Ok(format!(
        "Bonferroni {b84:.3e} / {b7:.2e}, OLS max diff {worst:.1e}, F=t² within {f_t:.0e}, β_age {:.3}e-3 ± {:.2}e-3, model 2 attenuates {:.3}e-3 -> {:.3}e-3",
        m1.beta * 1e3,
        m1.se * 1e3,
        a1.beta * 1e3,
        a2.beta * 1e3
    ))
}

// ---------------------------------------------------------------- 8

fn determinism() -> Outcome {
    let samples = toy_dataset(4, 99, &ToyOptions {
        dims: [16, 16, 16],
        ..Default::default()
    });
    let data = VecSource(samples.iter().map(|s| Sample::from_volumes(&s.tensor, &s.label).unwrap()).collect());
    let cfg = ArchConfig {
        depth: 2,
        base_channels: 4,
        epochs: 10,
        seed: 5,
        ..Default::default()
    };
    let run = |cfg: &ArchConfig, resume: Option<&Checkpoint>| {
        let mut net = build::<f32>(cfg).unwrap();
        train(&mut net, &data, &ValidationSplit::Fraction, resume).unwrap()
    };
    let a = run(&cfg, None);
    let b = run(&cfg, None);
    ensure(a.last.to_bytes() == b.last.to_bytes(), "two seeded 10-epoch runs differ")?;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let half = run(&ArchConfig { epochs: 5, ..cfg.clone() }, None);
    half.last.save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    ensure(loaded.to_bytes() == half.last.to_bytes(), "checkpoint changed on save/load")?;
    let resumed = run(&cfg, Some(&loaded));
    ensure(resumed.history() == a.history(), "resumed loss curve differs")?;
    ensure(resumed.last.to_bytes() == a.last.to_bytes(), "resumed parameters differ")?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let vals: Vec<f32> = (0..5 * 4 * 3 * 6).map(|_| f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF)).collect();
    let vol = Volume::from_data(&[5, 4, 3, 6], vals.clone()).unwrap();
    let bytes = write_nifti(&vol);
    let back = read_nifti(&bytes).map_err(|e| e.to_string())?;
    let same_bits = back.data().iter().zip(&vals).all(|(x, y)| x.to_bits() == y.to_bits());
    ensure(same_bits && write_nifti(&back) == bytes, "NIfTI float32 round trip is not byte-exact")?;
    Ok("10-epoch runs bit-identical, 5+5 resume matches 10 straight, NIfTI f32 byte-exact".into())
}

// ---------------------------------------------------------------- 9

fn throughput() -> Outcome {
    let cfg = ArchConfig::default();
    let mut net = build::<f32>(&cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = Normal::new(0.0f32, 1.0).unwrap();
    let vol = Volume::from_data(&[96, 96, 96, 6], (0..96 * 96 * 96 * 6).map(|_| n.sample(&mut rng)).collect()).unwrap();
    let t0 = Instant::now();
    segment(&mut net, &vol, &BoundingBox::full([96, 96, 96]), 0.5).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let threads = rayon::current_num_threads();
    ensure(secs < 5.0, format!("96^3 segmentation took {secs:.2} s"))?;
    Ok(format!("96^3 ROI, default network, {secs:.2} s ({threads} thread(s) available)"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient fidelity", gradient_fidelity),
        ("tensor round trip", tensor_round_trip),
        ("scalar-map closed forms", scalar_closed_forms),
        ("toy overfit", toy_overfit),
        ("loss and weight contracts", loss_contracts),
        ("metric oracles", metric_oracles),
        ("statistics", statistics),
        ("determinism and persistence", determinism),
        ("inference throughput", throughput),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut total = Duration::ZERO;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|k| name.contains(k.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        total += t0.elapsed();
        match res {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {failed} failed, {:.1} s", total.as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
