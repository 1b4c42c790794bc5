//! Named oracle checks, cheap enough to run on every build.
//!
//! Each check compares a library routine against an independent evaluation
//! (closed form, scalar loop, sort, high-precision reference, or finite
//! differences) and reports a one-line detail.

#![allow(clippy::excessive_precision)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::chunked::{allgather_sigmoid_loss, chunked_sigmoid_loss, ShardPlan};
use crate::data::{generate, SyntheticPairSpec};
use crate::error::Result;
use crate::gradcheck::{check_loss_gradients, check_model_gradients, Fault};
use crate::harness::{init_model, train, LossKind, RunConfig};
use crate::losses::{
    build_mask, orthogonal_batch, sigmoid_loss, sigmoid_loss_grads, softmax_loss, softmax_loss_grads, LossParams,
    MaskSpec, MaskStrategy,
};
use crate::math::{l2_normalize_rows, log_sigmoid, Matrix};
use crate::model::{BottleneckEmbedding, GroupSettings, MlpEncoder, ParamGroup};
use crate::optim::{
    adam_step, lr_at, monitor_update, spike_recovery, AdamState, GradMonitor, GradStatus, OptimConfig, Schedule,
    ScheduleKind,
};

/// Random instances per gradient check.
pub const GRADCHECK_INSTANCES: u64 = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Outcome = Result<(bool, String)>;

/// Every check, in report order.
pub const CHECK_NAMES: [&str; 26] = [
    "log_sigmoid_extended_precision",
    "sigmoid_singleton_ln2",
    "sigmoid_scalar_oracle",
    "sigmoid_zero_dot_closed_form",
    "sigmoid_bias_init_gradient",
    "softmax_two_by_two",
    "softmax_high_temperature_reference",
    "softmax_all_equal_rows",
    "gradcheck_sigmoid_loss",
    "gradcheck_softmax_loss",
    "gradcheck_sigmoid_end_to_end",
    "gradcheck_softmax_end_to_end",
    "hard_mask_sort_oracle",
    "chunked_matches_monolithic",
    "chunked_single_device_bit_identical",
    "allgather_matches_chunked",
    "comm_accounting",
    "mlp_scalar_forward",
    "bottleneck_param_count",
    "adam_scalar_trace",
    "cosine_half_decay",
    "grad_spike_monitor",
    "beta2_spike_recovery",
    "latent_retrieval_oracle",
    "step0_orthogonal_loss",
    "checkpoint_round_trip",
];

/// Runs every check. `fault` is forwarded to the gradient checks.
pub fn run_all(fault: Fault) -> Vec<CheckResult> {
    CHECK_NAMES.iter().map(|&name| run_check(name, fault)).collect()
}

/// Runs one check by name. Unknown names fail.
pub fn run_check(name: &'static str, fault: Fault) -> CheckResult {
    let outcome: Outcome = match name {
        "log_sigmoid_extended_precision" => log_sigmoid_extended_precision(),
        "sigmoid_singleton_ln2" => sigmoid_singleton_ln2(),
        "sigmoid_scalar_oracle" => sigmoid_scalar_oracle(),
        "sigmoid_zero_dot_closed_form" => sigmoid_zero_dot_closed_form(),
        "sigmoid_bias_init_gradient" => sigmoid_bias_init_gradient(),
        "softmax_two_by_two" => softmax_two_by_two(),
        "softmax_high_temperature_reference" => softmax_high_temperature_reference(),
        "softmax_all_equal_rows" => softmax_all_equal_rows(),
        "gradcheck_sigmoid_loss" => gradcheck(|s| check_loss_gradients(LossKind::Sigmoid, s, fault)),
        "gradcheck_softmax_loss" => gradcheck(|s| check_loss_gradients(LossKind::Softmax, s, fault)),
        "gradcheck_sigmoid_end_to_end" => gradcheck(|s| check_model_gradients(LossKind::Sigmoid, s, fault)),
        "gradcheck_softmax_end_to_end" => gradcheck(|s| check_model_gradients(LossKind::Softmax, s, fault)),
        "hard_mask_sort_oracle" => hard_mask_sort_oracle(),
        "chunked_matches_monolithic" => chunked_matches_monolithic(),
        "chunked_single_device_bit_identical" => chunked_single_device_bit_identical(),
        "allgather_matches_chunked" => allgather_matches_chunked(),
        "comm_accounting" => comm_accounting(),
        "mlp_scalar_forward" => mlp_scalar_forward(),
        "bottleneck_param_count" => bottleneck_param_count(),
        "adam_scalar_trace" => adam_scalar_trace(),
        "cosine_half_decay" => cosine_half_decay(),
        "grad_spike_monitor" => grad_spike_monitor(),
        "beta2_spike_recovery" => beta2_spike_recovery(),
        "latent_retrieval_oracle" => latent_retrieval_oracle(),
        "step0_orthogonal_loss" => step0_orthogonal_loss(),
        "checkpoint_round_trip" => checkpoint_round_trip(),
        _ => Ok((false, "unknown check".into())),
    };
    match outcome {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn random_unit(n: usize, d: usize, seed: u64) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    l2_normalize_rows(&Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0)))
}

fn within(value: f64, expected: f64, tol: f64) -> (bool, String) {
    let err = (value - expected).abs();
    (err <= tol, format!("{value:.15} vs {expected:.15} (|err| {err:.2e})"))
}

fn log_sigmoid_extended_precision() -> Outcome {
    // −10 − log1p(e^−10) to 20 digits.
    let (ok, detail) = within(log_sigmoid(-10.0), -10.000045398899216865, 1e-12);
    let tail = log_sigmoid(-800.0) == -800.0 && log_sigmoid(800.0) == 0.0;
    Ok((ok && tail, detail))
}

fn sigmoid_singleton_ln2() -> Outcome {
    let x = random_unit(1, 4, 1)?;
    let v = sigmoid_loss(&x, &x, &LossParams::default())?.value;
    Ok(within(v, std::f64::consts::LN_2, 1e-12))
}

fn scalar_sigmoid(x: &Matrix, y: &Matrix, p: &LossParams) -> f64 {
    let n = x.rows();
    let t = p.t_prime.exp();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let s: f64 = (0..x.cols()).map(|k| x[(i, k)] * y[(j, k)]).sum();
            let z = if i == j { 1.0 } else { -1.0 };
            total += (1.0 + (-z * (t * s + p.bias)).exp()).ln();
        }
    }
    total / n as f64
}

fn sigmoid_scalar_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let x = random_unit(8, 5, seed)?;
        let y = random_unit(8, 5, seed + 100)?;
        let p = LossParams::new(0.7, -1.3);
        worst = worst.max((sigmoid_loss(&x, &y, &p)?.value - scalar_sigmoid(&x, &y, &p)).abs());
    }
    Ok((worst <= 1e-12, format!("max |err| {worst:.2e} over 5 batches")))
}

fn sigmoid_zero_dot_closed_form() -> Outcome {
    let (x, y) = orthogonal_batch(16, 32);
    let p = LossParams::default();
    let v = sigmoid_loss(&x, &y, &p)?.value;
    let expected = -log_sigmoid(-10.0) - 15.0 * log_sigmoid(10.0);
    let (ok, detail) = within(v, expected, 1e-9);
    let g = sigmoid_loss_grads(&x, &y, &p, None)?.d_bias;
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let g_expected = -sig(10.0) + 15.0 * sig(-10.0);
    let g_ok = (g - g_expected).abs() <= 1e-12;
    Ok((ok && g_ok, format!("{detail}; d_bias {g:.6}")))
}

fn sigmoid_bias_init_gradient() -> Outcome {
    let (x, y) = orthogonal_batch(16, 32);
    let at = |b: f64| sigmoid_loss_grads(&x, &y, &LossParams::new(10f64.ln(), b), None).map(|g| g.d_bias);
    let (g10, g0) = (at(-10.0)?, at(0.0)?);
    Ok((
        g10.abs() < g0.abs() / 5.0,
        format!("|d_bias| {:.5} at b=-10 vs {:.5} at b=0", g10.abs(), g0.abs()),
    ))
}

fn softmax_two_by_two() -> Outcome {
    let s: f64 = 0.8;
    let c = (1.0 - s * s).sqrt();
    let x = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]])?;
    let y = Matrix::from_rows(&[vec![s, 0.0, c], vec![0.0, s, c]])?;
    Ok(within(softmax_loss(&x, &y, 0.0)?.value, (1.0 + (-s).exp()).ln(), 1e-14))
}

// Produced at 60 significant digits by oracles/softmax_reference.py.
const REF_ZIMG: [[f64; 3]; 4] = [
    [0.6, 0.64, 0.48],
    [0.607925290310126, 0.6327994838580036, 0.47957445160307816],
    [0.5929697207059678, 0.6478743244750389, 0.4781691855524555],
    [0.6045748526402427, 0.6436767087811539, 0.4692222736909346],
];
const REF_ZTXT: [[f64; 3]; 4] = [
    [0.6000604408578962, 0.6419947811507942, 0.4772527300001238],
    [0.6055141648069766, 0.6315793440867472, 0.48421083046650615],
    [0.5922544279269306, 0.646277635879725, 0.4812067226906311],
    [0.6073348448957048, 0.6392473490609963, 0.4717067021932157],
];
const REF_T_PRIME: f64 = 9.210340371976184;
const REF_LOSS: f64 = 0.8415100132294049716;
const REF_D_T_PRIME: f64 = -0.37685689966753967688;
const REF_D_ZIMG: [[f64; 3]; 4] = [
    [187.45191595727387484, 192.34304361411063099, 151.4274316052794706],
    [15.48729211418992933, 32.545380694498238778, 2.3729946373817611762],
    [-68.789161199772840396, -94.329051920395990539, -69.869836573013921235],
    [-134.26978317104096135, -128.26407860664902667, -86.805274199348505861],
];
const REF_D_ZTXT: [[f64; 3]; 4] = [
    [209.34044686868579947, 225.79927154195579034, 156.3185443789185511],
    [-183.90946524954425734, -173.53047801455887262, -140.81621673553299993],
    [-62.88884688663159311, -89.038883349085680578, -60.322821699381673015],
    [37.721045798265971431, 34.729010430055826988, 47.257450910435460706],
];

fn rows<const D: usize>(r: &[[f64; D]]) -> Result<Matrix> {
    Matrix::from_rows(&r.iter().map(|v| v.to_vec()).collect::<Vec<_>>())
}

/// Worst entry error relative to `max(1, |reference|)`.
fn scaled_error(got: &Matrix, want: &Matrix) -> f64 {
    got.as_slice()
        .iter()
        .zip(want.as_slice())
        .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn softmax_high_temperature_reference() -> Outcome {
    let (x, y) = (rows(&REF_ZIMG)?, rows(&REF_ZTXT)?);
    let out = softmax_loss(&x, &y, REF_T_PRIME)?;
    let g = softmax_loss_grads(&x, &y, REF_T_PRIME)?;
    let loss_err = (out.value - REF_LOSS).abs();
    let t_err = (g.d_t_prime - REF_D_T_PRIME).abs();
    let grad_err = scaled_error(&g.d_zimg, &rows(&REF_D_ZIMG)?).max(scaled_error(&g.d_ztxt, &rows(&REF_D_ZTXT)?));
    Ok((
        out.value.is_finite() && loss_err <= 1e-9 && t_err <= 1e-9 && grad_err <= 1e-9,
        format!("t=1e4: |loss err| {loss_err:.2e}, |d_t' err| {t_err:.2e}, scaled grad err {grad_err:.2e}"),
    ))
}

fn softmax_all_equal_rows() -> Outcome {
    let x = Matrix::from_fn(5, 3, |_, k| [0.6, 0.64, 0.48][k]);
    let out = softmax_loss(&x, &x, REF_T_PRIME)?;
    let g = softmax_loss_grads(&x, &x, REF_T_PRIME)?;
    let gmax = g
        .d_zimg
        .as_slice()
        .iter()
        .chain(g.d_ztxt.as_slice())
        .fold(g.d_t_prime.abs(), |m, v| m.max(v.abs()));
    let (ok, detail) = within(out.value, 1.6094379124341003746, 1e-9);
    Ok((ok && gmax <= 1e-9, format!("{detail}; max |grad| {gmax:.2e}")))
}

fn gradcheck(f: impl Fn(u64) -> Result<crate::gradcheck::GradCheck>) -> Outcome {
    let mut worst = 0.0f64;
    let mut entries = 0;
    for seed in 0..GRADCHECK_INSTANCES {
        let c = f(seed)?;
        worst = worst.max(c.max_rel_error);
        entries += c.entries;
    }
    Ok((
        worst <= crate::gradcheck::FD_REL_TOL,
        format!("max rel err {worst:.2e} over {GRADCHECK_INSTANCES} instances, {entries} entries"),
    ))
}

fn hard_mask_sort_oracle() -> Outcome {
    let n = 9;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let losses = Matrix::from_fn(n, n, |_, _| rng.random::<f64>());
    let mask = build_mask(&losses, &MaskSpec::new(MaskStrategy::Hard, 1.0, 0))?;
    // Repeatedly take the largest remaining negative.
    let mut pool: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let mut expected = vec![false; n * n];
    for _ in 0..n {
        let (pos, &(i, j)) = pool
            .iter()
            .enumerate()
            .max_by(|a, b| losses[*a.1].total_cmp(&losses[*b.1]))
            .expect("pool is non-empty");
        expected[i * n + j] = true;
        pool.swap_remove(pos);
    }
    let mismatches = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .filter(|&(i, j)| mask.kept(i, j) != expected[i * n + j])
        .count();
    Ok((
        mismatches == 0 && mask.kept_negatives() == n,
        format!("{} kept negatives, {mismatches} mismatches", mask.kept_negatives()),
    ))
}

fn chunked_matches_monolithic() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let devices = [1, 2, 3, 4][rng.random_range(0..4)];
        let n = devices * rng.random_range(1..=16);
        let d = rng.random_range(2..=16);
        let x = random_unit(n, d, 2 * seed)?;
        let y = random_unit(n, d, 2 * seed + 1)?;
        let p = LossParams::new(rng.random_range(0.0..3.0), rng.random_range(-12.0..2.0));
        let (mono, mono_g) = (sigmoid_loss(&x, &y, &p)?, sigmoid_loss_grads(&x, &y, &p, None)?);
        let c = chunked_sigmoid_loss(&ShardPlan::new(n, devices)?, &x, &y, &p)?;
        worst = worst
            .max((c.value - mono.value).abs())
            .max(c.grads.max_abs_diff(&mono_g));
    }
    Ok((worst <= 1e-10, format!("max |diff| {worst:.2e} over 10 configs")))
}

fn chunked_single_device_bit_identical() -> Outcome {
    let x = random_unit(24, 8, 1)?;
    let y = random_unit(24, 8, 2)?;
    let p = LossParams::default();
    let mono = sigmoid_loss(&x, &y, &p)?;
    let g = sigmoid_loss_grads(&x, &y, &p, None)?;
    let c = chunked_sigmoid_loss(&ShardPlan::new(24, 1)?, &x, &y, &p)?;
    let same = c.value.to_bits() == mono.value.to_bits() && c.grads == g;
    Ok((same, format!("D=1 value {:.17}", c.value)))
}

fn allgather_matches_chunked() -> Outcome {
    let x = random_unit(12, 8, 3)?;
    let y = random_unit(12, 8, 4)?;
    let p = LossParams::new(1.0, -2.0);
    let plan = ShardPlan::new(12, 3)?;
    let a = allgather_sigmoid_loss(&plan, &x, &y, &p)?;
    let c = chunked_sigmoid_loss(&plan, &x, &y, &p)?;
    let diff = (a.value - c.value).abs().max(a.grads.max_abs_diff(&c.grads));
    Ok((diff <= 1e-10, format!("n=12 D=3 max |diff| {diff:.2e}")))
}

fn comm_accounting() -> Outcome {
    let x = random_unit(256, 4, 5)?;
    let y = random_unit(256, 4, 6)?;
    let p = LossParams::default();
    let plan = ShardPlan::new(256, 8)?;
    let c = chunked_sigmoid_loss(&plan, &x, &y, &p)?.stats;
    let a = allgather_sigmoid_loss(&plan, &x, &y, &p)?.stats;
    let ok = c.peak_similarity_entries_per_device == 1024
        && a.peak_similarity_entries_per_device == 8192
        && c.floats_transferred < a.floats_transferred;
    Ok((
        ok,
        format!(
            "n=256 D=8 peak {} vs {}, floats {} vs {}",
            c.peak_similarity_entries_per_device,
            a.peak_similarity_entries_per_device,
            c.floats_transferred,
            a.floats_transferred
        ),
    ))
}

fn mlp_scalar_forward() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let enc = MlpEncoder::new(&[4, 6, 3], &mut rng)?;
    let x = Matrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
    let out = enc.forward(&x)?.0;
    let (w, b) = (enc.weights(), enc.biases());
    let mut worst = 0.0f64;
    for r in 0..x.rows() {
        let hidden: Vec<f64> = (0..6)
            .map(|j| (b[0][(0, j)] + (0..4).map(|k| x[(r, k)] * w[0][(k, j)]).sum::<f64>()).tanh())
            .collect();
        for j in 0..3 {
            let v = b[1][(0, j)] + (0..6).map(|k| hidden[k] * w[1][(k, j)]).sum::<f64>();
            worst = worst.max((v - out[(r, j)]).abs());
        }
    }
    Ok((worst <= 1e-12, format!("max |err| {worst:.2e}")))
}

fn bottleneck_param_count() -> Outcome {
    let (full, bottled) = (
        BottleneckEmbedding::param_count_for(32_000, 768, 768),
        BottleneckEmbedding::param_count_for(32_000, 96, 768),
    );
    Ok((
        bottled == 32_000 * 96 + 96 * 768 && full > bottled,
        format!("K=96: {bottled} params, K=W: {full}"),
    ))
}

fn adam_scalar_trace() -> Outcome {
    let cfg = OptimConfig {
        weight_decay: 0.01,
        ..OptimConfig::default()
    };
    let lr = 0.05;
    let (mut theta, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
    let mut p = [0.7];
    let mut state = AdamState::new();
    let mut worst = 0.0f64;
    for (t, g) in [1.0, -1.0, 1.0].into_iter().enumerate() {
        let t = (t + 1) as i32;
        m = 0.9 * m + 0.1 * g;
        v = 0.95 * v + 0.05 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.95f64.powi(t));
        theta -= lr * (mh / (vh.sqrt() + 1e-8) + 0.01 * theta);
        let mut groups = [ParamGroup {
            name: "scalar".into(),
            params: vec![&mut p[..]],
            settings: GroupSettings::default(),
        }];
        adam_step(&mut state, &mut groups, &[vec![vec![g]]], lr, &cfg)?;
        worst = worst.max((p[0] - theta).abs());
    }
    Ok((worst <= 1e-14, format!("final {:.12}, max |err| {worst:.2e}", p[0])))
}

fn cosine_half_decay() -> Outcome {
    let s = Schedule {
        kind: ScheduleKind::WarmupCosine,
        warmup_steps: 10,
        total_steps: 110,
        peak_lr: 0.4,
    };
    let (mid, start, end) = (lr_at(&s, 60)?, lr_at(&s, 0)?, lr_at(&s, 110)?);
    let ok = (mid - 0.2).abs() <= 1e-15 && start == 0.0 && end.abs() <= 1e-15;
    Ok((ok, format!("lr(0)={start}, lr(mid)={mid}, lr(end)={end:.1e}")))
}

fn grad_spike_monitor() -> Outcome {
    let mut mon = GradMonitor::default();
    let quiet = (0..4).all(|_| monitor_update(&mut mon, 1.0) == GradStatus::Ok);
    let spike = monitor_update(&mut mon, 10.0) == GradStatus::Spike;
    Ok((quiet && spike, format!("spikes flagged: {}", mon.spikes)))
}

fn beta2_spike_recovery() -> Outcome {
    let fast = spike_recovery(0.95, 200, 100.0, 2000);
    let slow = spike_recovery(0.999, 200, 100.0, 2000);
    Ok((
        fast.recovery_step < slow.recovery_step,
        format!(
            "recovery step {} (beta2 0.95) vs {} (beta2 0.999)",
            fast.recovery_step, slow.recovery_step
        ),
    ))
}

fn latent_retrieval_oracle() -> Outcome {
    let spec = SyntheticPairSpec {
        n_examples: 64,
        ..RunConfig::default().data
    };
    let ds = generate(&spec)?;
    let z = ds.latents.as_ref().expect("generated data carries latents");
    let hits = (0..z.rows())
        .filter(|&i| {
            let dist = |j: usize| z.row(i).iter().zip(z.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (0..z.rows()).min_by(|&a, &b| dist(a).total_cmp(&dist(b))) == Some(i)
        })
        .count();
    Ok((hits == 64, format!("recall@1 {}/64", hits)))
}

fn step0_orthogonal_loss() -> Outcome {
    let mut cfg = RunConfig {
        batch_size: 32,
        total_examples_seen: 32,
        ..Default::default()
    };
    cfg.model.disjoint_init = true;
    let loss = train(&cfg)?.trace[0].loss;
    Ok(within(loss, -log_sigmoid(-10.0) - 31.0 * log_sigmoid(10.0), 1e-12))
}

fn checkpoint_round_trip() -> Outcome {
    let cfg = RunConfig::default();
    let model = init_model(&cfg, &generate(&cfg.data)?)?;
    let mut first = Vec::new();
    write_checkpoint(&model, &mut first)?;
    let restored = read_checkpoint(first.as_slice())?;
    let mut second = Vec::new();
    write_checkpoint(&restored, &mut second)?;
    Ok((first == second, format!("{} bytes", first.len())))
}
