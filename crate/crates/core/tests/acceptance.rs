//! Acceptance suite. Runs every criterion, prints one line each, and exits
//! nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tofu_core::codec::{alpha_weighted_gradient, decode, encode, r_loss, r_loss_gradients, spanned_update};
use tofu_core::config::parse_config;
use tofu_core::data::{make_dataset, DataSpec};
use tofu_core::fed::{client_local_update, minibatch_schedule, FedConfig, Federation, Synfreq};
use tofu_core::ledger::{efficiency_ratio, tofu_payload_scalars, Efficiency, Mode, PayloadSpec, RoundRecord};
use tofu_core::models::{MlpSpec, ParamVector, SoftBatch};
use tofu_core::ndgrad::Graph;
use tofu_core::optim::{AdamConfig, SgdConfig};
use tofu_core::runner;
use tofu_core::tensor::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, c: usize) -> SoftBatch {
    SoftBatch {
        inputs: normal(rng, n, d, 1.0),
        label_logits: normal(rng, n, c, 1.0),
        alpha_logits: Tensor::vector(normal(rng, 1, n, 1.0).into_data()),
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(f64::MIN_POSITIVE)
}

/// Analytic reconstruction-loss gradients against central differences.
fn double_backprop() -> Outcome {
    let spec = MlpSpec::new(vec![8, 24, 3], 21).unwrap();
    assert!(spec.param_count() <= 2000);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let params = MlpSpec::new(vec![8, 24, 3], rng.random()).unwrap().init();
        let target = MlpSpec::new(vec![8, 24, 3], rng.random()).unwrap().init();
        let batch = random_batch(&mut rng, 4, 8, 3);
        let (_, grads) = r_loss_gradients(&target, &params, &batch).unwrap();
        let f = |b: &SoftBatch| r_loss(&target, &spanned_update(&params, b).unwrap()).unwrap();
        let blocks: [(fn(&mut SoftBatch) -> &mut Tensor, &Tensor); 3] = [
            (|b| &mut b.inputs, &grads.inputs),
            (|b| &mut b.label_logits, &grads.label_logits),
            (|b| &mut b.alpha_logits, &grads.alpha_logits),
        ];
        for (field, analytic) in blocks {
            let mut fd = Vec::with_capacity(analytic.numel());
            for i in 0..analytic.numel() {
                let mut plus = batch.clone();
                field(&mut plus).data_mut()[i] += h;
                let mut minus = batch.clone();
                field(&mut minus).data_mut()[i] -= h;
                fd.push((f(&plus) - f(&minus)) / (2.0 * h));
            }
            worst = worst.max(rel_err(analytic.data(), &fd));
        }
    }
    outcome(worst <= 1e-5, format!("worst relative error {worst:.2e} over 20 points (limit 1e-5)"))
}

/// One backward pass of the weighted loss against the weighted sum of
/// per-datum gradients taken one at a time.
fn linearity() -> Outcome {
    let spec = MlpSpec::new(vec![5, 7, 3], 2).unwrap();
    let params = spec.init();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for n in [1usize, 2, 8] {
        let batch = random_batch(&mut rng, n, 5, 3);
        let alphas = batch.alphas();
        let combined = {
            let mut g = Graph::new();
            let pv = params.to_graph(&mut g, true);
            let x = g.constant(batch.inputs.clone());
            let y = g.constant(batch.labels());
            let a = g.constant(alphas.clone());
            let logits = tofu_core::models::forward_graph(&mut g, &pv, x).unwrap();
            let losses = tofu_core::models::soft_cross_entropy_rows(&mut g, logits, y).unwrap();
            let grads = alpha_weighted_gradient(&mut g, losses, a, &pv.flat()).unwrap();
            ParamVector::from_tensors(grads.iter().map(|&v| g.value(v).clone()).collect())
        };
        let mut sum = spec.zeros();
        for i in 0..n {
            let single = SoftBatch {
                inputs: batch.inputs.select_rows(&[i]),
                label_logits: batch.label_logits.select_rows(&[i]),
                alpha_logits: Tensor::vector(vec![0.0]),
            };
            let gi = spanned_update(&params, &single).unwrap();
            sum = sum.add(&gi.scale(alphas.data()[i])).unwrap();
        }
        worst = worst.max(rel_err(combined.flatten().data(), sum.flatten().data()));
    }
    outcome(worst <= 1e-12, format!("worst relative error {worst:.2e} for N in {{1, 2, 8}} (limit 1e-12)"))
}

struct RealEncode {
    u_real: ParamVector,
    decoded: ParamVector,
    dead: Vec<usize>,
    r_loss: f64,
}

fn real_encodes() -> Vec<RealEncode> {
    let data = make_dataset(
        &DataSpec {
            dim: 16,
            ..DataSpec::default()
        },
        0,
    )
    .unwrap();
    let spec = MlpSpec::new(vec![16, 48, 4], 1).unwrap();
    assert!(spec.param_count() <= 2000);
    let theta = spec.init();
    let (x, y) = data.subset(&data.train);
    (0..3u64)
        .map(|seed| {
            let batches = minibatch_schedule(y.len(), 32, 10, seed);
            let u_real = client_local_update(&theta, &x, &y, &batches, 0.1).unwrap();
            let (ds, rep) = encode(&u_real, &theta, 32, &AdamConfig::default(), seed).unwrap();
            RealEncode {
                decoded: decode(&theta, &ds).unwrap(),
                u_real,
                dead: rep.dead_layers,
                r_loss: ds.final_r_loss,
            }
        })
        .collect()
}

fn encode_fidelity(real: &[RealEncode]) -> Outcome {
    let spec = MlpSpec::new(vec![16, 48, 4], 1).unwrap();
    let theta = spec.init();
    let planted = |n: usize, seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(&mut rng, n, 16, 4);
        let target = spanned_update(&theta, &batch).unwrap();
        encode(&target, &theta, n, &AdamConfig::default(), seed + 50).unwrap().0.final_r_loss
    };
    let single: Vec<f64> = (0..3).map(|s| planted(1, s)).collect();
    let four: Vec<f64> = (0..3).map(|s| planted(4, s)).collect();
    let real_r: Vec<f64> = real.iter().map(|e| e.r_loss).collect();
    let planted_ok = single.iter().all(|&r| r <= 1e-3);
    let real_ok = real_r.iter().filter(|&&r| r <= 0.1).count() >= 2;
    outcome(
        planted_ok && real_ok,
        format!(
            "planted 1-datum r_loss {} (limit 1e-3); real 10-step r_loss {} (limit 0.1, 2 of 3); \
             planted 4-datum r_loss {} (not gated)",
            fmt_list(&single),
            fmt_list(&real_r),
            fmt_list(&four)
        ),
    )
}

fn gamma_invariant(real: &[RealEncode]) -> Outcome {
    let mut worst = 0.0f64;
    for e in real {
        let want = e.u_real.layer_norms();
        let got = e.decoded.layer_norms();
        for (l, (w, g)) in want.iter().zip(&got).enumerate() {
            if !e.dead.contains(&l) {
                worst = worst.max((w - g).abs() / w);
            }
        }
    }
    outcome(worst <= 1e-9, format!("worst per-layer norm relative error {worst:.2e} (limit 1e-9)"))
}

fn trend_data() -> tofu_core::data::Dataset {
    make_dataset(
        &DataSpec {
            dim: 16,
            ..DataSpec::default()
        },
        0,
    )
    .unwrap()
}

fn trend_config(mode: Mode, adam: AdamConfig) -> FedConfig {
    FedConfig {
        num_clients: 4,
        synfreq: Synfreq::Minibatches(1),
        nimgs: 16,
        down_nimgs: None,
        switch1: 21,
        switch2: 26,
        max_rounds: 30,
        batch_size: 32,
        sgd: SgdConfig::default(),
        adam,
        seed: 0,
        mode,
        broadcast_per_client: false,
    }
}

fn sync_invariant() -> Outcome {
    let adam = AdamConfig {
        max_iters: 100,
        decay_iters: vec![40, 60, 80],
        ..AdamConfig::default()
    };
    let cfg = FedConfig {
        switch1: 8,
        switch2: 16,
        max_rounds: 20,
        ..trend_config(Mode::Tofu, adam)
    };
    let spec = MlpSpec::new(vec![16, 48, 48, 4], 0).unwrap();
    let mut fed = Federation::new(cfg, spec, &trend_data()).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        if let Err(e) = fed.run_round() {
            return outcome(false, format!("round failed: {e}"));
        }
        for c in fed.clients() {
            worst = worst.max(c.theta.max_abs_diff(&fed.server().theta).unwrap());
        }
    }
    outcome(worst == 0.0, format!("4 clients, 20 rounds, max inf-norm difference {worst:e}"))
}

fn best(records: &[RoundRecord]) -> f64 {
    records.iter().map(|r| r.accuracy).fold(0.0, f64::max)
}

fn federated_trend() -> Outcome {
    let data = trend_data();
    let spec = MlpSpec::new(vec![16, 48, 48, 4], 0).unwrap();
    let run = |mode| {
        let mut fed = Federation::new(trend_config(mode, AdamConfig::default()), spec.clone(), &data).unwrap();
        fed.run::<Vec<u8>>(None).unwrap()
    };
    let fedavg = run(Mode::Fedavg);
    let tofu = run(Mode::Tofu);
    let cfg = trend_config(Mode::Tofu, AdamConfig::default());
    let a_star = best(&fedavg);
    let synthetic = &tofu[..cfg.switch2 - 1];
    let plateau = best(synthetic);
    let recovered = best(&tofu);
    let phase3 = tofu.iter().filter(|r| r.phase == 3).count();
    let payload = tofu_payload_scalars(&PayloadSpec {
        nimgs: cfg.nimgs,
        input_dim: 16,
        class_count: 4,
        layer_count: spec.num_layers(),
        param_count: spec.param_count(),
    });
    let size_ratio = spec.param_count() as f64 / payload as f64;
    let eff = efficiency_ratio(&fedavg, &tofu, plateau);
    let eff_ok = matches!(eff, Efficiency::Ratio(r) if r >= 2.0);
    let pass = spec.param_count() <= 5000
        && size_ratio >= 4.0
        && plateau >= a_star - 0.05
        && phase3 <= 5
        && recovered >= a_star - 0.01
        && eff_ok;
    outcome(
        pass,
        format!(
            "P={} P/payload={size_ratio:.1}; A*={a_star:.4}; synthetic plateau {plateau:.4} (>= A*-0.05); \
             after {phase3} full rounds {recovered:.4} (>= A*-0.01); efficiency at plateau {} (>= 2.0)",
            spec.param_count(),
            match eff {
                Efficiency::Ratio(r) => format!("{r:.2}"),
                other => format!("{other:?}"),
            }
        ),
    )
}

fn payload_arithmetic() -> Outcome {
    let s = tofu_payload_scalars(&PayloadSpec {
        nimgs: 64,
        input_dim: 3072,
        class_count: 10,
        layer_count: 13,
        param_count: 9_400_000,
    });
    let ratio = 9.4e6 / s as f64;
    outcome(
        s == 197_326 && (40.0..=55.0).contains(&ratio),
        format!("{s} scalars, ratio {ratio:.2} (range [40, 55])"),
    )
}

const ATTACK_CONFIG: &str = "\
mode = \"attack\"
num_clients = 4
max_rounds = 1
dataset = \"blobs\"
input_dim = 16
hidden = [48]
nimgs = 16
synfreq = 4
";

fn leakage() -> Outcome {
    let mut raw = Vec::new();
    let mut ratios = Vec::new();
    for seed in 0..3 {
        let cfg = parse_config(&format!("{ATTACK_CONFIG}seed = {seed}\n")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = runner::run(&cfg, dir.path()).unwrap().attack.unwrap();
        raw.push(a.raw.nearest_datum_mse.iter().copied().fold(0.0, f64::max));
        ratios.push(a.mse_ratio);
    }
    outcome(
        raw.iter().all(|&m| m <= 1e-2) && ratios.iter().all(|&r| r >= 10.0),
        format!(
            "raw single-datum mse {} (limit 1e-2); payload/raw mse ratio {} (limit 10)",
            fmt_list(&raw),
            fmt_list(&ratios)
        ),
    )
}

const DETERMINISM_CONFIG: &str = "\
max_rounds = 4
switch1 = 2
switch2 = 4
dataset = \"moons\"
classes = 2
samples = 200
hidden = [10]
nimgs = 4
syn_iters = 60
syn_decay_iters = [20, 40, 50]
attack_iters = 200
";

fn determinism() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for (mode, k) in [("train", 1), ("fedavg", 3), ("tofu", 3), ("attack", 3)] {
        let cfg = parse_config(&format!("{DETERMINISM_CONFIG}mode = \"{mode}\"\nnum_clients = {k}\n")).unwrap();
        let bytes = || {
            let dir = tempfile::tempdir().unwrap();
            runner::run(&cfg, dir.path()).unwrap();
            std::fs::read(dir.path().join(runner::METRICS_FILE)).unwrap()
        };
        let same = bytes() == bytes();
        pass &= same;
        notes.push(format!("{mode} {}", if same { "identical" } else { "DIFFERENT" }));
    }
    outcome(pass, notes.join(", "))
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.2e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let real = real_encodes();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("1 double-backprop vs finite differences", Box::new(double_backprop)),
        ("2 weighted-loss linearity", Box::new(linearity)),
        ("3 encode fidelity", Box::new(|| encode_fidelity(&real))),
        ("4 scaling-ratio norm invariant", Box::new(|| gamma_invariant(&real))),
        ("5 sync invariant", Box::new(sync_invariant)),
        ("6 scaled federated trend", Box::new(federated_trend)),
        ("7 payload arithmetic", Box::new(payload_arithmetic)),
        ("8 leakage contrast", Box::new(leakage)),
        ("9 determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let t = Instant::now();
        let o = check();
        failed += usize::from(!o.pass);
        println!(
            "[{}] {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!(
        "{} of {} criteria passed in {:.1}s",
        criteria.len() - failed,
        criteria.len(),
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
