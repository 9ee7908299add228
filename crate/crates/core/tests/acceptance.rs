//! Acceptance suite: one check per criterion, run in order on one thread so
//! the time budgets measure the work alone.
//!
//! `cargo test --test acceptance` runs everything; `cargo test --test
//! acceptance -- 1 7` runs the listed criteria only. Each criterion prints a
//! single PASS/FAIL line and the process fails if any criterion fails.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use atomtune::analysis::{cost_report, expansion_decompose, stability_duel, DuelConfig, PolyLayer, ScaledAtom, EXPANSION_TOL};
use atomtune::attention::{
    adapted_attention_forward, adapter_forward, attention_forward, composite_dictionary_view, head_mean,
    lowrank_adapted_forward, AdapterForm, AdapterWeights, AttentionLayer, AttentionWeights, LowRankAdapter, Projection,
    SparseAdapter,
};
use atomtune::config::FlatConfig;
use atomtune::experiment::{self, random_fixture, verify_fixture, Command, ExperimentConfig};
use atomtune::rng::SplitMix64;
use atomtune::sparse::{
    density, ista_solve, ortho_penalty, soft_threshold, top_k_rows, ActivationPolicy, IstaVariant, SparseCodeProblem,
};
use atomtune::tasks::{gaussian_kl, synth_digits, DigitVae, SignalModel, SignalModelConfig, VaeConfig};
use atomtune::tensor::gradcheck::check_gradients;
use atomtune::tensor::Parameterized;
use atomtune::train::{finetune_signal, finetune_vae_dictionary, pretrain_signal, FreezePolicy, RunReport, TrainConfig};
use atomtune::{Tape, Tensor, Var};

// Pinned tolerances and thresholds.
const COMPOSITE_TOL: f32 = 1e-5;
const PROX_GRID_TOL: f64 = 1e-3;
const ORTHONORMAL_ISTA_TOL: f32 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_EPS: f32 = 1e-3;
const FOURIER_MIN_REDUCTION: f64 = 10.0;
const DIGIT_MIN_REDUCTION: f64 = 2.0;
const DIGIT_MAX_ATOMS: usize = 25;
const DIGIT_MASS_FRACTION: f64 = 0.95;
const DUEL_MIN_WINS: usize = 4;
/// Training-context loss must stay below this fraction of the target's mean power.
const DUEL_TRAIN_FRACTION: f64 = 0.25;

type Check = Result<String, String>;

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria = [
        Criterion { id: 1, name: "cost formulas", budget: Duration::from_secs(1), run: cost_formulas },
        Criterion { id: 2, name: "composite dictionary view", budget: Duration::from_secs(10), run: composite_view },
        Criterion { id: 3, name: "prox correctness", budget: Duration::from_secs(30), run: prox_correctness },
        Criterion { id: 4, name: "gradient suite", budget: Duration::from_secs(120), run: gradient_suite },
        Criterion { id: 5, name: "fourier transfer", budget: Duration::from_secs(600), run: fourier_transfer },
        Criterion { id: 6, name: "digit transfer", budget: Duration::from_secs(900), run: digit_transfer },
        Criterion { id: 7, name: "stability duel", budget: Duration::from_secs(300), run: duel },
        Criterion { id: 8, name: "perturbation expansion", budget: Duration::from_secs(10), run: expansion },
        Criterion { id: 9, name: "sparsity contracts", budget: Duration::from_secs(60), run: sparsity_contracts },
        Criterion { id: 10, name: "reproducibility", budget: Duration::MAX, run: reproducibility },
    ];
    let mut failed = 0;
    for c in criteria.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let outcome = (c.run)();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > c.budget => Err(format!("{detail}; over the {:?} budget", c.budget)),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += outcome.is_err() as usize;
        let mut err = std::io::stderr();
        let _ = writeln!(err, "[{tag}] criterion {:>2} {}: {detail} ({:.1} s)", c.id, c.name, took.as_secs_f64());
    }
    if failed > 0 {
        let _ = writeln!(std::io::stderr(), "{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

// 1

fn cost_formulas() -> Check {
    let r = cost_report(1024, 1024, 256, 16, 1024, 0.01);
    let got = [r.sparse.storage_params, r.sparse.flops, r.low_rank.storage_params, r.low_rank.flops];
    let ok = r.sparse.storage_params.floor() == 264_765.0
        && (r.sparse.flops / 1e4).round() == 54_224.0
        && r.low_rank.storage_params == 131_072.0
        && (r.low_rank.flops / 1e4).round() == 13_422.0;
    ensure(ok, format!("sparse storage {} flops {}, low-rank params {} flops {}", got[0], got[1], got[2], got[3]))
}

// 2

fn composite_view() -> Check {
    let mut worst = 0.0f32;
    for seed in 0..200u64 {
        let mut rng = SplitMix64::new(seed);
        let heads = [1, 2, 4][rng.below(3)];
        let n = 1 + rng.below(16);
        let c_in = 1 + rng.below(12);
        let layer = AttentionLayer::random(c_in, heads * (1 + rng.below(4)), heads, &mut rng).map_err(|e| e.to_string())?;
        let x = Tensor::randn(&[n, c_in], 1.0, &mut rng);
        let (o, _) = attention_forward(&layer, &x).map_err(|e| e.to_string())?;
        let (coeffs, atoms) = composite_dictionary_view(&layer, &x).map_err(|e| e.to_string())?;
        worst = worst.max(coeffs.matmul(&atoms).map_err(|e| e.to_string())?.max_abs_diff(&o));
    }
    ensure(worst < COMPOSITE_TOL, format!("200 instances, max abs error {worst:e}"))
}

// 3

fn grid_prox(x: f64, lambda: f64) -> f64 {
    let f = |z: f64| 0.5 * (z - x).powi(2) + lambda * z.abs();
    let lo = x.min(0.0) - 0.5;
    let steps = ((x.abs() + 1.0) / 1e-4) as usize;
    (0..=steps).map(|i| lo + i as f64 * 1e-4).min_by(|a, b| f(*a).total_cmp(&f(*b))).unwrap()
}

fn orthonormal_rows(m: usize, c: usize, rng: &mut SplitMix64) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < m {
        let mut v: Vec<f64> = (0..c).map(|_| rng.normal() as f64).collect();
        for r in &rows {
            let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        rows.push(v.into_iter().map(|a| a / n).collect());
    }
    Tensor::from_rows(&rows.iter().map(|r| r.iter().map(|&a| a as f32).collect()).collect::<Vec<_>>()).unwrap()
}

fn prox_correctness() -> Check {
    let mut rng = SplitMix64::new(3);
    let mut grid_err = 0.0f64;
    for _ in 0..1000 {
        let x = rng.uniform(-3.0, 3.0);
        let lambda = rng.uniform(0.0, 1.5);
        let got = soft_threshold(&Tensor::scalar(x), lambda).map_err(|e| e.to_string())?.item() as f64;
        grid_err = grid_err.max((got - grid_prox(x as f64, lambda as f64)).abs());
    }
    let mut closed_err = 0.0f32;
    for seed in 0..20 {
        let mut rng = SplitMix64::new(100 + seed);
        let m = 1 + rng.below(6);
        let d = orthonormal_rows(m, m + rng.below(3), &mut rng);
        let x = Tensor::randn(&[4, d.cols()], 1.0, &mut rng);
        let lambda = rng.uniform(0.05, 0.5);
        let p = SparseCodeProblem { signal: x.clone(), dictionary: d.clone(), lambda, max_iters: 5000, tol: 1e-12, variant: IstaVariant::Ista };
        let (s, _) = ista_solve(&p).map_err(|e| e.to_string())?;
        let closed = soft_threshold(&x.matmul(&d.transpose().unwrap()).unwrap(), lambda).unwrap();
        closed_err = closed_err.max(s.max_abs_diff(&closed));
    }
    let mut monotone = 0;
    for seed in 0..50 {
        let mut rng = SplitMix64::new(500 + seed);
        let p = SparseCodeProblem {
            signal: Tensor::randn(&[3, 6], 1.0, &mut rng),
            dictionary: Tensor::randn(&[9, 6], 1.0, &mut rng),
            lambda: rng.uniform(0.01, 0.5),
            max_iters: 500,
            tol: 1e-12,
            variant: IstaVariant::Ista,
        };
        let (_, rep) = ista_solve(&p).map_err(|e| e.to_string())?;
        monotone += rep.objective_history.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs()) as usize;
    }
    ensure(
        grid_err < PROX_GRID_TOL && closed_err < ORTHONORMAL_ISTA_TOL && monotone == 50,
        format!("grid error {grid_err:.2e}, orthonormal ISTA error {closed_err:.2e}, monotone {monotone}/50"),
    )
}

// 4

/// Values at least `margin` away from every point in `kinks`.
fn away_from(rng: &mut SplitMix64, shape: &[usize], kinks: &[f32], margin: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.uniform(-1.5, 1.5);
            if kinks.iter().all(|k| (v - k).abs() >= margin) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Rows whose magnitudes are distinct and spaced so top-k picks are stable.
fn spaced_rows(rng: &mut SplitMix64, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let mut mags: Vec<f32> = (0..cols).map(|i| 0.2 + 0.15 * i as f32).collect();
        rng.shuffle(&mut mags);
        data.extend(mags.into_iter().map(|m| if rng.coin() { m } else { -m }));
    }
    Tensor::new(&[rows, cols], data).unwrap()
}

fn adapted_composite(
    layer: &AttentionLayer,
    activation: ActivationPolicy,
    form: AdapterForm,
) -> impl Fn(&mut Tape, &[Var]) -> atomtune::Result<Var> + '_ {
    move |t, v| {
        let w = AttentionWeights { q: v[1], k: v[2], v: v[3], o: v[4] };
        let base = layer.attend(t, &w, v[0])?;
        let a = head_mean(t, base.maps, layer.heads)?;
        let m = t.shape(v[5])[1];
        let adapter = SparseAdapter::from_parts(Tensor::zeros(&[layer.c_in(), m]), Tensor::zeros(&[m, layer.c_out()]), activation, form)?;
        let delta = adapter.apply(t, &AdapterWeights { w_s: v[5], d: v[6] }, v[0], a)?.delta;
        t.add(base.out, delta)
    }
}

fn gradient_suite() -> Check {
    let mut rng = SplitMix64::new(4);
    let mut r = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> atomtune::Result<Var>>);
    let mut cases: Vec<Case> = vec![
        ("matmul", vec![r(&[2, 3, 4]), r(&[4, 5])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("bmm", vec![r(&[2, 3, 4]), r(&[2, 4, 2])], Box::new(|t, v| t.bmm(v[0], v[1]))),
        ("bmm_nt", vec![r(&[2, 3, 4]), r(&[2, 5, 4])], Box::new(|t, v| t.bmm_nt(v[0], v[1]))),
        ("add", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("add_broadcast", vec![r(&[2, 3, 4]), r(&[3, 4])], Box::new(|t, v| t.add_broadcast(v[0], v[1]))),
        ("scale", vec![r(&[3, 4])], Box::new(|t, v| t.scale(v[0], -0.7))),
        ("exp", vec![r(&[3, 4])], Box::new(|t, v| t.exp(v[0]))),
        ("sigmoid", vec![r(&[3, 4])], Box::new(|t, v| t.sigmoid(v[0]))),
        ("transpose", vec![r(&[3, 4])], Box::new(|t, v| t.transpose(v[0]))),
        ("reshape", vec![r(&[3, 4])], Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        ("sum", vec![r(&[3, 4])], Box::new(|t, v| t.sum(v[0]))),
        ("mean", vec![r(&[3, 4])], Box::new(|t, v| t.mean(v[0]))),
        ("sum_axis", vec![r(&[2, 3, 4])], Box::new(|t, v| t.sum_axis(v[0], 1))),
        ("mean_axis", vec![r(&[2, 3, 4])], Box::new(|t, v| t.mean_axis(v[0], 2))),
        ("softmax", vec![r(&[2, 3, 5])], Box::new(|t, v| t.softmax(v[0]))),
        ("layer_norm", vec![r(&[3, 6])], Box::new(|t, v| t.layer_norm(v[0], 1e-5))),
        ("split_heads", vec![r(&[2, 3, 4])], Box::new(|t, v| t.split_heads(v[0], 2))),
        ("merge_heads", vec![r(&[4, 3, 2])], Box::new(|t, v| t.merge_heads(v[0], 2))),
        ("ortho_penalty", vec![r(&[4, 5])], Box::new(|t, v| ortho_penalty(t, v[0]))),
    ];
    let mut rng = SplitMix64::new(5);
    let positive = Tensor::new(&[3, 4], (0..12).map(|_| rng.uniform(0.3, 2.0)).collect()).unwrap();
    cases.push(("log", vec![positive], Box::new(|t, v| t.log(v[0]))));
    cases.push(("relu", vec![away_from(&mut rng, &[3, 4], &[0.0], 0.05)], Box::new(|t, v| t.relu(v[0]))));
    cases.push((
        "soft_threshold",
        vec![away_from(&mut rng, &[3, 4], &[-0.3, 0.0, 0.3], 0.05)],
        Box::new(|t, v| t.soft_threshold(v[0], 0.3)),
    ));
    cases.push((
        "shifted_relu",
        vec![away_from(&mut rng, &[3, 4], &[0.3], 0.05)],
        Box::new(|t, v| t.shifted_relu(v[0], 0.3)),
    ));
    cases.push(("top_k", vec![spaced_rows(&mut rng, 3, 6)], Box::new(|t, v| t.top_k(v[0], 2))));

    let eps = Tensor::randn(&[3, 2], 1.0, &mut rng);
    let target = Tensor::randn(&[3, 2], 1.0, &mut rng);
    cases.push((
        "vae reparameterization + kl",
        vec![Tensor::randn(&[3, 2], 0.5, &mut rng), Tensor::randn(&[3, 2], 0.5, &mut rng)],
        Box::new(move |t, v| {
            let e = t.constant(eps.clone());
            let half = t.scale(v[1], 0.5)?;
            let std = t.exp(half)?;
            let jitter = t.mul(std, e)?;
            let z = t.add(v[0], jitter)?;
            let tg = t.constant(target.clone());
            let d = t.sub(z, tg)?;
            let sq = t.mul(d, d)?;
            let rec = t.mean(sq)?;
            let kl = gaussian_kl(t, v[0], v[1])?;
            t.add(rec, kl)
        }),
    ));

    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    for (name, inputs, f) in &cases {
        let rep = check_gradients(inputs, GRAD_EPS, f).map_err(|e| format!("{name}: {e}"))?;
        if rep.max_rel_err > worst.0 {
            worst = (rep.max_rel_err, name);
        }
        if rep.max_rel_err >= GRAD_REL_TOL {
            failures.push(format!("{name} {:.2e}", rep.max_rel_err));
        }
    }

    // Full adapted attention, every weight a gradient input.
    let mut composites = 0;
    for (seed, activation, form) in [
        (6, ActivationPolicy::SoftThreshold { lambda: 0.02 }, AdapterForm::Formulation),
        (7, ActivationPolicy::ShiftedRelu { lambda: 0.02 }, AdapterForm::Implementation),
        (8, ActivationPolicy::TopK { k: 2 }, AdapterForm::Implementation),
    ] {
        let mut rng = SplitMix64::new(seed);
        let layer = AttentionLayer::random(4, 4, 2, &mut rng).unwrap();
        let inputs = vec![
            Tensor::randn(&[2, 3, 4], 1.0, &mut rng),
            layer.w_q.clone(),
            layer.w_k.clone(),
            layer.w_v.clone(),
            layer.w_o.clone(),
            Tensor::randn(&[4, 5], 1.0, &mut rng),
            Tensor::randn(&[5, 4], 1.0, &mut rng),
        ];
        let rep = check_gradients(&inputs, GRAD_EPS, adapted_composite(&layer, activation, form)).map_err(|e| e.to_string())?;
        composites += 1;
        if rep.max_rel_err > worst.0 {
            worst = (rep.max_rel_err, "adapted attention");
        }
        if rep.max_rel_err >= GRAD_REL_TOL {
            failures.push(format!("adapted attention {} {:.2e}", activation.kind_name(), rep.max_rel_err));
        }
    }
    ensure(
        failures.is_empty(),
        format!(
            "{} ops + {composites} adapted-attention composites, worst {:.2e} ({}){}",
            cases.len(),
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    )
}

// 5 and 6 run the committed experiment configs end to end.

fn execute(config: &str, out: &Path, overrides: &[(&str, String)]) -> Result<RunReport, String> {
    let mut cfg = ExperimentConfig::load(Command::Run, &repo_path(config), out.to_path_buf(), None).map_err(|e| e.to_string())?;
    for (k, v) in overrides {
        cfg.params.set(k, v);
    }
    let outcome = experiment::execute(&cfg).map_err(|e| format!("{config}: {e}"))?;
    if let Some(f) = outcome.failure {
        return Err(format!("{config}: {f}"));
    }
    let text = std::fs::read_to_string(out.join("summary.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn fourier_transfer() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in [0u64, 1, 2] {
        let pre = tmp.path().join(format!("pre{seed}"));
        execute("configs/fourier_pretrain.cfg", &pre, &[("seed", seed.to_string())])?;
        let snap = ("snapshot", pre.display().to_string());
        let atoms = execute("configs/fourier_finetune_atoms.cfg", &tmp.path().join(format!("a{seed}")), &[("seed", seed.to_string()), snap.clone()])?;
        let coeffs = execute("configs/fourier_finetune_coeffs.cfg", &tmp.path().join(format!("c{seed}")), &[("seed", seed.to_string()), snap])?;
        let reduction = atoms.initial_eval_loss / atoms.final_eval_loss;
        ok &= atoms.final_eval_loss < coeffs.final_eval_loss && reduction >= FOURIER_MIN_REDUCTION;
        lines.push(format!(
            "seed {seed}: frozen {:.4}, atoms-only {:.4} ({reduction:.2}x), coefficients-only {:.4}",
            atoms.initial_eval_loss, atoms.final_eval_loss, coeffs.final_eval_loss
        ));
    }
    ensure(ok, format!("{}; need atoms-only < coefficients-only and >= {FOURIER_MIN_REDUCTION}x", lines.join("; ")))
}

fn digit_transfer() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let pre = tmp.path().join("pre");
    execute("configs/vae_pretrain.cfg", &pre, &[])?;
    let ft_dir = tmp.path().join("ft");
    let ft = execute("configs/vae_finetune.cfg", &ft_dir, &[("snapshot", pre.display().to_string())])?;
    let mass: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ft_dir.join("atom_mass.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let per_layer: Vec<usize> = mass["layers"]
        .as_array()
        .ok_or("atom_mass.json has no layers")?
        .iter()
        .map(|l| l["atoms_for_mass"].as_u64().unwrap_or(u64::MAX) as usize)
        .collect();
    let reduction = ft.initial_eval_loss / ft.final_eval_loss;
    let worst = per_layer.iter().copied().max().unwrap_or(usize::MAX);
    ensure(
        reduction >= DIGIT_MIN_REDUCTION && worst <= DIGIT_MAX_ATOMS && (mass["mass_fraction"].as_f64() == Some(DIGIT_MASS_FRACTION)),
        format!(
            "frozen {:.4} -> {:.4} ({reduction:.2}x, need >= {DIGIT_MIN_REDUCTION}x); atoms for 95% mass per layer {per_layer:?} (need <= {DIGIT_MAX_ATOMS})",
            ft.initial_eval_loss, ft.final_eval_loss
        ),
    )
}

// 7

fn duel() -> Check {
    let cfg = FlatConfig::load(&repo_path("configs/duel.cfg")).map_err(|e| e.to_string())?;
    let seeds: Vec<u64> = cfg.get_list("seeds").map_err(|e| e.to_string())?.unwrap_or_default();
    let base = DuelConfig {
        steps: cfg.get_or("steps", DuelConfig::default().steps).map_err(|e| e.to_string())?,
        lr: cfg.get_or("lr", DuelConfig::default().lr).map_err(|e| e.to_string())?,
        probe_noise: cfg.get_or("probe_noise", DuelConfig::default().probe_noise).map_err(|e| e.to_string())?,
        ..DuelConfig::default()
    };
    let (mut wins, mut fitted, mut support) = (0, true, true);
    let mut lines = Vec::new();
    for &seed in &seeds {
        let r = stability_duel(&DuelConfig { seed, ..base.clone() }).map_err(|e| e.to_string())?;
        let bar = DUEL_TRAIN_FRACTION * r.target_power;
        wins += r.sparse_wins() as usize;
        fitted &= r.sparse.train_loss <= bar && r.low_rank.train_loss <= bar;
        support &= r.support_ok;
        lines.push(format!(
            "seed {seed}: probe {:.3} vs {:.3}, train {:.4}/{:.4} (bar {bar:.3})",
            r.sparse.probe_loss, r.low_rank.probe_loss, r.sparse.train_loss, r.low_rank.train_loss
        ));
    }
    ensure(
        seeds.len() == 5 && wins >= DUEL_MIN_WINS && fitted && support,
        format!("sparse wins {wins}/{}; {}", seeds.len(), lines.join("; ")),
    )
}

// 8

fn expansion() -> Check {
    let summary = verify_fixture(&random_fixture(8, 500, 100)).map_err(|e| e.to_string())?;
    let mut rejected = 0;
    for seed in 0..50u64 {
        let mut rng = SplitMix64::new(seed);
        let dim = 2 + rng.below(7);
        let shared = rng.below(dim);
        let atom = |rng: &mut SplitMix64| {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.uniform(0.1, 1.0) as f64).collect();
            v[shared] = 1.0;
            ScaledAtom::new(1.0, v)
        };
        let atoms = [atom(&mut rng), atom(&mut rng)];
        let poly = PolyLayer::new(vec![1.0, 0.5]).unwrap();
        rejected += expansion_decompose(&poly, &vec![0.0; dim], &atoms).is_err() as usize;
    }
    ensure(
        summary.single_residuals.len() == 500
            && summary.two_layer_residuals.len() == 100
            && summary.max_residual < EXPANSION_TOL
            && rejected == 50,
        format!(
            "{} single + {} two-layer cases, max residual {:.2e}; non-orthogonal rejected {rejected}/50",
            summary.single_residuals.len(),
            summary.two_layer_residuals.len(),
            summary.max_residual
        ),
    )
}

// 9

fn params_of(model: &dyn Parameterized) -> Vec<(String, Vec<f32>)> {
    let mut out = Vec::new();
    model.visit_params(&mut |n, t| out.push((n.to_string(), t.data().to_vec())));
    out
}

/// Every parameter of `before` outside the `trainable` prefixes is bit-identical in `after`.
fn frozen_unchanged(before: &dyn Parameterized, after: &dyn Parameterized, trainable: &[&str]) -> bool {
    let after = params_of(after);
    params_of(before).into_iter().all(|(name, data)| {
        trainable.iter().any(|p| name.starts_with(p)) || after.iter().any(|(n, a)| *n == name && *a == data)
    })
}

/// At least one `trainable` parameter actually moved.
fn trained(before: &dyn Parameterized, after: &dyn Parameterized, trainable: &[&str]) -> bool {
    let before = params_of(before);
    params_of(after)
        .into_iter()
        .any(|(n, a)| trainable.contains(&n.as_str()) && before.iter().any(|(m, b)| *m == n && *b != a))
}

fn sparsity_contracts() -> Check {
    let mut rng = SplitMix64::new(9);
    let mut exact_density = true;
    for _ in 0..100 {
        let m = 2 + rng.below(30);
        let k = 1 + rng.below(m);
        let n = 1 + rng.below(10);
        let layer = AttentionLayer::random(6, 4, 2, &mut rng).unwrap();
        let x = Tensor::randn(&[n, 6], 1.0, &mut rng);
        let adapter = SparseAdapter::new(6, 4, m, ActivationPolicy::TopK { k }, AdapterForm::Formulation, &mut rng).unwrap();
        let (_, maps) = attention_forward(&layer, &x).unwrap();
        let a = maps[0].add(&maps[1]).unwrap().scale(0.5);
        let r = adapter_forward(&adapter, &x, &a).map_err(|e| e.to_string())?;
        exact_density &= density(&r.codes) == k as f64 / m as f64;
        exact_density &= density(&top_k_rows(&Tensor::randn(&[n, m], 1.0, &mut rng), k).unwrap()) == k as f64 / m as f64;
    }

    let layer = AttentionLayer::random(6, 4, 2, &mut rng).unwrap();
    let x = Tensor::randn(&[7, 6], 1.0, &mut rng);
    let (o, _) = attention_forward(&layer, &x).unwrap();
    let adapter = SparseAdapter::new(6, 4, 10, ActivationPolicy::default(), AdapterForm::Implementation, &mut rng).unwrap();
    let lora = LowRankAdapter::new(&layer, 2, &Projection::ALL, &mut rng).unwrap();
    let mut zero_init = adapted_attention_forward(&layer, &adapter, &x).unwrap().data() == o.data();
    zero_init &= lowrank_adapted_forward(&layer, &lora, &x).unwrap().data() == o.data();

    let vae_cfg = VaeConfig { patch: 14, dim: 8, heads: 2, encoder_layers: 1, decoder_layers: 2, latent: 4, mlp_hidden: 8, kl_weight: 1e-3 };
    let vae = DigitVae::new(vae_cfg, &mut rng).unwrap();
    let threes = synth_digits(9, 16, &[3]).unwrap();
    let train = TrainConfig { epochs: 2, batch_size: 4, eval_size: 4, atoms: 6, ..Default::default() };
    let (tuned0, _) = finetune_vae_dictionary(&threes, &vae, 6, &TrainConfig { epochs: 0, ..train.clone() }).map_err(|e| e.to_string())?;
    let probe = threes.batch(&[0, 1, 2]).unwrap();
    zero_init &= tuned0.reconstruct(&probe).unwrap().data() == vae.reconstruct(&probe).unwrap().data();

    let (tuned, _) = finetune_vae_dictionary(&threes, &vae, 6, &train).map_err(|e| e.to_string())?;
    let mut frozen = frozen_unchanged(&vae, &tuned, &[]);
    let cfg = SignalModelConfig { length: 16, channels: 6, heads: 2, atoms: 10, ..Default::default() };
    let mut signal = SignalModel::new(cfg, &mut rng).unwrap();
    let spec = atomtune::tasks::FourierTaskSpec { length: 16, num_bases: 2, freq_band: (0, 4), mask_observed: 6, seed: 9 };
    let short = TrainConfig { epochs: 1, batch_size: 8, batches_per_epoch: 3, eval_size: 8, atoms: 10, ..Default::default() };
    pretrain_signal(&spec, &mut signal, &short).map_err(|e| e.to_string())?;
    let high = atomtune::tasks::FourierTaskSpec { freq_band: (5, 8), ..spec };
    for (policy, trainable) in [
        (FreezePolicy::AtomsOnly, vec!["adapter.d"]),
        (FreezePolicy::CoefficientsOnly, vec!["adapter.w_s"]),
        (FreezePolicy::Both, vec!["adapter.d", "adapter.w_s"]),
    ] {
        let (tuned, _) = finetune_signal(&high, &signal, policy, &TrainConfig { epochs: 2, ..short.clone() }).map_err(|e| e.to_string())?;
        frozen &= frozen_unchanged(&signal, &tuned, &trainable);
        frozen &= trained(&signal, &tuned, &trainable);
    }
    ensure(
        exact_density && zero_init && frozen,
        format!("top-k density exact: {exact_density}; zero-init bit-identical: {zero_init}; frozen weights bit-identical: {frozen}"),
    )
}

// 10

fn reproducibility() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut histories = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        execute("configs/smoke_pretrain.cfg", &dir, &[])?;
        let ft = tmp.path().join(format!("{run}_ft"));
        execute(
            "configs/smoke_finetune.cfg",
            &ft,
            &[("snapshot", dir.display().to_string())],
        )?;
        let read = |p: PathBuf| std::fs::read(p).map_err(|e| e.to_string());
        histories.push((read(dir.join("history.csv"))?, read(ft.join("history.csv"))?));
    }
    ensure(
        histories[0] == histories[1],
        format!(
            "smoke pretrain ({} bytes) and fine-tune ({} bytes) histories byte-identical: {}",
            histories[0].0.len(),
            histories[0].1.len(),
            histories[0] == histories[1]
        ),
    )
}
