use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::params::{self, keys, FOURIER_KEYS, SIGNAL_MODEL_KEYS, TRAIN_KEYS};
use super::run::{digit_probe, load_vae, CONFIG_ECHO};
use crate::analysis::{
    ablation_sweep, atom_influence, cost_report, expansion_decompose, expansion_two_layer, selected_atom_map,
    stability_duel, DuelConfig, PolyLayer, ScaledAtom, SweepAxis, SweepConfig, EXPANSION_TOL,
};
use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tasks::FourierTaskSpec;
use crate::tensor::{write_tensor, Tensor};
use crate::train::FreezePolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyzeKind {
    Cost,
    Influence,
    SelectAtoms,
    Duel,
    ExpansionVerify,
    Sweep,
}

impl AnalyzeKind {
    pub const ALL: [AnalyzeKind; 6] = [
        AnalyzeKind::Cost,
        AnalyzeKind::Influence,
        AnalyzeKind::SelectAtoms,
        AnalyzeKind::Duel,
        AnalyzeKind::ExpansionVerify,
        AnalyzeKind::Sweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnalyzeKind::Cost => "cost",
            AnalyzeKind::Influence => "influence",
            AnalyzeKind::SelectAtoms => "select-atoms",
            AnalyzeKind::Duel => "duel",
            AnalyzeKind::ExpansionVerify => "expansion-verify",
            AnalyzeKind::Sweep => "sweep",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown analysis `{s}`")))
    }
}

/// One single-layer expansion check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleCase {
    /// `coeffs[k-1]` multiplies `x^k`.
    pub coeffs: Vec<f64>,
    pub x: Vec<f64>,
    pub atoms: Vec<ScaledAtom>,
}

/// One stacked two-layer expansion check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoLayerCase {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub x: Vec<f64>,
    pub previous: Vec<ScaledAtom>,
    pub current: Vec<ScaledAtom>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpansionFixture {
    #[serde(default)]
    pub single: Vec<SingleCase>,
    #[serde(default)]
    pub two_layer: Vec<TwoLayerCase>,
}

fn random_poly(rng: &mut SplitMix64, max_degree: usize) -> Vec<f64> {
    let degree = 1 + rng.below(max_degree);
    (0..degree).map(|_| rng.uniform(-1.0, 1.0) as f64).collect()
}

/// `count` atoms on disjoint random supports of a `dim`-channel space.
fn disjoint_atoms(rng: &mut SplitMix64, dim: usize, count: usize) -> Vec<ScaledAtom> {
    let mut channels: Vec<usize> = (0..dim).collect();
    rng.shuffle(&mut channels);
    let mut owner = vec![usize::MAX; dim];
    for (i, &c) in channels.iter().enumerate() {
        owner[c] = if i < count { i } else { rng.below(count + 1) };
    }
    (0..count)
        .map(|a| {
            let atom = (0..dim).map(|c| if owner[c] == a { rng.uniform(-1.0, 1.0) as f64 } else { 0.0 }).collect();
            ScaledAtom::new(rng.uniform(-1.0, 1.0) as f64, atom)
        })
        .collect()
}

/// Random cases with degree ≤ 4, at most 4 atoms per set and width ≤ 8.
pub fn random_fixture(seed: u64, single: usize, two_layer: usize) -> ExpansionFixture {
    let mut rng = SplitMix64::new(seed);
    let x_of = |rng: &mut SplitMix64, dim| (0..dim).map(|_| rng.uniform(-1.0, 1.0) as f64).collect::<Vec<_>>();
    let single = (0..single)
        .map(|_| {
            let dim = 1 + rng.below(8);
            let count = rng.below(dim.min(4) + 1);
            SingleCase { coeffs: random_poly(&mut rng, 4), x: x_of(&mut rng, dim), atoms: disjoint_atoms(&mut rng, dim, count) }
        })
        .collect();
    let two_layer = (0..two_layer)
        .map(|_| {
            let dim = 2 + rng.below(7);
            let total = 1 + rng.below(dim.min(4));
            let n_prev = rng.below(total + 1);
            let mut atoms = disjoint_atoms(&mut rng, dim, total);
            let current = atoms.split_off(n_prev);
            TwoLayerCase {
                first: random_poly(&mut rng, 2),
                second: random_poly(&mut rng, 2),
                x: x_of(&mut rng, dim),
                previous: atoms,
                current,
            }
        })
        .collect();
    ExpansionFixture { single, two_layer }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionSummary {
    pub cases: usize,
    pub single_residuals: Vec<f64>,
    pub two_layer_residuals: Vec<f64>,
    pub max_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Decomposes every case and collects residuals. Non-orthogonal atom sets
/// are errors.
pub fn verify_fixture(fixture: &ExpansionFixture) -> Result<ExpansionSummary> {
    let single_residuals = fixture
        .single
        .iter()
        .map(|c| Ok(expansion_decompose(&PolyLayer::new(c.coeffs.clone())?, &c.x, &c.atoms)?.residual))
        .collect::<Result<Vec<_>>>()?;
    let two_layer_residuals = fixture
        .two_layer
        .iter()
        .map(|c| {
            let (f, g) = (PolyLayer::new(c.first.clone())?, PolyLayer::new(c.second.clone())?);
            Ok(expansion_two_layer(&f, &g, &c.x, &c.previous, &c.current)?.residual)
        })
        .collect::<Result<Vec<_>>>()?;
    let max_residual = single_residuals.iter().chain(&two_layer_residuals).copied().fold(0.0, f64::max);
    Ok(ExpansionSummary {
        cases: single_residuals.len() + two_layer_residuals.len(),
        single_residuals,
        two_layer_residuals,
        max_residual,
        tolerance: EXPANSION_TOL,
        passed: max_residual < EXPANSION_TOL,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnalyzePlan {
    Cost { c_in: usize, c_out: usize, atoms: usize, rank: usize, tokens: usize, density: f64 },
    Influence { run: PathBuf, layer: usize, inputs: usize, seed: u64 },
    SelectAtoms { run: PathBuf, layer: usize, counts: Vec<usize>, inputs: usize, seed: u64 },
    Duel { config: DuelConfig, seeds: Vec<u64> },
    ExpansionVerify { fixture: ExpansionFixture },
    Sweep { axis: SweepAxis, values: Vec<f64>, config: Box<SweepConfig> },
}

const DUEL_KEYS: &[&str] = &[
    "vocab",
    "embed",
    "tokens",
    "c_out",
    "heads",
    "atoms",
    "steps",
    "lr",
    "probes",
    "probe_noise",
    "freq_band",
    "num_bases",
    "seeds",
];

/// Checks that `run` holds a fine-tuned VAE.
fn vae_run(cfg: &FlatConfig) -> Result<PathBuf> {
    let run = params::require_path(cfg, "run_dir")?;
    let echo = run.join(CONFIG_ECHO);
    if !echo.is_file() {
        return Err(Error::MissingPath(echo));
    }
    match FlatConfig::load(&echo)?.raw("stage") {
        Some("finetune_vae") => Ok(run),
        other => Err(Error::Config(format!(
            "{} is not a finetune_vae run (stage {})",
            run.display(),
            other.unwrap_or("unset")
        ))),
    }
}

pub fn plan(kind: AnalyzeKind, cfg: &FlatConfig) -> Result<AnalyzePlan> {
    let seed = params::seed(cfg)?;
    match kind {
        AnalyzeKind::Cost => {
            cfg.reject_unknown(&["seed", "c_in", "c_out", "atoms", "rank", "tokens", "density"])?;
            let density: f64 = cfg.require("density")?;
            if !(0.0..=1.0).contains(&density) {
                return Err(Error::Config(format!("density must lie in [0, 1], got {density}")));
            }
            Ok(AnalyzePlan::Cost {
                c_in: cfg.require("c_in")?,
                c_out: cfg.require("c_out")?,
                atoms: cfg.require("atoms")?,
                rank: cfg.require("rank")?,
                tokens: cfg.require("tokens")?,
                density,
            })
        }
        AnalyzeKind::Influence => {
            cfg.reject_unknown(&["seed", "run_dir", "layer", "input_count"])?;
            Ok(AnalyzePlan::Influence {
                run: vae_run(cfg)?,
                layer: cfg.get_or("layer", 0)?,
                inputs: cfg.get_or("input_count", 16)?,
                seed,
            })
        }
        AnalyzeKind::SelectAtoms => {
            cfg.reject_unknown(&["seed", "run_dir", "layer", "counts", "input_count"])?;
            Ok(AnalyzePlan::SelectAtoms {
                run: vae_run(cfg)?,
                layer: cfg.get_or("layer", 0)?,
                counts: cfg.get_list("counts")?.unwrap_or_else(|| vec![4, 12, 40]),
                inputs: cfg.get_or("input_count", 16)?,
                seed,
            })
        }
        AnalyzeKind::Duel => {
            cfg.reject_unknown(&keys(&[DUEL_KEYS], &["seed"]))?;
            let d = DuelConfig::default();
            let config = DuelConfig {
                vocab: cfg.get_or("vocab", d.vocab)?,
                embed: cfg.get_or("embed", d.embed)?,
                tokens: cfg.get_or("tokens", d.tokens)?,
                c_out: cfg.get_or("c_out", d.c_out)?,
                heads: cfg.get_or("heads", d.heads)?,
                atoms: cfg.get_or("atoms", d.atoms)?,
                steps: cfg.get_or("steps", d.steps)?,
                lr: cfg.get_or("lr", d.lr)?,
                probes: cfg.get_or("probes", d.probes)?,
                probe_noise: cfg.get_or("probe_noise", d.probe_noise)?,
                freq_band: cfg.get_range("freq_band")?.unwrap_or(d.freq_band),
                num_bases: cfg.get_or("num_bases", d.num_bases)?,
                seed,
            };
            let seeds = cfg.get_list("seeds")?.unwrap_or_else(|| (0..5).collect());
            if seeds.is_empty() {
                return Err(Error::Config("duel needs at least one seed".into()));
            }
            Ok(AnalyzePlan::Duel { config, seeds })
        }
        AnalyzeKind::ExpansionVerify => {
            cfg.reject_unknown(&["seed", "fixture", "cases", "two_layer_cases"])?;
            let fixture = match params::existing_path(cfg, "fixture")? {
                Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
                None => random_fixture(seed, cfg.get_or("cases", 500)?, cfg.get_or("two_layer_cases", 100)?),
            };
            Ok(AnalyzePlan::ExpansionVerify { fixture })
        }
        AnalyzeKind::Sweep => {
            cfg.reject_unknown(&keys(
                &[FOURIER_KEYS, TRAIN_KEYS, SIGNAL_MODEL_KEYS],
                &["seed", "axis", "values", "low_band", "transfer_shift", "policy", "pretrain_epochs", "pretrain_lr"],
            ))?;
            let axis = SweepAxis::parse(&cfg.require::<String>("axis")?)?;
            let values: Vec<f64> = cfg.get_list("values")?.unwrap_or_default();
            if values.is_empty() {
                return Err(Error::Config("sweep needs a non-empty `values` list".into()));
            }
            let high = params::fourier_spec(cfg, FourierTaskSpec::HIGH_BAND)?;
            let low = FourierTaskSpec {
                freq_band: cfg.get_range("low_band")?.unwrap_or(FourierTaskSpec::LOW_BAND),
                ..high.clone()
            };
            low.validate().map_err(|e| Error::Config(e.to_string()))?;
            let finetune = params::train_config(cfg)?;
            let mut pretrain = finetune.clone();
            pretrain.epochs = cfg.get_or("pretrain_epochs", finetune.epochs)?;
            pretrain.optimizer.lr = cfg.get_or("pretrain_lr", finetune.optimizer.lr)?;
            let model = params::signal_model(cfg, &finetune, high.length)?;
            let policy = params::policy(cfg, FreezePolicy::Both)?;
            if policy == FreezePolicy::FullModel {
                return Err(Error::Config("sweep fine-tuning keeps the base model frozen".into()));
            }
            let config = SweepConfig {
                model,
                low,
                high,
                transfer_shift: cfg.get_or("transfer_shift", 8)?,
                pretrain,
                finetune,
                policy,
                seed,
            };
            Ok(AnalyzePlan::Sweep { axis, values, config: Box::new(config) })
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn stack(maps: &[&Tensor]) -> Result<Tensor> {
    let inner = maps.first().map_or(vec![0], |t| t.shape().to_vec());
    let shape: Vec<usize> = std::iter::once(maps.len()).chain(inner).collect();
    Tensor::new(&shape, maps.iter().flat_map(|t| t.data().iter().copied()).collect())
}

fn l1(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v.abs() as f64).sum()
}

impl AnalyzePlan {
    pub fn execute(&self, out: &Path) -> Result<Option<String>> {
        match self {
            AnalyzePlan::Cost { c_in, c_out, atoms, rank, tokens, density } => {
                write_json(&out.join("cost.json"), &cost_report(*c_in, *c_out, *atoms, *rank, *tokens, *density))?;
                Ok(None)
            }
            AnalyzePlan::Influence { run, layer, inputs, seed } => {
                let vae = load_vae(run)?;
                let probe = digit_probe(*seed, *inputs)?;
                let inf = atom_influence(&vae, &probe, *layer)?;
                let mut csv = String::from("atom,importance,l1\n");
                for a in &inf.atoms {
                    let _ = writeln!(csv, "{},{},{}", a.atom, a.importance, l1(&a.contribution));
                }
                std::fs::write(out.join("influence.csv"), csv)?;
                write_tensor(&inf.combined, out.join("combined.atns"))?;
                write_tensor(&stack(&inf.atoms.iter().map(|a| &a.contribution).collect::<Vec<_>>())?, out.join("atoms.atns"))?;
                let atoms: Vec<_> = inf
                    .atoms
                    .iter()
                    .map(|a| json!({ "atom": a.atom, "importance": a.importance, "l1": l1(&a.contribution) }))
                    .collect();
                let summary = json!({
                    "layer": inf.layer,
                    "inputs": inputs,
                    "combined_l1": l1(&inf.combined),
                    "additivity_gap": inf.additivity_gap,
                    "atoms": atoms,
                });
                write_json(&out.join("influence.json"), &summary)?;
                Ok(None)
            }
            AnalyzePlan::SelectAtoms { run, layer, counts, inputs, seed } => {
                let vae = load_vae(run)?;
                let probe = digit_probe(*seed, *inputs)?;
                let mut rows = Vec::with_capacity(counts.len());
                for &count in counts {
                    let (kept, map) = selected_atom_map(&vae, &probe, *layer, count)?;
                    write_tensor(&map, out.join(format!("select_{count}.atns")))?;
                    rows.push(json!({
                        "count": count,
                        "kept": kept,
                        "l1": l1(&map),
                        "max_abs": map.data().iter().fold(0.0f32, |m, v| m.max(v.abs())),
                    }));
                }
                write_json(&out.join("select_atoms.json"), &json!({ "layer": layer, "inputs": inputs, "selections": rows }))?;
                Ok(None)
            }
            AnalyzePlan::Duel { config, seeds } => {
                let reports =
                    seeds.iter().map(|&seed| stability_duel(&DuelConfig { seed, ..config.clone() })).collect::<Result<Vec<_>>>()?;
                let wins = reports.iter().filter(|r| r.sparse_wins()).count();
                let mut csv = String::from("seed,sparse_train,sparse_probe,low_rank_train,low_rank_probe,target_power\n");
                for r in &reports {
                    let _ = writeln!(
                        csv,
                        "{},{},{},{},{},{}",
                        r.seed, r.sparse.train_loss, r.sparse.probe_loss, r.low_rank.train_loss, r.low_rank.probe_loss, r.target_power
                    );
                }
                std::fs::write(out.join("duel.csv"), csv)?;
                write_json(&out.join("duel.json"), &json!({ "config": config, "sparse_wins": wins, "reports": reports }))?;
                Ok(None)
            }
            AnalyzePlan::ExpansionVerify { fixture } => {
                let summary = verify_fixture(fixture)?;
                write_json(&out.join("expansion.json"), &summary)?;
                Ok((!summary.passed).then(|| {
                    format!("max residual {:e} is not below {:e}", summary.max_residual, summary.tolerance)
                }))
            }
            AnalyzePlan::Sweep { axis, values, config } => {
                let table = ablation_sweep(*axis, values, config)?;
                std::fs::write(out.join("sweep.csv"), table.to_csv())?;
                write_json(&out.join("sweep.json"), &table)?;
                Ok(None)
            }
        }
    }
}
