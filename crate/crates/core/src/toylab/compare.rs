use serde::Serialize;

use super::train::{build_model, evaluate_model, train, EpochLog, TrainConfig};
use super::world::{generate_world, ToyWorld, ToyWorldConfig};
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::metrics::Report;

/// Outcome of training and evaluating one variant on one seed.
#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub variant: &'static str,
    pub seed: u64,
    pub global_map: f64,
    pub rank1: f64,
    pub weakest_q_camera: u32,
    pub weakest_q_map: f64,
    pub weakest_g_map: f64,
    pub average_q_map: f64,
    pub average_g_map: f64,
    pub probe_acc: f64,
    #[serde(skip)]
    pub log: Vec<EpochLog>,
    #[serde(skip)]
    pub report: Report,
}

/// Trains a fresh model for `config` on `world` and evaluates it.
pub fn run_variant(world: &ToyWorld, config: &TrainConfig, seed: u64) -> Result<RunResult> {
    let mut model = build_model(world, config, seed)?;
    let log = train(&mut model, world, config, seed)?;
    let report = evaluate_model(&model, world, config.variant_name(), config.exec)?;
    let probe_acc = match log.last() {
        Some(e) => e.probe_acc,
        None => super::train::probe_accuracy(&model, world, config)?,
    };
    let global = report.global.ok_or_else(|| Error::Empty("no global scores".into()))?;
    Ok(RunResult {
        variant: config.variant_name(),
        seed,
        global_map: global.map,
        rank1: global.rank1,
        weakest_q_camera: report.weakest.q_map.camera,
        weakest_q_map: report.weakest.q_map.value,
        weakest_g_map: report.weakest.g_map.value,
        average_q_map: report.average.q_map,
        average_g_map: report.average.g_map,
        probe_acc,
        log,
        report,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub baseline: Vec<RunResult>,
    pub apra: Vec<RunResult>,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const COMPARISON_HEADER: &str = "variant,seeds,weakest_q_map,weakest_q_map_std,weakest_g_map,weakest_g_map_std,\
average_q_map,average_q_map_std,average_g_map,average_g_map_std,global_map,global_map_std,probe_acc,probe_acc_std";

pub const PER_SEED_HEADER: &str =
    "variant,seed,weakest_q_camera,weakest_q_map,weakest_g_map,average_q_map,average_g_map,global_map,rank1,probe_acc";

impl Comparison {
    fn pairs(&self) -> impl Iterator<Item = (&RunResult, &RunResult)> {
        self.baseline.iter().zip(&self.apra)
    }

    /// Seeds where the attention variant's weakest-camera query-mAP is strictly higher.
    pub fn weakest_q_wins(&self) -> usize {
        self.pairs().filter(|(b, a)| a.weakest_q_map > b.weakest_q_map).count()
    }

    /// Seeds where the attention variant's camera-probe accuracy is strictly lower.
    pub fn probe_wins(&self) -> usize {
        self.pairs().filter(|(b, a)| a.probe_acc < b.probe_acc).count()
    }

    pub fn seeds(&self) -> usize {
        self.baseline.len()
    }

    /// Means and standard deviations over seeds; mAP columns in percent.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{COMPARISON_HEADER}\n");
        for runs in [&self.baseline, &self.apra] {
            let Some(first) = runs.first() else { continue };
            let col = |f: fn(&RunResult) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
            let pct = |(m, s): (f64, f64)| format!("{:.2},{:.2}", 100.0 * m, 100.0 * s);
            let (pm, ps) = col(|r| r.probe_acc);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{:.4},{:.4}\n",
                first.variant,
                runs.len(),
                pct(col(|r| r.weakest_q_map)),
                pct(col(|r| r.weakest_g_map)),
                pct(col(|r| r.average_q_map)),
                pct(col(|r| r.average_g_map)),
                pct(col(|r| r.global_map)),
                pm,
                ps
            ));
        }
        out
    }

    pub fn per_seed_csv(&self) -> String {
        let mut out = format!("{PER_SEED_HEADER}\n");
        for r in self.baseline.iter().chain(&self.apra) {
            out.push_str(&format!(
                "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                r.variant,
                r.seed,
                r.weakest_q_camera,
                r.weakest_q_map,
                r.weakest_g_map,
                r.average_q_map,
                r.average_g_map,
                r.global_map,
                r.rank1,
                r.probe_acc
            ));
        }
        out
    }
}

/// Trains baseline and attention variants on the same world, initial shared
/// weights and batch order for every seed. `config.apra` is ignored.
pub fn compare_variants(world: &ToyWorldConfig, config: &TrainConfig, seeds: &[u64]) -> Result<Comparison> {
    if seeds.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 seeds, got {}", seeds.len())));
    }
    let variant = |apra: bool| TrainConfig {
        apra,
        ..config.clone()
    };
    let (base_cfg, apra_cfg) = (variant(false), variant(true));
    let runs = map_indexed(config.exec, seeds.len(), |i| -> Result<(RunResult, RunResult)> {
        let w = generate_world(world, seeds[i])?;
        Ok((run_variant(&w, &base_cfg, seeds[i])?, run_variant(&w, &apra_cfg, seeds[i])?))
    });
    let mut cmp = Comparison {
        baseline: Vec::new(),
        apra: Vec::new(),
    };
    for r in runs {
        let (b, a) = r?;
        cmp.baseline.push(b);
        cmp.apra.push(a);
    }
    Ok(cmp)
}
