use std::fs;
use std::path::Path;

use incom_core::nn::Params;
use incom_policy::{InComModel, PolicyConfig, Variant};
use incom_sim::world::SimConfig;

use crate::checkpoint;
use crate::data::DataSet;
use crate::evalkit::{rollout, wilson_interval, Actor};
use crate::figures;
use crate::trainer::{train, TrainOpts};
use crate::RunError;

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub success_rate: f64,
    /// full-model rate minus this variant's rate (Table-6 style "↓" delta)
    pub delta_vs_full: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_episodes: usize,
}

pub struct AblationOpts {
    pub variants: Vec<Variant>,
    pub train: TrainOpts,
    pub n_eval: usize,
    pub eval_seed: u64,
    pub task: String,
}

pub const ABLATION_HEADER: &str =
    "variant,success_rate,delta_vs_full,ci_low,ci_high,n_episodes";

/// Train and evaluate every requested variant under identical seeds and
/// budget; the full model is always included (first row) as the reference.
pub fn ablation_run(
    cfg: &PolicyConfig,
    sim: &SimConfig,
    data: &DataSet,
    opts: &AblationOpts,
    out_dir: &Path,
) -> Result<Vec<AblationRow>, RunError> {
    fs::create_dir_all(out_dir)?;
    let mut order = vec![Variant::Full];
    for &v in &opts.variants {
        if !order.contains(&v) {
            order.push(v);
        }
    }

    let mut rates = Vec::new();
    for &variant in &order {
        let var_dir = out_dir.join(variant.name());
        let mut topts = opts.train.clone();
        topts.variant = variant;
        let report = train(cfg, data, &topts, &var_dir)?;

        let ck = checkpoint::load(&report.checkpoint_path)?;
        let mut params: Params<f32> = ck.seed_params();
        let model = InComModel::build(&mut params, cfg, variant, &topts.topology, topts.seed)?;
        let log = rollout(
            &Actor::Model { model: &model, params: &params },
            sim,
            cfg,
            &opts.task,
            opts.n_eval,
            opts.eval_seed,
        )?;
        // per-variant weight logs: the wo-weights row is checkable against
        // its constant (1/3, 1/3, 1/3) contract from these CSVs
        crate::evalkit::scale_weight_trace(&log, &var_dir.join("trace"))?;
        let successes = log.episodes.iter().filter(|(_, ok, _, _)| *ok).count();
        rates.push((variant, log.report.success_rate, successes));
    }

    let full_rate = rates[0].1;
    let rows: Vec<AblationRow> = rates
        .iter()
        .map(|&(variant, rate, successes)| {
            let (lo, hi) = wilson_interval(successes, opts.n_eval);
            AblationRow {
                variant: variant.name().to_string(),
                success_rate: rate,
                delta_vs_full: full_rate - rate,
                ci_low: lo,
                ci_high: hi,
                n_episodes: opts.n_eval,
            }
        })
        .collect();

    let mut csv = String::from(ABLATION_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant, r.success_rate, r.delta_vs_full, r.ci_low, r.ci_high, r.n_episodes
        ));
    }
    fs::write(out_dir.join("ablation.csv"), csv)?;

    let bars: Vec<(String, f64, f64, f64)> = rows
        .iter()
        .map(|r| (r.variant.clone(), r.success_rate, r.ci_low, r.ci_high))
        .collect();
    fs::write(
        out_dir.join("ablation.svg"),
        figures::ablation_bars_svg(&bars, "ablation success rates"),
    )?;
    Ok(rows)
}

pub fn parse_ablation_csv(text: &str) -> Vec<AblationRow> {
    text.lines()
        .skip(1)
        .filter_map(|line| {
            let mut it = line.split(',');
            let variant = it.next()?.to_string();
            let mut f = || it.next().and_then(|v| v.parse::<f64>().ok());
            Some(AblationRow {
                variant,
                success_rate: f()?,
                delta_vs_full: f()?,
                ci_low: f()?,
                ci_high: f()?,
                n_episodes: it.next().and_then(|v| v.parse().ok())?,
            })
        })
        .collect()
}
