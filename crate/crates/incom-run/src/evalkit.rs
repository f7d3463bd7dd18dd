use std::fs;
use std::path::{Path, PathBuf};

use incom_core::nn::Params;
use incom_core::rng::{seeded, stream, uniform_vec};
use incom_policy::model::ObsInput;
use incom_policy::{InComModel, PolicyConfig};
use incom_sim::dataset::apply_action;
use incom_sim::expert::expert_action;
use incom_sim::obs::observe;
use incom_sim::world::{Phase, SimConfig, World};

use crate::data::denormalize_action;
use crate::figures;
use crate::RunError;

const N_PHASES: usize = 5;

/// What drives the episode: the trained policy, the scripted expert wrapped
/// as a policy (oracle ceiling), or uniform noise (floor).
pub enum Actor<'a> {
    Model { model: &'a InComModel, params: &'a Params<f32> },
    Expert,
    Random,
}

#[derive(Clone, Copy, Debug)]
pub struct TraceRow {
    pub episode: usize,
    pub seed: u64,
    pub step: usize,
    pub phase: Phase,
    pub w: Option<[f32; 3]>,
}

#[derive(Clone, Debug)]
pub struct RolloutReport {
    pub n_episodes: usize,
    pub success_rate: f64,
    pub mean_episode_length: f64,
    pub collision_rate: f64,
    /// (phase name, rows observed, mean scale weights) for phases that logged weights
    pub phase_weights: Vec<(String, usize, [f64; 3])>,
    pub seed: u64,
}

pub struct EvalLog {
    pub report: RolloutReport,
    pub rows: Vec<TraceRow>,
    /// (seed, success, length, collided) per episode, sorted by seed
    pub episodes: Vec<(u64, bool, usize, bool)>,
}

struct EpisodeOutcome {
    seed: u64,
    success: bool,
    length: usize,
    collided: bool,
    rows: Vec<TraceRow>,
}

fn run_episode(
    actor: &Actor,
    sim: &SimConfig,
    cfg: &PolicyConfig,
    task: &str,
    episode: usize,
    ep_seed: u64,
) -> Result<EpisodeOutcome, RunError> {
    let mut world = World::reset(sim.clone(), ep_seed, task)?;
    let mut rng = seeded(ep_seed, stream::EVAL);
    let mut hist: Vec<Vec<f32>> = Vec::new();
    let mut rows = Vec::new();
    let mut collided = false;

    'episode: while !world.terminal {
        match actor {
            Actor::Expert => {
                let phase = world.state.phase;
                rows.push(TraceRow { episode, seed: ep_seed, step: world.steps, phase, w: None });
                let ex = expert_action(sim, &world.state);
                let info = world.step(&ex.action)?;
                collided |= info.collided;
            }
            Actor::Model { .. } | Actor::Random => {
                let (chunk, w) = plan_chunk(actor, sim, cfg, &world, &hist, &mut rng)?;
                for row in chunk.iter().take(cfg.t_exec) {
                    let phase = world.state.phase;
                    rows.push(TraceRow { episode, seed: ep_seed, step: world.steps, phase, w });
                    let raw = denormalize_action(row, &cfg.action_scale);
                    let info = apply_action(&mut world, &raw[..cfg.d_base], &raw[cfg.d_base..])?;
                    collided |= info.collided;
                    hist.push(row.clone());
                    if hist.len() > cfg.h_hist {
                        hist.remove(0);
                    }
                    if info.terminal {
                        break 'episode;
                    }
                }
            }
        }
    }

    Ok(EpisodeOutcome {
        seed: ep_seed,
        success: world.success,
        length: world.steps,
        collided,
        rows,
    })
}

/// One receding-horizon replan: a normalized T_p-row chunk plus the scale
/// weights that produced it.
fn plan_chunk(
    actor: &Actor,
    sim: &SimConfig,
    cfg: &PolicyConfig,
    world: &World,
    hist: &[Vec<f32>],
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(Vec<Vec<f32>>, Option<[f32; 3]>), RunError> {
    let action_dim = cfg.d_base + cfg.d_arm;
    match actor {
        Actor::Model { model, params } => {
            let obs = observe(sim, &world.state);
            let valid_hist = hist.len().min(cfg.h_hist);
            let mut history = vec![0.0f32; cfg.h_hist * action_dim];
            for (i, row) in hist.iter().rev().take(valid_hist).enumerate() {
                let dst = (cfg.h_hist - 1 - i) * action_dim;
                history[dst..dst + action_dim].copy_from_slice(row);
            }
            let obs_in = ObsInput {
                images: obs.images,
                points: obs.points,
                proprio: obs.proprio,
                history,
                valid_hist,
            };
            let out = model.forward_eval(params, &obs_in, rng, false)?;
            Ok((out.chunk, out.w))
        }
        Actor::Random => {
            let chunk = (0..cfg.t_p)
                .map(|_| {
                    uniform_vec(rng, action_dim, -1.0, 1.0).into_iter().map(|v| v as f32).collect()
                })
                .collect();
            Ok((chunk, None))
        }
        Actor::Expert => unreachable!("expert path steps the world directly"),
    }
}

/// Seeded closed-loop evaluation over `n_episodes` disjoint episode seeds.
pub fn rollout(
    actor: &Actor,
    sim: &SimConfig,
    cfg: &PolicyConfig,
    task: &str,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalLog, RunError> {
    assert!(n_episodes > 0, "need at least one episode");
    let mut outcomes = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        outcomes.push(run_episode(actor, sim, cfg, task, i, seed.wrapping_add(i as u64))?);
    }
    // disjoint seeds; reduce in seed order so aggregation is order-independent
    outcomes.sort_by_key(|o| o.seed);

    let n = outcomes.len();
    let successes = outcomes.iter().filter(|o| o.success).count();
    let collisions = outcomes.iter().filter(|o| o.collided).count();
    let total_len: usize = outcomes.iter().map(|o| o.length).sum();

    let mut sums = [[0f64; 3]; N_PHASES];
    let mut counts = [0usize; N_PHASES];
    let mut rows = Vec::new();
    let mut episodes = Vec::with_capacity(n);
    for o in &outcomes {
        episodes.push((o.seed, o.success, o.length, o.collided));
        for r in &o.rows {
            if let Some(w) = r.w {
                let p = r.phase.index();
                counts[p] += 1;
                for k in 0..3 {
                    sums[p][k] += w[k] as f64;
                }
            }
        }
        rows.extend(o.rows.iter().copied());
    }
    let phase_weights = (0..N_PHASES)
        .filter(|&p| counts[p] > 0)
        .map(|p| {
            let w = [
                sums[p][0] / counts[p] as f64,
                sums[p][1] / counts[p] as f64,
                sums[p][2] / counts[p] as f64,
            ];
            (Phase::from_index(p).unwrap().name().to_string(), counts[p], w)
        })
        .collect();

    Ok(EvalLog {
        report: RolloutReport {
            n_episodes: n,
            success_rate: successes as f64 / n as f64,
            mean_episode_length: total_len as f64 / n as f64,
            collision_rate: collisions as f64 / n as f64,
            phase_weights,
            seed,
        },
        rows,
        episodes,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct TraceSummary {
    pub navigate_w_d: Option<f64>,
    pub grasp_w_d: Option<f64>,
    /// mean w_D(NAVIGATE) − mean w_D(GRASP); None if either phase logged nothing
    pub w_d_gap: Option<f64>,
}

/// Per-episode weight-trace CSVs and figures, plus the aggregate
/// navigate-vs-grasp deep-weight gap.
pub fn scale_weight_trace(log: &EvalLog, out_dir: &Path) -> Result<TraceSummary, RunError> {
    fs::create_dir_all(out_dir)?;
    let mut by_episode: Vec<Vec<&TraceRow>> = Vec::new();
    for r in &log.rows {
        if r.w.is_none() {
            continue;
        }
        if r.episode >= by_episode.len() {
            by_episode.resize_with(r.episode + 1, Vec::new);
        }
        by_episode[r.episode].push(r);
    }
    for (i, rows) in by_episode.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let mut csv = String::from("step,phase,w_S,w_M,w_D\n");
        for r in rows {
            let w = r.w.unwrap();
            csv.push_str(&format!("{},{},{},{},{}\n", r.step, r.phase.name(), w[0], w[1], w[2]));
        }
        fs::write(out_dir.join(format!("trace-ep{i:03}.csv")), csv)?;
        let series: Vec<(usize, [f32; 3])> = rows.iter().map(|r| (r.step, r.w.unwrap())).collect();
        fs::write(
            out_dir.join(format!("trace-ep{i:03}.svg")),
            figures::weight_trace_svg(&series, &format!("episode {i}")),
        )?;
    }

    let phase_mean = |phase: Phase| {
        let vals: Vec<f64> = log
            .rows
            .iter()
            .filter(|r| r.phase == phase)
            .filter_map(|r| r.w.map(|w| w[2] as f64))
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let navigate_w_d = phase_mean(Phase::Navigate);
    let grasp_w_d = phase_mean(Phase::Grasp);
    let w_d_gap = match (navigate_w_d, grasp_w_d) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    Ok(TraceSummary { navigate_w_d, grasp_w_d, w_d_gap })
}

/// Write the rollout report as a small key,value CSV.
pub fn write_report(report: &RolloutReport, path: &Path) -> Result<(), RunError> {
    let mut text = String::from("key,value\n");
    text.push_str(&format!("n_episodes,{}\n", report.n_episodes));
    text.push_str(&format!("success_rate,{}\n", report.success_rate));
    text.push_str(&format!("mean_episode_length,{}\n", report.mean_episode_length));
    text.push_str(&format!("collision_rate,{}\n", report.collision_rate));
    text.push_str(&format!("seed,{}\n", report.seed));
    for (phase, n, w) in &report.phase_weights {
        text.push_str(&format!("w[{phase}]({n} rows),{} {} {}\n", w[0], w[1], w[2]));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Wilson 95% score interval on a success count.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.96f64;
    let (s, nf) = (successes as f64, n as f64);
    let p = s / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = (z / denom) * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

pub fn checkpoint_path_or_missing(path: &Path) -> Result<PathBuf, RunError> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(RunError::MissingArtifact(format!("checkpoint {}", path.display())))
    }
}
