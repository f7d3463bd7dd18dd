//! Expert rollouts and dataset collection: only successful episodes are
//! kept; the manifest is written last so a complete manifest implies a
//! complete dataset.

use std::fs;
use std::path::{Path, PathBuf};

use crate::episode::{default_dims, write_episode, Episode};
use crate::expert::expert_action;
use crate::obs::observe;
use crate::world::{Action, SimConfig, SimError, World};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub success: bool,
    pub length: usize,
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Roll the scripted expert from a fresh world; records (obs, action, phase)
/// triples with the observation and phase taken before each action.
pub fn rollout_expert(cfg: &SimConfig, seed: u64, task: &str) -> Result<Episode, SimError> {
    let mut world = World::reset(cfg.clone(), seed, task)?;
    let dims = default_dims(cfg.k_pts, cfg.h_img, cfg.w_img);
    let mut ep = Episode {
        dims,
        seed,
        success: false,
        observations: Vec::new(),
        actions: Vec::new(),
        phases: Vec::new(),
    };
    while !world.terminal {
        let obs = observe(cfg, &world.state);
        let phase = world.state.phase;
        let ex = expert_action(cfg, &world.state);
        let mut row = Vec::with_capacity(5);
        row.extend(ex.action.base.iter().map(|&v| v as f32));
        row.extend(ex.action.arm.iter().map(|&v| v as f32));
        ep.observations.push(obs);
        ep.actions.push(row);
        ep.phases.push(phase);
        let info = world.step(&ex.action)?;
        if info.terminal {
            ep.success = info.success;
            break;
        }
    }
    Ok(ep)
}

/// Roll an arbitrary single-step policy (used by eval); the closure sees the
/// current observation history index and returns the action to apply.
pub fn apply_action(world: &mut World, base: &[f32], arm: &[f32]) -> Result<crate::world::StepInfo, SimError> {
    let action = Action {
        base: [base[0] as f64, base[1] as f64],
        arm: [arm[0] as f64, arm[1] as f64, arm[2] as f64],
    };
    world.step(&action)
}

pub fn collect_dataset(
    cfg: &SimConfig,
    task: &str,
    n_episodes: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>, SimError> {
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(n_episodes);
    let mut attempts = 0usize;
    let mut successes = 0usize;
    while entries.len() < n_episodes {
        let ep_seed = seed.wrapping_add(attempts as u64);
        attempts += 1;
        let ep = rollout_expert(cfg, ep_seed, task)?;
        if ep.success {
            successes += 1;
            let name = format!("ep{:05}.iep", entries.len());
            write_episode(&ep, &out_dir.join(&name))?;
            entries.push(ManifestEntry { path: name, success: true, length: ep.len() });
        }
        // diagnostic abort: a broken environment would loop forever otherwise
        if attempts >= 40 && (successes as f64) < 0.5 * attempts as f64 {
            return Err(SimError::ExpertFailing {
                rate: successes as f64 / attempts as f64,
                attempts,
            });
        }
    }
    write_manifest(&entries, out_dir)?;
    Ok(entries)
}

pub fn write_manifest(entries: &[ManifestEntry], dir: &Path) -> Result<(), SimError> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!("{}\t{}\t{}\n", e.path, e.success, e.length));
    }
    fs::write(dir.join(MANIFEST_NAME), text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, SimError> {
    let text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split('\t');
        let bad = || {
            SimError::Format(incom_core::io::FormatError::Corrupt(format!(
                "manifest line {i}: '{line}'"
            )))
        };
        let path = parts.next().ok_or_else(bad)?.to_string();
        let success: bool = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let length: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        out.push(ManifestEntry { path, success, length });
    }
    Ok(out)
}

pub fn episode_paths(dir: &Path, entries: &[ManifestEntry]) -> Vec<PathBuf> {
    entries.iter().map(|e| dir.join(&e.path)).collect()
}
