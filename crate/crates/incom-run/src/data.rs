use std::path::Path;

use incom_policy::model::{ObsInput, Sample};
use incom_policy::PolicyConfig;
use incom_sim::dataset::{episode_paths, read_manifest};
use incom_sim::episode::{read_episode, Episode};

use crate::RunError;

/// Expert episodes plus a flat (episode, step) index over every timestep, so
/// the trainer can shuffle at sample granularity.
#[derive(Debug)]
pub struct DataSet {
    pub episodes: Vec<Episode>,
    pub index: Vec<(u32, u32)>,
}

pub fn normalize_action(raw: &[f32], scale: &[f64]) -> Vec<f32> {
    raw.iter()
        .zip(scale)
        .map(|(&v, &s)| (v as f64 / s).clamp(-1.0, 1.0) as f32)
        .collect()
}

pub fn denormalize_action(norm: &[f32], scale: &[f64]) -> Vec<f32> {
    norm.iter().zip(scale).map(|(&v, &s)| (v as f64 * s) as f32).collect()
}

impl DataSet {
    pub fn load(dir: &Path) -> Result<DataSet, RunError> {
        let entries = read_manifest(dir)?;
        if entries.is_empty() {
            return Err(RunError::MissingArtifact(format!(
                "dataset manifest at {} lists no episodes",
                dir.display()
            )));
        }
        let mut episodes = Vec::with_capacity(entries.len());
        for path in episode_paths(dir, &entries) {
            episodes.push(read_episode(&path)?);
        }
        let mut index = Vec::new();
        for (e, ep) in episodes.iter().enumerate() {
            for t in 0..ep.len() {
                index.push((e as u32, t as u32));
            }
        }
        Ok(DataSet { episodes, index })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Check the stored dims against the model config before training starts.
    pub fn check_shapes(&self, cfg: &PolicyConfig) -> Result<(), RunError> {
        let d = &self.episodes[0].dims;
        let action_dim = cfg.d_base + cfg.d_arm;
        if d.k_pts != cfg.k_pts
            || d.views != cfg.views
            || d.h_img != cfg.img_h
            || d.w_img != cfg.img_w
            || d.proprio != cfg.proprio_dim
            || d.d_base + d.d_arm != action_dim
        {
            return Err(RunError::Shape(format!(
                "dataset dims {:?} do not match the model config (k_pts {}, views {}, img {}x{}, proprio {}, action {})",
                d, cfg.k_pts, cfg.views, cfg.img_h, cfg.img_w, cfg.proprio_dim, action_dim
            )));
        }
        Ok(())
    }

    /// Assemble the training sample at (episode, t): observation, the H most
    /// recent executed actions (normalized, oldest first, front-padded), and
    /// the next T_p expert actions as the target chunk (the final row is
    /// repeated past the episode end).
    pub fn sample_at(&self, cfg: &PolicyConfig, ep: usize, t: usize) -> Sample {
        let episode = &self.episodes[ep];
        let action_dim = cfg.d_base + cfg.d_arm;
        let valid_hist = t.min(cfg.h_hist);
        let mut history = vec![0.0f32; cfg.h_hist * action_dim];
        for i in 0..valid_hist {
            let row = normalize_action(&episode.actions[t - valid_hist + i], &cfg.action_scale);
            let dst = (cfg.h_hist - valid_hist + i) * action_dim;
            history[dst..dst + action_dim].copy_from_slice(&row);
        }
        let mut chunk = Vec::with_capacity(cfg.t_p * action_dim);
        for k in 0..cfg.t_p {
            let src = (t + k).min(episode.len() - 1);
            chunk.extend(normalize_action(&episode.actions[src], &cfg.action_scale));
        }
        let obs = &episode.observations[t];
        Sample {
            obs: ObsInput {
                images: obs.images.clone(),
                points: obs.points.clone(),
                proprio: obs.proprio.clone(),
                history,
                valid_hist,
            },
            chunk,
        }
    }
}
