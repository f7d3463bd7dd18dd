//! Model hyperparameters. `desk` is the default CPU-scale profile; `paper`
//! matches the published table where sizes are stated.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivitySource {
    /// actions are joint/velocity increments already; use them directly
    Actions,
    /// use successive differences of stored actions
    Differences,
}

#[derive(Clone, Debug)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub heads: usize,
    pub views: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub patch_sizes: [usize; 3],
    pub trunk_widths: [usize; 3],
    pub k_pts: usize,
    pub point_pool_factor: usize,
    pub point_mlp_width: usize,
    pub n_freq: usize,
    pub h_hist: usize,
    pub t_p: usize,
    pub t_exec: usize,
    pub d_base: usize,
    pub d_arm: usize,
    pub proprio_dim: usize,
    /// divisors applied to raw proprio entries before embedding
    pub proprio_scale: Vec<f64>,
    /// divisor applied to point coordinates (world scale)
    pub coord_scale: f64,
    /// per-channel divisors normalizing raw actions to [-1, 1]
    pub action_scale: Vec<f64>,
    pub alpha: f64,
    pub target_eps: f64,
    pub lambda_ent: f64,
    pub sinkhorn_eps: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub agg_tokens: usize,
    pub decoder_layers: usize,
    pub hist_blocks: usize,
    pub flow_steps: usize,
    pub activity_source: ActivitySource,
    pub f_refine_relu: bool,
}

impl PolicyConfig {
    pub fn desk() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            views: 2,
            img_h: 32,
            img_w: 32,
            patch_sizes: [4, 8, 16],
            trunk_widths: [16, 32, 64],
            k_pts: 64,
            point_pool_factor: 4,
            point_mlp_width: 32,
            n_freq: 8,
            h_hist: 8,
            t_p: 8,
            t_exec: 4,
            d_base: 2,
            d_arm: 3,
            proprio_dim: 8,
            proprio_scale: vec![
                5.0,
                5.0,
                std::f64::consts::PI,
                std::f64::consts::PI,
                std::f64::consts::PI,
                1.0,
                5.0,
                5.0,
            ],
            coord_scale: 5.0,
            action_scale: vec![0.5, 1.0, 2.0, 2.0, 1.0],
            alpha: 1.0,
            target_eps: 1e-3,
            lambda_ent: 0.1,
            sinkhorn_eps: 0.05,
            sinkhorn_iters: 50,
            sinkhorn_tol: 1e-6,
            agg_tokens: 8,
            decoder_layers: 3,
            hist_blocks: 2,
            flow_steps: 10,
            activity_source: ActivitySource::Actions,
            f_refine_relu: false,
        }
    }

    pub fn paper() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            img_h: 64,
            img_w: 64,
            trunk_widths: [32, 64, 128],
            k_pts: 256,
            ..Self::desk()
        }
    }

    /// per-view patch grid side at level k
    pub fn grid(&self, k: usize) -> usize {
        assert_eq!(self.img_h, self.img_w, "square images assumed");
        self.img_h / self.patch_sizes[k]
    }

    /// 2D token count at level k across views
    pub fn m_tokens(&self, k: usize) -> usize {
        self.views * self.grid(k) * self.grid(k)
    }

    /// 3D token count at level k
    pub fn n_tokens(&self, k: usize) -> usize {
        self.k_pts / self.point_pool_factor.pow(k as u32)
    }

    pub fn action_dim(&self) -> usize {
        self.d_base + self.d_arm
    }

    /// condition length: aggregated perception + proprio + history
    pub fn cond_tokens(&self) -> usize {
        3 * self.agg_tokens + 1 + self.h_hist
    }
}
