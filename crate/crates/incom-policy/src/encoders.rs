//! Perception encoders. The image trunk is a three-stage sequential-merge
//! transformer (windowed attention, 2x2 token merge between stages); every
//! stage is projected to the shared model width so downstream fusion sees a
//! three-level pyramid per modality. The point encoder is a per-point MLP with
//! farthest-point-prefix centroid pooling.

use incom_core::nn::{EncoderBlock, Linear, ParamId, Params, Session};
use incom_core::tensor::Tensor;
use incom_core::{NodeId, Scalar};
use rand::Rng;

use crate::config::PolicyConfig;
use crate::feat;

pub const LEVELS: usize = 3;

pub struct ImagePyramid {
    /// content features per level, (B, M_k, D)
    pub f2d: [NodeId; LEVELS],
    /// positional stream per level (sinusoidal + view embedding), (M_k, D)
    pub p2d: [NodeId; LEVELS],
    /// scene summary token from the deepest stage, (B, 1, D)
    pub v_global: NodeId,
    /// per-stage self-attention maps, (B*heads, M_k, M_k)
    pub attn: [NodeId; LEVELS],
}

pub struct ImageEncoder {
    patch_embed: Linear,
    pos0: ParamId,
    stages: [EncoderBlock; LEVELS],
    merges: [Linear; 2],
    projs: [Linear; LEVELS],
    global: Linear,
    pos_proj: Linear,
    e_view: ParamId,
    coords: [Vec<(usize, usize, usize)>; LEVELS],
    views: usize,
    channels: usize,
    img_h: usize,
    img_w: usize,
    patch0: usize,
    widths: [usize; LEVELS],
    n_freq: usize,
    d_model: usize,
}

impl ImageEncoder {
    pub fn new<S: Scalar>(
        params: &mut Params<S>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &PolicyConfig,
    ) -> Self {
        for k in 0..2 {
            assert_eq!(
                cfg.patch_sizes[k + 1],
                2 * cfg.patch_sizes[k],
                "patch sizes must double per level so merges pair up"
            );
        }
        let channels = 3;
        let (w, d) = (cfg.trunk_widths, cfg.d_model);
        let g0 = cfg.grid(0);
        let coords = [
            feat::morton_coords(g0, cfg.views),
            feat::morton_coords(g0 / 2, cfg.views),
            feat::morton_coords(g0 / 4, cfg.views),
        ];
        let patch_embed = Linear::new(
            params,
            rng,
            &format!("{name}.patch"),
            channels * cfg.patch_sizes[0] * cfg.patch_sizes[0],
            w[0],
            true,
        );
        // trunk positions are per-view so identical views embed identically;
        // view identity lives only in the positional stream's e_view
        let pos0 = params.get_or_init(&format!("{name}.pos0"), &[g0 * g0, w[0]], || {
            let lim = (1.0 / w[0] as f64).sqrt();
            let data = (0..g0 * g0 * w[0])
                .map(|_| S::from_f64(rng.random_range(-lim..lim)))
                .collect();
            Tensor::new(vec![g0 * g0, w[0]], data)
        });
        let stages = [
            EncoderBlock::new(params, rng, &format!("{name}.s1"), w[0], cfg.heads),
            EncoderBlock::new(params, rng, &format!("{name}.s2"), w[1], cfg.heads),
            EncoderBlock::new(params, rng, &format!("{name}.s3"), w[2], cfg.heads),
        ];
        let merges = [
            Linear::new(params, rng, &format!("{name}.m1"), 4 * w[0], w[1], true),
            Linear::new(params, rng, &format!("{name}.m2"), 4 * w[1], w[2], true),
        ];
        let projs = [
            Linear::new(params, rng, &format!("{name}.proj1"), w[0], d, true),
            Linear::new(params, rng, &format!("{name}.proj2"), w[1], d, true),
            Linear::new(params, rng, &format!("{name}.proj3"), w[2], d, true),
        ];
        let global = Linear::new(params, rng, &format!("{name}.global"), w[2], d, true);
        let pos_proj = Linear::new(
            params,
            rng,
            &format!("{name}.pos"),
            feat::sin_feature_dim(2, cfg.n_freq),
            d,
            false,
        );
        let e_view = params.get_or_init(&format!("{name}.view"), &[cfg.views, d], || {
            let lim = (1.0 / d as f64).sqrt();
            let data = (0..cfg.views * d)
                .map(|_| S::from_f64(rng.random_range(-lim..lim)))
                .collect();
            Tensor::new(vec![cfg.views, d], data)
        });
        Self {
            patch_embed,
            pos0,
            stages,
            merges,
            projs,
            global,
            pos_proj,
            e_view,
            coords,
            views: cfg.views,
            channels,
            img_h: cfg.img_h,
            img_w: cfg.img_w,
            patch0: cfg.patch_sizes[0],
            widths: w,
            n_freq: cfg.n_freq,
            d_model: d,
        }
    }

    pub fn token_coords(&self, level: usize) -> &[(usize, usize, usize)] {
        &self.coords[level]
    }

    pub fn grid(&self, level: usize) -> usize {
        self.img_h / (self.patch0 << level)
    }

    /// `images[b]` is one sample's raw stack (views * C * H * W, f32).
    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, images: &[&[f32]]) -> ImagePyramid {
        let b = images.len();
        assert!(b > 0);
        let patches: Vec<Tensor<S>> = images
            .iter()
            .map(|im| {
                feat::patchify(
                    im,
                    self.views,
                    self.channels,
                    self.img_h,
                    self.img_w,
                    self.patch0,
                    &self.coords[0],
                )
            })
            .collect();
        let x = s.tape.constant(feat::stack(&patches));
        let mut x = self.patch_embed.forward(s, x);
        let pos0 = s.p(self.pos0);
        let pos_all = s.tape.concat(&vec![pos0; self.views], 0);
        x = s.tape.add_tokens(x, pos_all);

        let mut f2d = [NodeId(0); LEVELS];
        let mut p2d = [NodeId(0); LEVELS];
        let mut attn = [NodeId(0); LEVELS];
        let windows = [5usize, 3, 0]; // 0 = full per-view attention
        for k in 0..LEVELS {
            let grid = self.grid(k);
            let mask: Tensor<S> = if windows[k] == 0 {
                feat::per_view_mask(grid * grid, self.views)
            } else {
                feat::neighbor_mask(&self.coords[k], windows[k])
            };
            let (y, probs) = self.stages[k].forward(s, x, Some(mask));
            attn[k] = probs;
            f2d[k] = self.projs[k].forward(s, y);
            p2d[k] = self.pos_tokens(s, k);
            if k + 1 < LEVELS {
                let t = self.views * grid * grid;
                let merged = s.tape.reshape(y, vec![b, t / 4, 4 * self.widths[k]]);
                x = self.merges[k].forward(s, merged);
            } else {
                let pooled = s.tape.mean_axis1(y);
                let v_global = self.global.forward(s, pooled);
                return ImagePyramid { f2d, p2d, v_global, attn };
            }
        }
        unreachable!()
    }

    /// P_2D^k = projected sinusoidal patch centers + per-view embedding.
    fn pos_tokens<S: Scalar>(&self, s: &mut Session<S>, k: usize) -> NodeId {
        let grid = self.grid(k);
        let coords = &self.coords[k];
        let sin = feat::sin_features::<S>(&feat::centers(coords, grid), self.n_freq, 1.0);
        let sin = s.tape.constant(sin);
        let sin = self.pos_proj.forward(s, sin);
        let t = coords.len();
        let mut expand = Tensor::zeros(vec![t, self.views]);
        for (i, &(v, _, _)) in coords.iter().enumerate() {
            expand.data_mut()[i * self.views + v] = S::one();
        }
        let expand = s.tape.constant(expand);
        let ev = s.p(self.e_view);
        let view_part = s.tape.matmul(expand, ev);
        s.tape.add(sin, view_part)
    }

    pub fn deep_width(&self) -> usize {
        self.widths[2]
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }
}

pub struct PointPyramid {
    /// content features per level, (B, N_k, D)
    pub f3d: [NodeId; LEVELS],
    /// positional stream per level, (B, N_k, D)
    pub p3d: [NodeId; LEVELS],
}

pub struct PointEncoder {
    l1: Linear,
    l2: Linear,
    pos_proj: Linear,
    k_pts: usize,
    point_dim: usize,
    pool_factor: usize,
    n_freq: usize,
    coord_scale: f64,
}

impl PointEncoder {
    pub fn new<S: Scalar>(
        params: &mut Params<S>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &PolicyConfig,
    ) -> Self {
        let point_dim = 5;
        Self {
            l1: Linear::new(params, rng, &format!("{name}.mlp1"), point_dim, cfg.point_mlp_width, true),
            l2: Linear::new(params, rng, &format!("{name}.mlp2"), cfg.point_mlp_width, cfg.d_model, true),
            pos_proj: Linear::new(
                params,
                rng,
                &format!("{name}.pos"),
                feat::sin_feature_dim(2, cfg.n_freq),
                cfg.d_model,
                false,
            ),
            k_pts: cfg.k_pts,
            point_dim,
            pool_factor: cfg.point_pool_factor,
            n_freq: cfg.n_freq,
            coord_scale: cfg.coord_scale,
        }
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.k_pts / self.pool_factor.pow(level as u32)
    }

    /// `points[b]` is one sample's cloud (K * 5, f32), farthest-point ordered,
    /// rows (x, y, onehot3).
    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, points: &[&[f32]]) -> PointPyramid {
        let b = points.len();
        assert!(b > 0);
        let (k, pd) = (self.k_pts, self.point_dim);
        for p in points {
            assert_eq!(p.len(), k * pd, "point cloud size mismatch");
        }

        // MLP input with coordinates brought to O(1) scale
        let mut data = Vec::with_capacity(b * k * pd);
        for p in points.iter() {
            for (i, &v) in p.iter().enumerate() {
                let v = v as f64;
                data.push(S::from_f64(if i % pd < 2 { v / self.coord_scale } else { v }));
            }
        }
        let x = s.tape.constant(Tensor::new(vec![b, k, pd], data));
        let h = self.l1.forward(s, x);
        let h = s.tape.relu(h);
        let f_s = self.l2.forward(s, h);

        let coords: Vec<Vec<[f64; 2]>> = points
            .iter()
            .map(|p| (0..k).map(|i| [p[i * pd] as f64, p[i * pd + 1] as f64]).collect())
            .collect();

        let mut f3d = [NodeId(0); LEVELS];
        let mut p3d = [NodeId(0); LEVELS];
        f3d[0] = f_s;
        for level in 1..LEVELS {
            let n_out = self.level_size(level);
            let pools: Vec<Tensor<S>> =
                coords.iter().map(|c| feat::pool_matrix(c, n_out)).collect();
            let pool = s.tape.constant(feat::stack(&pools));
            f3d[level] = s.tape.matmul(pool, f_s);
        }
        for level in 0..LEVELS {
            let n_out = self.level_size(level);
            let sins: Vec<Tensor<S>> = coords
                .iter()
                .map(|c| {
                    let rows: Vec<Vec<f64>> =
                        c.iter().take(n_out).map(|p| vec![p[0], p[1]]).collect();
                    feat::sin_features(&rows, self.n_freq, self.coord_scale)
                })
                .collect();
            let sin = s.tape.constant(feat::stack(&sins));
            p3d[level] = self.pos_proj.forward(s, sin);
        }
        PointPyramid { f3d, p3d }
    }
}
